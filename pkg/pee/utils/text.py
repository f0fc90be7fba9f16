from typing import Dict, Iterable, List, Optional


def parse_bool(string: str) -> Optional[bool]:
    """Parse string into a boolean.

    :param string: Text to be parsed.
    :return: Boolean result of the conversion.

    Pass strings ``1``, ``true``, ``yes``, ``on`` for ``True``.

    Pass strings ``0``, ``false``, ``no``, ``off`` for ``False``.

    Other keywords return ``None``.
    """
    if string.strip().lower() in ("1", "true", "yes", "on"):
        return True
    if string.strip().lower() in ("0", "false", "no", "off"):
        return False
    return None


def parse_list(string: str, cast=float) -> List:
    """Parse comma separated values, e.g. ``25,10,5``.

    Empty string returns empty list.
    """
    stubs = [s.strip() for s in string.split(",")]
    return [cast(s) for s in stubs if s]


def format_list(values: Iterable) -> str:
    return ",".join(str(v) for v in values)


def create_table(
    iterable: Iterable, header: Dict[str, str], *, rich: bool = True
) -> str:
    """Create table from any iterable.

    This is used to print stats and run comparisons to the terminal.

    Args:
        iterable: Any iterable of items (or mappings) to create the table from.
        header: Dictionary of item attributes and their labels.
        rich: Colour the header and every other row.
    """
    matrix: List[List[str]] = []

    # Compute column widths, make sure all fields have non-None values
    matrix.append(list(header.values()))
    column_widths: List[int] = [len(v) for v in header.values()]
    for item in iterable:
        line: List[str] = []
        for i, attr in enumerate(header.keys()):
            if isinstance(item, dict):
                value = item.get(attr, "")
            else:
                value = getattr(item, attr, "")
            line.append(str(value))

            item_width: int = len(line[i])
            if column_widths[i] < item_width:
                column_widths[i] = item_width

        matrix.append(line)

    H: str = ""
    A: str = ""
    R: str = ""
    if rich:
        H = "\u001b[1;34m"  # bold blue
        A = "\u001b[36m"  # cyan
        R = "\u001b[0m"  # reset

    page: str = ""
    for i, matrix_line in enumerate(matrix):
        line: str = ""

        # Color heading & odd lines
        if i == 0:
            line += H
        elif i % 2 == 0:
            line += A

        for column_no, column_width in enumerate(column_widths):
            line += matrix_line[column_no].ljust(column_width + 2)

        line = line.rstrip()
        if rich and i % 2 == 0:
            line += R
        page += line + "\n"

    return page
