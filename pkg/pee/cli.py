from __future__ import annotations

import argparse
import importlib
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple


def is_windows() -> bool:
    return os.name == "nt"


def is_tty() -> bool:
    return sys.stderr.isatty()


class _Color:
    red: str = ""
    green: str = ""
    blue: str = ""
    yellow: str = ""
    none: str = ""

    cursive: str = ""

    def __init__(self):
        if is_windows() or not is_tty() or os.getenv("NO_COLOR"):
            return

        self.red = "\033[0;31m"
        self.green = "\033[0;32m"
        self.blue = "\033[0;34m"
        self.yellow = "\033[0;33m"
        self.none = "\033[0m"
        self.cursive = "\033[3m"


COLOR = _Color()


# Command registration

Argument = Tuple[Tuple[str, ...], Dict]
Handler = Callable[[argparse.Namespace], int]


def argument(*flags: str, **kwargs) -> Argument:
    """Describe one ``argparse`` argument of a command."""
    return flags, kwargs


def command(*arguments: Argument, name: Optional[str] = None):
    """Mark a method of :class:`CommandGroup` as a CLI verb.

    The verb help text is the first line of the method docstring.
    """

    def decorator(function):
        function.__peel_command__ = (name or function.__name__, arguments)
        return function

    return decorator


class CommandGroup:
    """Base for classes that provide CLI verbs.

    Subclasses live in ``modules/<repository>/<module>/module.py`` and are
    registered by the module's ``setup()`` function.
    """

    def __init__(self, cli: CLI):
        self.cli = cli

    def commands(self) -> List[Tuple[str, Sequence[Argument], Handler]]:
        result = []
        for attribute in dir(self):
            function = getattr(self, attribute)
            metadata = getattr(function, "__peel_command__", None)
            if metadata is None:
                continue
            name, arguments = metadata
            result.append((name, arguments, function))
        return result


class CLI:
    """Argument parser of the ``peel`` program."""

    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="peel",
            description="Personalized elastic embedding pipeline.",
        )
        _add_global_flags(self.parser, suppress=False)
        self._subparsers = self.parser.add_subparsers(dest="verb", metavar="<verb>")
        self.groups: List[CommandGroup] = []
        self.verbs: Dict[str, Handler] = {}

    def add_group(self, group: CommandGroup) -> None:
        for name, arguments, handler in sorted(group.commands(), key=lambda c: c[0]):
            if name in self.verbs:
                raise ValueError(f"Verb '{name}' is registered twice.")
            doc = (handler.__doc__ or "").strip().splitlines()
            subparser = self._subparsers.add_parser(
                name,
                help=doc[0] if doc else None,
                description=" ".join(line.strip() for line in doc) or None,
            )
            _add_global_flags(subparser, suppress=True)
            for flags, kwargs in arguments:
                subparser.add_argument(*flags, **kwargs)
            subparser.set_defaults(handler=handler)
            self.verbs[name] = handler
        self.groups.append(group)

    def load_modules(self, directory: str = "modules") -> List[str]:
        """Import every module listed in repository ``__all__`` tuples."""
        loaded: List[str] = []
        root = Path(directory)
        if not root.is_dir():
            root = Path(__file__).resolve().parent.parent / directory
        for repository in sorted(d for d in root.iterdir() if d.is_dir()):
            if repository.name.startswith("_"):
                continue
            if not (repository / "__init__.py").is_file():
                continue
            package = importlib.import_module(f"{directory}.{repository.name}")
            for module_name in getattr(package, "__all__", ()):
                stub = f"{directory}.{repository.name}.{module_name}.module"
                module = importlib.import_module(stub)
                module.setup(self)
                loaded.append(f"{repository.name}.{module_name}")
        return loaded

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        if getattr(args, "handler", None) is None:
            self.parser.print_help(sys.stderr)
            return 1
        return int(args.handler(args) or 0)


def _add_global_flags(parser: argparse.ArgumentParser, *, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="random seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=argparse.SUPPRESS if suppress else 1,
        help="worker threads",
    )
    parser.add_argument("--config", default=default, help="pipeline config file")


def load_config(args: argparse.Namespace):
    """Pipeline config named by ``--config`` with ``--seed`` applied."""
    from pee.config import PipelineConfig

    path = getattr(args, "config", None)
    config = PipelineConfig.load(path) if path else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def print_error(exc: Exception) -> None:
    """Print the machine-readable error line."""
    print("error: " + json.dumps(exc.dump(), ensure_ascii=False), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    from pee import exceptions, logger

    cli = CLI()
    try:
        cli.load_modules()
        return cli.run(argv)
    except exceptions.PeelException as exc:
        logger.Pipeline.logger().error(
            getattr(exc, "stage", None), f"{type(exc).__name__}: {exc}"
        )
        print_error(exc)
        return 1
    except SystemExit as exc:
        # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else 1
    except KeyboardInterrupt:
        print("Interrupted.", file=sys.stderr)
        return 130
    except Exception:
        traceback.print_exc()
        return 2
