from __future__ import annotations

import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy

from pee.cli import COLOR, main
from pee.experiment.manifest import source_revision


def print_versions():
    python_version: str = "{0.major}.{0.minor}.{0.micro}".format(sys.version_info)
    python_release: str = f"{platform.machine()} {platform.version()}"
    revision: Optional[str] = source_revision()

    print("Starting with:", file=sys.stderr)
    print(
        f"- Python version {COLOR.green}{python_version}{COLOR.none}", file=sys.stderr
    )
    print(f"- Python release {python_release}", file=sys.stderr)
    print(f"- numpy {COLOR.green}{numpy.__version__}{COLOR.none}", file=sys.stderr)
    if revision is None:
        print(
            f"- revision {COLOR.yellow}none{COLOR.none}, not a git checkout",
            file=sys.stderr,
        )
    else:
        print(f"- revision {COLOR.green}{revision}{COLOR.none}", file=sys.stderr)


if os.getenv("PEEL_QUIET") is None:
    print_versions()


# Verb modules are imported as "modules.<repository>.<module>"
root_path = str(Path(__file__).resolve().parent)
if root_path not in sys.path:
    sys.path.insert(0, root_path)
del root_path


result = main(sys.argv[1:])
if result:
    print(f"Exit code: {result}", file=sys.stderr)
sys.exit(result)
