"""Run manifest: configuration, seeds and content hashes of all files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import git

from pee import logger
from pee.exceptions import FormatError

pipeline_log = logger.Pipeline.logger()

MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1


def blob_hash(path: Union[str, Path]) -> str:
    """Git-style blob hash of a file."""
    content = Path(path).read_bytes()
    digest = hashlib.sha1(f"blob {len(content)}\0".encode("ascii"))
    digest.update(content)
    return digest.hexdigest()


def tree_hash(directory: Union[str, Path]) -> str:
    """Hash over the relative names and blob hashes of every file."""
    directory = Path(directory)
    digest = hashlib.sha1()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        name = path.relative_to(directory).as_posix()
        digest.update(f"{name} {blob_hash(path)}\n".encode())
    return digest.hexdigest()


def source_revision() -> Optional[str]:
    """Commit of the checkout the code runs from, if any."""
    try:
        repo = git.Repo(Path(__file__).resolve().parent, search_parent_directories=True)
        return repo.head.commit.hexsha
    except (git.exc.InvalidGitRepositoryError, git.exc.NoSuchPathError, ValueError):
        return None


def write_manifest(
    directory: Union[str, Path],
    *,
    config: str,
    seeds: List[int],
    inputs: Iterable[Path] = (),
    artifacts: Iterable[Path] = (),
    extra: Optional[Dict] = None,
) -> Path:
    """Write ``manifest.json`` into ``directory``.

    Paths inside ``directory`` are recorded relative to it.
    """
    directory = Path(directory).resolve()

    def entries(paths: Iterable[Path]) -> Dict[str, str]:
        result: Dict[str, str] = {}
        for path in sorted({Path(p).resolve() for p in paths}):
            try:
                name = path.relative_to(directory).as_posix()
            except ValueError:
                name = str(path)
            result[name] = blob_hash(path)
        return result

    manifest = {
        "version": MANIFEST_VERSION,
        "revision": source_revision(),
        "seeds": list(seeds),
        "config": config,
        "inputs": entries(inputs),
        "artifacts": entries(artifacts),
    }
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST_FILE
    with path.open("w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def verify_manifest(path: Union[str, Path]) -> List[str]:
    """Check that every listed file exists and its hash matches.

    :return: Description of every problem; empty when the run is intact.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        with path.open("r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"Cannot read manifest '{path}': {exc}")

    problems: List[str] = []
    for section in ("inputs", "artifacts"):
        for name, expected in manifest.get(section, {}).items():
            file = Path(name)
            if not file.is_absolute():
                file = path.parent / file
            if not file.is_file():
                problems.append(f"{name}: missing")
                continue
            actual = blob_hash(file)
            if actual != expected:
                problems.append(f"{name}: hash {actual} does not match {expected}")
    if problems:
        pipeline_log.warning(
            "experiment", f"Manifest '{path}' has {len(problems)} problems."
        )
    return problems
