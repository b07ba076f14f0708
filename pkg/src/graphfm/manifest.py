"""Run manifests: what ran, with which resolved config, on which inputs."""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

MANIFEST_NAME = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def hash_path(path) -> str:
    """sha256 over a file, or over every file of a directory in sorted relative-path order."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if f.name == MANIFEST_NAME:
            continue
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode() + b"\0")
        with open(f, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    git: str = field(default_factory=git_describe)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"
    outputs: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)
        return path

    def finish(self, directory, status: str = "complete", outputs: Optional[dict] = None) -> Path:
        self.status = status
        self.finished = _now()
        if outputs:
            self.outputs.update(outputs)
        return self.write(directory)

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))

    def stale_inputs(self) -> list:
        """Inputs whose current hash differs from the recorded one."""
        return [p for p, digest in self.inputs.items() if not Path(p).exists() or hash_path(p) != digest]
