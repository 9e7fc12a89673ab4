"""Run manifests: a JSON record next to each artifact describing how it was made."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    cwd: str = field(default_factory=os.getcwd)
    artifacts: list[list[str]] = field(default_factory=list)  # [path, sha256] in creation order
    deterministic: bool = True
    version: str = __version__

    @staticmethod
    def path_for(artifact) -> Path:
        return Path(str(artifact) + ".manifest.json")

    def add(self, *paths):
        for p in paths:
            self.artifacts.append([str(p), sha256_file(p)])

    def write(self, artifact) -> Path:
        out = self.path_for(artifact)
        out.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return out

    @classmethod
    def load(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))
