"""Run manifests embedded in every artifact the pipeline writes."""
from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

from . import __version__


@lru_cache(maxsize=1)
def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    mode: str
    datasets: dict = field(default_factory=dict)
    checkpoint: str | None = None
    version: str = field(default_factory=version_string)
    command: str | None = None
    resumed_from: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def derive(self, **changes) -> "RunManifest":
        d = self.to_dict()
        d.update(changes)
        return RunManifest(**d)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")
