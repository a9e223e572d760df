"""On-disk checkpoints: one weights blob per network plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from functools import lru_cache
from pathlib import Path

import torch

NETWORKS = ("G_A", "G_B", "D_A", "D_B", "G_Geom")


class InvalidCheckpoint(ValueError):
    pass


@lru_cache(maxsize=1)
def code_version() -> str:
    """Short hash of the package sources."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _atomic_save(obj, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    directory: str | os.PathLike,
    networks: dict[str, torch.nn.Module],
    manifest: dict,
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    extra: dict | None = None,
) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, net in networks.items():
        _atomic_save(net.state_dict(), out / f"{name}.pt")
    if optimizers is not None or extra is not None:
        state = {"optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()}, **(extra or {})}
        _atomic_save(state, out / "train_state.pt")
    manifest = {**manifest, "networks": sorted(networks), "code_version": code_version()}
    fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, out / "manifest.json")
    return out


def read_manifest(directory: str | os.PathLike) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise InvalidCheckpoint(f"{directory} is not a checkpoint (no manifest.json)")
    return json.loads(path.read_text())


def load_network(directory: str | os.PathLike, name: str, net: torch.nn.Module) -> torch.nn.Module:
    path = Path(directory) / f"{name}.pt"
    if not path.exists():
        raise InvalidCheckpoint(f"checkpoint {directory} has no weights for {name}")
    try:
        net.load_state_dict(torch.load(path, map_location="cpu"))
    except RuntimeError as e:
        raise InvalidCheckpoint(f"{name} weights in {directory} do not match the network layout: {e}") from e
    return net


def load_train_state(directory: str | os.PathLike) -> dict:
    path = Path(directory) / "train_state.pt"
    if not path.exists():
        raise InvalidCheckpoint(f"checkpoint {directory} carries no optimizer state; cannot resume")
    return torch.load(path, map_location="cpu", weights_only=False)
