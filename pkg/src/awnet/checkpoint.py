"""Checkpoints: a JSON manifest plus one raw little-endian float64 blob per tensor.

Layout of a checkpoint directory::

    manifest.json        format version, architecture, config hash, epoch,
                         training state, and for each tensor its name, role,
                         shape, file and sha256
    tensors/<name>.f64   raw bytes, C order

Saving is a pure function of the model and training state, so
save -> load -> save reproduces every file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import AWNetModel, ModelConfig
from .training import TrainState

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: AWNetModel
    state: TrainState
    config_hash: str
    manifest: dict


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()


def save_checkpoint(path: str | Path, model: AWNetModel, state: TrainState | None = None,
                    config_hash: str = "") -> Path:
    path = Path(path)
    state = state or TrainState()
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)
    params = dict(model.named_parameters())
    entries = []
    tensors = [(n, "param", p.data) for n, p in params.items()]
    tensors += [(n, "buffer", b) for n, b in model.named_buffers()]
    tensors += [(n, "velocity", v) for n, v in sorted(state.velocity.items())]
    for name, role, arr in tensors:
        raw = _blob(arr)
        fname = f"tensors/{role}.{name}.f64"
        (tmp / fname).write_bytes(raw)
        entries.append({"name": name, "role": role, "shape": list(np.shape(arr)),
                        "file": fname, "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.config.descriptor(),
        "config_hash": config_hash,
        "epoch": state.epoch,
        "train_state": {
            "alpha1": state.alpha1,
            "alpha2": state.alpha2,
            "l_adv_hist": list(state.l_adv_hist),
            "l_nat_hist": list(state.l_nat_hist),
        },
        "frozen": sorted(n for n, p in params.items() if not p.requires_grad),
        "tensors": entries,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.exists():
        raise CheckpointError(f"no manifest.json in {path}")
    manifest = json.loads(mfile.read_text())
    version = manifest.get("format_version")
    if not isinstance(version, int):
        raise CheckpointError(f"{mfile}: missing format_version")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"{mfile}: checkpoint format version {version} is newer than supported version {FORMAT_VERSION}"
        )
    return manifest


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Rebuild model and training state; verifies hashes and, if given, the architecture."""
    path = Path(path)
    manifest = read_manifest(path)
    arch = ModelConfig.from_descriptor(manifest["architecture"])
    if expect is not None and arch != expect:
        diff = {k: (v, manifest["architecture"][k]) for k, v in expect.descriptor().items()
                if manifest["architecture"].get(k) != v}
        raise CheckpointError(f"architecture mismatch (expected, found): {diff}")
    model = AWNetModel(arch, 0)
    state_dict, velocity = {}, {}
    for entry in manifest["tensors"]:
        raw = (path / entry["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"hash mismatch for {entry['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(entry["shape"])
        if entry["role"] == "velocity":
            velocity[entry["name"]] = arr
        else:
            state_dict[entry["name"]] = arr
    try:
        model.load_state_dict(state_dict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"tensors do not fit the architecture: {exc}") from exc
    frozen = set(manifest.get("frozen", []))
    for name, p in model.named_parameters():
        p.requires_grad = name not in frozen
    ts = manifest["train_state"]
    state = TrainState(epoch=manifest["epoch"], alpha1=ts["alpha1"], alpha2=ts["alpha2"],
                       velocity=velocity, l_adv_hist=list(ts["l_adv_hist"]),
                       l_nat_hist=list(ts["l_nat_hist"]))
    return Checkpoint(model, state, manifest["config_hash"], manifest)
