"""Checkpoint format: a JSON manifest plus one raw float32 blob per tensor.

The manifest records the model configuration, ablation flags, step count,
RNG seed, and the shape and file of every tensor, including batch-norm
buffers and Adam moments.  Loading rebuilds the model and optimizer and
validates every shape against the configuration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from attnreg.networks import AblationFlags, NetworkConfig, RegistrationNetwork

MANIFEST_NAME = "manifest.json"
FORMAT = "attnreg-checkpoint-v1"


@dataclass
class CheckpointBundle:
    """A model restored from disk, with optimizer state when it was saved."""

    model: RegistrationNetwork
    optimizer: torch.optim.Adam | None
    step_count: int
    rng_seed: int


def _tensor_bytes(t: torch.Tensor) -> bytes:
    # Integer buffers (batch-norm step counters) are stored as float32 too;
    # their values stay far below the 2**24 exact-integer limit.
    arr = t.detach().cpu().contiguous().to(torch.float32).numpy()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _named_tensors(model: RegistrationNetwork, optimizer: torch.optim.Adam | None):
    tensors = dict(model.state_dict())
    if optimizer is not None:
        param_names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = param_names[id(p)]
                tensors[f"opt.step.{name}"] = state["step"]
                tensors[f"opt.exp_avg.{name}"] = state["exp_avg"]
                tensors[f"opt.exp_avg_sq.{name}"] = state["exp_avg_sq"]
    return tensors


def save_checkpoint(
    path: str | Path,
    model: RegistrationNetwork,
    optimizer: torch.optim.Adam | None = None,
    *,
    step_count: int = 0,
    rng_seed: int = 0,
) -> None:
    """Write a checkpoint directory; contents are deterministic for equal state."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = _named_tensors(model, optimizer)
    entries = {}
    for i, name in enumerate(sorted(tensors)):
        t = tensors[name]
        fname = f"t{i:05d}.bin"
        (out / fname).write_bytes(_tensor_bytes(t))
        entries[name] = {"shape": list(t.shape), "file": fname}
    opt_meta = None
    if optimizer is not None:
        group = optimizer.param_groups[0]
        opt_meta = {"lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"]}
    manifest = {
        "format": FORMAT,
        "dims": list(model.dims),
        "network_config": dataclasses.asdict(model.config),
        "ablation_flags": dataclasses.asdict(model.flags),
        "step_count": int(step_count),
        "rng_seed": int(rng_seed),
        "optimizer": opt_meta,
        "tensors": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_blob(path: Path, shape, target: torch.Tensor) -> torch.Tensor:
    raw = path.read_bytes()
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} bytes for shape {shape}, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return torch.from_numpy(arr).to(target.dtype)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Rebuild the model (and optimizer, if saved) from a checkpoint directory."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    config = NetworkConfig(**manifest["network_config"])
    flags = AblationFlags(**manifest["ablation_flags"])
    model = RegistrationNetwork(tuple(manifest["dims"]), config, flags)

    entries = dict(manifest["tensors"])
    state = model.state_dict()
    new_state = {}
    for name, target in state.items():
        if name not in entries:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        entry = entries.pop(name)
        if tuple(entry["shape"]) != tuple(target.shape):
            raise ValueError(
                f"tensor {name!r}: stored shape {entry['shape']} does not match "
                f"configured shape {list(target.shape)}"
            )
        new_state[name] = _load_blob(root / entry["file"], entry["shape"], target)
    model.load_state_dict(new_state)

    optimizer = None
    opt_meta = manifest.get("optimizer")
    if opt_meta is not None:
        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=opt_meta["lr"],
            betas=tuple(opt_meta["betas"]),
            eps=opt_meta["eps"],
        )
        for name, p in model.named_parameters():
            parts = {}
            for kind in ("step", "exp_avg", "exp_avg_sq"):
                key = f"opt.{kind}.{name}"
                if key not in entries:
                    raise ValueError(f"checkpoint is missing optimizer tensor {key!r}")
                entry = entries.pop(key)
                want = () if kind == "step" else tuple(p.shape)
                if tuple(entry["shape"]) != want:
                    raise ValueError(f"optimizer tensor {key!r} has shape {entry['shape']}, want {list(want)}")
                parts[kind] = _load_blob(root / entry["file"], entry["shape"], torch.zeros((), dtype=torch.float32))
            optimizer.state[p] = parts
    if entries:
        raise ValueError(f"checkpoint holds unexpected tensors: {sorted(entries)[:4]}")
    return CheckpointBundle(
        model=model,
        optimizer=optimizer,
        step_count=int(manifest["step_count"]),
        rng_seed=int(manifest["rng_seed"]),
    )
