"""Versioned ``.npz`` checkpoints.

The archive holds float64 arrays (parameters, BatchNorm buffers, normaliser
constants, Adam moments) plus a ``meta`` entry with a JSON document: format
version, model config, layer specs, optimizer scalars and RNG state.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .errors import LoadError
from .model import RrnConfig, RrnModel
from .nn import Adam

FORMAT = "rrn-checkpoint"
VERSION = 1


def save_checkpoint(path, model: RrnModel, optimizer: Adam | None = None, rng=None, extra=None) -> None:
    arrays = dict(model.state_dict())
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "layers": model.layer_specs(),
        "extra": extra or {},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optimizer"] = {"type": "adam", "t": state["t"], "lr": state["lr"],
                             "betas": state["betas"], "eps": state["eps"]}
        for k in state["m"]:
            arrays[f"adam_m/{k}"] = state["m"][k]
            arrays[f"adam_v/{k}"] = state["v"][k]
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **{k: np.asarray(v) for k, v in arrays.items()})
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta, optimizer_or_None)``."""
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise LoadError(f"checkpoint not found: {path}") from None
    except (ValueError, OSError) as exc:
        raise LoadError(f"{path}: not a checkpoint archive ({exc})") from None
    with archive:
        if "meta" not in archive.files:
            raise LoadError(f"{path}: missing checkpoint metadata")
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise LoadError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        state = {k: archive[k] for k in archive.files if k != "meta"}
    model = RrnModel(RrnConfig.from_dict(meta["config"]), meta.get("seed", 0))
    model.load_state_dict(state)
    optimizer = None
    if "optimizer" in meta:
        opt = meta["optimizer"]
        optimizer = Adam(model.named_params(), opt["lr"], tuple(opt["betas"]), opt["eps"])
        optimizer.load_state_dict({
            "t": opt["t"],
            "m": {k: state[f"adam_m/{k}"] for k in optimizer.params},
            "v": {k: state[f"adam_v/{k}"] for k in optimizer.params},
        })
    return model, meta, optimizer
