"""Checkpoint archives: one zip holding a JSON config record plus named
parameter tensors as .npy entries. Values round-trip bit-exactly."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputError
from .gtformer import GTFormer, ModelConfig


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    extra_meta: dict = field(default_factory=dict)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    return buf.getvalue()


def save_checkpoint(
    path: str | Path,
    config: dict,
    params: dict[str, np.ndarray | torch.Tensor],
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    def to_numpy(t):
        return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(config, sort_keys=True, indent=1))
        zf.writestr("meta.json", json.dumps(extra_meta or {}, sort_keys=True, indent=1))
        for name, tensor in params.items():
            zf.writestr(f"params/{name}.npy", _npy_bytes(to_numpy(tensor)))
        for name, arr in (extra_arrays or {}).items():
            zf.writestr(f"extra/{name}.npy", _npy_bytes(to_numpy(arr)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if "config.json" not in names:
            raise InputError(f"{path}: archive has no config record")
        config = json.loads(zf.read("config.json"))
        meta = json.loads(zf.read("meta.json")) if "meta.json" in names else {}
        params, extra = {}, {}
        for entry in names:
            if entry.endswith(".npy"):
                arr = np.load(io.BytesIO(zf.read(entry)))
                key = entry[: -len(".npy")]
                if entry.startswith("params/"):
                    params[key[len("params/") :]] = arr
                elif entry.startswith("extra/"):
                    extra[key[len("extra/") :]] = arr
    return Checkpoint(config=config, params=params, extra_arrays=extra, extra_meta=meta)


def save_model(path: str | Path, model: GTFormer, extra_arrays=None, extra_meta=None) -> None:
    save_checkpoint(
        path,
        model.config.to_json(),
        dict(model.state_dict()),
        extra_arrays=extra_arrays,
        extra_meta=extra_meta,
    )


def load_model(path: str | Path) -> tuple[GTFormer, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = GTFormer(ModelConfig.from_json(ckpt.config))
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, ckpt
