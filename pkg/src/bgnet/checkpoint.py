"""Checkpoint container: a zip of ``.npy`` tensors plus one JSON metadata entry.

The layout is loadable with ``numpy.load`` as an npz archive. Entries are
written uncompressed with a fixed timestamp, so identical state gives
byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import BGNModel, ModelConfig
from .optim import AdamaxState

CHECKPOINT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamaxState
    epoch: int
    seeds: dict[str, int]
    history: list[dict] = field(default_factory=list)
    vocabulary: list[str] = field(default_factory=list)
    answers: list[str] = field(default_factory=list)
    run_config: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: BGNModel, optimizer: AdamaxState, epoch: int, **kw) -> "Checkpoint":
        params = {name: t.data.copy() for name, t in model.params.items()}
        return cls(model.cfg, params, optimizer, epoch, **kw)

    def model(self) -> BGNModel:
        tensors = {name: Tensor(value.copy(), requires_grad=True, name=name) for name, value in self.params.items()}
        return BGNModel(self.config, tensors)


def _add_array(zf: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, buf.getvalue())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: the target is replaced only after a complete write."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "seeds": ckpt.seeds,
        "history": ckpt.history,
        "vocabulary": ckpt.vocabulary,
        "answers": ckpt.answers,
        "run_config": ckpt.run_config,
        "optimizer": {
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
            "step": ckpt.optimizer.step,
        },
        "params": list(ckpt.params),
        "moments": list(ckpt.optimizer.m),
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name, value in ckpt.params.items():
            _add_array(zf, f"param/{name}", value)
        for name in ckpt.optimizer.m:
            _add_array(zf, f"adamax_m/{name}", ckpt.optimizer.m[name])
            _add_array(zf, f"adamax_u/{name}", ckpt.optimizer.u[name])
    os.replace(tmp, path)


def _read_array(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(f"{name}.npy") as f:
        return np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
            params = {name: _read_array(zf, f"param/{name}") for name in meta["params"]}
            opt = meta["optimizer"]
            state = AdamaxState(opt["beta1"], opt["beta2"], opt["eps"], opt["step"])
            for name in meta["moments"]:
                state.m[name] = _read_array(zf, f"adamax_m/{name}")
                state.u[name] = _read_array(zf, f"adamax_u/{name}")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return Checkpoint(
        ModelConfig(**meta["config"]),
        params,
        state,
        meta["epoch"],
        meta["seeds"],
        meta["history"],
        meta["vocabulary"],
        meta["answers"],
        meta["run_config"],
    )
