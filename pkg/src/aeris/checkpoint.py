"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"AERISCKP"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length N in bytes
    offset 20  N bytes   UTF-8 JSON header
    offset 20+N          tensor data, float32 little-endian, concatenated

The JSON header holds ``model_config``, optional ``train_config`` and ``meta``
echoes, and ``tensors``: a list of ``{"name", "shape", "dtype", "offset",
"count"}`` where ``offset`` is in bytes from the start of the data section and
``dtype`` is the original torch dtype restored on load. Model tensors are named
as in ``state_dict()``; per-parameter optimizer state (SGD momentum, AdamW
moments and step) is stored as ``optim/<parameter name>/<state key>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"AERISCKP"
VERSION = 1


def save_checkpoint(path, model, train_config=None, optimizer=None, meta=None) -> Path:
    arrays = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, buf in optimizer.state.get(p, {}).items():
                    if torch.is_tensor(buf):
                        arrays[f"optim/{names[id(p)]}/{key}"] = buf
    entries, chunks, offset = [], [], 0
    for name, t in arrays.items():
        a = t.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "meta": meta or {},
        "tensors": entries,
    }
    hb = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hb)))
        f.write(hb)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {name: np.ndarray})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an AERIS checkpoint")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n].decode("utf-8"))
    data = memoryview(raw)[20 + n:]
    arrays = {}
    for e in header["tensors"]:
        a = np.frombuffer(data, dtype="<f4", count=e["count"], offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"])
    return header, arrays


def load_into(model, arrays: dict, header: dict, optimizer=None) -> None:
    dtypes = {e["name"]: getattr(torch, e["dtype"]) for e in header["tensors"]}
    state = {k: torch.from_numpy(v.copy()).to(dtypes[k]) for k, v in arrays.items() if not k.startswith("optim/")}
    model.load_state_dict(state)
    if optimizer is not None:
        params = dict(model.named_parameters())
        for k, v in arrays.items():
            if k.startswith("optim/"):
                name, key = k[len("optim/"):].rsplit("/", 1)
                optimizer.state[params[name]][key] = torch.from_numpy(v.copy()).to(dtypes[k])


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, header)``."""
    from .model import AERISNet, ModelConfig

    header, arrays = read_checkpoint(path)
    model = AERISNet(ModelConfig.from_dict(header["model_config"]))
    load_into(model, arrays, header)
    return model, header
