"""Versioned checkpoint container.

Layout::

    b"MEDFUSE-CKPT\\n"             magic
    uint32 LE                      format version
    uint64 LE                      header length
    header                         UTF-8 JSON (sorted keys)
    payload                        float32 LE arrays, back to back

Arrays are grouped (``mltm``, ``fusion``, ``estimator``, ...); the header
records each array's group, name, shape and byte offset.  Serialisation is
byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from medfuse.utils import atomic_write_bytes

MAGIC = b"MEDFUSE-CKPT\n"
VERSION = 1
NON_INFERENCE_GROUPS = ("estimator", "optim")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    component: str
    config: dict
    seed: int
    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def tensors(self, group: str, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(np.array(v, dtype=np.float32)).to(dtype) for k, v in self.groups[group].items()}


def _as_f32(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(value, dtype="<f4"))


def dumps(ckpt: Checkpoint) -> bytes:
    arrays = []
    blobs = []
    offset = 0
    for group in sorted(ckpt.groups):
        for name in sorted(ckpt.groups[group]):
            arr = _as_f32(ckpt.groups[group][name])
            raw = arr.tobytes()
            arrays.append({
                "group": group,
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "inference": not group.startswith(NON_INFERENCE_GROUPS),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "version": VERSION,
        "component": ckpt.component,
        "config": ckpt.config,
        "seed": int(ckpt.seed),
        "dtype": "float32-le",
        "arrays": arrays,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)


def loads(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    pos = len(MAGIC)
    if len(data) < pos + 12:
        raise CheckpointError("truncated checkpoint header")
    version, head_len = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 12
    header = json.loads(data[pos : pos + head_len].decode("utf-8"))
    base = pos + head_len
    groups: dict[str, dict[str, np.ndarray]] = {}
    for spec in header["arrays"]:
        start = base + spec["offset"]
        raw = data[start : start + spec["nbytes"]]
        if len(raw) != spec["nbytes"]:
            raise CheckpointError(f"truncated array {spec['group']}/{spec['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()
        groups.setdefault(spec["group"], {})[spec["name"]] = arr
    return Checkpoint(header["component"], header["config"], header["seed"], groups, header.get("meta", {}))


def save(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, dumps(ckpt))


def load(path: str | Path, component: str | None = None) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    if component is not None and ckpt.component != component:
        raise CheckpointError(f"{path}: expected a {component!r} checkpoint, found {ckpt.component!r}")
    return ckpt


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: _as_f32(v) for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    ref = module.state_dict()
    missing = set(ref) - set(arrays)
    extra = set(arrays) - set(ref)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    state = {k: torch.from_numpy(np.array(arrays[k], dtype=np.float32)).to(ref[k].dtype) for k in ref}
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, module: torch.nn.Module) -> tuple[dict[str, np.ndarray], dict]:
    """Adam moments keyed by parameter name, plus integer step counts."""
    names = {id(p): n for n, p in module.named_parameters()}
    arrays, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            n = names[id(p)]
            arrays[f"{n}.exp_avg"] = _as_f32(state["exp_avg"])
            arrays[f"{n}.exp_avg_sq"] = _as_f32(state["exp_avg_sq"])
            steps[n] = int(state["step"])
    return arrays, steps


def restore_optimizer(opt: torch.optim.Optimizer, module: torch.nn.Module, arrays: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> None:
    params = dict(module.named_parameters())
    for n, step in steps.items():
        p = params[n]
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(np.array(arrays[f"{n}.exp_avg"], dtype=np.float32)).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{n}.exp_avg_sq"], dtype=np.float32)).to(p.dtype),
        }
