"""Versioned binary checkpoints.

Layout (little-endian):

    magic    8 bytes  b"CTMEMCKP"
    version  u32      (currently 1)
    config   u32 length + utf-8 `key = value` lines (ModelConfig fields)
    params   u32 count, then per entry:
                 u16 name length + utf-8 name
                 u8 ndim, u32 per dim
                 raw float64 data (row-major)
    memories u32 count, then per layer:
                 u8 present flag; when set: coeff dims + data, centers,
                 widths, f64 tau, f64 lam, u64 update_count, u64 sample_count
    extras   u8 flag; when set (training state):
                 u64 trained steps, u64 adam step,
                 adam m then v arrays in parameter order,
                 u32 length + json of the numpy bit-generator state

Save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .basis import BasisSpec
from .memory import MemoryState
from .model import Adam, Model, ModelConfig

MAGIC = b"CTMEMCKP"
VERSION = 1


class CheckpointError(Exception):
    pass


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt):
        vals = struct.unpack_from("<" + fmt, self.buf, self.off)
        self.off += struct.calcsize("<" + fmt)
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n):
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def array(self) -> np.ndarray:
        ndim = self.take("B")
        if ndim == 0:
            shape = ()
        else:
            dims = self.take(f"{ndim}I")
            shape = (dims,) if isinstance(dims, int) else tuple(dims)
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.raw(8 * n), dtype=np.float64).copy()
        return data.reshape(shape)


def _config_text(cfg: ModelConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out)


def _parse_config_text(text: str) -> ModelConfig:
    defaults = ModelConfig()
    kwargs = {}
    for line in text.splitlines():
        key, raw = (s.strip() for s in line.split("=", 1))
        cur = getattr(defaults, key)
        if isinstance(cur, bool):
            kwargs[key] = raw == "true"
        elif isinstance(cur, int):
            kwargs[key] = int(raw)
        elif isinstance(cur, float):
            kwargs[key] = float(raw)
        elif isinstance(cur, tuple):
            kwargs[key] = tuple(float(x) for x in raw.split(",") if x)
        else:
            kwargs[key] = raw
    return ModelConfig(**kwargs)


def save_checkpoint(path, model: Model, states=None, opt: Adam = None,
                    trained_steps: int = 0, rng_state: dict = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = _config_text(model.cfg).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_bytes)))
    chunks.append(cfg_bytes)
    chunks.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + _pack_array(t.data))
    mems = [st.mem for st in (states or [])]
    chunks.append(struct.pack("<I", len(mems)))
    for mem in mems:
        if mem is None:
            chunks.append(struct.pack("<B", 0))
            continue
        chunks.append(struct.pack("<B", 1))
        chunks.append(_pack_array(mem.coeffs))
        chunks.append(_pack_array(mem.spec.centers))
        chunks.append(_pack_array(mem.spec.widths))
        chunks.append(struct.pack("<ddQQ", mem.tau, mem.lam,
                                  mem.update_count, mem.sample_count))
    if opt is not None:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<QQ", trained_steps, opt.step_count))
        for name in model.params:
            chunks.append(_pack_array(opt.m[name]))
        for name in model.params:
            chunks.append(_pack_array(opt.v[name]))
        rng_bytes = json.dumps(rng_state or {}, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(rng_bytes)) + rng_bytes)
    else:
        chunks.append(struct.pack("<B", 0))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Returns a dict with config, params, memories, and optional train state."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.raw(8) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    version = r.take("I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = _parse_config_text(r.raw(r.take("I")).decode("utf-8"))
    count = r.take("I")
    params = {}
    for _ in range(count):
        name = r.raw(r.take("H")).decode("utf-8")
        params[name] = r.array()
    num_mems = r.take("I")
    memories = []
    for _ in range(num_mems):
        if not r.take("B"):
            memories.append(None)
            continue
        coeffs = r.array()
        centers = r.array()
        widths = r.array()
        tau, lam, update_count, sample_count = r.take("ddQQ")
        memories.append(MemoryState(
            coeffs=coeffs, spec=BasisSpec(centers=centers, widths=widths),
            tau=tau, lam=lam, update_count=int(update_count),
            sample_count=int(sample_count)))
    out = {"config": cfg, "params": params, "memories": memories,
           "trained_steps": 0, "adam": None, "rng_state": None}
    if r.take("B"):
        trained, adam_step = r.take("QQ")
        m = {name: r.array() for name in params}
        v = {name: r.array() for name in params}
        rng_state = json.loads(r.raw(r.take("I")).decode("utf-8"))
        out.update(trained_steps=int(trained), rng_state=rng_state or None,
                   adam={"step_count": int(adam_step), "m": m, "v": v})
    return out


def restore_model(ckpt: dict, rng=None) -> Model:
    rng = rng or np.random.default_rng(0)
    model = Model(ckpt["config"], rng)
    for name, arr in ckpt["params"].items():
        if name not in model.params:
            raise CheckpointError(f"checkpoint parameter {name!r} unknown to this config")
        if model.params[name].data.shape != arr.shape:
            raise CheckpointError(f"parameter {name!r} shape mismatch")
        model.params[name].data = arr.copy()
    return model
