"""Binary checkpoints: little-endian, versioned, length-prefixed.

Layout::

    b"LNBK" | u32 version
    str  run-config JSON (sorted keys)
    str  vocabulary digest
    u64  epochs completed | i64 seed
    f64 lr, beta1, beta2, epsilon | u64 adam step
    u32 array count, then per array: str name | str dtype | u32 ndim | u64 dims... | raw bytes

Arrays are the parameters (``p/<name>``) followed by the Adam moments
(``m/<name>``, ``v/<name>``), each group in sorted name order.  Strings are a
u32 byte length followed by UTF-8.  The training random streams are keyed by
(seed, epoch), so the seed and the epoch counter are the whole RNG state.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParamSet
from .numerics import AdamState

MAGIC = b"LNBK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    vocab_digest: str
    params: ParamSet
    adam: AdamState
    seed: int
    epoch: int

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _put_str(buf, json.dumps(self.config, sort_keys=True))
        _put_str(buf, self.vocab_digest)
        buf.write(struct.pack("<Qq", self.epoch, self.seed))
        a = self.adam
        buf.write(struct.pack("<ddddQ", a.lr, a.beta1, a.beta2, a.epsilon, a.step))
        arrays = [(f"p/{k}", v) for k, v in sorted(self.params.arrays.items())]
        arrays += [(f"m/{k}", v) for k, v in sorted(a.m.items())]
        arrays += [(f"v/{k}", v) for k, v in sorted(a.v.items())]
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _put_array(buf, name, arr)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, model_config: ModelConfig | None = None) -> "Checkpoint":
        buf = io.BytesIO(data)
        if buf.read(4) != MAGIC:
            raise CheckpointError("not a checkpoint file")
        (version,) = _unpack(buf, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = json.loads(_get_str(buf))
        digest = _get_str(buf)
        epoch, seed = _unpack(buf, "<Qq")
        lr, b1, b2, eps, step = _unpack(buf, "<ddddQ")
        (count,) = _unpack(buf, "<I")
        groups: dict[str, dict[str, np.ndarray]] = {"p": {}, "m": {}, "v": {}}
        for _ in range(count):
            name, arr = _get_array(buf)
            kind, _, key = name.partition("/")
            if kind not in groups:
                raise CheckpointError(f"unexpected array {name!r}")
            groups[kind][key] = arr
        if buf.read(1):
            raise CheckpointError("trailing bytes after the last array")
        mc = model_config or model_config_from(config)
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step=step, m=groups["m"], v=groups["v"])
        return cls(config, digest, ParamSet(groups["p"], mc), adam, seed, epoch)

    def save(self, path) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(p)

    @classmethod
    def load(cls, path, expect_digest: str | None = None) -> "Checkpoint":
        try:
            ck = cls.from_bytes(Path(path).read_bytes())
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
        if expect_digest is not None and ck.vocab_digest != expect_digest:
            raise CheckpointError(f"{path}: checkpoint was trained on a different dataset "
                                  f"(vocabulary digest {ck.vocab_digest[:12]} != {expect_digest[:12]})")
        return ck


def model_config_from(config: dict) -> ModelConfig:
    fields = ModelConfig.__dataclass_fields__
    variant = config.get("variant")
    kw = {k: v for k, v in config.items() if k in fields}
    return ModelConfig.for_variant(variant, **kw) if variant else ModelConfig(**kw)


def _unpack(buf, fmt):
    size = struct.calcsize(fmt)
    return struct.unpack(fmt, buf.read(size))


def _put_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_str(buf) -> str:
    (n,) = _unpack(buf, "<I")
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated string")
    return b.decode("utf-8")


def _put_array(buf, name: str, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    _put_str(buf, name)
    _put_str(buf, le.dtype.str)
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(le.tobytes())


def _get_array(buf) -> tuple[str, np.ndarray]:
    name = _get_str(buf)
    dtype = np.dtype(_get_str(buf))
    (ndim,) = _unpack(buf, "<I")
    shape = _unpack(buf, f"<{ndim}Q")
    n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated array {name!r}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="), copy=True)
