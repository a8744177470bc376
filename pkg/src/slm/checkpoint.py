"""Binary checkpoints: magic, version, config echo, named tensors,
optimizer state, step counter.

All integers are little-endian; tensor payloads are row-major 32-bit
floats. Tensors are written sorted by name so identical states produce
identical bytes. Loading verifies the header and, when the caller
passes the expected tensor names, reports any missing or unexpected
ones by name.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_echo, config_from_echo
from .errors import FormatError
from .optim import AdamState
from .tensor import Tensor

MAGIC = b"SLMCKPT\x00"
FORMAT_VERSION = 1


def _write_bytes(fh, payload: bytes):
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _write_tensor(fh, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def _read_bytes(fh) -> bytes:
    (n,) = struct.unpack("<Q", _read(fh, 8))
    return _read(fh, n)


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read(fh, 2))
    name = _read(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read(fh, 1))
    shape = tuple(struct.unpack("<Q", _read(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32, copy=True)


@dataclass
class Checkpoint:
    step: int
    config: RunConfig
    params: dict
    opt_state: AdamState | None


def save_checkpoint(path: str, cfg: RunConfig, params: dict, step: int,
                    opt_state: AdamState | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", step))
        echo = "\n".join(f"{k}={v}" for k, v in config_echo(cfg))
        _write_bytes(fh, echo.encode("utf-8"))
        names = sorted(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_tensor(fh, name, params[name].data)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state.t))
            moment_names = sorted(opt_state.m)
            fh.write(struct.pack("<I", len(moment_names)))
            for name in moment_names:
                _write_tensor(fh, "m:" + name, opt_state.m[name])
                _write_tensor(fh, "v:" + name, opt_state.v[name])


def load_checkpoint(path: str, expected_names=None) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}")
        (step,) = struct.unpack("<Q", _read(fh, 8))
        echo = _read_bytes(fh).decode("utf-8")
        pairs = [line.partition("=")[::2] for line in echo.splitlines() if line]
        cfg = config_from_echo(pairs)
        (n_tensors,) = struct.unpack("<I", _read(fh, 4))
        params = {}
        for _ in range(n_tensors):
            name, data = _read_tensor(fh)
            params[name] = Tensor(data, requires_grad=True)
        (has_opt,) = struct.unpack("<B", _read(fh, 1))
        opt_state = None
        if has_opt:
            opt_state = AdamState()
            (opt_state.t,) = struct.unpack("<Q", _read(fh, 8))
            (n_moments,) = struct.unpack("<I", _read(fh, 4))
            for _ in range(n_moments):
                m_name, m_data = _read_tensor(fh)
                v_name, v_data = _read_tensor(fh)
                if not (m_name.startswith("m:") and v_name.startswith("v:")):
                    raise FormatError(f"{path}: malformed optimizer record")
                opt_state.m[m_name[2:]] = m_data
                opt_state.v[v_name[2:]] = v_data

    if expected_names is not None:
        have = set(params)
        want = set(expected_names)
        missing = sorted(want - have)
        extra = sorted(have - want)
        if missing or extra:
            parts = []
            if missing:
                parts.append("missing tensors: " + ", ".join(missing))
            if extra:
                parts.append("unexpected tensors: " + ", ".join(extra))
            raise FormatError(f"{path}: " + "; ".join(parts))
    return Checkpoint(step=step, config=cfg, params=params, opt_state=opt_state)
