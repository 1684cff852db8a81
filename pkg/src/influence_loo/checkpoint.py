"""Little-endian binary checkpoints for deterministic and variational networks.

Layout::

    magic  b"INFLCKPT"      8 bytes
    version                 u8
    kind                    u8   (0 = mlp, 1 = bnn)
    n_in, hidden_layers, hidden_width, n_out     4 x u32
    activation              u8 length + ASCII
    final_lr                f64
    kl_weight               f64  (0 for mlp)
    n_params                u32
    values                  n_params x f64  (means for bnn)
    logvars                 n_params x f64  (bnn only)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .bnn import BnnModel
from .mlp import ArchSpec, MlpModel, ParameterVector, layout_for

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "atomic_write_bytes", "atomic_write_text"]

MAGIC = b"INFLCKPT"
VERSION = 1
KINDS = {"mlp": 0, "bnn": 1}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(model, final_lr: float | None = None) -> bytes:
    a = model.arch
    act = a.activation.encode("ascii")
    parts = [
        MAGIC,
        struct.pack("<BB", VERSION, KINDS[model.kind]),
        struct.pack("<IIII", a.n_in, a.hidden_layers, a.hidden_width, a.n_out),
        struct.pack("<B", len(act)),
        act,
        struct.pack("<dd", float(final_lr or 0.0), float(getattr(model, "kl_weight", 0.0))),
        struct.pack("<I", a.n_params),
    ]
    if model.kind == "mlp":
        parts.append(model.params.values.astype("<f8").tobytes())
    else:
        parts.append(model.means.values.astype("<f8").tobytes())
        parts.append(model.logvars.values.astype("<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes):
    """Returns ``(model, final_lr)``; ``final_lr`` is None when it was not recorded."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, kind = struct.unpack_from("<BB", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        n_in, depth, width, n_out = struct.unpack_from("<IIII", data, 10)
        (alen,) = struct.unpack_from("<B", data, 26)
        act = data[27 : 27 + alen].decode("ascii")
        off = 27 + alen
        final_lr, kl_weight = struct.unpack_from("<dd", data, off)
        (n,) = struct.unpack_from("<I", data, off + 16)
        off += 20
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    arch = ArchSpec(n_in, depth, width, n_out, act)
    if arch.n_params != n:
        raise CheckpointError(f"parameter count {n} does not match the architecture ({arch.n_params})")
    halves = 1 if kind == KINDS["mlp"] else 2
    if kind not in KINDS.values():
        raise CheckpointError(f"unknown model kind {kind}")
    if len(data) != off + 8 * n * halves:
        raise CheckpointError("checkpoint length does not match its header")
    vals = np.frombuffer(data, dtype="<f8", count=n * halves, offset=off).astype(np.float64)
    layout = layout_for(arch)
    lr = final_lr if final_lr > 0 else None
    if kind == KINDS["mlp"]:
        return MlpModel(arch, ParameterVector(vals.copy(), layout)), lr
    return BnnModel(arch, ParameterVector(vals[:n].copy(), layout), ParameterVector(vals[n:].copy(), layout), kl_weight), lr


def save_checkpoint(path, model, final_lr: float | None = None) -> None:
    atomic_write_bytes(path, encode(model, final_lr))


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
