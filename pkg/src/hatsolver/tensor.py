"""Thin tensor layer over torch.

Every primitive checks shapes and raises :class:`ShapeError` naming both
operands.  :func:`matmul` feeds an optional FLOP counter so attention costs
can be measured exactly.  Checkpoints are a JSON manifest plus one raw
little-endian ``.bin`` file per tensor, so a save/load round trip is
byte-exact.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "hatsolver-ckpt/1"


class ShapeError(ValueError):
    pass


class CheckpointError(IOError):
    pass


def _shape(x) -> tuple:
    return tuple(x.shape)


def _broadcast(a, b, op):
    try:
        return torch.broadcast_shapes(a, b)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None


# ---------------------------------------------------------------------------
# FLOP counting

class FlopCounter:
    """Accumulates multiply-adds of every :func:`matmul` in scope."""

    def __init__(self):
        self.total = 0
        self.calls = 0

    def add(self, n: int):
        self.total += int(n)
        self.calls += 1


_counters: list = []


@contextlib.contextmanager
def count_flops():
    c = FlopCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b):
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    sa, sb = _shape(a), _shape(b)
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {sa} @ {sb}")
    batch = _broadcast(sa[:-2], sb[:-2], "matmul")
    if _counters:
        flops = math.prod(batch) * sa[-2] * sa[-1] * sb[-1]
        for c in _counters:
            c.add(flops)
    return torch.matmul(a, b)


def add(a, b):
    _broadcast(_shape(a), _shape(b), "add")
    return a + b


def mul(a, b):
    _broadcast(_shape(a), _shape(b), "mul")
    return a * b


def transpose_last2(x):
    if x.dim() < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got {_shape(x)}")
    return x.transpose(-1, -2)


def reshape(x, shape: Sequence[int]):
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1:
        raise ShapeError(f"reshape: more than one -1 in {shape}")
    numel = x.numel()
    if -1 in shape:
        ok = math.prod(known) > 0 and numel % math.prod(known) == 0
    else:
        ok = math.prod(shape) == numel
    if not ok:
        raise ShapeError(f"reshape: cannot view {_shape(x)} as {shape}")
    return x.reshape(shape)


def reduce_mean(x, axis: int, keepdim: bool = False):
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"reduce_mean: axis {axis} out of range for {_shape(x)}")
    return x.mean(dim=axis, keepdim=keepdim)


def gather_rows(table, ids):
    """Row lookup ``table[ids]`` for an integer index tensor of any shape."""
    if table.dim() != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {_shape(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range [0, {table.shape[0]}) for table {_shape(table)}")
    return table[ids]


def concat(xs: Sequence, axis: int = -1):
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = _shape(xs[0])
    ax = axis % len(ref)
    for x in xs[1:]:
        s = _shape(x)
        if len(s) != len(ref) or any(p != r for k, (p, r) in enumerate(zip(s, ref)) if k != ax):
            raise ShapeError(f"concat: {ref} and {s} differ outside axis {axis}")
    return torch.cat(xs, dim=axis)


def softmax_lastaxis(x, mask=None):
    """Numerically stable softmax over the last axis.

    ``mask`` (bool, broadcastable) marks valid entries; invalid entries get
    probability exactly zero.  A row with no valid entry is an error.
    """
    if mask is None:
        return torch.softmax(x, dim=-1)
    _broadcast(_shape(x), _shape(mask), "softmax mask")
    mask = mask.expand(torch.broadcast_shapes(x.shape, mask.shape))
    if not bool(mask.any(dim=-1).all()):
        raise ShapeError("softmax_lastaxis: a row has no valid entry")
    x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=-1)


def backward(loss):
    """Run reverse mode once; a second call on the same graph raises."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    if getattr(loss, "_hat_backward_done", False):
        raise RuntimeError("backward already ran on this graph")
    loss.backward()
    loss._hat_backward_done = True


# ---------------------------------------------------------------------------
# precision and parameters

@contextlib.contextmanager
def verification_mode():
    """Run in float64 (used for finite-difference checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def xavier_(w):
    return nn.init.xavier_uniform_(w)


def normal_(w, std: float = 0.02):
    return nn.init.normal_(w, 0.0, std)


def linear_weight(d_in: int, d_out: int) -> nn.Parameter:
    w = torch.empty(d_in, d_out)
    return nn.Parameter(xavier_(w))


def embedding_table(rows: int, d: int) -> nn.Parameter:
    return nn.Parameter(normal_(torch.empty(rows, d)))


def named_parameters(module: nn.Module) -> Dict[str, torch.Tensor]:
    out = {}
    for name, p in module.named_parameters():
        if name in out:
            raise ValueError(f"parameter {name} registered twice")
        out[name] = p
    return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints

def _to_le_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], extra: Optional[dict] = None):
    """Write ``tensors`` and a JSON-able ``extra`` dict under directory ``path``.

    The manifest is written last, so a partially written checkpoint is never
    mistaken for a complete one.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (name, t) in enumerate(tensors.items()):
        data = _to_le_bytes(t)
        fname = f"t{k:05d}.bin"
        with open(path / fname, "wb") as fh:
            fh.write(data)
        entries.append({
            "name": name,
            "file": fname,
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
    manifest = {"format": CHECKPOINT_FORMAT, "tensors": entries, "extra": extra or {}}
    tmp = path / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path / "manifest.json")
    return path


def load_checkpoint(path):
    """Return ``(tensors, extra)``; raises :class:`CheckpointError` on any
    missing file, size mismatch or checksum mismatch."""
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        try:
            data = (path / e["file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"tensor {e['name']}: {exc}") from None
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise CheckpointError(f"tensor {e['name']}: checksum mismatch")
        expected = math.prod(e["shape"]) * dtype.itemsize
        if len(data) != expected:
            raise CheckpointError(f"tensor {e['name']}: {len(data)} bytes, expected {expected}")
        arr = np.frombuffer(data, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest["extra"]


def assign_parameters(module: nn.Module, tensors: Dict[str, torch.Tensor], prefix: str = ""):
    """Copy ``tensors[prefix + name]`` into every parameter of ``module``."""
    params = named_parameters(module)
    missing = [n for n in params if prefix + n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for n, p in params.items():
            src = tensors[prefix + n]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {n}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def iter_tensors(module: nn.Module, prefix: str = "") -> Iterable:
    for n, p in named_parameters(module).items():
        yield prefix + n, p.detach()
