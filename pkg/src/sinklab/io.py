"""Checkpoint files, token streams and metric reports.

Checkpoint layout (all integers little-endian)::

    0   4 bytes   magic b"SNKL"
    4   u32       format version (currently 1)
    8   u64       header length N
    16  N bytes   header, UTF-8 JSON (model/train config, step, seed, variant)
        u64       tensor count
        per tensor:
            u32   name length, then the UTF-8 name
            u8    dtype code (see DTYPE_CODES)
            u8    rank
            u64   each dimension
            u64   absolute byte offset of the payload
        payloads: raw little-endian values, each starting on a 64-byte boundary

Pre-tokenized corpora: b"SNKT", u32 vocabulary size, then u32 token ids.
Anything else is read as raw bytes (one token per byte).
"""

from __future__ import annotations

import contextlib
import csv
import json
import math
import struct
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, InputError, UnsupportedVersionError
from .model import ModelConfig, Transformer, param_shapes
from .tensor import Tensor
from .training import BYTE_VOCAB, OptimizerState, TrainConfig

MAGIC = b"SNKL"
VERSION = 1
ALIGN = 64
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"),
               5: np.dtype("u1"), 6: np.dtype("<u4")}

TOKEN_MAGIC = b"SNKT"


def _code_for(arr: np.ndarray) -> int:
    for code, known in DTYPE_CODES.items():
        if known.kind == arr.dtype.kind and known.itemsize == arr.dtype.itemsize:
            return code
    raise FormatError(f"dtype {arr.dtype} has no checkpoint code")


def _pad(n: int) -> int:
    return (-n) % ALIGN


def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]):
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = []
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        arr = arr if arr.flags.c_contiguous else arr.copy(order="C")
        code = _code_for(arr)
        entries.append((name.encode("utf-8"), code, arr))
    dir_size = 8 + sum(4 + len(n) + 1 + 1 + 8 * a.ndim + 8 for n, _, a in entries)
    pos = 16 + len(head) + dir_size
    pos += _pad(pos)
    offsets = []
    for _, _, arr in entries:
        offsets.append(pos)
        pos += arr.nbytes
        pos += _pad(pos)
    directory.append(struct.pack("<Q", len(entries)))
    for (name, code, arr), off in zip(entries, offsets):
        directory.append(struct.pack("<I", len(name)) + name + struct.pack("<BB", code, arr.ndim))
        directory.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        directory.append(struct.pack("<Q", off))
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
            fh.write(b"".join(directory))
            for (_, code, arr), off in zip(entries, offsets):
                fh.write(b"\0" * (off - fh.tell()))
                fh.write(arr.astype(DTYPE_CODES[code], copy=False).tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    size = len(buf)

    def need(pos, n, what):
        if pos + n > size:
            raise FormatError(f"{path}: truncated while reading {what}")

    need(0, 16, "preamble")
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version} (reader supports {VERSION})")
    need(16, hlen, "header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from None
    pos = 16 + hlen
    need(pos, 8, "tensor count")
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    spans = []
    tensors = {}
    for _ in range(count):
        need(pos, 4, "tensor name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, nlen + 2, "tensor entry")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in DTYPE_CODES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        need(pos, 8 * rank + 8, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        dt = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off % ALIGN or off + nbytes > size:
            raise FormatError(f"{path}: payload of {name!r} at {off}+{nbytes} is outside the file ({size} bytes)")
        spans.append((off, off + nbytes, name))
        tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
    spans.sort()
    if spans and spans[0][0] < pos:
        raise FormatError(f"{path}: payload of {spans[0][2]!r} overlaps the tensor directory")
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"{path}: payloads of {an!r} and {bn!r} overlap")
    return header, tensors


@dataclass
class Checkpoint:
    model: Transformer
    optimizer: OptimizerState | None
    step: int
    header: dict
    train_config: TrainConfig | None


def save_checkpoint(path, model: Transformer, optimizer: OptimizerState | None = None,
                    train_cfg: TrainConfig | None = None, step: int = 0, extra: dict | None = None):
    header = {
        "model": model.config.to_dict(),
        "train": train_cfg.to_dict() if train_cfg is not None else None,
        "step": int(step),
        "seed": train_cfg.seed if train_cfg is not None else None,
        "variant": model.config.variant.value,
        "optimizer_step": optimizer.step if optimizer is not None else None,
    }
    if extra:
        header["extra"] = extra
    tensors = {name: p.data for name, p in model.params.items()}
    if optimizer is not None:
        for name in model.params:
            tensors[f"optim.m/{name}"] = optimizer.m[name]
            tensors[f"optim.v/{name}"] = optimizer.v[name]
    write_tensor_file(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_tensor_file(path)
    try:
        cfg = ModelConfig.from_dict(header["model"])
    except KeyError:
        raise FormatError(f"{path}: header has no model config") from None
    names = list(param_shapes(cfg))
    for n in names:
        if n not in tensors:
            raise FormatError(f"{path}: missing tensor {n!r}")
    has_opt = header.get("optimizer_step") is not None
    known = set(names)
    if has_opt:
        known |= {f"optim.m/{n}" for n in names} | {f"optim.v/{n}" for n in names}
        for n in sorted(known - set(names)):
            if n not in tensors:
                raise FormatError(f"{path}: missing tensor {n!r}")
    extra = sorted(set(tensors) - known)
    if extra:
        warnings.warn(f"{path}: ignoring unknown tensors {extra}", stacklevel=2)
    params = {n: Tensor(tensors[n], requires_grad=True, name=n) for n in names}
    model = Transformer(cfg, params)
    opt = None
    if has_opt:
        opt = OptimizerState(m={n: tensors[f"optim.m/{n}"] for n in names},
                             v={n: tensors[f"optim.v/{n}"] for n in names},
                             step=int(header["optimizer_step"]))
    tcfg = TrainConfig.from_dict(header["train"]) if header.get("train") else None
    return Checkpoint(model, opt, int(header.get("step", 0)), header, tcfg)


# -- token streams -------------------------------------------------------------


class TokenStream:
    """Token ids from a raw byte file or an ``SNKT`` pre-tokenized file."""

    def __init__(self, tokens: np.ndarray, vocab_size: int, source: str = "array"):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
            raise InputError(f"token id out of range [0, {vocab_size}) in {source}")
        self.tokens = tokens
        self.vocab_size = vocab_size
        self.source = source
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def open(cls, path) -> "TokenStream":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] == TOKEN_MAGIC:
            if len(raw) < 8 or (len(raw) - 8) % 4:
                raise FormatError(f"{path}: pre-tokenized file length {len(raw)} is not 8 + 4k")
            (vocab,) = struct.unpack_from("<I", raw, 4)
            ids = np.frombuffer(raw, dtype="<u4", offset=8).copy()
            return cls(ids, vocab, str(path))
        return cls(np.frombuffer(raw, dtype=np.uint8).astype(np.uint16), BYTE_VOCAB, str(path))

    def next_block(self, n: int) -> np.ndarray:
        """Next ``n`` ids in order, wrapping at the end of the stream."""
        if n > len(self.tokens):
            raise InputError(f"block of {n} requested from a stream of {len(self.tokens)} tokens")
        idx = (self.cursor + np.arange(n)) % len(self.tokens)
        self.cursor = (self.cursor + n) % len(self.tokens)
        return self.tokens[idx]


def write_token_file(path, ids, vocab_size: int):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InputError("token id out of range for declared vocabulary")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<I", vocab_size))
        fh.write(ids.astype("<u4").tobytes())


# -- reports -----------------------------------------------------------------------

REPORT_COLUMNS = ["metric", "layer", "head", "position", "dimension", "value", "n"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(int(v))


def _row(r) -> list[str]:
    return [r.metric] + [_fmt(getattr(r, c)) for c in REPORT_COLUMNS[1:]]


def _open_out(path):
    if str(path) == "-":
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", newline="")


def emit_report(records: Iterable, fmt: str, path):
    """Stream MetricRecords to CSV or JSON without materialising them."""
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise InputError(f"unknown report format {fmt!r}")
    with _open_out(path) as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in records:
                w.writerow(_row(r))
            return
        fh.write("[")
        first = True
        for r in records:
            vals = _row(r)
            parts = [f'"metric": {json.dumps(vals[0])}']
            for col, v in zip(REPORT_COLUMNS[1:], vals[1:]):
                if v == "":
                    parts.append(f'"{col}": null')
                else:
                    if col == "value" and not math.isfinite(float(v)):
                        raise InputError(f"non-finite metric value in {r.metric}")
                    parts.append(f'"{col}": {v}')
            fh.write(("\n" if first else ",\n") + "{" + ", ".join(parts) + "}")
            first = False
        fh.write("\n]\n" if not first else "]\n")


def read_report(path) -> list[dict]:
    """Load a report written by :func:`emit_report` (format from the extension)."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (None if r[k] == "" else (r[k] if k == "metric" else
                                                      float(r[k]) if k == "value" else int(r[k])))
                        for k in REPORT_COLUMNS})
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
