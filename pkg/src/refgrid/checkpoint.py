"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes  b"RGIN"
    version u32      (currently 1)
    count   u32      number of named arrays
    arrays  count times:
        name_len u16, name utf-8,
        rank u8, rank * u32 extents,
        raw float32 data (row-major, little-endian)
    meta_len u32, meta utf-8: key = value lines (config snapshot plus
        checkpoint bookkeeping such as epoch, step, priors)

Save followed by load reproduces every array bitwise (data is stored as
float32 exactly as held in memory).  Loaders reject unknown versions.
"""

import io
import struct

import numpy as np

MAGIC = b"RGIN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or unsupported checkpoint data."""


def save_checkpoint(path, arrays, meta):
    """arrays: dict name -> ndarray (stored as float32); meta: dict of
    scalars serialized as key = value lines."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        # np.ascontiguousarray would promote 0-d arrays to 1-d; asarray with
        # an explicit order keeps the rank intact
        arr = np.asarray(arrays[name], dtype="<f4", order="C")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for ext in arr.shape:
            buf.write(struct.pack("<I", ext))
        buf.write(arr.tobytes())
    meta_b = _meta_to_text(meta).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (arrays dict, meta dict of strings)."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)

    def need(n):
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError("truncated checkpoint")
        return chunk

    if need(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version = struct.unpack("<I", need(4))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = struct.unpack("<I", need(4))[0]
    arrays = {}
    for _ in range(count):
        name_len = struct.unpack("<H", need(2))[0]
        name = need(name_len).decode("utf-8")
        rank = struct.unpack("<B", need(1))[0]
        shape = tuple(struct.unpack("<I", need(4))[0] for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        raw = need(n_items * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    meta_len = struct.unpack("<I", need(4))[0]
    meta = _meta_from_text(need(meta_len).decode("utf-8"))
    return arrays, meta


def _meta_to_text(meta):
    lines = []
    for key in sorted(meta):
        val = meta[key]
        if isinstance(val, (list, tuple, np.ndarray)):
            val = ",".join(repr(float(v)) for v in np.asarray(val).reshape(-1))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def _meta_from_text(text):
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# model-level helpers

def model_state(model, optimizer=None):
    """Collect parameter, buffer, and optimizer arrays for saving."""
    arrays = {}
    for name, p in model.parameters().items():
        arrays[f"param.{name}"] = p.data
    for name, b in model.buffers().items():
        arrays[f"buf.{name}"] = b
    if optimizer is not None:
        for name, (m, v) in optimizer.slots.items():
            arrays[f"opt.m.{name}"] = m
            arrays[f"opt.v.{name}"] = v
    return arrays


def load_model_state(model, arrays, optimizer=None):
    """Write saved arrays back into a constructed model (and optimizer)."""
    params = model.parameters()
    buffers = model.buffers()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        saved = arrays[key]
        if saved.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {saved.shape} vs {p.data.shape}")
        p.data = saved.astype(p.data.dtype)
    for name, b in buffers.items():
        key = f"buf.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing buffer {name}")
        b[...] = arrays[key]
    if optimizer is not None:
        for name in optimizer.slots:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk in arrays and vk in arrays:
                optimizer.slots[name] = (arrays[mk].astype(np.float32),
                                         arrays[vk].astype(np.float32))
