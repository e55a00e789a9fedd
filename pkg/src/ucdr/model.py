"""MLP backbone with a mixture-prediction head and a semantic-embedding head.

Both heads read the backbone output ``g``: the mixture head produces logits
over the training classes, the embedding head the m-dimensional retrieval
feature ``f``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MAGIC = b"SNMP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    widths: tuple
    num_classes: int
    latent_dim: int

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if min((self.input_dim, self.num_classes, self.latent_dim) + self.widths) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")

    @property
    def backbone_dim(self) -> int:
        return self.widths[-1] if self.widths else self.input_dim

    def layer_shapes(self) -> "OrderedDict[str, tuple]":
        shapes = OrderedDict()
        fan_in = self.input_dim
        for i, w in enumerate(self.widths):
            shapes[f"bb{i}.W"] = (w, fan_in)
            shapes[f"bb{i}.b"] = (w,)
            fan_in = w
        shapes["mp.W"] = (self.num_classes, fan_in)
        shapes["mp.b"] = (self.num_classes,)
        shapes["sn.W"] = (self.latent_dim, fan_in)
        shapes["sn.b"] = (self.latent_dim,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes().values())


@dataclass(frozen=True, eq=False)
class SnMpModel:
    dims: ModelDims
    params: ad.ParamStore
    class_ids: tuple = ()

    def __post_init__(self):
        expected = self.dims.layer_shapes()
        if list(expected.items()) != list(self.params.shapes.items()):
            raise ValueError("parameter shapes do not match the model dimensions")
        ids = tuple(int(c) for c in self.class_ids) or tuple(range(self.dims.num_classes))
        if len(ids) != self.dims.num_classes:
            raise ValueError("class_ids must name every mixture-prediction output")
        object.__setattr__(self, "class_ids", ids)

    def with_params(self, params: ad.ParamStore) -> "SnMpModel":
        return SnMpModel(self.dims, params, self.class_ids)

    def __eq__(self, other):
        return (
            isinstance(other, SnMpModel)
            and self.dims == other.dims
            and self.class_ids == other.class_ids
            and self.params == other.params
        )


def init(dims: ModelDims, seed: int, class_ids=()) -> SnMpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, shape in dims.layer_shapes().items():
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return SnMpModel(dims, ad.ParamStore(arrays), class_ids)


def forward_vars(dims: ModelDims, p, x):
    """Differentiable forward pass over tape variables ``p``; returns ``(g, logits, f)``."""
    h = x
    for i in range(len(dims.widths)):
        h = ad.relu(ad.affine(h, p[f"bb{i}.W"], p[f"bb{i}.b"]))
    logits = ad.affine(h, p["mp.W"], p["mp.b"])
    f = ad.affine(h, p["sn.W"], p["sn.b"])
    return h, logits, f


def forward(model: SnMpModel, x):
    """Numeric forward pass; ``x`` is one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dims.input_dim:
        raise ValueError(f"input length {x.shape[-1]} != model input_dim {model.dims.input_dim}")
    tape = ad.Tape()
    p = {name: tape.const(v) for name, v in model.params.items()}
    g, logits, f = forward_vars(model.dims, p, tape.const(x))
    return g.value, logits.value, f.value


def embed(model: SnMpModel, x) -> np.ndarray:
    return forward(model, x)[2]


# --- checkpoint files -------------------------------------------------------
#
# layout (little-endian):
#   b"SNMP"  u16 version  u8 has_state
#   u32 input_dim  u32 n_widths  u32*n_widths  u32 num_classes  u32 latent_dim
#   i64*num_classes class ids
#   f64*param_count parameters in declared order
#   if has_state: f64*param_count velocity, i64 epoch, i64 best_epoch,
#                 f64 best_val_map, u32 n, n bytes of rng state (JSON)


def dump_bytes(model: SnMpModel, state=None) -> bytes:
    d = model.dims
    out = [MAGIC, struct.pack("<HB", FORMAT_VERSION, state is not None)]
    out.append(struct.pack("<II", d.input_dim, len(d.widths)))
    out.append(struct.pack(f"<{len(d.widths)}I", *d.widths))
    out.append(struct.pack("<II", d.num_classes, d.latent_dim))
    out.append(np.asarray(model.class_ids, dtype="<i8").tobytes())
    out.append(model.params.flat().astype("<f8").tobytes())
    if state is not None:
        velocity, epoch, best_epoch, best_val, rng_blob = state
        velocity = np.asarray(velocity, dtype="<f8")
        if velocity.shape != (d.param_count(),):
            raise ValueError("velocity length must equal the parameter count")
        out.append(velocity.tobytes())
        out.append(struct.pack("<qqd", epoch, best_epoch, best_val))
        out.append(struct.pack("<I", len(rng_blob)) + rng_blob)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint: unexpected end of file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, n):
        return np.frombuffer(self.take(8 * n), dtype=dtype).astype(np.float64 if dtype == "<f8" else np.int64)


def load_bytes(data: bytes):
    """Inverse of :func:`dump_bytes`: returns ``(model, state or None)``."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, has_state = r.unpack("<HB")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_dim, n_widths = r.unpack("<II")
    widths = r.unpack(f"<{n_widths}I")
    num_classes, latent_dim = r.unpack("<II")
    dims = ModelDims(input_dim, widths, num_classes, latent_dim)
    class_ids = tuple(int(c) for c in r.array("<i8", num_classes))
    flat = r.array("<f8", dims.param_count())
    shapes = dims.layer_shapes()
    template = ad.ParamStore(OrderedDict((k, np.zeros(s)) for k, s in shapes.items()))
    model = SnMpModel(dims, template.with_flat(flat), class_ids)
    state = None
    if has_state:
        velocity = r.array("<f8", dims.param_count())
        epoch, best_epoch, best_val = r.unpack("<qqd")
        (n,) = r.unpack("<I")
        state = (velocity, epoch, best_epoch, best_val, r.take(n))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model, state


def save_model(model: SnMpModel, path):
    with open(path, "wb") as fh:
        fh.write(dump_bytes(model))


def load_model(path) -> SnMpModel:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())[0]
