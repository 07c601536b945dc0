"""Model architecture and the flat, path-addressed parameter collection."""

from dataclasses import dataclass

import numpy as np

from . import rng as _rng

N_FEATURES = 3


@dataclass(frozen=True)
class Architecture:
    d_h: int = 128
    n_layers: int = 3
    n_heads: int = 8
    clip: float = 10.0

    def __post_init__(self):
        if self.d_h <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ValueError("d_h, n_layers and n_heads must be positive")
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if not self.clip > 0:
            raise ValueError("clip constant must be positive")

    @property
    def d_k(self):
        return self.d_h // self.n_heads

    @property
    def d_v(self):
        return self.d_h // self.n_heads

    @property
    def d_ff(self):
        return 4 * self.d_h

    def shapes(self):
        """Ordered mapping ``path -> shape`` of every learnable tensor."""
        d, m, dk, dv, dff = self.d_h, self.n_heads, self.d_k, self.d_v, self.d_ff
        out = {
            "encoder.init.W": (d, N_FEATURES),
            "encoder.init.b": (d,),
            "encoder.init.W0": (d, N_FEATURES),
            "encoder.init.b0": (d,),
        }
        for layer in range(self.n_layers):
            p = f"encoder.layers.{layer}."
            out[p + "W_Q"] = (m, dk, d)
            out[p + "W_K"] = (m, dk, d)
            out[p + "W_V"] = (m, dv, d)
            out[p + "W_O"] = (m, d, dv)
            out[p + "ff.W0"] = (dff, d)
            out[p + "ff.b0"] = (dff,)
            out[p + "ff.W1"] = (d, dff)
            out[p + "ff.b1"] = (d,)
        out["decoder.glimpse.W_Q"] = (m, dk, 2 * d + 1)
        out["decoder.glimpse.W_K"] = (m, dk, d)
        out["decoder.glimpse.W_V"] = (m, dv, d)
        out["decoder.glimpse.W_O"] = (m, d, dv)
        out["decoder.output.W_Q"] = (dk, d)
        out["decoder.output.W_K"] = (dk, d)
        return out


def _fan_in(path, shape):
    # bias vectors take the fan-in of the matrix they are added after
    if path.endswith("init.b") or path.endswith("init.b0"):
        return N_FEATURES
    if len(shape) == 1:
        return None
    return shape[-1]


class ModelParams:
    """All learnable tensors keyed by stable dotted paths, in float64."""

    def __init__(self, arch, tensors):
        self.arch = arch
        shapes = arch.shapes()
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ValueError(f"parameter paths mismatch; missing={missing} extra={extra}")
        self.tensors = {}
        for path, shape in shapes.items():
            arr = np.asarray(tensors[path], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{path}: expected shape {shape}, got {arr.shape}")
            self.tensors[path] = arr

    @classmethod
    def initialize(cls, arch, seed):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor."""
        gen = _rng.stream(seed, _rng.INIT)
        tensors = {}
        shapes = arch.shapes()
        for path, shape in shapes.items():
            fan = _fan_in(path, shape)
            if fan is None:
                # FF biases: fan-in of the preceding matrix
                fan = shapes[path[:-2] + "W" + path[-1]][-1]
            bound = 1.0 / np.sqrt(fan)
            tensors[path] = gen.uniform(-bound, bound, size=shape)
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch):
        return cls(arch, {p: np.zeros(s) for p, s in arch.shapes().items()})

    def __getitem__(self, path):
        return self.tensors[path]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def paths(self):
        return list(self.tensors)

    @property
    def size(self):
        return sum(a.size for a in self.tensors.values())

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}")
        tensors, pos = {}, 0
        for path, arr in self.tensors.items():
            tensors[path] = flat[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return ModelParams(self.arch, tensors)

    def copy(self):
        return ModelParams(self.arch, {p: a.copy() for p, a in self.tensors.items()})

    def zeros_like(self):
        return ModelParams(self.arch, {p: np.zeros_like(a) for p, a in self.tensors.items()})

    def as_float32(self):
        """Copy with every tensor rounded through float32 (checkpoint precision)."""
        return ModelParams(
            self.arch,
            {p: a.astype(np.float32).astype(np.float64) for p, a in self.tensors.items()},
        )

    def locate(self, flat_index):
        """``(path, multi-index)`` of a flat coordinate."""
        pos = int(flat_index)
        for path, arr in self.tensors.items():
            if pos < arr.size:
                return path, np.unravel_index(pos, arr.shape)
            pos -= arr.size
        raise IndexError(flat_index)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(a, other.tensors[p]) for p, a in self.tensors.items()
        )

    def __repr__(self):
        return f"ModelParams({self.arch}, size={self.size})"


# GradientSet shares the container: same paths, values are derivatives.
GradientSet = ModelParams
