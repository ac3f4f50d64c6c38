"""Small deterministic NN building blocks: activations, MLP stacks, named
weight sets, and a submanifold sparse 3D convolution."""

import json
import math

import numpy as np
from scipy.special import erf

from . import accel, tensorio

LAYER_NORM_EPS = 1e-5
SPEC_ENTRY = "spec"  # archive entry declaring every weight name and shape

# Coordinates are packed into one int64 key (21 bits per axis) for sorted
# binary-search neighbor lookups.
_COORD_BITS = 20
_COORD_OFF = 1 << _COORD_BITS


class WeightError(ValueError):
    pass


class MissingWeightError(WeightError):
    pass


class WeightShapeError(WeightError):
    pass


def sigmoid(x):
    """Numerically stable logistic function; never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(x, axis=-1):
    """Shift-invariant softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def gelu(x):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    return out if out.ndim else float(out)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then apply the learned affine."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    return normed * np.asarray(gamma, dtype=np.float64) + np.asarray(beta, dtype=np.float64)


def layernorm_gelu(x, gamma, beta, eps=LAYER_NORM_EPS):
    return gelu(layer_norm(x, gamma, beta, eps))


class WeightSet:
    """Named parameter tensors addressed as ``"<block>/<layer>/{W,b}"``."""

    def __init__(self, entries: dict[str, np.ndarray]):
        self._entries = {}
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise WeightError(f"weight {name!r} contains non-finite values")
            self._entries[name] = arr

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> np.ndarray:
        if name not in self._entries:
            raise MissingWeightError(f"missing weight {name!r}")
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def require(self, name, shape=None) -> np.ndarray:
        arr = self[name]
        if shape is not None and arr.shape != tuple(shape):
            raise WeightShapeError(
                f"weight {name!r} has shape {arr.shape}, expected {tuple(shape)}"
            )
        return arr


def save_weight_set(path, weights: WeightSet) -> None:
    """Write weights plus a shape-declaring ``spec`` entry for fail-fast loads."""
    entries = {name: weights[name] for name in weights.names()}
    declared = {name: list(arr.shape) for name, arr in entries.items()}
    spec_text = json.dumps({"entries": declared}, sort_keys=True)
    entries[SPEC_ENTRY] = np.frombuffer(spec_text.encode("utf-8"), dtype=np.uint8).copy()
    tensorio.write_archive(path, entries)


def load_weight_set(path) -> WeightSet:
    """Load and validate a weight archive against its ``spec`` entry."""
    raw = tensorio.read_archive(path)
    if SPEC_ENTRY not in raw:
        raise WeightError(f"weight archive {path} lacks the {SPEC_ENTRY!r} entry")
    try:
        spec = json.loads(bytes(raw.pop(SPEC_ENTRY)).decode("utf-8"))
        declared = {k: tuple(v) for k, v in spec["entries"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightError(f"malformed {SPEC_ENTRY!r} entry: {exc}") from exc
    actual = {name: arr.shape for name, arr in raw.items()}
    for name, shape in declared.items():
        if name not in actual:
            raise MissingWeightError(f"declared weight {name!r} missing from archive")
        if actual[name] != shape:
            raise WeightShapeError(
                f"weight {name!r} has shape {actual[name]}, declared {shape}"
            )
    extras = set(actual) - set(declared)
    if extras:
        raise WeightError(f"undeclared archive entries: {sorted(extras)}")
    return WeightSet(raw)


def mlp_forward(weights: WeightSet, name: str, x: np.ndarray) -> np.ndarray:
    """Run the linear stack ``name/0 .. name/L-1`` with GELU between layers.

    Accepts a single vector or a batch [N, F]; the last layer has no
    activation.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = np.atleast_2d(x)
    i = 0
    while f"{name}/{i}/W" in weights:
        w = weights[f"{name}/{i}/W"]
        b = weights[f"{name}/{i}/b"]
        if out.shape[1] != w.shape[0]:
            raise WeightShapeError(
                f"{name}/{i}/W expects {w.shape[0]} inputs, got {out.shape[1]}"
            )
        if i > 0:
            out = gelu(out)
        out = out @ w + b
        i += 1
    if i == 0:
        raise MissingWeightError(f"no layers found for MLP stack {name!r}")
    return out[0] if single else out


def finite_diff_grad(f, p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        stepped = p.copy()
        stepped[i] = p[i] + eps
        hi = f(stepped)
        stepped[i] = p[i] - eps
        lo = f(stepped)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


# --------------------------------------------------------------------------
# Submanifold sparse 3D convolution


class SparseGrid:
    """Occupied integer voxel coordinates with one feature vector each."""

    __slots__ = ("coords", "features")

    def __init__(self, coords: np.ndarray, features: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be [M, 3], got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError("features must be [M, F] aligned with coords")
        keys = pack_coords(coords)
        if np.unique(keys).size != keys.size:
            raise ValueError("voxel coordinates must be unique")
        self.coords = coords
        self.features = features

    def __len__(self):
        return self.coords.shape[0]


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack [M, 3] int coords into sortable int64 keys (x major, then y, z)."""
    coords = np.asarray(coords, dtype=np.int64)
    if np.any(np.abs(coords) >= _COORD_OFF):
        raise ValueError(f"voxel coordinates must satisfy |c| < 2^{_COORD_BITS}")
    x = coords[..., 0] + _COORD_OFF
    y = coords[..., 1] + _COORD_OFF
    z = coords[..., 2] + _COORD_OFF
    return (x << (2 * (_COORD_BITS + 1))) | (y << (_COORD_BITS + 1)) | z


def submanifold_conv3d(grid: SparseGrid, kernel: np.ndarray, bias=None) -> SparseGrid:
    """Sparse 3D convolution that preserves the occupancy pattern.

    Each output voxel sums ``features[neighbor] @ kernel[offset]`` over the
    occupied neighbors inside the k^3 window centered on it; unoccupied
    positions contribute nothing and never become occupied.  Offsets are
    accumulated in a fixed z-major order so results are deterministic.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 5 or not (kernel.shape[0] == kernel.shape[1] == kernel.shape[2]):
        raise ValueError(f"kernel must be [k, k, k, Fin, Fout], got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if len(grid) == 0:
        raise ValueError("grid must be non-empty")
    fin = grid.features.shape[1]
    if kernel.shape[3] != fin:
        raise ValueError(f"kernel expects {kernel.shape[3]} input features, grid has {fin}")
    fout = kernel.shape[4]
    if bias is None:
        bias = np.zeros(fout)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (fout,):
        raise ValueError(f"bias must be [{fout}], got {bias.shape}")

    keys = pack_coords(grid.coords)
    order = np.argsort(keys)
    sorted_keys = keys[order]

    if accel.mode() == "numba":
        from . import _numba_impl

        out = _numba_impl.sparse_conv(
            np.ascontiguousarray(grid.coords),
            np.ascontiguousarray(grid.features),
            np.ascontiguousarray(sorted_keys),
            np.ascontiguousarray(order),
            np.ascontiguousarray(kernel),
            np.ascontiguousarray(bias),
            _COORD_BITS,
        )
    else:
        out = _sparse_conv_np(grid, sorted_keys, order, kernel, bias)
    return SparseGrid(grid.coords, out)


def _sparse_conv_np(grid, sorted_keys, order, kernel, bias):
    m = len(grid)
    k = kernel.shape[0]
    h = k // 2
    out = np.tile(bias, (m, 1))
    # z-major window order: the z offset varies slowest.
    for iz in range(k):
        for iy in range(k):
            for ix in range(k):
                off = np.array([ix - h, iy - h, iz - h], dtype=np.int64)
                nkeys = pack_coords(grid.coords + off)
                pos = np.searchsorted(sorted_keys, nkeys)
                pos_cl = np.minimum(pos, m - 1)
                hit = sorted_keys[pos_cl] == nkeys
                src = order[pos_cl[hit]]
                out[hit] += grid.features[src] @ kernel[ix, iy, iz]
    return out


# --------------------------------------------------------------------------
# Pipeline weight layout

MLP_HIDDEN = 64  # default hidden width of every 2-layer MLP stack
CONV_KERNEL = 5  # refinement convolution window


def _mlp_dims(fin, fout, hidden=MLP_HIDDEN):
    return [fin, hidden, fout]


def pipeline_layout(feature_dim=32, num_categories=12, num_submodules=2, hidden=MLP_HIDDEN):
    """Name -> shape map for the full lifting/refinement/detection stack."""
    layout: dict[str, tuple] = {}

    def add_mlp(name, fin, fout):
        dims = _mlp_dims(fin, fout, hidden)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layout[f"{name}/{i}/W"] = (a, b)
            layout[f"{name}/{i}/b"] = (b,)

    f, k = feature_dim, num_categories
    add_mlp("lift_scale", f, 3)
    add_mlp("lift_rot", f, 3)
    add_mlp("lift_opacity", f, 1)
    add_mlp("lift_category", f, k)
    for i in range(num_submodules):
        p = f"opt{i}"
        layout[f"{p}/sem_conv0/W"] = (CONV_KERNEL,) * 3 + (f, f)
        layout[f"{p}/sem_conv0/b"] = (f,)
        layout[f"{p}/sem_ln0/W"] = (f,)
        layout[f"{p}/sem_ln0/b"] = (f,)
        layout[f"{p}/sem_conv1/W"] = (CONV_KERNEL,) * 3 + (f, f)
        layout[f"{p}/sem_conv1/b"] = (f,)
        layout[f"{p}/sem_ln1/W"] = (f,)
        layout[f"{p}/sem_ln1/b"] = (f,)
        layout[f"{p}/sem_head/W"] = (1, 1, 1, f, k)
        layout[f"{p}/sem_head/b"] = (k,)
        add_mlp(f"{p}/center", f, 3)
        add_mlp(f"{p}/cov", f, 6)
    add_mlp("head", f, 9)
    return layout


def pipeline_weights(
    feature_dim=32,
    num_categories=12,
    num_submodules=2,
    hidden=MLP_HIDDEN,
    init="random",
    seed=0,
) -> WeightSet:
    """Build a complete WeightSet; ``init`` is "random" or "zero".

    Layer-norm scales are always 1 (identity affine) so zero-init still
    propagates signal shape.
    """
    layout = pipeline_layout(feature_dim, num_categories, num_submodules, hidden)
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in layout.items():
        if name.endswith("ln0/W") or name.endswith("ln1/W"):
            entries[name] = np.ones(shape)
        elif name.endswith("/b") or init == "zero":
            entries[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            entries[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
    return WeightSet(entries)
