"""Small numeric toolkit: softmax, SGD with global-norm clipping, gradient checks,
seeded RNG streams and the plain-text checkpoint format."""

from __future__ import annotations

import hashlib
import random

import numpy as np

CHECKPOINT_VERSION = 1


class NumericsError(ValueError):
    pass


def softmax(scores):
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise NumericsError("softmax of an empty score vector")
    if not np.all(np.isfinite(s)):
        raise NumericsError("softmax of non-finite scores")
    e = np.exp(s - s.max())
    return e / e.sum()


def cross_entropy(probs, gold: int) -> float:
    return -float(np.log(probs[gold]))


def argmax_first(values) -> int:
    """Index of the maximum, lowest index on ties."""
    return int(np.argmax(values))


class ParamStore:
    """Named float64 parameters with gradient accumulators of the same shape."""

    def __init__(self, params=None):
        self.params = {}
        self.grads = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def copy(self):
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def load_from(self, other):
        for name, value in other.params.items():
            self.params[name][...] = value

    def equal(self, other) -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(self.params[n], other.params[n]) for n in self.params))


def sgd_step(params: ParamStore, lr: float, clip: float) -> ParamStore:
    """p <- p - lr * g after rescaling all gradients to global norm <= clip."""
    if lr < 0 or clip <= 0:
        raise NumericsError("lr must be >= 0 and clip > 0")
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
    norm = params.grad_norm()
    scale = clip / norm if norm > clip else 1.0
    for name, p in params.params.items():
        p -= (lr * scale) * params.grads[name]
    params.zero_grad()
    return params


def grad_check(loss_fn, params: ParamStore, epsilon=1e-5, n_coords=200, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn()` evaluates the loss at the current parameter values and returns
    (loss, grads) with grads a name -> array mapping.  Half of the sampled
    coordinates are drawn from entries with a non-zero analytic gradient.
    """
    loss0, analytic = loss_fn()
    loss1, _ = loss_fn()
    if loss0 != loss1:
        raise NumericsError("loss function is not deterministic")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    coords = []
    names = params.names()
    sizes = [params[n].size for n in names]
    nonzero = [(n, int(i)) for n in names for i in np.flatnonzero(analytic[n])]
    if nonzero:
        pick = rng.choice(len(nonzero), size=min(len(nonzero), n_coords // 2), replace=False)
        coords += [nonzero[i] for i in pick]
    total = sum(sizes)
    flat = rng.choice(total, size=min(total, n_coords - len(coords)), replace=False)
    offsets = np.cumsum([0] + sizes)
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((names[k], int(f - offsets[k])))

    worst = 0.0
    for name, i in coords:
        view = params[name].reshape(-1)
        orig = view[i]
        view[i] = orig + epsilon
        fp, _ = loss_fn()
        view[i] = orig - epsilon
        fm, _ = loss_fn()
        view[i] = orig
        num = (fp - fm) / (2 * epsilon)
        ana = analytic[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


class RngStream:
    """Deterministic random source keyed by (seed, stream id, draw index)."""

    def __init__(self, seed: int, stream: str = "main"):
        self.seed = int(seed)
        self.stream = str(stream)

    def key(self, index) -> str:
        return f"{self.seed}/{self.stream}/{index}"

    def python(self, index=0) -> random.Random:
        return random.Random(self.key(index))

    def numpy(self, index=0) -> np.random.Generator:
        digest = hashlib.sha256(self.key(index).encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def child(self, name) -> "RngStream":
        return RngStream(self.seed, f"{self.stream}.{name}")


def hashed_unit_vector(token: str, seed: int, d: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode()).digest()
    v = np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(d)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------- checkpoints

def write_checkpoint(path, params: ParamStore, meta=None):
    """Text checkpoint: header with names and shapes, then one row per line."""
    meta = dict(meta or {})
    lines = [f"asklearn-checkpoint {CHECKPOINT_VERSION}"]
    for k, v in meta.items():
        lines.append(f"meta {k} {v}")
    blocks = []
    for name in params.names():
        arr = params[name]
        mat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        lines.append(f"param {name} {mat.shape[0]} {mat.shape[1]} {arr.ndim}")
        blocks.append(mat)
    lines.append("end-header")
    for mat in blocks:
        for row in mat:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("asklearn-checkpoint "):
        raise NumericsError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise NumericsError(f"{path}: unsupported checkpoint version {version}")
    meta, shapes, i = {}, [], 1
    while lines[i] != "end-header":
        parts = lines[i].split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "param":
            shapes.append((parts[1], int(parts[2]), int(parts[3]), int(parts[4])))
        else:
            raise NumericsError(f"{path}: bad header line {i + 1}")
        i += 1
    i += 1
    params = ParamStore()
    for name, rows, cols, ndim in shapes:
        mat = np.array([[float(x) for x in lines[i + r].split(" ")] for r in range(rows)],
                       dtype=np.float64).reshape(rows, cols)
        i += rows
        params.add(name, mat if ndim > 1 else mat.reshape(-1))
    return params, meta
