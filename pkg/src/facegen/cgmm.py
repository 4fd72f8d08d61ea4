"""Per-attribute diagonal Gaussians over layer activations, mixed by learned weights.

Each attribute j gets a Gaussian N(mu_j, diag(var_j)) fitted to the layer-l
activations of images that carry it.  A target activation for an attribute
set C is the weighted average (1/|C|) * sum_{j in C} w_j z_j, where z_j is
either mu_j ("mean" mode) or a draw from the Gaussian ("sample" mode).  The
weights w are fitted by ridge-regularised least squares against the actual
activations of labelled images.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import forward
from .tensor import read_blob, rng, write_blob

VAR_FLOOR = 1e-6
STATS_MAGIC = b"CGS1"
STATS_VERSION = 1


class CgmmError(ValueError):
    pass


class WeightDivergenceError(RuntimeError):
    pass


@dataclass
class AttributeGaussian:
    mu: np.ndarray
    var: np.ndarray
    count: int

    @property
    def usable(self) -> bool:
        return self.count >= 2


@dataclass
class CgmmModel:
    layer_id: int
    attribute_names: list[str]
    gaussians: list[AttributeGaussian]
    weights: np.ndarray = None
    lam: float = 1e-5

    def __post_init__(self):
        if len(self.gaussians) != len(self.attribute_names):
            raise CgmmError("need exactly one Gaussian per attribute")
        if self.weights is None:
            self.weights = np.ones(len(self.gaussians))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.gaussians),):
            raise CgmmError("need exactly one weight per attribute")

    @property
    def dim(self) -> int:
        return self.gaussians[0].mu.size

    @property
    def means(self) -> np.ndarray:
        """(attributes, units) matrix of means; unusable rows are zero."""
        return np.stack([g.mu.ravel() for g in self.gaussians])

    def with_weights(self, weights) -> "CgmmModel":
        return replace(self, weights=np.asarray(weights, dtype=np.float64).copy())


def collect_activations(spec, params, dataset, indices, layer: int, batch_size: int = 1) -> np.ndarray:
    """Eval-mode layer outputs for ``dataset.images[indices]``, one flat row per image.

    Images go through one at a time by default.  Batched BLAS products can
    differ in the last bit depending on a row's position, and per-image
    passes keep duplicate images bit-identical.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise CgmmError("no images to collect activations from")
    if idx.min() < 0 or idx.max() >= len(dataset):
        raise CgmmError("image index out of range")
    spec.output_shape(layer)
    rows = []
    for start in range(0, idx.size, batch_size):
        tr = forward(spec, params, dataset.images[idx[start:start + batch_size]], mode="eval", upto=layer)
        act = tr.input if layer == -1 else tr.activations[layer]
        rows.append(act.reshape(act.shape[0], -1))
    return np.concatenate(rows)


def fit_gaussian(activations) -> AttributeGaussian:
    """Sample mean and unbiased per-unit variance, floored at ``VAR_FLOOR``."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise CgmmError("need at least two activation vectors")
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).sum(axis=0) / (x.shape[0] - 1)
    return AttributeGaussian(mu, np.maximum(var, VAR_FLOOR), x.shape[0])


def unusable_gaussian(dim: int, count: int = 0) -> AttributeGaussian:
    return AttributeGaussian(np.zeros(dim), np.full(dim, VAR_FLOOR), count)


def sample_target(model: CgmmModel, attributes, mode: str = "mean", seed: int = 0) -> np.ndarray:
    """Target activation (1/|C|) sum_j w_j z_j over the attribute indices in C."""
    attrs = list(attributes)
    if not attrs:
        raise CgmmError("attribute set is empty")
    if mode not in ("mean", "sample"):
        raise CgmmError(f"mode must be 'mean' or 'sample', got {mode!r}")
    for a in attrs:
        if not 0 <= a < len(model.gaussians):
            raise CgmmError(f"attribute index {a} out of range")
        if not model.gaussians[a].usable:
            raise CgmmError(f"attribute {model.attribute_names[a]!r} has too few positive images to be used")
    gen = rng(seed)
    s = np.zeros(model.dim)
    for a in attrs:
        g = model.gaussians[a]
        z = g.mu if mode == "mean" else gen.normal(g.mu, np.sqrt(g.var))
        s += model.weights[a] * z.ravel()
    return s / len(attrs)


# --- weight learning -------------------------------------------------------

def _design(model: CgmmModel, attribute_sets) -> np.ndarray:
    """Indicator matrix A with A[i, j] = 1/|C_i| if attribute j is in C_i."""
    A = np.zeros((len(attribute_sets), len(model.gaussians)))
    for i, c in enumerate(attribute_sets):
        if not c:
            raise CgmmError(f"image {i} has an empty attribute set")
        for j in c:
            A[i, j] = 1.0
        A[i] /= len(set(c))
    return A


def _check(model, acts, attribute_sets):
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] != model.dim:
        raise CgmmError(f"activations must be (images, {model.dim})")
    if acts.shape[0] != len(attribute_sets):
        raise CgmmError("one attribute set per image required")
    return acts


def weight_objective(model: CgmmModel, activations, attribute_sets, weights=None) -> float:
    """(1/|D|) sum_i ||phi_i - Phi_i||^2 + lam ||w||^2 with Phi_i = sum_j A_ij w_j mu_j."""
    acts = _check(model, activations, attribute_sets)
    w = model.weights if weights is None else np.asarray(weights, dtype=np.float64)
    A = _design(model, attribute_sets)
    resid = acts - (A * w) @ model.means
    return float((resid**2).sum() / acts.shape[0] + model.lam * (w @ w))


def weight_gradient(model: CgmmModel, activations, attribute_sets, weights=None) -> np.ndarray:
    acts = _check(model, activations, attribute_sets)
    w = model.weights if weights is None else np.asarray(weights, dtype=np.float64)
    A = _design(model, attribute_sets)
    M = model.means
    resid = (A * w) @ M - acts  # Phi_i - phi_i
    return 2.0 / acts.shape[0] * ((resid @ M.T) * A).sum(axis=0) + 2.0 * model.lam * w


@dataclass
class WeightFit:
    weights: np.ndarray
    objective: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)


def learn_weights(
    model: CgmmModel,
    activations,
    attribute_sets,
    lr: float = 1e-3,
    iters: int = 1000,
    halving: bool = True,
    max_halvings: int = 60,
) -> WeightFit:
    """Full-batch gradient descent on the weight objective.

    With ``halving`` a step that raises the objective is retried at half the
    step size, and the reduced size carries over, so the trace never
    increases.  Without it, plain descent runs at ``lr`` and aborts once the
    objective passes ten times its starting value.  The trace holds the value
    before the first step and after every accepted step.
    """
    if lr <= 0:
        raise CgmmError("lr must be positive")
    if iters < 0:
        raise CgmmError("iters must be >= 0")
    acts = _check(model, activations, attribute_sets)
    w = model.weights.copy()
    f = f0 = weight_objective(model, acts, attribute_sets, w)
    fit = WeightFit(w, [f], [lr])
    step = lr
    for it in range(iters):
        g = weight_gradient(model, acts, attribute_sets, w)
        trial = w - step * g
        f_new = weight_objective(model, acts, attribute_sets, trial)
        if halving:
            tries = 0
            while not (np.isfinite(f_new) and f_new <= f):
                tries += 1
                if tries > max_halvings:
                    fit.weights = w
                    return fit  # no descent left at this precision
                step *= 0.5
                trial = w - step * g
                f_new = weight_objective(model, acts, attribute_sets, trial)
        elif not np.isfinite(f_new) or f_new > 10 * f0:
            raise WeightDivergenceError(
                f"iteration {it}: objective {f_new:.4g} exceeds ten times its initial value {f0:.4g}; lower lr"
            )
        w, f = trial, f_new
        fit.objective.append(f)
        fit.step_sizes.append(step)
    fit.weights = w
    return fit


def closed_form_weights(model: CgmmModel, activations, attribute_sets) -> np.ndarray:
    """Exact ridge solution of the weight objective (reference for tests)."""
    acts = _check(model, activations, attribute_sets)
    A = _design(model, attribute_sets)
    M = model.means
    n = acts.shape[0]
    # Phi_i = sum_j A_ij mu_j w_j = B_i w with B_i = M.T * A_i
    G = (A.T @ A) * (M @ M.T)
    b = ((acts @ M.T) * A).sum(axis=0)
    return np.linalg.solve(G / n + model.lam * np.eye(len(b)), b / n)


# --- stats file ------------------------------------------------------------

def save_stats(model: CgmmModel) -> bytes:
    buf = io.BytesIO()
    buf.write(STATS_MAGIC)
    buf.write(struct.pack("<IiI", STATS_VERSION, model.layer_id, len(model.gaussians)))
    for name, g in zip(model.attribute_names, model.gaussians):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", g.count))
        write_blob(buf, g.mu)
        write_blob(buf, g.var)
    write_blob(buf, model.weights)
    buf.write(struct.pack("<d", model.lam))
    return buf.getvalue()


def load_stats(data: bytes) -> CgmmModel:
    buf = io.BytesIO(data)

    def read(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CgmmError("truncated stats file")
        return struct.unpack(fmt, raw)

    if buf.read(4) != STATS_MAGIC:
        raise CgmmError("not a CGS1 stats file")
    version, layer_id, count = read("<IiI")
    if version != STATS_VERSION:
        raise CgmmError(f"unsupported stats version {version}")
    names, gaussians = [], []
    for _ in range(count):
        (length,) = read("<I")
        raw = buf.read(length)
        if len(raw) != length:
            raise CgmmError("truncated stats file")
        names.append(raw.decode("utf-8"))
        (n,) = read("<I")
        mu, var = read_blob(buf), read_blob(buf)
        gaussians.append(AttributeGaussian(mu, var, n))
    weights = read_blob(buf)
    (lam,) = read("<d")
    return CgmmModel(layer_id, names, gaussians, weights, lam)
