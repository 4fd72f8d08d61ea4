"""Mini-CNN with grouped softmax heads, written out by hand.

Images travel as NCHW float64 batches.  ``forward`` caches everything the
backward pass needs in a :class:`ForwardTrace`; ``backward`` and
``backward_from_layer`` walk the trunk in reverse.  Layer ``-1`` denotes the
input image itself, so an empty prefix of the trunk acts as an identity
feature map.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .tensor import read_blob, rng, write_blob

UNLABELED = -1
CHECKPOINT_MAGIC = b"CGN1"
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    pass


# --- layer specs -----------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_units: int


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5


LAYER_TYPES = {cls.__name__: cls for cls in (Conv, ReLU, MaxPool, Flatten, Dense, Dropout)}
PARAM_LAYERS = (Conv, Dense)


@dataclass(frozen=True)
class Head:
    group_id: str
    class_count: int


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    trunk: tuple = ()
    heads: tuple[Head, ...] = ()
    layer_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "layer_shapes", tuple(_infer_shapes(self)))
        groups = [h.group_id for h in self.heads]
        if len(set(groups)) != len(groups):
            raise NetworkError("each head must serve a distinct group")
        if any(h.class_count < 2 for h in self.heads):
            raise NetworkError("heads need at least two classes")

    @property
    def feature_shape(self):
        return self.layer_shapes[-1] if self.trunk else self.input_shape

    def output_shape(self, layer: int) -> tuple:
        if layer == -1:
            return self.input_shape
        if not 0 <= layer < len(self.trunk):
            raise NetworkError(f"layer {layer} outside trunk of length {len(self.trunk)}")
        return self.layer_shapes[layer]

    @property
    def param_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.trunk) if isinstance(layer, PARAM_LAYERS)]

    def to_text(self) -> str:
        """Canonical JSON form (sorted keys, no whitespace)."""
        doc = {
            "input_shape": list(self.input_shape),
            "trunk": [{"type": type(layer).__name__, **asdict(layer)} for layer in self.trunk],
            "heads": [asdict(h) for h in self.heads],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        trunk = []
        for entry in doc["trunk"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in LAYER_TYPES:
                raise NetworkError(f"unknown layer type {kind!r}")
            trunk.append(LAYER_TYPES[kind](**entry))
        heads = [Head(**h) for h in doc["heads"]]
        return cls(tuple(doc["input_shape"]), tuple(trunk), tuple(heads))


def _infer_shapes(spec: NetworkSpec) -> list[tuple]:
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise NetworkError(f"input shape must be (C, H, W), got {spec.input_shape}")
    shape = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.trunk):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise NetworkError(f"layer {i}: Conv needs a (C, H, W) input")
            if layer.kernel < 1 or layer.stride < 1 or layer.pad < 0 or layer.out_channels < 1:
                raise NetworkError(f"layer {i}: bad Conv parameters {layer}")
            ho = kernels.out_size(shape[1], layer.kernel, layer.stride, layer.pad)
            wo = kernels.out_size(shape[2], layer.kernel, layer.stride, layer.pad)
            shape = (layer.out_channels, ho, wo)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise NetworkError(f"layer {i}: MaxPool needs a (C, H, W) input")
            if layer.kernel < 1 or layer.stride < 1:
                raise NetworkError(f"layer {i}: bad MaxPool parameters {layer}")
            shape = (
                shape[0],
                kernels.out_size(shape[1], layer.kernel, layer.stride, 0),
                kernels.out_size(shape[2], layer.kernel, layer.stride, 0),
            )
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise NetworkError(f"layer {i}: Dense needs a flat input, insert Flatten")
            if layer.out_units < 1:
                raise NetworkError(f"layer {i}: bad Dense width")
            shape = (layer.out_units,)
        elif isinstance(layer, Dropout):
            if not 0 <= layer.p < 1:
                raise NetworkError(f"layer {i}: dropout p must be in [0, 1)")
        elif not isinstance(layer, ReLU):
            raise NetworkError(f"layer {i}: unknown layer {layer!r}")
        if min(shape) < 1:
            raise NetworkError(f"layer {i}: non-positive output shape {shape}")
        shapes.append(shape)
    return shapes


def default_spec(schema, image_size: int = 32, dropout: float = 0.25, dropout_everywhere: bool = False) -> NetworkSpec:
    """Desk-scale trunk; one head per schema group with a reserved unlabeled class.

    Dropout follows each Dense block by default; ``dropout_everywhere`` puts
    it after every layer as well.
    """
    blocks = [
        [Conv(16, 3, 1, 1), ReLU(), MaxPool(2, 2)],
        [Conv(32, 3, 1, 1), ReLU(), MaxPool(2, 2)],
        [Flatten()],
        [Dense(128), ReLU()],
        [Dense(64), ReLU()],
    ]
    trunk = []
    for block in blocks:
        trunk.extend(block)
        is_dense = isinstance(block[0], Dense)
        if dropout > 0 and (is_dense or (dropout_everywhere and not isinstance(block[0], Flatten))):
            trunk.append(Dropout(dropout))
    heads = [Head(g.name, len(g.labels) + 1) for g in schema.groups]
    return NetworkSpec((3, image_size, image_size), tuple(trunk), tuple(heads))


def layer_index(spec: NetworkSpec, name) -> int:
    """Resolve a trunk layer by index or by the names input, conv-5, fc-6, fc-7."""
    if isinstance(name, (int, np.integer)):
        spec.output_shape(int(name))
        return int(name)
    text = str(name).strip().lower()
    try:
        return layer_index(spec, int(text))
    except ValueError:
        pass
    convs = [i for i, layer in enumerate(spec.trunk) if isinstance(layer, Conv)]
    denses = [i for i, layer in enumerate(spec.trunk) if isinstance(layer, Dense)]
    table = {"input": -1}
    if convs:
        table["conv-5"] = convs[-1]
    if denses:
        table["fc-6"] = denses[0]
    if len(denses) > 1:
        table["fc-7"] = denses[1]
    if text not in table:
        raise NetworkError(f"unknown layer {name!r}; choose an index or one of {sorted(table)}")
    return table[text]


# --- parameters ------------------------------------------------------------

@dataclass
class Parameters:
    trunk: dict[int, tuple[np.ndarray, np.ndarray]]
    heads: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in canonical layer order."""
        out = []
        for i in sorted(self.trunk):
            w, b = self.trunk[i]
            out += [(f"trunk{i}.W", w), (f"trunk{i}.b", b)]
        for g, (w, b) in enumerate(self.heads):
            out += [(f"head{g}.W", w), (f"head{g}.b", b)]
        return out

    def copy(self) -> "Parameters":
        return Parameters(
            {i: (w.copy(), b.copy()) for i, (w, b) in self.trunk.items()},
            [(w.copy(), b.copy()) for w, b in self.heads],
        )


def init_params(spec: NetworkSpec, seed: int = 0) -> Parameters:
    """He-normal weights, zero biases."""
    gen = rng(seed)
    trunk = {}
    shape = spec.input_shape
    for i, layer in enumerate(spec.trunk):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel**2
            w = gen.normal(0, np.sqrt(2.0 / fan_in), (layer.out_channels, shape[0], layer.kernel, layer.kernel))
            trunk[i] = (w, np.zeros(layer.out_channels))
        elif isinstance(layer, Dense):
            w = gen.normal(0, np.sqrt(2.0 / shape[0]), (layer.out_units, shape[0]))
            trunk[i] = (w, np.zeros(layer.out_units))
        shape = spec.layer_shapes[i]
    feat = int(np.prod(spec.feature_shape))
    heads = [(gen.normal(0, np.sqrt(1.0 / feat), (h.class_count, feat)), np.zeros(h.class_count)) for h in spec.heads]
    return Parameters(trunk, heads)


def check_params(spec: NetworkSpec, params: Parameters) -> None:
    expected = init_shapes(spec)
    got = {name: a.shape for name, a in params.arrays()}
    if got != expected:
        raise NetworkError("parameters do not match the network spec")


def init_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    shapes = {}
    shape = spec.input_shape
    for i, layer in enumerate(spec.trunk):
        if isinstance(layer, Conv):
            shapes[f"trunk{i}.W"] = (layer.out_channels, shape[0], layer.kernel, layer.kernel)
            shapes[f"trunk{i}.b"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            shapes[f"trunk{i}.W"] = (layer.out_units, shape[0])
            shapes[f"trunk{i}.b"] = (layer.out_units,)
        shape = spec.layer_shapes[i]
    feat = int(np.prod(spec.feature_shape))
    for g, h in enumerate(spec.heads):
        shapes[f"head{g}.W"] = (h.class_count, feat)
        shapes[f"head{g}.b"] = (h.class_count,)
    return shapes


@dataclass(frozen=True)
class FreezeMask:
    """One flag per parameterized layer: trunk Conv/Dense layers in order, then heads."""

    flags: tuple[bool, ...]

    @classmethod
    def none(cls, spec: NetworkSpec) -> "FreezeMask":
        return cls((False,) * (len(spec.param_layers) + len(spec.heads)))

    @classmethod
    def below(cls, spec: NetworkSpec, layer: int) -> "FreezeMask":
        """Freeze every trunk parameter layer with index < ``layer``; heads stay trainable."""
        trunk = tuple(i < layer for i in spec.param_layers)
        return cls(trunk + (False,) * len(spec.heads))

    def check(self, spec: NetworkSpec) -> None:
        if len(self.flags) != len(spec.param_layers) + len(spec.heads):
            raise NetworkError("freeze mask length does not match the parameterized layer count")


# --- forward ---------------------------------------------------------------

@dataclass
class ForwardTrace:
    input: np.ndarray
    activations: list[np.ndarray]
    logits: list[np.ndarray]
    probs: list[np.ndarray]
    cache: dict
    mode: str
    batched: bool
    spec_text: str

    def activation(self, layer: int) -> np.ndarray:
        """Layer output; unbatched when the forward input was a single image."""
        a = self.input if layer == -1 else self.activations[layer]
        return a if self.batched else a[0]


def _as_batch(spec: NetworkSpec, image) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise NetworkError(f"image shape {x.shape[1:]} does not match network input {spec.input_shape}")
    if not np.all(np.isfinite(x)):
        raise NetworkError("non-finite input image")
    return x, batched


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(spec: NetworkSpec, params: Parameters, image, mode: str = "eval", seed: int = 0, upto: int | None = None) -> ForwardTrace:
    """Run the trunk (and heads unless ``upto`` stops early).

    Dropout is inverted: train mode zeroes units with probability p and
    scales survivors by 1/(1-p); eval mode is the identity.  Masks are drawn
    from the seeded generator in layer order.
    """
    if mode not in ("train", "eval"):
        raise NetworkError(f"mode must be 'train' or 'eval', got {mode!r}")
    x, batched = _as_batch(spec, image)
    last = len(spec.trunk) - 1 if upto is None else upto
    if last >= len(spec.trunk) or last < -1:
        raise NetworkError(f"layer {upto} outside trunk")
    gen = rng(seed) if mode == "train" else None
    acts, cache = [], {}
    h = x
    for i, layer in enumerate(spec.trunk[: last + 1]):
        if isinstance(layer, Conv):
            w, b = params.trunk[i]
            cols = kernels.im2col(h, layer.kernel, layer.stride, layer.pad)
            cache[i] = cols
            out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
            h = out.reshape((h.shape[0],) + spec.layer_shapes[i])
        elif isinstance(layer, ReLU):
            h = np.where(h > 0, h, 0.0)
        elif isinstance(layer, MaxPool):
            h, idx = kernels.maxpool_forward(h, layer.kernel, layer.stride)
            cache[i] = idx
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = params.trunk[i]
            h = h @ w.T + b
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.p > 0:
                mask = (gen.random(h.shape) >= layer.p) / (1.0 - layer.p)
                cache[i] = mask
                h = h * mask
            else:
                h = h.copy()
        acts.append(h)
    logits, probs = [], []
    if upto is None:
        feat = h.reshape(h.shape[0], -1)
        for w, b in params.heads:
            z = feat @ w.T + b
            logits.append(z)
            probs.append(softmax(z))
    return ForwardTrace(x, acts, logits, probs, cache, mode, batched, spec.to_text())


# --- loss ------------------------------------------------------------------

class LossResult(NamedTuple):
    total: float
    per_head: list[float]
    logit_grads: list[np.ndarray]


def multihead_loss(trace: ForwardTrace, group_labels) -> LossResult:
    """Cross-entropy averaged over every labeled (example, head) pair.

    ``group_labels`` has one row per example and one column per head; the
    entry ``UNLABELED`` removes that pair from both the loss and gradient.
    """
    labels = np.asarray(group_labels, dtype=np.int64)
    n = trace.input.shape[0]
    if labels.ndim == 1:
        labels = labels[None]
    if labels.shape != (n, len(trace.probs)):
        raise NetworkError(f"labels shape {labels.shape} does not match ({n}, {len(trace.probs)})")
    labeled = labels != UNLABELED
    count = int(labeled.sum())
    per_head, grads, total = [], [], 0.0
    for g, p in enumerate(trace.probs):
        col = labels[:, g]
        mask = labeled[:, g]
        if np.any((col < UNLABELED) | (col >= p.shape[1])):
            raise NetworkError(f"head {g}: label out of range for {p.shape[1]} classes")
        rows = np.nonzero(mask)[0]
        ce = -np.log(np.maximum(p[rows, col[rows]], 1e-300))
        per_head.append(float(ce.mean()) if rows.size else 0.0)
        total += float(ce.sum())
        grad = np.zeros_like(p)
        if count:
            grad[rows] = p[rows]
            grad[rows, col[rows]] -= 1.0
            grad /= count
        grads.append(grad)
    return LossResult(total / count if count else 0.0, per_head, grads)


def softmax_output_grad(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Map a gradient on softmax outputs to a gradient on logits."""
    return probs * (d_probs - (probs * d_probs).sum(axis=-1, keepdims=True))


# --- backward --------------------------------------------------------------

class Gradients(NamedTuple):
    params: Parameters
    input_grad: np.ndarray


def _check_trace(spec: NetworkSpec, trace: ForwardTrace) -> None:
    if trace.spec_text != spec.to_text():
        raise NetworkError("trace was produced by a different network spec")


def _backprop_trunk(spec, params, trace, start, d_out, param_grads, stop=-1):
    d = d_out
    for i in range(start, stop, -1):
        layer = spec.trunk[i]
        below = trace.input if i == 0 else trace.activations[i - 1]
        if isinstance(layer, Conv):
            w, _ = params.trunk[i]
            n = d.shape[0]
            dflat = d.reshape(n, layer.out_channels, -1)
            cols = trace.cache[i]
            if param_grads is not None:
                dw = np.tensordot(dflat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
                param_grads[i] = (dw, dflat.sum(axis=(0, 2)))
            dcols = np.matmul(w.reshape(w.shape[0], -1).T, dflat)
            d = kernels.col2im(dcols, below.shape, layer.kernel, layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            d = np.where(below > 0, d, 0.0)
        elif isinstance(layer, MaxPool):
            d = kernels.maxpool_backward(d, trace.cache[i], below.shape)
        elif isinstance(layer, Flatten):
            d = d.reshape(below.shape)
        elif isinstance(layer, Dense):
            w, _ = params.trunk[i]
            if param_grads is not None:
                param_grads[i] = (d.T @ below, d.sum(axis=0))
            d = d @ w
        elif isinstance(layer, Dropout):
            if i in trace.cache:
                d = d * trace.cache[i]
    return d


def backward(
    spec: NetworkSpec,
    params: Parameters,
    trace: ForwardTrace,
    loss_grads: Sequence[np.ndarray],
    freeze: FreezeMask | None = None,
    need_input_grad: bool = True,
) -> Gradients:
    """Gradients for every parameter and the input, given per-head logit gradients.

    With a ``freeze`` mask and ``need_input_grad=False`` the pass stops below
    the lowest unfrozen layer and frozen layers get zero gradients; this is
    only a shortcut, frozen layers still pass gradient through otherwise.
    """
    _check_trace(spec, trace)
    if len(trace.activations) != len(spec.trunk) or len(trace.logits) != len(spec.heads):
        raise NetworkError("trace does not cover the full network")
    if len(loss_grads) != len(spec.heads):
        raise NetworkError("need one logit gradient per head")
    n = trace.input.shape[0]
    feat = (trace.activations[-1] if spec.trunk else trace.input).reshape(n, -1)
    d_feat = np.zeros_like(feat)
    head_grads = []
    for (w, _), g in zip(params.heads, loss_grads):
        g = np.asarray(g, dtype=np.float64).reshape(n, -1)
        head_grads.append((g.T @ feat, g.sum(axis=0)))
        d_feat += g @ w
    trunk_grads: dict = {}
    stop = -1
    if freeze is not None and not need_input_grad:
        freeze.check(spec)
        live = [i for i, f in zip(spec.param_layers, freeze.flags) if not f]
        stop = (min(live) if live else len(spec.trunk)) - 1
    if spec.trunk:
        d = d_feat.reshape(trace.activations[-1].shape)
        d = _backprop_trunk(spec, params, trace, len(spec.trunk) - 1, d, trunk_grads, stop)
    else:
        d = d_feat.reshape(trace.input.shape)
    for i in spec.param_layers:
        if i not in trunk_grads:
            w, b = params.trunk[i]
            trunk_grads[i] = (np.zeros_like(w), np.zeros_like(b))
    if not need_input_grad:
        d = None
    elif not trace.batched:
        d = d[0]
    return Gradients(Parameters(trunk_grads, head_grads), d)


def backward_from_layer(spec: NetworkSpec, params: Parameters, trace: ForwardTrace, layer: int, d_phi) -> np.ndarray:
    """Push a gradient on layer ``layer``'s output down to the input image."""
    _check_trace(spec, trace)
    spec.output_shape(layer)
    if layer >= len(trace.activations):
        raise NetworkError(f"trace stops before layer {layer}")
    d = np.asarray(d_phi, dtype=np.float64)
    target = trace.input if layer == -1 else trace.activations[layer]
    if not trace.batched:
        d = d[None]
    if d.shape != target.shape:
        raise NetworkError(f"gradient shape {d.shape} does not match layer output {target.shape}")
    if layer >= 0:
        d = _backprop_trunk(spec, params, trace, layer, d, None)
    return d if trace.batched else d[0]


# --- optimisation ----------------------------------------------------------

def sgd_step(params: Parameters, grads: Parameters, lr: float, weight_decay: float, freeze: FreezeMask) -> Parameters:
    """Plain SGD with L2 weight decay.  Frozen layers keep their arrays untouched."""
    if lr < 0 or weight_decay < 0:
        raise NetworkError("lr and weight_decay must be non-negative")
    trunk_ids = sorted(params.trunk)
    if len(freeze.flags) != len(trunk_ids) + len(params.heads):
        raise NetworkError("freeze mask length does not match the parameterized layer count")
    for _, g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NetworkError("non-finite gradient")

    def update(p, g):
        return p - lr * (g + weight_decay * p)

    trunk = {}
    for flag, i in zip(freeze.flags, trunk_ids):
        w, b = params.trunk[i]
        if flag:
            trunk[i] = (w, b)
        else:
            gw, gb = grads.trunk[i]
            trunk[i] = (update(w, gw), update(b, gb))
    heads = []
    for flag, (w, b), (gw, gb) in zip(freeze.flags[len(trunk_ids):], params.heads, grads.heads):
        heads.append((w, b) if flag else (update(w, gw), update(b, gb)))
    return Parameters(trunk, heads)


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str


def _kinked(spec, base: ForwardTrace, other: ForwardTrace, h: float) -> bool:
    for i, layer in enumerate(spec.trunk[:len(base.activations)]):
        if isinstance(layer, ReLU):
            z0 = base.input if i == 0 else base.activations[i - 1]
            z1 = other.input if i == 0 else other.activations[i - 1]
            moved = z1 != z0
            if np.any(moved & (np.minimum(np.abs(z0), np.abs(z1)) < 10 * h)):
                return True
        elif isinstance(layer, MaxPool):
            if not np.array_equal(base.cache[i], other.cache[i]):
                return True
    return False


# gradients below 1e4 x the difference roundoff cannot be resolved to 1e-4 relative
RESOLVE_FACTOR = 1e4


def gradient_check_report(spec, params, image, labels, h=1e-5, sample_count=200, seed=0, mode="eval") -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Half of the samples are parameter entries (tensor picked uniformly, then
    an entry), the rest are input pixels.  Coordinates whose perturbation
    moves a ReLU pre-activation lying within 10h of zero, or switches a
    max-pool winner, are skipped.  In train mode the same dropout masks are
    reused for every evaluation.

    A central difference carries roundoff of about eps*|L|/h, so a gradient
    entry much smaller than that cannot be checked to any relative
    precision.  The relative error's denominator is therefore floored at
    ``RESOLVE_FACTOR`` times that roundoff level.
    """
    if h <= 0:
        raise NetworkError("h must be positive")
    if sample_count < 1:
        raise NetworkError("sample_count must be >= 1")
    x, _ = _as_batch(spec, image)
    labels = np.asarray(labels, dtype=np.int64).reshape(x.shape[0], -1)

    def run(p, img):
        tr = forward(spec, p, img, mode=mode, seed=seed)
        return tr, multihead_loss(tr, labels)

    base, loss = run(params, x)
    grads = backward(spec, params, base, loss.logit_grads)
    floor = RESOLVE_FACTOR * np.finfo(np.float64).eps * max(1.0, abs(loss.total)) / h
    analytic = dict(grads.params.arrays())
    gen = rng(seed + 1)
    names = [name for name, _ in params.arrays()]
    worst, worst_at, checked, skipped = 0.0, "", 0, 0
    n_param = (sample_count + 1) // 2 if names else 0
    for k in range(sample_count):
        if k < n_param:
            name = names[gen.integers(len(names))]
            arr = dict(params.arrays())[name]
            flat = int(gen.integers(arr.size))
            a = analytic[name].ravel()[flat]

            def perturbed(delta, name=name, flat=flat):
                p = params.copy()
                target = dict(p.arrays())[name]
                target.ravel()[flat] += delta
                return run(p, x)
        else:
            flat = int(gen.integers(x.size))
            name = "input"
            a = grads.input_grad.ravel()[flat]

            def perturbed(delta, flat=flat):
                img = x.copy()
                img.ravel()[flat] += delta
                return run(params, img)

        tp, lp = perturbed(h)
        tm, lm = perturbed(-h)
        if _kinked(spec, base, tp, h) or _kinked(spec, base, tm, h):
            skipped += 1
            continue
        num = (lp.total - lm.total) / (2 * h)
        rel = float(abs(a - num) / max(abs(a), abs(num), floor))
        checked += 1
        if rel > worst:
            worst, worst_at = rel, f"{name}[{flat}]"
    return GradCheckReport(float(worst), checked, skipped, worst_at)


def gradient_check(spec, params, image, labels, h=1e-5, sample_count=200, seed=0, mode="eval") -> float:
    return gradient_check_report(spec, params, image, labels, h, sample_count, seed, mode).max_rel_error


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(spec: NetworkSpec, params: Parameters) -> bytes:
    check_params(spec, params)
    buf = io.BytesIO()
    text = spec.to_text().encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    for _, arr in params.arrays():
        write_blob(buf, arr)
    return buf.getvalue()


def load_checkpoint(data: bytes) -> tuple[NetworkSpec, Parameters]:
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise NetworkError("not a CGN1 checkpoint")
    header = buf.read(8)
    if len(header) != 8:
        raise NetworkError("truncated checkpoint header")
    version, length = struct.unpack("<II", header)
    if version != CHECKPOINT_VERSION:
        raise NetworkError(f"unsupported checkpoint version {version}")
    raw = buf.read(length)
    if len(raw) != length:
        raise NetworkError("truncated checkpoint spec")
    spec = NetworkSpec.from_text(raw.decode("utf-8"))
    shapes = init_shapes(spec)
    arrays = {}
    for name, shape in shapes.items():
        arr = read_blob(buf)
        if arr.shape != shape:
            raise NetworkError(f"{name}: stored shape {arr.shape} != expected {shape}")
        arrays[name] = arr
    trunk = {i: (arrays[f"trunk{i}.W"], arrays[f"trunk{i}.b"]) for i in spec.param_layers}
    heads = [(arrays[f"head{g}.W"], arrays[f"head{g}.b"]) for g in range(len(spec.heads))]
    return spec, Parameters(trunk, heads)
