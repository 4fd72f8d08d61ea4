"""Image synthesis by gradient steps on the input: class visualization and feature inversion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cgmm import CgmmModel, sample_target
from .nn import backward, backward_from_layer, forward, softmax_output_grad
from .tensor import rng


class GenerationError(ValueError):
    pass


@dataclass
class InversionConfig:
    layer: int = 3
    iterations: int = 500
    step: float = 1.0
    step_growth: float = 1.25
    max_halvings: int = 30
    init: str = "noise"  # noise | mean_image | image
    noise_mean: float = 0.5
    noise_std: float = 0.1
    blur_sigma: float = 0.5
    blur_every: int = 10
    jitter: int = 2
    l2_decay: float = 1e-4
    boost: str = "softmax"  # class visualization only: softmax | logits
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise GenerationError("iterations must be >= 0")
        if self.step <= 0:
            raise GenerationError("step must be positive")
        if self.step_growth < 1:
            raise GenerationError("step_growth must be >= 1")
        if self.blur_every < 1:
            raise GenerationError("blur_every must be >= 1")
        if self.jitter < 0 or self.blur_sigma < 0 or self.noise_std < 0 or self.l2_decay < 0:
            raise GenerationError("jitter, blur_sigma, noise_std and l2_decay must be non-negative")
        if self.init not in ("noise", "mean_image", "image"):
            raise GenerationError(f"unknown init mode {self.init!r}")
        if self.boost not in ("softmax", "logits"):
            raise GenerationError(f"unknown boost mode {self.boost!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationResult:
    image: np.ndarray
    trace: list[float]
    steps: list[float]
    iterations: int
    target: np.ndarray | None = None
    group_probs: list[np.ndarray] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iteration,data_term,step_size"]
        lines += [f"{i},{v!r},{s!r}" for i, (v, s) in enumerate(zip(self.trace, self.steps))]
        return "\n".join(lines) + "\n"


# --- regularizers ----------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge clamping.

    Edge clamping over-weights border pixels, so each channel is shifted
    afterwards to restore its original mean.
    """
    img = np.asarray(image, dtype=np.float64)
    if sigma < 0:
        raise GenerationError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    r = k.size // 2
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for t, kt in enumerate(k):
            acc += kt * np.take(padded, np.arange(t, t + n), axis=axis)
        out = acc
    before = img.mean(axis=(-2, -1), keepdims=True)
    after = out.mean(axis=(-2, -1), keepdims=True)
    return out + (before - after)


def jitter(image, dx: int, dy: int) -> np.ndarray:
    """Circular shift by dx columns and dy rows; ``jitter(x, -dx, -dy)`` undoes it."""
    return np.roll(np.asarray(image), (int(dy), int(dx)), axis=(-2, -1))


def _draw_shift(gen, max_px):
    if max_px == 0:
        return 0, 0
    dx, dy = gen.integers(-max_px, max_px + 1, size=2)
    return int(dx), int(dy)


def initial_image(spec, cfg: InversionConfig, gen, mean_image=None, init_image=None) -> np.ndarray:
    shape = spec.input_shape
    if cfg.init == "image":
        if init_image is None:
            raise GenerationError("init='image' needs an init_image")
        x = np.asarray(init_image, dtype=np.float64).copy()
    elif cfg.init == "mean_image":
        if mean_image is None:
            raise GenerationError("init='mean_image' needs the mean image")
        x = np.asarray(mean_image, dtype=np.float64) + gen.normal(0.0, cfg.noise_std, shape)
    else:
        x = gen.normal(cfg.noise_mean, cfg.noise_std, shape)
    if x.shape != shape:
        raise GenerationError(f"initial image shape {x.shape} != network input {shape}")
    return np.clip(x, 0.0, 1.0)


# --- feature inversion -----------------------------------------------------

def _data_term(spec, params, x, layer, target):
    tr = forward(spec, params, x, mode="eval", upto=layer)
    diff = tr.activation(layer) - target
    return float(np.sum(diff * diff)), tr, diff


def _line_search(spec, params, layer, target, x, f, g, step, cfg, blur_now):
    """Halve the step until a (blurred, else plain) proposal lowers the data term."""
    for _ in range(cfg.max_halvings):
        prop = np.clip(x - step * g, 0.0, 1.0)
        if blur_now:
            blurred = np.clip(blur(prop, cfg.blur_sigma), 0.0, 1.0)
            fb, _, _ = _data_term(spec, params, blurred, layer, target)
            if fb < f:
                return blurred, fb, step
        fp, _, _ = _data_term(spec, params, prop, layer, target)
        if fp < f:
            return prop, fp, step
        step *= 0.5
    return None


def feature_invert(spec, params, target, cfg: InversionConfig, mean_image=None, init_image=None) -> GenerationResult:
    """Minimise ||T - phi_l(X)||^2 over the image X by projected gradient descent.

    Each iteration draws a jitter shift, takes the data-term gradient at the
    shifted image and unshifts it, adds the L2 decay term and proposes a step
    clamped to [0, 1]; every ``blur_every``-th proposal is also blurred.  A
    proposal is accepted only if it lowers the data term: a failed blurred
    proposal falls back to the plain one, and a failed plain proposal halves
    the step.  The gradient at a shifted image need not be a descent
    direction for the unshifted data term, so when every halving fails the
    iteration is retried once with the unshifted gradient.  Accepted steps
    grow the step by ``step_growth``.  The data term is therefore
    non-increasing along the trace.
    """
    cfg.validate()
    layer = cfg.layer
    target = np.asarray(target, dtype=np.float64)
    if target.shape != spec.output_shape(layer):
        try:
            target = target.reshape(spec.output_shape(layer))
        except ValueError:
            raise GenerationError(f"target shape {target.shape} does not match layer {layer} output {spec.output_shape(layer)}") from None
    if not np.all(np.isfinite(target)):
        raise GenerationError("target activations are not finite")
    gen = rng(cfg.seed)
    x = initial_image(spec, cfg, gen, mean_image, init_image)
    f, _, _ = _data_term(spec, params, x, layer, target)
    trace, steps = [f], [cfg.step]
    step = cfg.step
    done = 0
    for it in range(cfg.iterations):
        if f == 0.0:
            break
        dx, dy = _draw_shift(gen, cfg.jitter)
        blur_now = cfg.blur_sigma > 0 and (it + 1) % cfg.blur_every == 0
        accepted = None
        for shift in ((dx, dy), (0, 0)):
            _, tr, diff = _data_term(spec, params, jitter(x, *shift), layer, target)
            g = jitter(backward_from_layer(spec, params, tr, layer, 2.0 * diff), -shift[0], -shift[1])
            g = g + cfg.l2_decay * x
            accepted = _line_search(spec, params, layer, target, x, f, g, step, cfg, blur_now)
            if accepted is not None or shift == (0, 0):
                break
        if accepted is not None:
            x, f, trial_step = accepted
            step = trial_step * cfg.step_growth
        trace.append(f)
        steps.append(trial_step if accepted is not None else 0.0)
        done = it + 1
    return GenerationResult(np.clip(x, 0.0, 1.0), trace, steps, done, target=target)


def reconstruct_from_image(spec, params, target_image, layer: int, cfg: InversionConfig, mean_image=None, init_image=None) -> GenerationResult:
    """Invert the layer activations of a real image."""
    img = np.asarray(target_image, dtype=np.float64)
    if img.shape != spec.input_shape or img.min() < 0 or img.max() > 1:
        raise GenerationError("target image must match the network input and lie in [0, 1]")
    tr = forward(spec, params, img, mode="eval", upto=layer)
    if cfg.layer != layer:
        cfg = InversionConfig(**{**cfg.as_dict(), "layer": layer})
    return feature_invert(spec, params, tr.activation(layer), cfg, mean_image=mean_image, init_image=init_image)


def classify(spec, params, image) -> list[np.ndarray]:
    """Eval-mode per-group class probabilities for one image."""
    return [p[0] for p in forward(spec, params, image, mode="eval").probs]


def generate_from_attributes(spec, params, model: CgmmModel, attributes, mode: str, cfg: InversionConfig, mean_image=None) -> GenerationResult:
    """Build a target with the cGMM, invert it and attach classify-back probabilities."""
    if model.layer_id != cfg.layer:
        raise GenerationError(f"model was fitted at layer {model.layer_id} but cfg inverts layer {cfg.layer}")
    target = sample_target(model, attributes, mode=mode, seed=cfg.seed)
    result = feature_invert(spec, params, target, cfg, mean_image=mean_image)
    result.group_probs = classify(spec, params, result.image)
    return result


# --- class visualization ---------------------------------------------------

def class_visualize(spec, params, mean_image, targets, cfg: InversionConfig) -> GenerationResult:
    """Gradient ascent on the targeted head outputs, starting from the mean image plus noise.

    ``targets`` is a list of (head index, class index) pairs.  The output
    gradient is 1 at targeted classes and 0 everywhere else, placed on the
    softmax outputs (``boost='softmax'``) or on the logits.  Each step moves
    by ``step`` times the RMS-normalised input gradient.  The trace records
    the summed targeted probabilities.
    """
    cfg.validate()
    pairs = [(int(h), int(c)) for h, c in targets]
    if not pairs:
        raise GenerationError("no target classes given")
    for h, c in pairs:
        if not 0 <= h < len(spec.heads) or not 0 <= c < spec.heads[h].class_count:
            raise GenerationError(f"target ({h}, {c}) does not name a head class")
    gen = rng(cfg.seed)
    m = np.asarray(mean_image, dtype=np.float64)
    if m.shape != spec.input_shape:
        raise GenerationError("mean image shape does not match the network input")
    x = initial_image(spec, InversionConfig(**{**cfg.as_dict(), "init": "mean_image"}), gen, mean_image=m)

    def score(tr):
        return float(sum(tr.probs[h][0, c] for h, c in pairs))

    tr = forward(spec, params, x, mode="eval")
    trace, steps = [score(tr)], [cfg.step]
    for it in range(cfg.iterations):
        dx, dy = _draw_shift(gen, cfg.jitter)
        tr = forward(spec, params, jitter(x, dx, dy), mode="eval")
        grads = []
        for h, p in enumerate(tr.probs):
            d = np.zeros_like(p)
            for hh, c in pairs:
                if hh == h:
                    d[0, c] = 1.0
            grads.append(softmax_output_grad(p, d) if cfg.boost == "softmax" else d)
        g = jitter(backward(spec, params, tr, grads).input_grad, -dx, -dy)
        rms = float(np.sqrt(np.mean(g * g)))
        if rms > 0:
            g = g / rms
        x = np.clip(x + cfg.step * (g - cfg.l2_decay * x), 0.0, 1.0)
        if cfg.blur_sigma > 0 and (it + 1) % cfg.blur_every == 0:
            x = np.clip(blur(x, cfg.blur_sigma), 0.0, 1.0)
        trace.append(score(forward(spec, params, x, mode="eval")))
        steps.append(cfg.step)
    result = GenerationResult(x, trace, steps, cfg.iterations)
    result.group_probs = classify(spec, params, x)
    return result
