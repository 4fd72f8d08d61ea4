"""``facegen`` command line: ``facegen <command> [--config PATH] [--key value ...]``.

Settings come from the command's defaults, then an optional UTF-8 config
file of ``key = value`` lines, then command-line flags (flags win).  Every
command validates its settings and writes its outputs through temporary
files that are renamed into place only once all of them are ready.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cgmm, data, generate, nn, training
from .tensor import blob_bytes, rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRAD_CHECK_TOL = 1e-4

log = logging.getLogger("facegen")


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# --- settings --------------------------------------------------------------

@dataclass(frozen=True)
class Opt:
    kind: type | str
    default: object = None
    help: str = ""
    required: bool = False


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, opt: Opt, value):
    if value is None:
        return None
    try:
        if opt.kind == "path":
            return Path(str(value)).expanduser().resolve()
        if opt.kind is bool:
            return _bool(value)
        return opt.kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve_settings(options: dict[str, Opt], file_values: dict, flag_values: dict) -> dict:
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, opt in options.items():
        raw = opt.default
        if key in file_values:
            raw = file_values[key]
        if flag_values.get(key) is not None:
            raw = flag_values[key]
        value = _convert(key, opt, raw)
        if opt.required and value is None:
            raise ConfigError(f"missing required setting {key!r}")
        out[key] = value
    return out


def echo(settings: dict) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(settings.items()))


# --- atomic outputs --------------------------------------------------------

class Outputs:
    """Collect output files and move them into place together."""

    def __init__(self):
        self.files: list[tuple[Path, bytes]] = []

    def add(self, path, content) -> None:
        if isinstance(content, str):
            content = content.encode("utf-8")
        self.files.append((Path(path), content))

    def commit(self) -> None:
        staged = []
        try:
            for path, content in self.files:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(content)
                staged.append((tmp, path))
            for tmp, path in staged:
                os.replace(tmp, path)
        except BaseException:
            for tmp, _ in staged:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            raise


def _check_writable(path: Path) -> None:
    parent = path.parent
    while not parent.exists():
        parent = parent.parent
    if not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {path.parent}")


# --- shared option groups --------------------------------------------------

INVERSION_OPTS = {
    "iterations": Opt(int, 500, "optimisation iterations"),
    "step": Opt(float, 1.0, "initial step size"),
    "step_growth": Opt(float, 1.25, "step multiplier after an accepted step"),
    "init": Opt(str, "noise", "noise | mean_image"),
    "noise_std": Opt(float, 0.1, "initial noise standard deviation"),
    "blur_sigma": Opt(float, 0.5, "Gaussian blur sigma (0 disables)"),
    "blur_every": Opt(int, 10, "iterations between blurs"),
    "jitter": Opt(int, 2, "maximum jitter shift in pixels"),
    "l2_decay": Opt(float, 1e-4, "L2 decay on the image"),
    "seed": Opt(int, 0, "random seed"),
}


def _inversion_config(s: dict, layer: int, **extra) -> generate.InversionConfig:
    cfg = generate.InversionConfig(
        layer=layer,
        iterations=s["iterations"],
        step=s["step"],
        step_growth=s["step_growth"],
        init=s["init"],
        noise_std=s["noise_std"],
        blur_sigma=s["blur_sigma"],
        blur_every=s["blur_every"],
        jitter=s["jitter"],
        l2_decay=s["l2_decay"],
        seed=s["seed"],
        **extra,
    )
    try:
        cfg.validate()
    except generate.GenerationError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _load_checkpoint(path):
    return nn.load_checkpoint(Path(path).read_bytes())


def _layer(spec, name) -> int:
    try:
        return nn.layer_index(spec, name)
    except nn.NetworkError as exc:
        raise ConfigError(str(exc)) from None


def _parse_attributes(schema, text: str) -> list[int]:
    names = [t for t in (text or "").split(",") if t.strip()]
    if not names:
        raise ConfigError(f"no attributes given; valid choices: {', '.join(schema.attribute_names)}")
    out = []
    try:
        for name in names:
            out.append(schema.attribute_index(name))
    except data.DataError as exc:
        raise ConfigError(str(exc)) from None
    groups = [schema.attributes[a].group for a in out]
    if len(set(groups)) != len(groups):
        raise ConfigError("attributes from the same group are mutually exclusive")
    return out


def _schema_for(spec) -> data.AttributeSchema:
    schema = data.default_schema()
    if [h.group_id for h in spec.heads] != schema.group_names:
        raise ConfigError("checkpoint heads do not match the default attribute schema")
    return schema


def _group_report(schema, probs) -> str:
    lines = []
    for g, (grp, p) in enumerate(zip(schema.groups, probs)):
        labels = list(grp.labels) + ["unlabeled"] * (len(p) - len(grp.labels))
        cells = ", ".join(f"{name}={v:.4f}" for name, v in zip(labels, p))
        lines.append(f"  {grp.name}: {labels[int(np.argmax(p))]} ({cells})")
    return "\n".join(lines) + "\n"


# --- commands --------------------------------------------------------------

def cmd_synth_data(s):
    if s["n"] < 1:
        raise ConfigError("n must be >= 1")
    if s["size"] < 16:
        raise ConfigError("size must be >= 16")
    out = s["out"]
    _check_writable(out / "labels.csv")
    ds = data.generate_synthetic_dataset(s["n"], s["seed"], data.default_schema(), s["size"], unlabeled_rate=s["unlabeled_rate"])
    files = Outputs()
    for name, img in zip(ds.names, ds.images):
        files.add(out / name, data.encode_ppm(img))
    files.add(out / "labels.csv", data.labels_csv_text(ds.names, ds.labels, ds.schema))
    files.add(out / "schema.json", ds.schema.to_json())
    files.commit()
    print(f"wrote {len(ds)} images to {out}")
    for g, grp in enumerate(ds.schema.groups):
        counts = np.bincount(ds.labels[:, g] + 1, minlength=len(grp.labels) + 1)
        cells = ", ".join(f"{label}={c}" for label, c in zip(grp.labels, counts[1:]))
        print(f"  {grp.name}: {cells}, unlabeled={counts[0]}")
    return {"count": len(ds)}


def _split(s):
    ds = data.load_dataset(s["dataset"])
    if s["test_dataset"] is not None:
        return ds, data.load_dataset(s["test_dataset"], split="test")
    frac = s["test_fraction"]
    if not 0 <= frac < 1:
        raise ConfigError("test_fraction must be in [0, 1)")
    n_test = int(round(len(ds) * frac))
    if n_test == 0:
        return ds, None
    cut = len(ds) - n_test
    return ds.subset(range(cut)), ds.subset(range(cut, len(ds)), split="test")


def cmd_train(s):
    if s["epochs"] < 1 or s["lr"] <= 0 or s["batch_size"] < 1:
        raise ConfigError("epochs and batch_size must be >= 1 and lr positive")
    out = s["out"]
    _check_writable(out)
    train_set, test_set = _split(s)
    if s["init_checkpoint"] is not None:
        spec, params = _load_checkpoint(s["init_checkpoint"])
        if s["reset_heads"]:
            fresh = nn.init_params(spec, s["seed"])
            params.heads = fresh.heads
    else:
        try:
            spec = nn.default_spec(train_set.schema, train_set.images.shape[-1], s["dropout"], s["dropout_everywhere"])
        except nn.NetworkError as exc:
            raise ConfigError(str(exc)) from None
        params = nn.init_params(spec, s["seed"])
    if train_set.images.shape[1:] != spec.input_shape:
        raise ConfigError("dataset image size does not match the network input")
    fb = s["freeze_below"]
    freeze = nn.FreezeMask.none(spec) if fb in ("none", "") else nn.FreezeMask.below(spec, _layer(spec, fb) if fb != "all" else len(spec.trunk))
    try:
        result = training.train(
            spec, params, train_set, test_set, epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"],
            weight_decay=s["weight_decay"], freeze=freeze, seed=s["seed"],
            callback=lambda st: print(f"epoch {st.epoch}: loss {st.train_loss:.5f} test_loss {st.test_loss:.5f} "
                                      f"acc {st.train_accuracy:.4f}/{st.test_accuracy:.4f}", flush=True),
        )
    except training.DivergenceError as exc:
        raise NumericFailure(str(exc)) from None
    loss_csv = "epoch,train_loss,test_loss,train_accuracy,test_accuracy\n" + "".join(
        f"{h.epoch},{h.train_loss!r},{h.test_loss!r},{h.train_accuracy!r},{h.test_accuracy!r}\n" for h in result.history
    )
    acc_csv = "group,train_accuracy,test_accuracy\n" + "".join(
        f"{h.group_id},{a!r},{b!r}\n" for h, a, b in zip(spec.heads, result.train_group_accuracy, result.test_group_accuracy)
    )
    files = Outputs()
    files.add(out, nn.save_checkpoint(spec, result.params))
    files.add(out.with_name(out.stem + "_loss.csv"), loss_csv)
    files.add(out.with_name(out.stem + "_accuracy.csv"), acc_csv)
    files.add(out.with_name(out.stem + "_report.txt"), "command = train\n" + echo(s))
    files.commit()
    for h, a, b in zip(spec.heads, result.train_group_accuracy, result.test_group_accuracy):
        print(f"  {h.group_id}: train {a:.4f} test {b:.4f}")
    return result


def cmd_fit_cgmm(s):
    if s["m"] < 2:
        raise ConfigError("m must be >= 2")
    _check_writable(s["out"])
    spec, params = _load_checkpoint(s["checkpoint"])
    layer = _layer(spec, s["layer"])
    ds = data.load_dataset(s["dataset"])
    sets = data.select_positive_sets(ds, ds.schema, s["m"], s["seed"])
    dim = int(np.prod(spec.output_shape(layer)))
    gaussians = []
    for ps in sets:
        name = ds.schema.attribute_names[ps.attribute]
        if ps.indices.size < 2:
            gaussians.append(cgmm.unusable_gaussian(dim, int(ps.indices.size)))
            print(f"  {name}: {ps.indices.size} positives, unusable")
            continue
        gaussians.append(cgmm.fit_gaussian(cgmm.collect_activations(spec, params, ds, ps.indices, layer)))
        note = f" (shortfall: {ps.available} available)" if ps.shortfall else ""
        print(f"  {name}: {ps.indices.size} images{note}")
    model = cgmm.CgmmModel(layer, ds.schema.attribute_names, gaussians, np.ones(len(gaussians)), s["lam"])
    files = Outputs()
    files.add(s["out"], cgmm.save_stats(model))
    files.commit()
    return model


def weight_grad_check(model, acts, sets, h=1e-6) -> float:
    """Max relative error between the analytic weight gradient and central differences."""
    g = cgmm.weight_gradient(model, acts, sets)
    worst = 0.0
    for j in range(len(g)):
        step = h * max(1.0, abs(model.weights[j]))
        wp, wm = model.weights.copy(), model.weights.copy()
        wp[j] += step
        wm[j] -= step
        num = (cgmm.weight_objective(model, acts, sets, wp) - cgmm.weight_objective(model, acts, sets, wm)) / (2 * step)
        worst = max(worst, abs(g[j] - num) / max(abs(g[j]), abs(num), 1e-12))
    return worst


def _usable_sets(model, schema, labels):
    """Attribute sets restricted to usable attributes; images left empty are dropped."""
    keep, sets = [], []
    for i, c in enumerate(schema.attribute_sets(labels)):
        c = [a for a in c if model.gaussians[a].usable]
        if c:
            keep.append(i)
            sets.append(c)
    return np.asarray(keep, dtype=np.int64), sets


def cmd_learn_weights(s):
    if s["lr"] <= 0 or s["iters"] < 0:
        raise ConfigError("lr must be positive and iters >= 0")
    out = s["out"] or s["stats"]
    _check_writable(out)
    spec, params = _load_checkpoint(s["checkpoint"])
    model = cgmm.load_stats(Path(s["stats"]).read_bytes())
    if s["lam"] is not None:
        model.lam = s["lam"]
    ds = data.load_dataset(s["dataset"])
    if model.attribute_names != ds.schema.attribute_names:
        raise ConfigError("stats file attributes do not match the dataset schema")
    keep, sets = _usable_sets(model, ds.schema, ds.labels)
    if keep.size == 0:
        raise ConfigError("no image has a usable attribute")
    if s["max_images"] and keep.size > s["max_images"]:
        keep, sets = keep[: s["max_images"]], sets[: s["max_images"]]
    acts = cgmm.collect_activations(spec, params, ds, keep, model.layer_id)
    err = weight_grad_check(model, acts, sets)
    print(f"weight gradient check: max relative error {err:.3e}")
    if err > GRAD_CHECK_TOL:
        raise NumericFailure(f"weight gradient check failed: {err:.3e} > {GRAD_CHECK_TOL:g}")
    try:
        fit = cgmm.learn_weights(model, acts, sets, lr=s["lr"], iters=s["iters"], halving=s["halving"])
    except cgmm.WeightDivergenceError as exc:
        raise NumericFailure(str(exc)) from None
    print(f"objective {fit.objective[0]:.6g} -> {fit.objective[-1]:.6g} over {len(fit.objective) - 1} steps")
    files = Outputs()
    files.add(out, cgmm.save_stats(model.with_weights(fit.weights)))
    if s["trace_out"] is not None:
        files.add(s["trace_out"], "iteration,objective,step_size\n" + "".join(
            f"{i},{v!r},{st!r}\n" for i, (v, st) in enumerate(zip(fit.objective, fit.step_sizes))))
    files.commit()
    return fit


def _write_generation(out: Path, result, report: str) -> None:
    files = Outputs()
    files.add(out / "image.ppm", data.encode_ppm(result.image))
    files.add(out / "trace.csv", result.trace_csv())
    files.add(out / "report.txt", report)
    files.commit()


def cmd_generate(s):
    out = s["out"]
    _check_writable(out / "report.txt")
    spec, params = _load_checkpoint(s["checkpoint"])
    schema = _schema_for(spec)
    model = cgmm.load_stats(Path(s["stats"]).read_bytes())
    attrs = _parse_attributes(schema, s["attributes"])
    if s["mode"] not in ("mean", "sample"):
        raise ConfigError("mode must be mean or sample")
    for a in attrs:
        if not model.gaussians[a].usable:
            raise ConfigError(f"attribute {schema.attribute_names[a]!r} is unusable in this stats file")
    cfg = _inversion_config(s, model.layer_id)
    result = generate.generate_from_attributes(spec, params, model, attrs, s["mode"], cfg)
    report = (
        "command = generate\n" + echo(s)
        + f"layer_id = {model.layer_id}\nattribute_set = {','.join(schema.attribute_names[a] for a in attrs)}\n"
        + f"data_term_initial = {result.trace[0]!r}\ndata_term_final = {result.trace[-1]!r}\n"
        + f"iterations_executed = {result.iterations}\nclassify_back:\n" + _group_report(schema, result.group_probs)
    )
    _write_generation(out, result, report)
    print(report, end="")
    return result


def cmd_classvis(s):
    out = s["out"]
    _check_writable(out / "report.txt")
    spec, params = _load_checkpoint(s["checkpoint"])
    schema = _schema_for(spec)
    attrs = _parse_attributes(schema, s["attributes"])
    if s["boost"] not in ("softmax", "logits"):
        raise ConfigError("boost must be softmax or logits")
    mean = data.compute_mean_image(data.load_dataset(s["dataset"]))
    cfg = _inversion_config(s, len(spec.trunk) - 1, boost=s["boost"])
    targets = [(schema.attributes[a].group, schema.attributes[a].cls) for a in attrs]
    result = generate.class_visualize(spec, params, mean, targets, cfg)
    report = (
        "command = classvis\n" + echo(s)
        + f"score_initial = {result.trace[0]!r}\nscore_final = {result.trace[-1]!r}\nclassify_back:\n"
        + _group_report(schema, result.group_probs)
    )
    _write_generation(out, result, report)
    print(report, end="")
    return result


def cmd_invert(s):
    out = s["out"]
    _check_writable(out / "report.txt")
    spec, params = _load_checkpoint(s["checkpoint"])
    schema = _schema_for(spec)
    layer = _layer(spec, s["layer"])
    if s["image"] is not None:
        target = data.decode_ppm(Path(s["image"]).read_bytes())
    elif s["dataset"] is not None:
        ds = data.load_dataset(s["dataset"])
        if not 0 <= s["index"] < len(ds):
            raise ConfigError(f"index must be in [0, {len(ds)})")
        target = ds.images[s["index"]]
    else:
        raise ConfigError("give either image or dataset")
    if target.shape != spec.input_shape:
        raise ConfigError("target image size does not match the network input")
    cfg = _inversion_config(s, layer)
    result = generate.reconstruct_from_image(spec, params, target, layer, cfg)
    result.group_probs = generate.classify(spec, params, result.image)
    report = (
        "command = invert\n" + echo(s)
        + f"layer_id = {layer}\ndata_term_initial = {result.trace[0]!r}\ndata_term_final = {result.trace[-1]!r}\n"
        + f"reduction = {1 - result.trace[-1] / result.trace[0] if result.trace[0] else 0.0!r}\n"
        + "target_classification:\n" + _group_report(schema, generate.classify(spec, params, target))
        + "classify_back:\n" + _group_report(schema, result.group_probs)
    )
    _write_generation(out, result, report)
    print(report, end="")
    return result


def cmd_grad_check(s):
    if s["h"] <= 0 or s["samples"] < 1:
        raise ConfigError("h must be positive and samples >= 1")
    if s["checkpoint"] is not None:
        spec, params = _load_checkpoint(s["checkpoint"])
    else:
        spec = nn.default_spec(data.default_schema())
        params = nn.init_params(spec, s["seed"])
    gen = rng(s["seed"])
    image = np.clip(gen.normal(0.5, 0.2, spec.input_shape), 0, 1)
    labels = np.array([int(gen.integers(h.class_count - 1)) for h in spec.heads])
    report = nn.gradient_check_report(spec, params, image, labels, s["h"], s["samples"], s["seed"], s["mode"])
    text = (
        "command = grad-check\n" + echo(s)
        + f"max_rel_error = {report.max_rel_error!r}\nchecked = {report.checked}\nskipped = {report.skipped}\nworst = {report.worst}\n"
    )
    if s["out"] is not None:
        files = Outputs()
        files.add(s["out"], text)
        files.commit()
    print(text, end="")
    if report.max_rel_error > s["tol"]:
        raise NumericFailure(f"gradient check failed: {report.max_rel_error:.3e} > {s['tol']:g}")
    return report


def cmd_mean_image(s):
    _check_writable(s["out"])
    mean = data.compute_mean_image(data.load_dataset(s["dataset"]))
    files = Outputs()
    files.add(s["out"], data.encode_ppm(np.clip(mean, 0, 1)))
    if s["blob_out"] is not None:
        files.add(s["blob_out"], blob_bytes(mean))
    files.commit()
    print(f"mean image of shape {mean.shape} written to {s['out']}")
    return mean


COMMANDS = {
    "synth-data": (cmd_synth_data, "render a synthetic sprite-face dataset", {
        "n": Opt(int, 1000, "number of images"),
        "seed": Opt(int, 0, "random seed"),
        "size": Opt(int, 32, "image width and height"),
        "unlabeled_rate": Opt(float, 0.1, "probability a group label is hidden"),
        "out": Opt("path", None, "output directory", True),
    }),
    "train": (cmd_train, "train the multi-head classifier", {
        "dataset": Opt("path", None, "training dataset directory", True),
        "test_dataset": Opt("path", None, "test dataset directory"),
        "test_fraction": Opt(float, 0.2, "held-out fraction when no test_dataset"),
        "epochs": Opt(int, 10, "epochs"),
        "lr": Opt(float, 0.1, "learning rate"),
        "batch_size": Opt(int, 32, "mini-batch size"),
        "weight_decay": Opt(float, 1e-4, "L2 weight decay"),
        "freeze_below": Opt(str, "none", "freeze trunk layers below this layer (none, all, index, conv-5, fc-6, fc-7)"),
        "dropout": Opt(float, 0.25, "dropout probability"),
        "dropout_everywhere": Opt(bool, False, "dropout after every block, not just Dense"),
        "init_checkpoint": Opt("path", None, "fine-tune from this checkpoint"),
        "reset_heads": Opt(bool, True, "re-initialise heads when fine-tuning"),
        "seed": Opt(int, 0, "random seed"),
        "out": Opt("path", None, "checkpoint path", True),
    }),
    "fit-cgmm": (cmd_fit_cgmm, "fit per-attribute Gaussians over layer activations", {
        "dataset": Opt("path", None, "dataset directory", True),
        "checkpoint": Opt("path", None, "network checkpoint", True),
        "layer": Opt(str, "fc-6", "layer index or name"),
        "m": Opt(int, 200, "images per attribute set"),
        "lam": Opt(float, 1e-5, "ridge coefficient stored with the model"),
        "seed": Opt(int, 0, "random seed"),
        "out": Opt("path", None, "stats file", True),
    }),
    "learn-weights": (cmd_learn_weights, "learn the mixture weights", {
        "dataset": Opt("path", None, "dataset directory", True),
        "checkpoint": Opt("path", None, "network checkpoint", True),
        "stats": Opt("path", None, "stats file", True),
        "lr": Opt(float, 1e-3, "learning rate"),
        "iters": Opt(int, 1000, "iterations"),
        "lam": Opt(float, None, "ridge coefficient (default: keep the stats value)"),
        "halving": Opt(bool, True, "halve the step when the objective rises"),
        "max_images": Opt(int, 0, "use at most this many images (0 = all)"),
        "trace_out": Opt("path", None, "objective trace CSV"),
        "out": Opt("path", None, "output stats file (default: overwrite stats)"),
    }),
    "generate": (cmd_generate, "generate a face for a set of attributes", {
        "checkpoint": Opt("path", None, "network checkpoint", True),
        "stats": Opt("path", None, "stats file with learned weights", True),
        "attributes": Opt(str, None, "comma-separated attribute names", True),
        "mode": Opt(str, "mean", "mean | sample"),
        **INVERSION_OPTS,
        "out": Opt("path", None, "output directory", True),
    }),
    "classvis": (cmd_classvis, "class visualization from the mean image", {
        "checkpoint": Opt("path", None, "network checkpoint", True),
        "dataset": Opt("path", None, "dataset for the mean image", True),
        "attributes": Opt(str, None, "comma-separated attribute names", True),
        "boost": Opt(str, "softmax", "softmax | logits"),
        **{**INVERSION_OPTS, "iterations": Opt(int, 200, "iterations"), "step": Opt(float, 0.01, "step per normalised gradient"), "init": Opt(str, "mean_image", "fixed: mean_image")},
        "out": Opt("path", None, "output directory", True),
    }),
    "invert": (cmd_invert, "reconstruct an image from its own activations", {
        "checkpoint": Opt("path", None, "network checkpoint", True),
        "image": Opt("path", None, "target PPM image"),
        "dataset": Opt("path", None, "dataset to take the target from"),
        "index": Opt(int, 0, "target index within dataset"),
        "layer": Opt(str, "conv-5", "layer index or name"),
        **INVERSION_OPTS,
        "out": Opt("path", None, "output directory", True),
    }),
    "grad-check": (cmd_grad_check, "finite-difference check of the network gradients", {
        "checkpoint": Opt("path", None, "network checkpoint (default: fresh default network)"),
        "h": Opt(float, 1e-5, "finite-difference step"),
        "samples": Opt(int, 200, "coordinates to sample"),
        "mode": Opt(str, "eval", "eval | train"),
        "tol": Opt(float, GRAD_CHECK_TOL, "failure threshold"),
        "seed": Opt(int, 0, "random seed"),
        "out": Opt("path", None, "report file"),
    }),
    "mean-image": (cmd_mean_image, "pixel-wise mean of a dataset", {
        "dataset": Opt("path", None, "dataset directory", True),
        "out": Opt("path", None, "output PPM", True),
        "blob_out": Opt("path", None, "exact mean as a tensor blob"),
    }),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facegen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="UTF-8 file of 'key = value' lines")
        for key, opt in options.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=f"{opt.help} [default: {opt.default}]")
    return parser


def run(argv=None):
    """Parse arguments and execute; returns the command's result (raises on failure)."""
    args = build_parser().parse_args(argv)
    func, _, options = COMMANDS[args.command]
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in options}
    settings = resolve_settings(options, file_values, flags)
    return func(settings)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if {"-v", "--verbose"} & set(argv) else logging.WARNING, format="%(message)s")
    try:
        run(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"facegen: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, nn.NetworkError, cgmm.CgmmError, generate.GenerationError, FloatingPointError) as exc:
        print(f"facegen: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, data.DataError) as exc:
        print(f"facegen: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
