"""Command-line entry point: ``sdehnn {synth,train,eval,trajectories}``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags. Every command writes the fully
resolved settings to ``<command>_config.ini`` in the output directory; that
file alone reproduces the run.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (NOISE_COEF, NOISE_REGION, X_RANGE, PreparedData, SyntheticData, gen_synthetic, load_csv,
                   prepare_series, prepare_synthetic)
from .errors import CheckpointError, ConfigError, SdeHnnError
from .metrics import SIDES, evaluate
from .model import (Architecture, SamplingConfig, SdeHnn, decompose_uncertainty, predictive_interval,
                    sample_predictions)
from .sde import MODES, BrownianSource, SdeConfig, write_trajectories_csv
from .train import AdamConfig, TrainConfig, train

log = logging.getLogger("sdehnn")

SYNTHETIC = "synthetic"
SYNTHETIC_COLUMNS = ["x", "y", "clean_y", "true_noise_variance"]
TRAJECTORY_STREAM = 4
AUTO = "auto"


@dataclass(frozen=True)
class Field:
    section: str
    key: str
    kind: type
    default: object
    help: str
    choices: tuple = ()
    flag: str = ""


def _f(section, key, kind, default, help, choices=(), flag=""):
    return Field(section, key, kind, default, help, choices, flag or "--" + key.replace("_", "-"))


FIELDS = [
    _f("run", "output_dir", str, "runs/default", "directory receiving every output file", flag="--output-dir"),
    _f("run", "seed", int, 0, "master seed for data, initialization, noise and shuffling"),
    _f("model", "hidden", int, 64, "hidden width of the init layer and the SDE block"),
    _f("model", "init_type", str, AUTO, "init layer: dense | recurrent (auto: dense for the toy set, "
       "recurrent for time series)", ("auto", "dense", "recurrent")),
    _f("model", "field_type", str, AUTO, "drift/diffusion networks: dense | recurrent (auto as init_type)",
       ("auto", "dense", "recurrent")),
    _f("model", "init_scheme", str, AUTO, "init-layer initialization: glorot | spread "
       "(auto: spread for a dense init layer on the toy set, else glorot)", ("auto", "glorot", "spread")),
    _f("model", "terminal_time", float, 3.0, "SDE terminal time T", flag="--T"),
    _f("model", "step_size", str, AUTO, "Euler step size (auto: 1 for the toy set, 0.5 for time series)",
       flag="--dt"),
    _f("model", "solver", str, "standard", "Euler-Maruyama variant", MODES),
    _f("model", "p", float, 0.5, "mask probability of the bernoulli solver"),
    _f("model", "mc_samples", int, 20, "Monte-Carlo passes at evaluation"),
    _f("model", "diffusion_activation", str, "softplus", "activation of the diffusion network",
       ("softplus", "tanh", "sigmoid")),
    _f("model", "diffusion_bias", float, -2.0, "initial bias of the dense diffusion network"),
    _f("data", "path", str, SYNTHETIC, "CSV file, or 'synthetic' for the generated toy set", flag="--data"),
    _f("data", "target", str, "", "target column of a time-series CSV"),
    _f("data", "window", int, 5, "input window length (time series)"),
    _f("data", "horizon", int, 1, "forecast horizon (time series)"),
    _f("data", "split", str, "0.6,0.2,0.2", "train,val,test fractions"),
    _f("data", "n", int, 1000, "number of generated toy points"),
    _f("data", "noise", str, "region", "toy noise: 'region' (inside [10, 20] only) or 'global'",
       ("region", "global")),
    _f("data", "fill", str, "reject", "missing CSV cells: reject | ffill", ("reject", "ffill")),
    _f("train", "lr", float, 1e-3, "Adam learning rate"),
    _f("train", "weight_decay", float, 1e-3, "L2 weight decay added to the gradient"),
    _f("train", "epochs", str, AUTO, "maximum epochs (auto: 1500 for the toy set, 500 for time series)"),
    _f("train", "batch_size", str, AUTO, "mini-batch size (auto: 32 for the toy set, 128 for time series)"),
    _f("train", "patience", str, AUTO, "early-stopping patience in epochs, 0 disables "
       "(auto: 0 for the toy set, 50 for time series)"),
    _f("train", "val_mc_samples", int, 5, "Monte-Carlo passes per validation"),
    _f("eval", "side", str, "two_sided_central", "coverage definition for the calibration curve", SIDES),
    _f("eval", "cwce_scale", float, 1.0, "multiplier applied to CWCE and R-CWCE (100 for percent)"),
    _f("eval", "variance", str, "total", "variance used for intervals: total | aleatoric",
       ("total", "aleatoric")),
    _f("eval", "confidence", float, 0.95, "confidence of the reported interval width (EPIW)"),
    _f("eval", "units", str, "original", "report metrics in original or scaled units", ("original", "scaled")),
    _f("eval", "oracle", bool, False, "score the true toy mean and noise instead of the model"),
    _f("eval", "workers", int, 1, "threads for Monte-Carlo sampling"),
    _f("trajectories", "count", int, 10, "number of sampled trajectories"),
    _f("trajectories", "index", int, 0, "test-split input whose trajectories are sampled"),
]
BY_KEY = {(f.section, f.key): f for f in FIELDS}


def _parse_value(field: Field, text):
    if isinstance(text, str):
        text = text.strip()
    if field.kind is bool:
        if isinstance(text, bool):
            return text
        low = str(text).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return field.kind(text)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def load_settings(config_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the INI file, then ``overrides`` keyed by ``(section, key)``."""
    raw = {(f.section, f.key): f.default for f in FIELDS}
    errors = []
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        with open(config_path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, text in parser.items(section):
                if (section, key) not in BY_KEY:
                    errors.append(f"[{section}] {key}: unknown setting")
                    continue
                raw[(section, key)] = text
    raw.update(overrides or {})
    values = {}
    for key, field in BY_KEY.items():
        try:
            values[key] = _parse_value(field, raw[key]) if raw[key] != AUTO else AUTO
        except (TypeError, ValueError) as exc:
            errors.append(f"[{key[0]}] {key[1]}: {exc}")
            continue
        if field.choices and values[key] not in field.choices:
            errors.append(f"[{key[0]}] {key[1]}: {values[key]!r} is not one of {list(field.choices)}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return values


def is_toy(settings: dict) -> bool:
    path = settings[("data", "path")]
    if path == SYNTHETIC:
        return True
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return [h.strip() for h in header] == SYNTHETIC_COLUMNS


def resolve(settings: dict) -> dict:
    """Replace every ``auto`` by its concrete value and validate the whole set."""
    s = dict(settings)
    path = s[("data", "path")]
    if path != SYNTHETIC and not Path(path).is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    toy = is_toy(s)
    autos = {
        ("model", "init_type"): "dense" if toy else "recurrent",
        ("model", "step_size"): 1.0 if toy else 0.5,
        ("train", "epochs"): 1500 if toy else 500,
        ("train", "batch_size"): 32 if toy else 128,
        ("train", "patience"): 0 if toy else 50,
    }
    for key, value in autos.items():
        if s[key] == AUTO:
            s[key] = value
    if s[("model", "field_type")] == AUTO:
        s[("model", "field_type")] = s[("model", "init_type")]
    if s[("model", "init_scheme")] == AUTO:
        s[("model", "init_scheme")] = "spread" if toy and s[("model", "init_type")] == "dense" else "glorot"
    errors = []
    for key, kind in ((("model", "step_size"), float), (("train", "epochs"), int),
                      (("train", "batch_size"), int), (("train", "patience"), int)):
        try:
            s[key] = kind(s[key])
        except ValueError:
            errors.append(f"[{key[0]}] {key[1]}: expected {kind.__name__}, got {s[key]!r}")
    checks = [
        (("model", "hidden"), lambda v: v >= 1, "must be >= 1"),
        (("model", "terminal_time"), lambda v: v >= 0, "must be >= 0"),
        (("model", "step_size"), lambda v: not isinstance(v, str) and v > 0, "must be > 0"),
        (("model", "p"), lambda v: 0 <= v < 1, "must satisfy 0 <= p < 1"),
        (("model", "mc_samples"), lambda v: v >= 2, "must be >= 2 (epistemic variance needs two passes)"),
        (("data", "window"), lambda v: v >= 1, "must be >= 1"),
        (("data", "horizon"), lambda v: v >= 1, "must be >= 1"),
        (("data", "n"), lambda v: v >= 5, "must be >= 5"),
        (("train", "lr"), lambda v: v >= 0, "must be >= 0"),
        (("train", "weight_decay"), lambda v: v >= 0, "must be >= 0"),
        (("train", "epochs"), lambda v: not isinstance(v, str) and v >= 1, "must be >= 1"),
        (("train", "batch_size"), lambda v: not isinstance(v, str) and v >= 1, "must be >= 1"),
        (("train", "patience"), lambda v: not isinstance(v, str) and v >= 0, "must be >= 0"),
        (("train", "val_mc_samples"), lambda v: v >= 1, "must be >= 1"),
        (("eval", "confidence"), lambda v: 0 < v < 1, "must lie in (0, 1)"),
        (("eval", "cwce_scale"), lambda v: v > 0, "must be > 0"),
        (("eval", "workers"), lambda v: v >= 1, "must be >= 1"),
        (("trajectories", "count"), lambda v: v >= 1, "must be >= 1"),
        (("trajectories", "index"), lambda v: v >= 0, "must be >= 0"),
        (("run", "seed"), lambda v: v >= 0, "must be >= 0"),
    ]
    for key, ok, message in checks:
        if not ok(s[key]):
            errors.append(f"[{key[0]}] {key[1]} = {s[key]!r}: {message}")
    try:
        s[("data", "split")] = ",".join(repr(v) for v in split_fractions(s))
    except ConfigError as exc:
        errors.append(str(exc))
    if not toy and not s[("data", "target")]:
        errors.append("[data] target: a time-series CSV needs a target column")
    if s[("model", "init_type")] == "recurrent" and s[("model", "init_scheme")] == "spread":
        errors.append("[model] init_scheme: spread needs a dense init layer")
    if s[("eval", "oracle")] and not toy:
        errors.append("[eval] oracle: only available for the toy set")
    if not errors:
        try:
            sde_config(s)
        except ConfigError as exc:
            errors.append(f"[model] {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(dict.fromkeys(errors)))
    return s


def split_fractions(s: dict) -> tuple:
    try:
        parts = tuple(float(v) for v in str(s[("data", "split")]).split(","))
    except ValueError:
        raise ConfigError(f"[data] split: expected three comma-separated numbers, got {s[('data', 'split')]!r}")
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1) > 1e-9:
        raise ConfigError(f"[data] split: fractions must be three non-negative numbers summing to 1, got {parts}")
    return parts


def render_settings(s: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for f in FIELDS:
        if not parser.has_section(f.section):
            parser.add_section(f.section)
        parser.set(f.section, f.key, _render(s[(f.section, f.key)]))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_snapshot(s: dict, command: str) -> Path:
    out = output_dir(s)
    path = out / f"{command}_config.ini"
    path.write_text(render_settings(s))
    return path


def output_dir(s: dict) -> Path:
    out = Path(s[("run", "output_dir")])
    out.mkdir(parents=True, exist_ok=True)
    return out


# building blocks

def sde_config(s: dict) -> SdeConfig:
    return SdeConfig(terminal_time=s[("model", "terminal_time")], step_size=s[("model", "step_size")],
                     mode=s[("model", "solver")], mask_probability=s[("model", "p")])


def load_data(s: dict) -> tuple[PreparedData, SyntheticData | None]:
    seed = s[("run", "seed")]
    fractions = split_fractions(s)
    path = s[("data", "path")]
    if path == SYNTHETIC:
        region = None if s[("data", "noise")] == "global" else NOISE_REGION
        toy = gen_synthetic(s[("data", "n")], seed, region)
    elif is_toy(s):
        toy = SyntheticData.from_csv(path)
    else:
        series = load_csv(path, s[("data", "target")], fill=s[("data", "fill")])
        return prepare_series(series, s[("data", "window")], s[("data", "horizon")], fractions), None
    return prepare_synthetic(toy, fractions, seed), toy


def architecture(s: dict, prepared: PreparedData) -> Architecture:
    _, w, d = prepared.train.inputs.shape
    return Architecture(
        input_dim=d, hidden=s[("model", "hidden")],
        init_type=s[("model", "init_type")], field_type=s[("model", "field_type")], window=w,
        diffusion_activation=s[("model", "diffusion_activation")],
        diffusion_bias=s[("model", "diffusion_bias")], init_scheme=s[("model", "init_scheme")])


def load_checkpoint(s: dict, prepared: PreparedData) -> SdeHnn:
    path = output_dir(s) / "checkpoint.json"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}; run 'sdehnn train' with this output directory first")
    model = SdeHnn.load(path)
    expected = architecture(s, prepared)
    if model.arch != expected:
        raise CheckpointError(f"checkpoint architecture {model.arch} does not match the configuration {expected}")
    if model.seed != s[("run", "seed")]:
        raise CheckpointError(f"checkpoint seed {model.seed} differs from the configured seed {s[('run', 'seed')]}")
    # solver settings may legitimately differ between training and evaluation
    model.sde = sde_config(s)
    return model


# commands

def cmd_synth(s: dict) -> None:
    region = None if s[("data", "noise")] == "global" else NOISE_REGION
    n, seed = s[("data", "n")], s[("run", "seed")]
    data = gen_synthetic(n, seed, region)
    out = output_dir(s)
    data.to_csv(out / "synthetic.csv")
    meta = {"n": n, "seed": seed, "x_range": list(X_RANGE), "noise_region": list(region) if region else None,
            "noise_variance": f"{NOISE_COEF} * x^2", "clean_function": "0.4 x sin(x) + 0.7 x cos(x / 2)",
            "columns": SYNTHETIC_COLUMNS}
    (out / "synthetic_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_snapshot(s, "synth")
    log.info("wrote %d points to %s", n, out / "synthetic.csv")


def cmd_train(s: dict) -> None:
    prepared, _ = load_data(s)
    seed = s[("run", "seed")]
    model = SdeHnn(architecture(s, prepared), sde_config(s), seed=seed)
    if model.arch.init_scheme == "spread":
        model.spread_init(prepared.train.inputs)
    tcfg = TrainConfig(epochs=s[("train", "epochs")], batch_size=s[("train", "batch_size")], seed=seed,
                       patience=s[("train", "patience")], val_mc_samples=s[("train", "val_mc_samples")])
    adam = AdamConfig(lr=s[("train", "lr")], weight_decay=s[("train", "weight_decay")])
    out = output_dir(s)
    write_snapshot(s, "train")
    log.info("training %d parameters on %d windows (%d validation)", model.parameter_count(),
             len(prepared.train), len(prepared.val))
    model, curve = train(model, prepared.train, prepared.val, tcfg, adam)
    model.save(out / "checkpoint.json")
    curve.to_csv(out / "training_curve.csv")
    log.info("best epoch %d of %d, validation NLL %.5f", curve.best_epoch, len(curve),
             curve.val_nll[curve.best_epoch - 1])


def _units(s, prepared, values, variance=False):
    if s[("eval", "units")] == "scaled":
        return np.asarray(values, dtype=np.float64)
    return prepared.variance_to_units(values) if variance else prepared.to_units(values)


def cmd_eval(s: dict) -> None:
    prepared, toy = load_data(s)
    test = prepared.test
    out = output_dir(s)
    write_snapshot(s, "eval")
    info = {"split": {"train": len(prepared.train), "val": len(prepared.val), "test": len(test)},
            "seed": s[("run", "seed")], "units": s[("eval", "units")]}
    if s[("eval", "oracle")]:
        rows = test.target_rows
        mean, aleatoric, epistemic = toy.clean_y[rows], toy.noise_variance[rows], np.zeros(len(test))
        if s[("eval", "units")] == "scaled":
            mean = prepared.scaler.apply_column(mean, 0)
            aleatoric = aleatoric / prepared.scaler.range_[0] ** 2
        y = _units(s, prepared, test.targets)
        info["predictor"] = "oracle"
    else:
        model = load_checkpoint(s, prepared)
        samples = sample_predictions(model, model.encode(test.inputs),
                                     SamplingConfig(s[("model", "mc_samples")], s[("run", "seed")],
                                                    workers=s[("eval", "workers")]))
        est = decompose_uncertainty(samples)
        mean = _units(s, prepared, est.mean)
        aleatoric = _units(s, prepared, est.aleatoric, variance=True)
        epistemic = _units(s, prepared, est.epistemic, variance=True)
        y = _units(s, prepared, test.targets)
        info.update(predictor="model", parameter_count=model.parameter_count(),
                    mc_samples=s[("model", "mc_samples")], solver=model.sde.mode,
                    sde_steps=model.sde.steps)
    variance = aleatoric + epistemic if s[("eval", "variance")] == "total" else aleatoric
    report, curve = evaluate(y, mean, variance, side=s[("eval", "side")],
                             confidence=s[("eval", "confidence")], cwce_scale=s[("eval", "cwce_scale")])
    report.extra.update(info, variance=s[("eval", "variance")])
    report.to_json(out / "metrics.json")
    curve.to_csv(out / "calibration_curve.csv")
    lo, hi = predictive_interval(variance, mean, 0.95)
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "y_true", "mean", "aleatoric", "epistemic", "lo_95", "hi_95"])
        for i in range(len(test)):
            writer.writerow([int(test.target_rows[i])] + [repr(float(v[i])) for v in
                                                         (y, mean, aleatoric, epistemic, lo, hi)])
    log.info("test n=%d rmse %.4f r2 %.4f cwce %.4f ecpe %.4f epiw %.4f", report.n, report.rmse, report.r2,
             report.cwce, report.ecpe, report.epiw)


def cmd_trajectories(s: dict) -> None:
    prepared, _ = load_data(s)
    index, count = s[("trajectories", "index")], s[("trajectories", "count")]
    if index >= len(prepared.test):
        raise ConfigError(f"[trajectories] index {index} is outside the test split of {len(prepared.test)}")
    model = load_checkpoint(s, prepared)
    x = model.encode(prepared.test.inputs[index:index + 1])
    source = BrownianSource(s[("run", "seed")], TRAJECTORY_STREAM)
    sde = replace(model.sde, record_trajectory=True)
    trajs = [model.forward(x, source, sample=k, sde=sde)[1] for k in range(count)]
    out = output_dir(s)
    write_snapshot(s, "trajectories")
    write_trajectories_csv(out / "trajectories.csv", trajs)
    log.info("wrote %d trajectories of %d steps", count, sde.steps)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "trajectories": cmd_trajectories}
SUMMARIES = {
    "synth": "Write the toy data set and its metadata.",
    "train": "Train a model and save the best-validation checkpoint.",
    "eval": "Score the checkpoint on the test split.",
    "trajectories": "Sample hidden-state trajectories for one test input.",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdehnn", description="Heteroscedastic regression with a neural SDE "
                                     "hidden block: data generation, training, evaluation and trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="INI file with [run] [model] [data] [train] [eval] sections")
        p.add_argument("--print-config", action="store_true", help="print the resolved settings and exit")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        p.add_argument("--sde-steps", type=int, help="number of Euler steps; sets T = steps * dt "
                       "(0 gives the plain heteroscedastic network)")
        p.add_argument("--cwce-percent", action="store_true", help="report CWCE and R-CWCE x100")
        for f in FIELDS:
            if f.kind is bool:
                p.add_argument(f.flag, dest=f"{f.section}.{f.key}", action="store_true", help=f.help)
            else:
                p.add_argument(f.flag, dest=f"{f.section}.{f.key}", help=f"{f.help} (default: {f.default})")
    return parser


def settings_from_args(args: argparse.Namespace) -> dict:
    opts = vars(args)
    overrides = {}
    for f in FIELDS:
        dest = f"{f.section}.{f.key}"
        if dest in opts:
            overrides[(f.section, f.key)] = opts[dest]
    if opts.get("cwce_percent"):
        overrides[("eval", "cwce_scale")] = 100.0
    s = resolve(load_settings(opts.get("config"), overrides))
    if "sde_steps" in opts:
        if opts["sde_steps"] < 0:
            raise ConfigError(f"--sde-steps must be >= 0, got {opts['sde_steps']}")
        s[("model", "terminal_time")] = opts["sde_steps"] * s[("model", "step_size")]
    return s


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        s = settings_from_args(args)
        if getattr(args, "print_config", False):
            sys.stdout.write(render_settings(s))
            return 0
        COMMANDS[args.command](s)
    except (SdeHnnError, OSError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
