"""Command-line entry point: synth, corr, train, cv, select, predict, evaluate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .evalmetric import evaluate_rallies, predict_rallies, write_predictions
from .featurestats import DEFAULT_FEATURES, association_matrix, resolve_feature
from .ingest import DatasetError, GeneratorConfig, generate_synthetic, parse_dataset, write_dataset
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .numcore import CheckpointError
from .training import (
    DEFAULT_ALPHAS,
    DEFAULT_DIMS,
    DEFAULT_LAYERS,
    GenerationConfig,
    TrainConfig,
    cross_validate,
    default_grid,
    loss_selection,
    train,
)

log = logging.getLogger("rallycast")

MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


# -- config resolution -----------------------------------------------------------


@dataclasses.dataclass
class GridConfig:
    dims: list = dataclasses.field(default_factory=lambda: list(DEFAULT_DIMS))
    layers: list = dataclasses.field(default_factory=lambda: list(DEFAULT_LAYERS))
    alphas: list = dataclasses.field(default_factory=lambda: list(DEFAULT_ALPHAS))
    extra_factor: list | None = None  # [field_name, [v1, v2]]


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    generation: GenerationConfig = dataclasses.field(default_factory=GenerationConfig)
    grid: GridConfig = dataclasses.field(default_factory=GridConfig)
    synth: GeneratorConfig = dataclasses.field(default_factory=GeneratorConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"].pop("vocab_sizes", None)
        return d


def _update(obj, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config field '{section}.{key}' (valid: {', '.join(sorted(names))})")
        if isinstance(getattr(obj, key), tuple) and isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        setattr(obj, key, val)


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for section, values in raw.items():
        if section not in ("model", "train", "generation", "grid", "synth"):
            raise ConfigError(f"unknown config section '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be an object")
        _update(getattr(cfg, section), values, section)
    return cfg


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def _single(values: list, flag: str):
    if len(values) != 1:
        raise UsageError(f"{flag} takes a single value for this command")
    return values[0]


def resolve(args) -> RunConfig:
    """Defaults < config file < command-line flags."""
    cfg = load_config(getattr(args, "config", None))
    grid_cmd = args.command == "select"
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "dim", None):
        dims = _int_list(args.dim, "--dim")
        if grid_cmd:
            cfg.grid.dims = dims
        else:
            cfg.model.dim = _single(dims, "--dim")
    if getattr(args, "layers", None):
        layers = _int_list(args.layers, "--layers")
        if grid_cmd:
            cfg.grid.layers = layers
        else:
            cfg.model.layers = _single(layers, "--layers")
    if getattr(args, "alpha", None):
        alphas = _float_list(args.alpha, "--alpha")
        if grid_cmd:
            cfg.grid.alphas = alphas
        else:
            cfg.train.alpha = _single(alphas, "--alpha")
    for flag, section, name in (
        ("epochs", "train", "epochs"),
        ("folds", "train", "k_folds"),
        ("lr", "train", "learning_rate"),
        ("batch_size", "train", "batch_size"),
        ("heads", "model", "n_heads"),
        ("dropout", "model", "dropout"),
        ("mode", "generation", "mode"),
        ("temperature", "generation", "temperature"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(getattr(cfg, section), name, val)
    if getattr(args, "extra_factor", None):
        name, _, values = args.extra_factor.partition("=")
        vals = [_literal(v) for v in values.split(",")]
        if not name or len(vals) != 2:
            raise UsageError("--extra-factor expects NAME=V1,V2")
        cfg.grid.extra_factor = [name, vals]
    cfg.train.validate()
    cfg.generation.validate()
    if cfg.model.dim % max(cfg.model.n_heads, 1):
        raise ConfigError(f"model.dim ({cfg.model.dim}) must be divisible by model.n_heads ({cfg.model.n_heads})")
    if cfg.model.layers < 1:
        raise ConfigError(f"model.layers must be >= 1, got {cfg.model.layers}")
    for d in cfg.grid.dims:
        if d < 1 or d % cfg.model.n_heads:
            raise ConfigError(f"grid.dims entry {d} must be a positive multiple of model.n_heads ({cfg.model.n_heads})")
    for a in cfg.grid.alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"grid.alphas entry {a} must be in [0, 1]")
    return cfg


# -- outputs ---------------------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    return repr(float(x))


def _read_rallies(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"data file not found: {path}")
    return parse_dataset(path)


def _write_curve(path: Path, curve, running=None) -> None:
    """Per-epoch training-split losses; ``running_total`` is the dropout-mode batch average."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fields = ["total", "shot_type", "landing", "backhand", "aroundhead", "height", "player_loc", "opponent_loc"]
        w.writerow(["epoch", *fields, "running_total"])
        running = running or [None] * len(curve)
        for i, (b, r) in enumerate(zip(curve, running), start=1):
            w.writerow([i, *(_fmt(getattr(b, f)) for f in fields), "" if r is None else _fmt(r.total)])


# -- subcommands --------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, out: Path) -> list[str]:
    params = cfg.synth
    if args.min_length is not None or args.max_length is not None:
        params = dataclasses.replace(
            params,
            min_length=args.min_length if args.min_length is not None else params.min_length,
            max_length=args.max_length if args.max_length is not None else params.max_length,
        )
    if args.height_noise is not None:
        params = dataclasses.replace(params, height_noise=args.height_noise)
    cfg.synth = params
    rallies = generate_synthetic(args.rallies, cfg.train.seed, params)
    write_dataset(rallies, out / "rallies.csv")
    print(f"wrote {len(rallies)} rallies to {out / 'rallies.csv'}")
    return []


def cmd_corr(args, cfg, out: Path) -> list[str]:
    features = [f.strip() for f in args.features.split(",")] if args.features else list(DEFAULT_FEATURES)
    for f in features:
        resolve_feature(f)
    rallies = _read_rallies(args.data)
    mat = association_matrix(rallies, features)
    (out / "association_matrix.csv").write_text(mat.to_csv(), encoding="utf-8")
    print(mat.render())
    return [args.data]


def cmd_train(args, cfg, out: Path) -> list[str]:
    rallies = _read_rallies(args.data)
    result = train(rallies, cfg.model, cfg.train)
    save_checkpoint(out / "model.ckpt", result.model, result.preprocessing, {"train_config": dataclasses.asdict(cfg.train)})
    result.preprocessing.save(out / "preprocessing.json")
    _write_curve(out / "loss_curve.csv", result.curve, result.running_curve)
    last = result.curve[-1]
    print(f"trained {cfg.train.epochs} epochs: L_T={last.total:.4f} L_ST={last.shot_type:.4f} L_SL={last.landing:.4f}")
    return [args.data]


def cmd_cv(args, cfg, out: Path) -> list[str]:
    rallies = _read_rallies(args.data)
    cv = cross_validate(rallies, cfg.model, cfg.train, cfg.generation, out / "cv")
    result = cv.to_dict()
    for f in result["folds"]:
        f["checkpoint"] = str(Path(f["checkpoint"]).relative_to(out))
    _write_json(out / "cv_results.json", result)
    for k, (report, curve, running) in enumerate(zip(cv.reports, cv.curves, cv.running_curves), start=1):
        report.write_json(out / "cv" / f"metric_report_fold_{k}.json")
        _write_curve(out / "cv" / f"loss_curve_fold_{k}.csv", curve, running)
    print(f"{cfg.train.k_folds}-fold CV: mean score {cv.mean_score:.4f} (sd {cv.sd_score:.4f})")
    return [args.data]


def cmd_select(args, cfg, out: Path) -> list[str]:
    rallies = _read_rallies(args.data)
    extra = tuple(cfg.grid.extra_factor) if cfg.grid.extra_factor else None
    grid = default_grid(cfg.grid.dims, cfg.grid.layers, cfg.grid.alphas, extra)
    sel = loss_selection(rallies, grid, cfg.model, cfg.train, cfg.generation, out / "grid")
    k = cfg.train.k_folds

    def rel(p):
        return str(Path(p).relative_to(out)) if p else ""

    with open(out / "grid_results.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "dim", "layers", "alpha", "status",
                    *(f"fold_{i}" for i in range(1, k + 1)), "mean", "sd", "mean_ce", "mean_mae", "wall_time", "error"])
        for r in sel.results:
            folds = [_fmt(s) for s in r.fold_scores] or [""] * k
            w.writerow([r.config_id, r.point.dim, r.point.layers, repr(r.point.alpha), r.status, *folds,
                        _fmt(r.mean_score), _fmt(r.sd_score), _fmt(r.mean_ce), _fmt(r.mean_mae),
                        f"{r.wall_time:.3f}", r.error])
    with open(out / "training_curves.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "fold", "epoch", "total"])
        for r in sel.results:
            for f, curve in enumerate(r.curves, start=1):
                for e, total in enumerate(curve, start=1):
                    w.writerow([r.config_id, f, e, _fmt(total)])
    report = sel.to_report()
    for win in report["winners"].values():
        win["checkpoint"] = rel(win["checkpoint"])
        win["fold_checkpoints"] = [rel(p) for p in win["fold_checkpoints"]]
    _write_json(out / "selection_report.json", report)
    for cat, win in sorted(report["winners"].items()):
        print(f"best {cat:>5}: {win['config_id']} (mean {win['mean']:.4f})")
    if report["failed"]:
        print(f"{len(report['failed'])} grid point(s) failed: {', '.join(report['failed'])}", file=sys.stderr)
    return [args.data]


def _load_for_inference(args):
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    return load_checkpoint(args.checkpoint)


def cmd_predict(args, cfg, out: Path) -> list[str]:
    model, prep = _load_for_inference(args)
    rallies = _read_rallies(args.data)
    results = predict_rallies(model, prep, rallies, cfg.train.seed, cfg.generation.mode, cfg.generation.temperature)
    write_predictions(out / "predictions.csv", prep, results, model.config.prefix_len)
    print(f"wrote predictions for {len(results)} rallies to {out / 'predictions.csv'}")
    return [args.checkpoint, args.data]


def cmd_evaluate(args, cfg, out: Path) -> list[str]:
    model, prep = _load_for_inference(args)
    rallies = _read_rallies(args.data)
    report = evaluate_rallies(model, prep, rallies, cfg.train.seed, cfg.generation.mode, cfg.generation.temperature)
    report.write_json(out / "metric_report.json")
    print(report.summary_table())
    return [args.checkpoint, args.data]


COMMANDS = {
    "synth": cmd_synth,
    "corr": cmd_corr,
    "train": cmd_train,
    "cv": cmd_cv,
    "select": cmd_select,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rallycast", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rallycast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="stroke CSV")

    def model_flags(p):
        p.add_argument("--dim")
        p.add_argument("--layers")
        p.add_argument("--heads", type=_positive_int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--alpha")
        p.add_argument("--epochs", type=_positive_int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=_positive_int)

    def gen_flags(p):
        p.add_argument("--mode", choices=("sample", "argmax"))
        p.add_argument("--temperature", type=float)

    p = sub.add_parser("synth", help="generate a synthetic stroke CSV")
    common(p, data=False)
    p.add_argument("--rallies", type=_positive_int, required=True)
    p.add_argument("--min-length", type=_positive_int)
    p.add_argument("--max-length", type=_positive_int)
    p.add_argument("--height-noise", type=float)

    p = sub.add_parser("corr", help="Cramér's V association matrix")
    common(p)
    p.add_argument("--features", help="comma-separated feature names")

    p = sub.add_parser("train", help="train one model")
    common(p)
    model_flags(p)

    for name, helptext in (("cv", "k-fold cross-validation"), ("select", "grid search with k-fold CV")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        model_flags(p)
        gen_flags(p)
        p.add_argument("--folds", type=_positive_int)
        if name == "select":
            p.add_argument("--extra-factor", help="optional extra grid axis, NAME=V1,V2")

    for name in ("predict", "evaluate"):
        p = sub.add_parser(name, help=f"{name} with a checkpoint")
        common(p)
        gen_flags(p)
        p.add_argument("--checkpoint", required=True)
    return parser


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    started = _now()
    manifest = {"subcommand": args.command, "tool_version": __version__, "started_at": started,
                "output_dir": str(out)}
    status, code = "ok", 0
    inputs: list[str] = []
    try:
        cfg = resolve(args)
        manifest["config"] = cfg.to_dict()
        manifest["seed"] = cfg.train.seed
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, cfg, out)
        manifest["config"] = cfg.to_dict()
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError,
            FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"rallycast {args.command}: error: {msg}", file=sys.stderr)
        status, code = "error", 1
        manifest["error"] = msg
    manifest["status"] = status
    manifest["inputs"] = {p: _digest(p) for p in inputs if Path(p).exists()}
    manifest["finished_at"] = _now()
    if out.is_dir():
        _write_json(out / MANIFEST, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
