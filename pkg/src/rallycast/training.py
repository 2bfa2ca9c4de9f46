"""Composite-loss training, k-fold cross-validation and the loss-selection grid search."""

from __future__ import annotations

import concurrent.futures as cf
import itertools
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .evalmetric import MetricReport, evaluate_rallies
from .ingest import (
    PAD_ID,
    DatasetError,
    EncodedRally,
    Preprocessing,
    Rally,
    encode_rally,
    fit_preprocessing,
    split_folds,
)
from .model import (
    AUX_HEADS,
    FEATURE_COLUMN,
    ConfigError,
    HeadOutputs,
    ModelConfig,
    MuLMINet,
    save_checkpoint,
)
from .seeding import stream

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# Default grid axes.
DEFAULT_DIMS = (32, 64, 128)
DEFAULT_LAYERS = (1, 2, 3)
DEFAULT_ALPHAS = (0.3, 0.35, 0.4, 0.45)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.4
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    k_folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"train.alpha must be in [0, 1], got {self.alpha}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.k_folds < 2:
            raise ConfigError(f"train.k_folds must be >= 2, got {self.k_folds}")


@dataclass
class GenerationConfig:
    mode: str = "sample"
    temperature: float = 1.0

    def validate(self) -> None:
        if self.mode not in ("sample", "argmax"):
            raise ConfigError(f"generation.mode must be 'sample' or 'argmax', got {self.mode!r}")
        if self.temperature < 0:
            raise ConfigError(f"generation.temperature must be >= 0, got {self.temperature}")


# -- loss ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    alpha: float
    total: float
    shot_type: float
    landing: float
    backhand: float
    aroundhead: float
    height: float
    player_loc: float
    opponent_loc: float

    @property
    def aux_sum(self) -> float:
        return self.backhand + self.aroundhead + self.height + self.player_loc + self.opponent_loc

    def recomputed_total(self) -> float:
        return combine_losses(self.alpha, self.shot_type, self.landing, self.backhand, self.aroundhead,
                              self.height, self.player_loc, self.opponent_loc)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def mean(items: Sequence["LossBreakdown"], weights: Sequence[float] | None = None) -> "LossBreakdown":
        """Weighted mean of each component; with per-batch target counts as weights this is the per-step mean."""
        fields = [f for f in LossBreakdown.__dataclass_fields__ if f != "alpha"]
        vals = {f: float(np.average([getattr(b, f) for b in items], weights=weights)) for f in fields}
        return LossBreakdown(alpha=items[0].alpha, **vals)


def combine_losses(alpha, shot_type, landing, backhand, aroundhead, height, player_loc, opponent_loc):
    """alpha * (shot + landing) + (1 - alpha) * (sum of the five auxiliary losses)."""
    return alpha * (shot_type + landing) + (1.0 - alpha) * (backhand + aroundhead + height + player_loc + opponent_loc)


def masked_cross_entropy(logits: nc.Tensor, targets: np.ndarray, mask: np.ndarray) -> nc.Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` is true."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool) & (targets != PAD_ID)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross entropy over an empty target window")
    logp = nc.log_softmax(logits, axis=-1)
    idx = np.nonzero(mask)
    picked = logp[idx + (targets[idx],)]
    return nc.scale(nc.tsum(picked), -1.0 / count)


def bivariate_nll(mu: nc.Tensor, sigma: nc.Tensor, rho: nc.Tensor, xy: np.ndarray, mask: np.ndarray) -> nc.Tensor:
    """Mean negative log-density of ``xy`` under the per-step bivariate Gaussian."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("landing NLL over an empty target window")
    idx = np.nonzero(mask)
    m, s, r = mu[idx], sigma[idx], rho[idx]
    target = xy[idx]
    dx = (nc.Tensor(target[:, 0]) - m[:, 0]) / s[:, 0]
    dy = (nc.Tensor(target[:, 1]) - m[:, 1]) / s[:, 1]
    one_m = 1.0 - nc.square(r)
    z = nc.square(dx) + nc.square(dy) - 2.0 * r * dx * dy
    nll = LOG_2PI + nc.log(s[:, 0]) + nc.log(s[:, 1]) + 0.5 * nc.log(one_m) + z / (2.0 * one_m)
    return nc.scale(nc.tsum(nll), 1.0 / count)


_AUX_FIELDS = {
    "backhand": "backhand",
    "aroundhead": "aroundhead",
    "landing_height": "height",
    "player_location_area": "player_loc",
    "opponent_location_area": "opponent_loc",
}


def composite_loss(
    out: HeadOutputs, target_ids: np.ndarray, target_xy: np.ndarray, mask: np.ndarray, alpha: float
) -> tuple[nc.Tensor, LossBreakdown]:
    """Weighted sum of shot, landing and auxiliary losses over the masked steps."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("composite_loss: every target step is masked (all-PAD window)")
    shot = masked_cross_entropy(out.logits["shot_type"], target_ids[..., FEATURE_COLUMN["shot_type"]], mask)
    landing = bivariate_nll(out.mu, out.sigma, out.rho, target_xy, mask)
    aux = {
        _AUX_FIELDS[f]: masked_cross_entropy(out.logits[f], target_ids[..., FEATURE_COLUMN[f]], mask)
        for f in AUX_HEADS
    }
    aux_total = aux["backhand"] + aux["aroundhead"] + aux["height"] + aux["player_loc"] + aux["opponent_loc"]
    total = nc.scale(shot + landing, alpha) + nc.scale(aux_total, 1.0 - alpha)
    breakdown = LossBreakdown(
        alpha=float(alpha),
        total=total.item(),
        shot_type=shot.item(),
        landing=landing.item(),
        **{k: v.item() for k, v in aux.items()},
    )
    return total, breakdown


# -- batching -----------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray
    xy: np.ndarray
    lengths: np.ndarray
    prefix_len: int

    @property
    def target_ids(self) -> np.ndarray:
        return self.ids[:, 1:]

    @property
    def target_xy(self) -> np.ndarray:
        return self.xy[:, 1:]

    @property
    def loss_mask(self) -> np.ndarray:
        """True for decoder outputs whose target is a real stroke beyond the prefix."""
        t = np.arange(1, self.ids.shape[1])
        return (t[None, :] >= self.prefix_len) & (t[None, :] < self.lengths[:, None])


def collate(rallies: Sequence[EncodedRally], prefix_len: int = 4) -> Batch:
    n = max(r.length for r in rallies)
    ids = np.full((len(rallies), n, rallies[0].ids.shape[1]), PAD_ID, dtype=np.int64)
    xy = np.zeros((len(rallies), n, 2))
    for i, r in enumerate(rallies):
        ids[i, :r.length] = r.ids
        xy[i, :r.length] = r.xy
    return Batch(ids, xy, np.array([r.length for r in rallies]), prefix_len)


def make_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by length (stable), chunk, then shuffle the chunk order."""
    order = rng.permutation(len(lengths))
    order = sorted(order, key=lambda i: lengths[i])
    chunks = [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


# -- training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    """``curve`` holds the end-of-epoch loss on the whole training split with dropout off;
    ``running_curve`` the mean of the per-batch losses seen while training (dropout on)."""

    model: MuLMINet
    preprocessing: Preprocessing
    curve: list[LossBreakdown]
    batch_losses: list[LossBreakdown] = field(default_factory=list)
    running_curve: list[LossBreakdown] = field(default_factory=list)


def split_loss(model: MuLMINet, encoded: Sequence[EncodedRally], alpha: float, batch_size: int = 32) -> LossBreakdown:
    """Per-step composite loss over ``encoded`` without dropout or gradient tracking."""
    S = model.config.prefix_len
    parts, counts = [], []
    with nc.no_grad():
        for i in range(0, len(encoded), batch_size):
            batch = collate(encoded[i:i + batch_size], S)
            out = model.forward(batch.ids, batch.xy)
            parts.append(composite_loss(out, batch.target_ids, batch.target_xy, batch.loss_mask, alpha)[1])
            counts.append(int(batch.loss_mask.sum()))
    return LossBreakdown.mean(parts, counts)


def _resolve_model_config(config: ModelConfig, prep: Preprocessing) -> ModelConfig:
    return replace(config, vocab_sizes={k: v.size for k, v in prep.vocabularies.items()})


def train(
    rallies: Sequence[Rally],
    model_config: ModelConfig,
    train_config: TrainConfig,
    preprocessing: Preprocessing | None = None,
    on_batch: Callable[[int, int, LossBreakdown], None] | None = None,
    init_model: MuLMINet | None = None,
) -> TrainResult:
    """Mini-batch Adam on the composite loss with teacher forcing.

    Vocabularies and the coordinate scaler are fitted on ``rallies`` unless
    given. Rallies are processed in rally-id order, so the result does not
    depend on input order.
    """
    train_config.validate()
    if not rallies:
        raise DatasetError("training set is empty")
    S = model_config.prefix_len
    short = [r.rally_id for r in rallies if len(r) < S + 1]
    if short:
        raise DatasetError(f"training rallies need at least {S + 1} strokes; too short: {short[:10]}")
    rallies = sorted(rallies, key=lambda r: r.rally_id)
    prep = preprocessing or fit_preprocessing(rallies)
    encoded = [encode_rally(r, prep.vocabularies) for r in prep.normalize(rallies)]
    if init_model is not None:
        model = init_model
    else:
        model = MuLMINet(_resolve_model_config(model_config, prep), seed=train_config.seed)
    state = nc.AdamState(lr=train_config.learning_rate)
    lengths = [r.length for r in encoded]
    curve, running, all_batches = [], [], []
    for epoch in range(train_config.epochs):
        shuffle_rng = stream(train_config.seed, "shuffle", epoch)
        dropout_rng = stream(train_config.seed, "dropout", epoch)
        epoch_losses, epoch_counts = [], []
        for b, idx in enumerate(make_batches(lengths, train_config.batch_size, shuffle_rng)):
            batch = collate([encoded[i] for i in idx], S)
            out = model.forward(batch.ids, batch.xy, rng=dropout_rng)
            loss, breakdown = composite_loss(out, batch.target_ids, batch.target_xy, batch.loss_mask,
                                             train_config.alpha)
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(f"loss is {breakdown.total} at epoch {epoch + 1}, batch {b + 1}")
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            nc.adam_step(model.params, grads, state)
            for p in model.params.values():
                p.grad = None
            epoch_losses.append(breakdown)
            epoch_counts.append(int(batch.loss_mask.sum()))
            if on_batch is not None:
                on_batch(epoch, b, breakdown)
        running.append(LossBreakdown.mean(epoch_losses, epoch_counts))
        all_batches.extend(epoch_losses)
        clean = split_loss(model, encoded, train_config.alpha, train_config.batch_size)
        if not math.isfinite(clean.total):
            raise TrainingDivergedError(f"training-split loss is {clean.total} after epoch {epoch + 1}")
        curve.append(clean)
        log.debug("epoch %d: total %.5f shot %.5f", epoch + 1, clean.total, clean.shot_type)
    return TrainResult(model, prep, curve, all_batches, running)


def non_increasing_fraction(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 1.0
    steps = np.diff(np.asarray(values, dtype=np.float64))
    return float(np.mean(steps <= 0))


# -- cross-validation ---------------------------------------------------------------------


@dataclass
class CVResult:
    fold_scores: list[float]
    fold_ce: list[float]
    fold_mae: list[float]
    reports: list[MetricReport]
    curves: list[list[LossBreakdown]]
    checkpoints: list[str]
    running_curves: list[list[LossBreakdown]] = field(default_factory=list)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.fold_scores))

    @property
    def sd_score(self) -> float:
        return float(np.std(self.fold_scores, ddof=1)) if len(self.fold_scores) > 1 else 0.0

    @property
    def mean_ce(self) -> float:
        return float(np.mean(self.fold_ce))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.fold_mae))

    def to_dict(self) -> dict:
        return {
            "mean_score": self.mean_score,
            "sd_score": self.sd_score,
            "mean_shot_loss": self.mean_ce,
            "mean_area_loss": self.mean_mae,
            "folds": [
                {"fold": i + 1, "score": s, "shot_loss": c, "area_loss": m, "checkpoint": ck,
                 "final_train_loss": curve[-1].total}
                for i, (s, c, m, ck, curve) in enumerate(
                    zip(self.fold_scores, self.fold_ce, self.fold_mae, self.checkpoints, self.curves))
            ],
        }


def cross_validate(
    rallies: Sequence[Rally],
    model_config: ModelConfig,
    train_config: TrainConfig,
    generation: GenerationConfig | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
) -> CVResult:
    """Train one model per fold and score it on the fold's holdout rallies.

    Each fold fits its own vocabularies and scaler on its training split.
    Checkpoints are written as ``fold_<k>.ckpt`` under ``checkpoint_dir``.
    """
    train_config.validate()
    generation = generation or GenerationConfig()
    generation.validate()
    by_id = {r.rally_id: r for r in rallies}
    folds = split_folds(rallies, train_config.k_folds, train_config.seed)
    scores, ces, maes, reports, curves, paths, running = [], [], [], [], [], [], []
    for k, (train_ids, hold_ids) in enumerate(folds, start=1):
        result = train([by_id[i] for i in train_ids], model_config, train_config)
        report = evaluate_rallies(result.model, result.preprocessing, [by_id[i] for i in hold_ids],
                                  train_config.seed, generation.mode, generation.temperature)
        path = ""
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            path = str(Path(checkpoint_dir) / f"fold_{k}.ckpt")
            save_checkpoint(path, result.model, result.preprocessing,
                            {"fold": k, "train_config": asdict(train_config)})
        scores.append(report.total_loss)
        ces.append(report.shot_loss)
        maes.append(report.area_loss)
        reports.append(report)
        curves.append(result.curve)
        running.append(result.running_curve)
        paths.append(path)
    return CVResult(scores, ces, maes, reports, curves, paths, running)


# -- loss selection ---------------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    dim: int
    layers: int
    alpha: float
    epochs: int | None = None
    overrides: tuple[tuple[str, object], ...] = ()

    @property
    def config_id(self) -> str:
        cid = f"d{self.dim}_L{self.layers}_a{self.alpha:g}"
        for k, v in self.overrides:
            cid += f"_{k}{v}"
        return cid


def default_grid(
    dims: Sequence[int] = DEFAULT_DIMS,
    layers: Sequence[int] = DEFAULT_LAYERS,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    extra_factor: tuple[str, Sequence] | None = None,
) -> list[GridPoint]:
    """Cartesian product of the value sets; ``extra_factor=(field, values)`` adds one more axis."""
    points = [GridPoint(d, l, a) for d, l, a in itertools.product(dims, layers, alphas)]
    if extra_factor is not None:
        name, values = extra_factor
        points = [replace(p, overrides=((name, v),)) for p in points for v in values]
    return points


@dataclass
class GridResult:
    point: GridPoint
    fold_scores: list[float]
    mean_score: float
    sd_score: float
    mean_ce: float
    mean_mae: float
    wall_time: float
    checkpoints: list[str]
    status: str = "ok"
    error: str = ""
    curves: list[list[float]] = field(default_factory=list)

    @property
    def config_id(self) -> str:
        return self.point.config_id

    @property
    def best_checkpoint(self) -> str:
        if not self.fold_scores or not self.checkpoints:
            return ""
        return self.checkpoints[int(np.argmin(self.fold_scores))]


@dataclass
class SelectionResult:
    results: list[GridResult]
    winners: dict[str, str]

    def to_report(self) -> dict:
        by_id = {r.config_id: r for r in self.results}
        return {
            "winners": {
                cat: {
                    "config_id": cid,
                    "dim": by_id[cid].point.dim,
                    "layers": by_id[cid].point.layers,
                    "alpha": by_id[cid].point.alpha,
                    "mean": getattr(by_id[cid], _CATEGORY_FIELD[cat]),
                    "checkpoint": by_id[cid].best_checkpoint,
                    "fold_checkpoints": by_id[cid].checkpoints,
                }
                for cat, cid in self.winners.items()
            },
            "n_points": len(self.results),
            "failed": [r.config_id for r in self.results if r.status != "ok"],
        }


_CATEGORY_FIELD = {"total": "mean_score", "shot": "mean_ce", "area": "mean_mae"}


def _apply_point(point: GridPoint, model_config: ModelConfig, train_config: TrainConfig):
    mc = replace(model_config, dim=point.dim, layers=point.layers)
    tc = replace(train_config, alpha=point.alpha)
    if point.epochs is not None:
        tc = replace(tc, epochs=point.epochs)
    for name, value in point.overrides:
        if hasattr(mc, name):
            mc = replace(mc, **{name: value})
        elif hasattr(tc, name):
            tc = replace(tc, **{name: value})
        else:
            raise ConfigError(f"grid factor '{name}' is not a model or train config field")
    return mc, tc


def _run_point(args) -> GridResult:
    point, rallies, model_config, train_config, generation, root = args
    start = time.perf_counter()
    ckdir = None if root is None else Path(root) / point.config_id
    try:
        mc, tc = _apply_point(point, model_config, train_config)
        cv = cross_validate(rallies, mc, tc, generation, ckdir)
    except Exception as exc:  # recorded per point, never dropped
        log.warning("grid point %s failed: %s", point.config_id, exc)
        return GridResult(point, [], math.nan, math.nan, math.nan, math.nan,
                          time.perf_counter() - start, [], "failed", f"{type(exc).__name__}: {exc}")
    return GridResult(point, cv.fold_scores, cv.mean_score, cv.sd_score, cv.mean_ce, cv.mean_mae,
                      time.perf_counter() - start, cv.checkpoints,
                      curves=[[b.total for b in curve] for curve in cv.curves])


def worker_count() -> int:
    raw = os.environ.get("RALLYCAST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"RALLYCAST_THREADS must be a positive integer, got {raw!r}") from None


def loss_selection(
    rallies: Sequence[Rally],
    grid: Sequence[GridPoint],
    model_config: ModelConfig,
    train_config: TrainConfig,
    generation: GenerationConfig | None = None,
    checkpoint_root: str | os.PathLike | None = None,
    workers: int | None = None,
) -> SelectionResult:
    """Cross-validate every grid point and name the lowest mean total, shot and area losses."""
    if not grid:
        raise ValueError("loss_selection needs a non-empty grid")
    ids = [p.config_id for p in grid]
    if len(set(ids)) != len(ids):
        raise ValueError("grid contains duplicate configurations")
    generation = generation or GenerationConfig()
    workers = workers or worker_count()
    jobs = [(p, list(rallies), model_config, train_config, generation, checkpoint_root) for p in grid]
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    ok = [r for r in results if r.status == "ok"]
    winners = {}
    if ok:
        for cat, attr in _CATEGORY_FIELD.items():
            winners[cat] = min(ok, key=lambda r: (getattr(r, attr), r.config_id)).config_id
    return SelectionResult(results, winners)
