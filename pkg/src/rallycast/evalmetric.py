"""Challenge scoring: per-candidate CE + MAE, best of six per rally, averaged over rallies."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ingest import Preprocessing, Rally, encode_rally
from .model import AUX_HEADS, FEATURE_COLUMN, GeneratedRally, MuLMINet, generate, load_checkpoint

N_CANDIDATES = 6
PROB_FLOOR = 1e-12
REPORT_FORMAT_VERSION = 1


class CandidateError(ValueError):
    pass


@dataclass
class CandidateSet:
    """Six continuations of one rally.

    ``shot_probs`` is ``(6, T, V)``, ``xy`` is ``(6, T, 2)`` in normalized units.
    """

    rally_id: str
    shot_probs: np.ndarray
    xy: np.ndarray
    aux_ids: np.ndarray | None = None

    def validate(self, n_candidates: int = N_CANDIDATES) -> None:
        p = np.asarray(self.shot_probs)
        if p.ndim != 3 or p.shape[0] != n_candidates:
            raise CandidateError(f"rally {self.rally_id}: expected {n_candidates} candidates, got shape {p.shape}")
        if np.asarray(self.xy).shape != (p.shape[0], p.shape[1], 2):
            raise CandidateError(f"rally {self.rally_id}: coordinate shape {np.shape(self.xy)} does not match {p.shape}")
        if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
            raise CandidateError(f"rally {self.rally_id}: probability vectors do not sum to 1")

    @classmethod
    def from_generated(cls, gen: GeneratedRally) -> "CandidateSet":
        return cls(gen.rally_id, gen.shot_probs, gen.xy, gen.ids)


def candidate_loss(shot_probs, xy, truth_types, truth_xy) -> tuple[float, float, float]:
    """Return ``(CE, MAE, CE + MAE)`` for one candidate.

    CE is the mean over steps of ``-ln p(true type)``; MAE the mean absolute
    coordinate error over steps and both axes.
    """
    shot_probs = np.asarray(shot_probs, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64)
    truth_types = np.asarray(truth_types)
    truth_xy = np.asarray(truth_xy, dtype=np.float64)
    if shot_probs.shape[0] != truth_types.shape[0] or xy.shape != truth_xy.shape:
        raise CandidateError(
            f"candidate length {shot_probs.shape[0]} / {xy.shape} does not match truth {truth_types.shape[0]} / {truth_xy.shape}"
        )
    p_true = shot_probs[np.arange(len(truth_types)), truth_types]
    if np.any(p_true < PROB_FLOOR):
        warnings.warn(f"true-class probability below {PROB_FLOOR}; clamped", RuntimeWarning, stacklevel=2)
        p_true = np.maximum(p_true, PROB_FLOOR)
    # correctly rounded sums, so the result does not depend on reduction order
    ce = math.fsum(-math.log(p) for p in p_true.tolist()) / len(p_true)
    mae = math.fsum(np.abs(xy - truth_xy).ravel().tolist()) / xy.size
    return ce, mae, ce + mae


@dataclass
class RallyScore:
    rally_id: str
    ce: list[float]
    mae: list[float]
    losses: list[float]
    score: float
    best: int  # 1-based index of the winning candidate
    aux_accuracy: dict[str, float] = field(default_factory=dict)

    @property
    def shot_loss(self) -> float:
        return self.ce[self.best - 1]

    @property
    def area_loss(self) -> float:
        return self.mae[self.best - 1]

    def to_dict(self) -> dict:
        return {
            "rally_id": self.rally_id,
            "score": self.score,
            "best_candidate": self.best,
            "shot_loss": self.shot_loss,
            "area_loss": self.area_loss,
            "candidates": [
                {"sample_id": i + 1, "ce": c, "mae": m, "loss": l}
                for i, (c, m, l) in enumerate(zip(self.ce, self.mae, self.losses))
            ],
            "aux_accuracy": self.aux_accuracy,
        }


def score(candidates: CandidateSet, truth_types, truth_xy) -> RallyScore:
    """Score = min over the six candidate losses; ties go to the lowest index."""
    candidates.validate()
    ce, mae, ls = [], [], []
    for c in range(candidates.shot_probs.shape[0]):
        a, b, l = candidate_loss(candidates.shot_probs[c], candidates.xy[c], truth_types, truth_xy)
        ce.append(a)
        mae.append(b)
        ls.append(l)
    best = int(np.argmin(ls))
    return RallyScore(candidates.rally_id, ce, mae, ls, ls[best], best + 1)


@dataclass
class MetricReport:
    rallies: list[RallyScore]
    clamped_coordinates: int = 0

    @property
    def total_loss(self) -> float:
        return float(np.mean([r.score for r in self.rallies]))

    @property
    def shot_loss(self) -> float:
        return float(np.mean([r.shot_loss for r in self.rallies]))

    @property
    def area_loss(self) -> float:
        return float(np.mean([r.area_loss for r in self.rallies]))

    def aggregate(self) -> dict:
        out = {
            "total_loss": self.total_loss,
            "area_loss": self.area_loss,
            "shot_loss": self.shot_loss,
            "n_rallies": len(self.rallies),
            "clamped_coordinates": self.clamped_coordinates,
        }
        aux = {}
        for r in self.rallies:
            for k, v in r.aux_accuracy.items():
                aux.setdefault(k, []).append(v)
        if aux:
            out["aux_accuracy"] = {k: float(np.mean(v)) for k, v in sorted(aux.items())}
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "aggregate": self.aggregate(),
            "rallies": [r.to_dict() for r in self.rallies],
        }

    def summary_table(self) -> str:
        return (
            f"{'Total loss':>12} {'Area loss':>12} {'Shot loss':>12}\n"
            f"{self.total_loss:12.4f} {self.area_loss:12.4f} {self.shot_loss:12.4f}"
        )

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _check_finite(report: MetricReport) -> None:
    if not math.isfinite(report.total_loss):
        raise FloatingPointError("non-finite aggregate score")


def predict_rallies(
    model: MuLMINet,
    preprocessing: Preprocessing,
    rallies: Sequence[Rally],
    seed: int,
    mode: str = "sample",
    temperature: float = 1.0,
    clamps: list | None = None,
) -> list[tuple[Rally, GeneratedRally]]:
    """Generate six candidates for every rally from its first ``prefix_len`` strokes."""
    S = model.config.prefix_len
    out = []
    for raw in rallies:
        if len(raw) < S + 1:
            raise ValueError(f"rally {raw.rally_id} has {len(raw)} strokes; need at least {S + 1}")
        norm = preprocessing.normalize([raw], clamps)[0]
        enc = encode_rally(norm, preprocessing.vocabularies)
        gen = generate(model, enc, len(raw) - S, N_CANDIDATES, seed, mode, temperature)
        out.append((norm, gen))
    return out


def evaluate_rallies(
    model: MuLMINet,
    preprocessing: Preprocessing,
    rallies: Sequence[Rally],
    seed: int,
    mode: str = "sample",
    temperature: float = 1.0,
) -> MetricReport:
    clamps: list = []
    scored = []
    S = model.config.prefix_len
    for norm, gen in predict_rallies(model, preprocessing, rallies, seed, mode, temperature, clamps):
        enc = encode_rally(norm, preprocessing.vocabularies)
        truth_ids = enc.ids[S:]
        rs = score(CandidateSet.from_generated(gen), truth_ids[:, 0], enc.xy[S:])
        winner = gen.ids[rs.best - 1]
        rs.aux_accuracy = {
            f: float(np.mean(winner[:, FEATURE_COLUMN[f]] == truth_ids[:, FEATURE_COLUMN[f]])) for f in AUX_HEADS
        }
        scored.append(rs)
    report = MetricReport(scored, clamped_coordinates=len(clamps))
    _check_finite(report)
    return report


def evaluate_dataset(checkpoint, rallies: Sequence[Rally], seed: int, mode: str = "sample",
                     temperature: float = 1.0) -> MetricReport:
    model, prep = load_checkpoint(checkpoint)
    return evaluate_rallies(model, prep, rallies, seed, mode, temperature)


def write_predictions(path, preprocessing: Preprocessing, results: Sequence[tuple[Rally, GeneratedRally]],
                      prefix_len: int = 4) -> None:
    """One row per (rally, candidate, predicted stroke)."""
    vocab = preprocessing.vocabularies["shot_type"]
    tokens = vocab.tokens()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rally_id", "sample_id", "ball_round", *(f"p_{t}" for t in tokens), "type",
                    "landing_x", "landing_y", "landing_x_raw", "landing_y_raw"])
        for _, gen in results:
            raw_x, raw_y = preprocessing.scaler.unscale(gen.xy[..., 0], gen.xy[..., 1])
            for c in range(gen.shot_probs.shape[0]):
                for t in range(gen.shot_probs.shape[1]):
                    w.writerow([
                        gen.rally_id, c + 1, prefix_len + t + 1,
                        *(format(float(p), ".12g") for p in gen.shot_probs[c, t]),
                        vocab.decode(int(gen.ids[c, t, 0])),
                        format(float(gen.xy[c, t, 0]), ".12g"), format(float(gen.xy[c, t, 1]), ".12g"),
                        format(float(raw_x[c, t]), ".12g"), format(float(raw_y[c, t]), ".12g"),
                    ])
