"""Stroke-log ingestion: CSV parsing, vocabularies, coordinate scaling, folds, synthetic rallies."""

from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .seeding import stream

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
PREPROCESSING_FORMAT_VERSION = 1

# Order matters: it fixes the column layout of encoded id arrays.
CATEGORICAL_FEATURES = (
    "shot_type",
    "aroundhead",
    "backhand",
    "landing_height",
    "player_location_area",
    "opponent_location_area",
    "player_id",
)

DEFAULT_SCHEMA = {
    "rally_id": "rally",
    "ball_round": "ball_round",
    "player_id": "player",
    "shot_type": "type",
    "aroundhead": "aroundhead",
    "backhand": "backhand",
    "landing_height": "landing_height",
    "landing_x": "landing_x",
    "landing_y": "landing_y",
    "player_location_area": "player_location_area",
    "opponent_location_area": "opponent_location_area",
}


class DatasetError(ValueError):
    """Malformed input data. ``issues`` holds ``(line_number, message)`` pairs."""

    def __init__(self, message: str, issues: Sequence[tuple[int | None, str]] = ()):
        self.issues = list(issues)
        if self.issues:
            detail = "; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.issues[:20])
            more = f" (+{len(self.issues) - 20} more)" if len(self.issues) > 20 else ""
            message = f"{message}: {detail}{more}"
        super().__init__(message)


class SchemaError(DatasetError):
    pass


@dataclass(frozen=True)
class Stroke:
    player_id: str
    shot_type: str
    landing_x: float
    landing_y: float
    aroundhead: str
    backhand: str
    landing_height: str
    player_location_area: str
    opponent_location_area: str
    ball_round: int
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Rally:
    rally_id: str
    strokes: tuple[Stroke, ...]

    @property
    def length(self) -> int:
        return len(self.strokes)

    def __len__(self) -> int:
        return len(self.strokes)


def check_rally(rally: Rally, min_length: int = 1) -> None:
    """Raise DatasetError if ``rally`` breaks the ball_round, alternation or length rules."""
    rounds = [s.ball_round for s in rally.strokes]
    if rounds != list(range(1, len(rounds) + 1)):
        raise DatasetError(f"rally {rally.rally_id}: ball_round values {rounds} are not 1..n")
    for a, b in zip(rally.strokes, rally.strokes[1:]):
        if a.player_id == b.player_id:
            raise DatasetError(
                f"rally {rally.rally_id}: player {a.player_id} hits consecutive strokes at ball_round {b.ball_round}"
            )
    if len(rally.strokes) < min_length:
        raise DatasetError(f"rally {rally.rally_id}: length {len(rally.strokes)} < required {min_length}")


# -- CSV ---------------------------------------------------------------------------


def _open_text(source) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8-sig", newline="")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8-sig"), newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def parse_dataset(source, schema: Mapping[str, str] | None = None) -> list[Rally]:
    """Parse a stroke-log CSV into rallies.

    ``source`` may be a path, raw bytes, or a binary/text stream. Strokes are
    grouped by rally id (rallies keep first-appearance order) and sorted by
    ``ball_round``. Every malformed row and every rally with a ball_round gap
    is collected and reported together in one DatasetError.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    fh = _open_text(source)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            return []
        header = [h.strip() for h in header]
        reader.fieldnames = header
        for key, col in schema.items():
            if col not in header:
                raise SchemaError(f"missing required column '{col}' (for {key})")
        known = set(schema.values())
        extra_cols = [h for h in header if h not in known]

        issues: list[tuple[int | None, str]] = []
        grouped: dict[str, list[tuple[int, Stroke]]] = defaultdict(list)
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                issues.append((line, "wrong number of fields"))
                continue
            rid = row[schema["rally_id"]].strip()
            try:
                ball_round = int(row[schema["ball_round"]].strip())
                if ball_round < 1:
                    raise ValueError
            except ValueError:
                issues.append((line, f"ball_round {row[schema['ball_round']]!r} is not a positive integer"))
                continue
            try:
                x = float(row[schema["landing_x"]])
                y = float(row[schema["landing_y"]])
                if not (np.isfinite(x) and np.isfinite(y)):
                    raise ValueError
            except ValueError:
                issues.append(
                    (line, f"non-numeric coordinate ({row[schema['landing_x']]!r}, {row[schema['landing_y']]!r})")
                )
                continue
            stroke = Stroke(
                player_id=row[schema["player_id"]].strip(),
                shot_type=row[schema["shot_type"]].strip(),
                landing_x=x,
                landing_y=y,
                aroundhead=row[schema["aroundhead"]].strip(),
                backhand=row[schema["backhand"]].strip(),
                landing_height=row[schema["landing_height"]].strip(),
                player_location_area=row[schema["player_location_area"]].strip(),
                opponent_location_area=row[schema["opponent_location_area"]].strip(),
                ball_round=ball_round,
                extras={c: row[c] for c in extra_cols},
            )
            grouped[rid].append((line, stroke))
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()
        elif isinstance(fh, io.TextIOWrapper) and fh is not source:
            fh.detach()

    rallies = []
    for rid, items in grouped.items():
        items.sort(key=lambda it: it[1].ball_round)
        rounds = [s.ball_round for _, s in items]
        if rounds != list(range(1, len(rounds) + 1)):
            missing = sorted(set(range(1, max(rounds) + 1)) - set(rounds))
            dup = sorted(r for r, c in Counter(rounds).items() if c > 1)
            what = f"missing ball_round {missing}" if missing else f"duplicate ball_round {dup}"
            issues.append((items[-1][0], f"rally {rid}: {what}"))
            continue
        rally = Rally(rid, tuple(s for _, s in items))
        try:
            check_rally(rally)
        except DatasetError as exc:
            issues.append((None, str(exc)))
            continue
        rallies.append(rally)
    if issues:
        issues.sort(key=lambda it: (it[0] is None, it[0] or 0))
        raise DatasetError("malformed dataset", issues)
    return rallies


def write_dataset(rallies: Iterable[Rally], dest, schema: Mapping[str, str] | None = None) -> None:
    """Write rallies as CSV in the external column schema (inverse of parse_dataset)."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    rallies = list(rallies)
    extra_cols = sorted({c for r in rallies for s in r.strokes for c in s.extras})
    header = list(schema.values()) + extra_cols
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rally in rallies:
            for s in rally.strokes:
                values = {
                    "rally_id": rally.rally_id,
                    "ball_round": str(s.ball_round),
                    "player_id": s.player_id,
                    "shot_type": s.shot_type,
                    "aroundhead": s.aroundhead,
                    "backhand": s.backhand,
                    "landing_height": s.landing_height,
                    "landing_x": repr(float(s.landing_x)),
                    "landing_y": repr(float(s.landing_y)),
                    "player_location_area": s.player_location_area,
                    "opponent_location_area": s.opponent_location_area,
                }
                writer.writerow([values[k] for k in schema] + [s.extras.get(c, "") for c in extra_cols])
    finally:
        if own:
            fh.close()


# -- vocabularies ---------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Categorical value <-> id map with PAD=0 and UNK=1 reserved."""

    name: str
    values: tuple[str, ...]

    @cached_property
    def id_of(self) -> dict[str, int]:
        return {v: i + 2 for i, v in enumerate(self.values)}

    @property
    def value_of(self) -> dict[int, str]:
        return {i + 2: v for i, v in enumerate(self.values)} | {PAD_ID: PAD_TOKEN, UNK_ID: UNK_TOKEN}

    @property
    def size(self) -> int:
        return len(self.values) + 2

    def __len__(self) -> int:
        return self.size

    def encode(self, value: str) -> int:
        return self.id_of.get(value, UNK_ID)

    def decode(self, idx: int) -> str:
        if idx == PAD_ID:
            return PAD_TOKEN
        if idx == UNK_ID:
            return UNK_TOKEN
        if not 2 <= idx < self.size:
            raise IndexError(f"vocabulary '{self.name}': id {idx} out of range [0, {self.size})")
        return self.values[idx - 2]

    def tokens(self) -> list[str]:
        """All entries in id order, reserved tokens included."""
        return [PAD_TOKEN, UNK_TOKEN, *self.values]


def build_vocabularies(rallies: Sequence[Rally]) -> dict[str, Vocabulary]:
    """One vocabulary per categorical feature; ids by descending count, ties lexicographic."""
    if not rallies:
        raise ValueError("build_vocabularies needs at least one rally")
    vocabs = {}
    for feat in CATEGORICAL_FEATURES:
        counts = Counter(getattr(s, feat) for r in rallies for s in r.strokes)
        ordered = sorted(counts, key=lambda v: (-counts[v], v))
        vocabs[feat] = Vocabulary(feat, tuple(ordered))
    return vocabs


# -- coordinates ----------------------------------------------------------------


@dataclass(frozen=True)
class ClampEvent:
    rally_id: str
    ball_round: int
    axis: str
    raw_value: float


@dataclass(frozen=True)
class CoordScaler:
    min_x: float
    max_x: float
    min_y: float
    max_y: float

    def __post_init__(self):
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise ValueError(
                f"degenerate coordinate range x=[{self.min_x}, {self.max_x}] y=[{self.min_y}, {self.max_y}]; "
                "add synthetic jitter or use wider data"
            )

    def scale(self, x: float, y: float) -> tuple[float, float, bool, bool]:
        """Normalize one point; returns ``(nx, ny, x_clamped, y_clamped)``."""
        nx = (x - self.min_x) / (self.max_x - self.min_x)
        ny = (y - self.min_y) / (self.max_y - self.min_y)
        cx, cy = not 0.0 <= nx <= 1.0, not 0.0 <= ny <= 1.0
        return min(max(nx, 0.0), 1.0), min(max(ny, 0.0), 1.0), cx, cy

    def unscale(self, nx, ny):
        return (
            np.asarray(nx) * (self.max_x - self.min_x) + self.min_x,
            np.asarray(ny) * (self.max_y - self.min_y) + self.min_y,
        )


def fit_scaler(rallies: Sequence[Rally]) -> CoordScaler:
    xs = [s.landing_x for r in rallies for s in r.strokes]
    ys = [s.landing_y for r in rallies for s in r.strokes]
    if not xs:
        raise ValueError("fit_scaler needs at least one stroke")
    return CoordScaler(min(xs), max(xs), min(ys), max(ys))


def apply_scaler(scaler: CoordScaler, rally: Rally, clamps: list | None = None) -> Rally:
    """Return ``rally`` with coordinates in [0, 1]; out-of-range values are clamped and logged to ``clamps``."""
    out = []
    for s in rally.strokes:
        nx, ny, cx, cy = scaler.scale(s.landing_x, s.landing_y)
        if clamps is not None:
            if cx:
                clamps.append(ClampEvent(rally.rally_id, s.ball_round, "x", s.landing_x))
            if cy:
                clamps.append(ClampEvent(rally.rally_id, s.ball_round, "y", s.landing_y))
        out.append(replace(s, landing_x=nx, landing_y=ny))
    return Rally(rally.rally_id, tuple(out))


@dataclass(frozen=True)
class Preprocessing:
    """Everything fitted on the training split that evaluation must reuse."""

    vocabularies: dict[str, Vocabulary]
    scaler: CoordScaler

    def to_dict(self) -> dict:
        return {
            "format_version": PREPROCESSING_FORMAT_VERSION,
            "vocabularies": {name: v.id_of for name, v in sorted(self.vocabularies.items())},
            "scaler": {
                "min_x": self.scaler.min_x,
                "max_x": self.scaler.max_x,
                "min_y": self.scaler.min_y,
                "max_y": self.scaler.max_y,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Preprocessing":
        if d.get("format_version") != PREPROCESSING_FORMAT_VERSION:
            raise ValueError(f"unsupported preprocessing format_version {d.get('format_version')!r}")
        vocabs = {}
        for name, id_of in d["vocabularies"].items():
            ordered = sorted(id_of.items(), key=lambda kv: kv[1])
            if [i for _, i in ordered] != list(range(2, len(ordered) + 2)):
                raise ValueError(f"vocabulary '{name}': ids are not dense from 2")
            vocabs[name] = Vocabulary(name, tuple(v for v, _ in ordered))
        return cls(vocabs, CoordScaler(**d["scaler"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Preprocessing":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def normalize(self, rallies: Sequence[Rally], clamps: list | None = None) -> list[Rally]:
        return [apply_scaler(self.scaler, r, clamps) for r in rallies]


def fit_preprocessing(rallies: Sequence[Rally]) -> Preprocessing:
    return Preprocessing(build_vocabularies(rallies), fit_scaler(rallies))


@dataclass(frozen=True)
class EncodedRally:
    """Integer ids ``(n, 7)`` in CATEGORICAL_FEATURES order and normalized coordinates ``(n, 2)``."""

    rally_id: str
    ids: np.ndarray
    xy: np.ndarray

    @property
    def length(self) -> int:
        return self.ids.shape[0]


def encode_rally(rally: Rally, vocabs: Mapping[str, Vocabulary]) -> EncodedRally:
    ids = np.array(
        [[vocabs[f].encode(getattr(s, f)) for f in CATEGORICAL_FEATURES] for s in rally.strokes],
        dtype=np.int64,
    ).reshape(len(rally.strokes), len(CATEGORICAL_FEATURES))
    xy = np.array([[s.landing_x, s.landing_y] for s in rally.strokes], dtype=np.float64).reshape(-1, 2)
    return EncodedRally(rally.rally_id, ids, xy)


# -- folds -------------------------------------------------------------------------


def split_folds(rallies: Sequence[Rally], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Rally-level k-fold split; returns ``(train_ids, holdout_ids)`` per fold.

    Assignment depends only on the set of rally ids and the seed, never on
    input order. The first ``n % k`` holdouts get one extra rally.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ids = sorted(r.rally_id for r in rallies)
    if len(set(ids)) != len(ids):
        raise ValueError("rally ids must be unique")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of rallies ({len(ids)})")
    order = stream(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds = []
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        hold = shuffled[start:start + size]
        start += size
        hold_set = set(hold)
        folds.append(([i for i in ids if i not in hold_set], sorted(hold)))
    return folds


# -- synthetic data ------------------------------------------------------------

SHOT_TYPES = (
    "clear", "smash", "drop", "net shot", "lob",
    "drive", "push", "rush", "long service", "short service",
)


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic rally generator.

    ``structure_seed`` fixes the Markov chain and the conditional tables, so
    datasets drawn with different data seeds share the same ground truth.
    With ``height_noise=0`` landing height is a deterministic function of the
    shot type.
    """

    min_length: int = 5
    max_length: int = 12
    shot_types: tuple[str, ...] = SHOT_TYPES
    n_players: int = 4
    n_heights: int = 3
    n_areas: int = 9
    height_noise: float = 0.0
    transition_concentration: float = 0.3
    coord_spread: tuple[float, float] = (10.0, 30.0)
    court: tuple[float, float] = (355.0, 480.0)
    structure_seed: int = 0

    def validate(self) -> None:
        if self.min_length < 1 or self.max_length < self.min_length:
            raise ValueError(f"invalid length range [{self.min_length}, {self.max_length}]")
        if len(self.shot_types) < 2 or self.n_players < 2 or self.n_heights < 2 or self.n_areas < 2:
            raise ValueError("generator needs >= 2 shot types, players, heights and areas")
        if not 0.0 <= self.height_noise <= 1.0:
            raise ValueError(f"height_noise must be in [0, 1], got {self.height_noise}")


@dataclass(frozen=True)
class SyntheticStructure:
    transition: np.ndarray
    stationary: np.ndarray
    height_of_type: np.ndarray
    p_aroundhead: np.ndarray
    p_backhand: np.ndarray
    player_area: np.ndarray
    opponent_area: np.ndarray
    coord_mean: np.ndarray
    coord_sd: np.ndarray
    coord_rho: np.ndarray


def synthetic_structure(params: GeneratorConfig) -> SyntheticStructure:
    rng = stream(params.structure_seed, "synth-structure")
    S = len(params.shot_types)
    trans = rng.dirichlet(np.full(S, params.transition_concentration), size=S)
    evals, evecs = np.linalg.eig(trans.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1.0))])
    pi = pi / pi.sum()
    width, length = params.court
    return SyntheticStructure(
        transition=trans,
        stationary=pi,
        height_of_type=np.arange(S) % params.n_heights,
        p_aroundhead=rng.uniform(0.02, 0.6, size=S),
        p_backhand=rng.uniform(0.05, 0.8, size=S),
        player_area=rng.dirichlet(np.full(params.n_areas, 0.5), size=S),
        opponent_area=rng.dirichlet(np.full(params.n_areas, 0.5), size=S),
        coord_mean=np.column_stack([
            rng.uniform(0.15 * width, 0.85 * width, size=S),
            rng.uniform(0.1 * length, 0.9 * length, size=S),
        ]),
        coord_sd=rng.uniform(*params.coord_spread, size=(S, 2)),
        coord_rho=rng.uniform(-0.5, 0.5, size=S),
    )


def generate_synthetic(n_rallies: int, seed: int, params: GeneratorConfig | None = None) -> list[Rally]:
    """Draw rallies whose shot types follow a Markov chain started at its stationary law.

    Auxiliary categoricals are sampled conditionally on the shot type and
    landing coordinates from a per-type bivariate Gaussian, so every
    downstream component has structure to find.
    """
    params = params or GeneratorConfig()
    params.validate()
    if n_rallies < 1:
        raise ValueError(f"n_rallies must be >= 1, got {n_rallies}")
    st = synthetic_structure(params)
    rng = stream(seed, "synth")
    S = len(params.shot_types)
    players = [f"P{i + 1:02d}" for i in range(params.n_players)]
    rallies = []
    for r in range(n_rallies):
        n = int(rng.integers(params.min_length, params.max_length + 1))
        pair = rng.choice(params.n_players, size=2, replace=False)
        shot = int(rng.choice(S, p=st.stationary))
        strokes = []
        for i in range(n):
            if i > 0:
                shot = int(rng.choice(S, p=st.transition[shot]))
            height = int(st.height_of_type[shot])
            if params.height_noise > 0 and rng.random() < params.height_noise:
                height = int(rng.integers(params.n_heights))
            sx, sy = st.coord_sd[shot]
            rho = st.coord_rho[shot]
            cov = [[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]]
            x, y = rng.multivariate_normal(st.coord_mean[shot], cov)
            strokes.append(Stroke(
                player_id=players[pair[i % 2]],
                shot_type=params.shot_types[shot],
                landing_x=round(float(x), 3),
                landing_y=round(float(y), 3),
                aroundhead=str(int(rng.random() < st.p_aroundhead[shot])),
                backhand=str(int(rng.random() < st.p_backhand[shot])),
                landing_height=str(height + 1),
                player_location_area=str(int(rng.choice(params.n_areas, p=st.player_area[shot])) + 1),
                opponent_location_area=str(int(rng.choice(params.n_areas, p=st.opponent_area[shot])) + 1),
                ball_round=i + 1,
            ))
        rallies.append(Rally(f"R{r + 1:05d}", tuple(strokes)))
    return rallies
