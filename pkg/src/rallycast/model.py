"""MuLMINet: multi-input encoder-decoder stroke forecaster.

Each stroke is embedded twice. Type 1 sums learned embeddings of shot type
and the six context categoricals; Type 2 maps the landing coordinates through
an affine layer and sums them with a separate set of context embeddings. The
sum of both plus a sinusoidal position code feeds

* a rally encoder over the whole alternating prefix,
* a player encoder whose attention is restricted to one player's own strokes
  (so each player's memory is computed from that player's strokes only, at
  their original positions),
* a causal decoder over the strokes seen so far.

Every decoder block cross-attends to the rally memory and, separately, to the
memory of the player who hits the stroke being predicted. A sigmoid gate,
conditioned on both context vectors and the position code of the target step,
mixes the two. Seven affine heads read the final state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numcore as nc
from .ingest import CATEGORICAL_FEATURES, PAD_ID, EncodedRally, Preprocessing
from .numcore import Tensor
from .seeding import stream

CONTEXT_FEATURES = CATEGORICAL_FEATURES[1:]
AUX_HEADS = ("aroundhead", "backhand", "landing_height", "player_location_area", "opponent_location_area")
CATEGORICAL_HEADS = ("shot_type",) + AUX_HEADS
FEATURE_COLUMN = {f: i for i, f in enumerate(CATEGORICAL_FEATURES)}
PLAYER_COL = FEATURE_COLUMN["player_id"]
NEG_INF = -1e9
MIN_SIGMA = 1e-4
RHO_LIMIT = 1.0 - 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 32
    layers: int = 1
    n_heads: int = 2
    dropout: float = 0.1
    ff_dim: int | None = None
    prefix_len: int = 4
    vocab_sizes: dict[str, int] = field(default_factory=dict)
    # Only "sum" is implemented; "concat" is reserved for per-task embedding variants.
    embedding_mode: str = "sum"

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"model.dim must be >= 1, got {self.dim}")
        if self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"model.dim ({self.dim}) must be divisible by model.n_heads ({self.n_heads})")
        if self.layers < 1:
            raise ConfigError(f"model.layers must be >= 1, got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")
        if self.prefix_len < 1:
            raise ConfigError(f"model.prefix_len must be >= 1, got {self.prefix_len}")
        if self.embedding_mode != "sum":
            raise ConfigError(f"model.embedding_mode '{self.embedding_mode}' is not implemented (only 'sum')")
        missing = [f for f in CATEGORICAL_FEATURES if f not in self.vocab_sizes]
        if missing:
            raise ConfigError(f"model.vocab_sizes missing {missing}")
        for f, n in self.vocab_sizes.items():
            if n < 3:
                raise ConfigError(f"model.vocab_sizes[{f}] must be >= 3 (PAD, UNK, one value), got {n}")

    @property
    def hidden(self) -> int:
        return self.ff_dim or self.dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (dict(v) if k == "vocab_sizes" else v) for k, v in d.items()})


def positional_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal codes, shape ``positions.shape + (dim,)``."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(dim)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


# -- parameter layout ----------------------------------------------------------


def _attn_shapes(prefix: str, d: int) -> dict:
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.{p}.w"] = (d, d)
        out[f"{prefix}.{p}.b"] = (d,)
    return out


def _ln_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix: str, d: int, h: int) -> dict:
    return {f"{prefix}.ff1.w": (d, h), f"{prefix}.ff1.b": (h,), f"{prefix}.ff2.w": (h, d), f"{prefix}.ff2.b": (d,)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    config.validate()
    d, h = config.dim, config.hidden
    vs = config.vocab_sizes
    shapes: dict[str, tuple[int, ...]] = {}
    for f in CATEGORICAL_FEATURES:
        shapes[f"emb1.{f}"] = (vs[f], d)
    for f in CONTEXT_FEATURES:
        shapes[f"emb2.{f}"] = (vs[f], d)
    shapes["emb2.coord.w"] = (2, d)
    shapes["emb2.coord.b"] = (d,)
    for enc in ("enc_rally", "enc_player"):
        for i in range(config.layers):
            b = f"{enc}.{i}"
            shapes |= _ln_shapes(f"{b}.ln1", d) | _attn_shapes(f"{b}.attn", d)
            shapes |= _ln_shapes(f"{b}.ln2", d) | _ff_shapes(b, d, h)
        shapes |= _ln_shapes(f"{enc}.ln_f", d)
    for i in range(config.layers):
        b = f"dec.{i}"
        shapes |= _ln_shapes(f"{b}.ln1", d) | _attn_shapes(f"{b}.self", d)
        shapes |= _ln_shapes(f"{b}.ln2", d) | _attn_shapes(f"{b}.xr", d) | _attn_shapes(f"{b}.xp", d)
        shapes[f"{b}.gate.w"] = (3 * d, d)
        shapes[f"{b}.gate.b"] = (d,)
        shapes |= _ln_shapes(f"{b}.ln3", d) | _ff_shapes(b, d, h)
    shapes |= _ln_shapes("dec.ln_f", d)
    for f in CATEGORICAL_HEADS:
        shapes[f"head.{f}.w"] = (d, vs[f])
        shapes[f"head.{f}.b"] = (vs[f],)
    shapes["head.area.w"] = (d, 5)
    shapes["head.area.b"] = (5,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for tables and affine maps; layer norms start at identity."""
    rng = stream(seed, "init")
    bound = 1.0 / math.sqrt(config.dim)
    params = {}
    for name, shape in sorted(parameter_shapes(config).items()):
        if ".ln" in name:
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- outputs ---------------------------------------------------------------------------


@dataclass
class HeadOutputs:
    """Per-step head outputs, each with leading shape ``(B, T)``.

    Categorical entries are logits (PAD column pinned to a large negative
    value). The landing point is a bivariate Gaussian: ``mu`` and ``sigma``
    are ``(B, T, 2)``, the correlation ``rho`` is ``(B, T)``.
    """

    logits: dict[str, Tensor]
    mu: Tensor
    sigma: Tensor
    rho: Tensor

    def probs(self, feature: str = "shot_type") -> np.ndarray:
        x = self.logits[feature].data
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Memories:
    """Encoder outputs for a batch of prefixes.

    ``player`` holds the player-encoder output at every prefix position;
    the memory of one player is the subset of rows whose ``side`` (stroke
    parity; players strictly alternate) matches.
    """

    rally: Tensor
    player: Tensor
    side: np.ndarray

    def player_memory(self, b: int, side: int) -> np.ndarray:
        return self.player.data[b][self.side == side]


class MuLMINet:
    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        if params is None:
            params = init_params(config, seed)
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ConfigError(
                f"parameter names do not match config (missing={sorted(set(expected) - set(params))}, "
                f"unexpected={sorted(set(params) - set(expected))})"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")
        self.params = {k: (v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k))
                       for k, v in params.items()}
        self._pad_mask_cache: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- building blocks -------------------------------------------------------

    def _linear(self, x, prefix: str) -> Tensor:
        return x @ self.params[f"{prefix}.w"] + self.params[f"{prefix}.b"]

    def _ln(self, x, prefix: str) -> Tensor:
        return nc.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        p = self.config.dropout
        if rng is None or p == 0.0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * keep

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask: np.ndarray | None) -> Tensor:
        B, Tq, d = q_in.shape
        Tk = kv_in.shape[1]
        h = self.config.n_heads
        dh = d // h

        def split(x, T):
            return x.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q = split(self._linear(q_in, f"{prefix}.q"), Tq)
        k = split(self._linear(kv_in, f"{prefix}.k"), Tk)
        v = split(self._linear(kv_in, f"{prefix}.v"), Tk)
        scores = nc.scale(q @ nc.swap_last(k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + np.where(mask, 0.0, NEG_INF)[:, None, :, :]
        att = nc.softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._linear(ctx, f"{prefix}.o")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(nc.relu(self._linear(x, f"{prefix}.ff1")), f"{prefix}.ff2")

    # -- embeddings --------------------------------------------------------------

    def encode_type1(self, ids: np.ndarray) -> Tensor:
        """Sum of the seven Type 1 embeddings for ids ``(..., 7)``."""
        ids = np.asarray(ids)
        out = None
        for f in CATEGORICAL_FEATURES:
            e = nc.embedding(self.params[f"emb1.{f}"], ids[..., FEATURE_COLUMN[f]])
            out = e if out is None else out + e
        return out

    def encode_type2(self, ids: np.ndarray, xy) -> Tensor:
        """Affine coordinate map plus the six Type 2 context embeddings."""
        ids = np.asarray(ids)
        out = self._linear(nc.as_tensor(xy), "emb2.coord")
        for f in CONTEXT_FEATURES:
            out = out + nc.embedding(self.params[f"emb2.{f}"], ids[..., FEATURE_COLUMN[f]])
        return out

    def embed(self, ids: np.ndarray, xy, positions: np.ndarray, rng=None) -> Tensor:
        x = self.encode_type1(ids) + self.encode_type2(ids, xy) + positional_encoding(positions, self.config.dim)
        return self._dropout(x, rng)

    # -- encoders ----------------------------------------------------------------

    def _encoder(self, x: Tensor, name: str, mask: np.ndarray | None, rng) -> Tensor:
        for i in range(self.config.layers):
            b = f"{name}.{i}"
            h = self._ln(x, f"{b}.ln1")
            x = x + self._dropout(self._attention(h, h, f"{b}.attn", mask), rng)
            x = x + self._dropout(self._ff(self._ln(x, f"{b}.ln2"), b), rng)
        return self._ln(x, f"{name}.ln_f")

    def encode_sequences(self, ids: np.ndarray, xy, positions: np.ndarray | None = None, rng=None) -> Memories:
        """Run the rally and player encoders over prefixes ``ids (B, S, 7)``, ``xy (B, S, 2)``."""
        ids = np.asarray(ids)
        if ids.ndim != 3 or ids.shape[1] < 1:
            raise ValueError(f"encode_sequences needs a non-empty prefix batch (B, S, 7), got shape {ids.shape}")
        B, S, _ = ids.shape
        if positions is None:
            positions = np.broadcast_to(np.arange(S), (B, S))
        x = self.embed(ids, xy, positions, rng)
        rally = self._encoder(x, "enc_rally", None, rng)
        side = np.asarray(positions)[0] % 2
        same_player = np.broadcast_to(side[:, None] == side[None, :], (B, S, S))
        player = self._encoder(x, "enc_player", same_player, rng)
        return Memories(rally, player, side)

    # -- decoder -------------------------------------------------------------------

    def decode(
        self,
        ids: np.ndarray,
        xy,
        memories: Memories,
        rng=None,
        gate_trace: list | None = None,
    ) -> HeadOutputs:
        """Causal decoder over strokes ``ids (B, T, 7)``; output step ``j`` predicts stroke ``j + 1``.

        The player memory used at step ``j`` is that of the player hitting
        stroke ``j + 1``, i.e. the prefix strokes of the same parity.
        """
        ids = np.asarray(ids)
        B, T, _ = ids.shape
        d = self.config.dim
        x = self.embed(ids, xy, np.broadcast_to(np.arange(T), (B, T)), rng)
        causal = np.broadcast_to(np.tril(np.ones((T, T), dtype=bool)), (B, T, T))
        actor_side = np.arange(1, T + 1) % 2
        player_keys = np.broadcast_to(memories.side[None, :] == actor_side[:, None], (B, T, len(memories.side)))
        target_pos = positional_encoding(np.broadcast_to(np.arange(1, T + 1), (B, T)), d)
        for i in range(self.config.layers):
            b = f"dec.{i}"
            q = self._ln(x, f"{b}.ln1")
            x = x + self._dropout(self._attention(q, q, f"{b}.self", causal), rng)
            q = self._ln(x, f"{b}.ln2")
            h_rally = self._attention(q, memories.rally, f"{b}.xr", None)
            h_player = self._attention(q, memories.player, f"{b}.xp", player_keys)
            gate_in = nc.concat([h_rally, h_player, nc.Tensor(target_pos)], axis=-1)
            g = nc.sigmoid(self._linear(gate_in, f"{b}.gate"))
            if gate_trace is not None:
                gate_trace.append(g.data)
            fused = g * h_rally + (1.0 - g) * h_player
            x = x + self._dropout(fused, rng)
            x = x + self._dropout(self._ff(self._ln(x, f"{b}.ln3"), b), rng)
        return self._heads(self._ln(x, "dec.ln_f"))

    def _heads(self, x: Tensor) -> HeadOutputs:
        logits = {}
        for f in CATEGORICAL_HEADS:
            raw = self._linear(x, f"head.{f}")
            mask = self._pad_mask_cache.get(f)
            if mask is None:
                mask = np.zeros(self.config.vocab_sizes[f])
                mask[PAD_ID] = NEG_INF
                self._pad_mask_cache[f] = mask
            logits[f] = raw + mask
        area = self._linear(x, "head.area")
        mu = area[..., 0:2]
        sigma = nc.softplus(area[..., 2:4]) + MIN_SIGMA
        rho = nc.scale(nc.tanh(area[..., 4]), RHO_LIMIT)
        return HeadOutputs(logits, mu, sigma, rho)

    def forward(self, ids: np.ndarray, xy: np.ndarray, rng=None) -> HeadOutputs:
        """Teacher-forced pass over padded rallies ``ids (B, N, 7)``; predicts strokes 2..N."""
        S = self.config.prefix_len
        if ids.shape[1] < S + 1:
            raise ValueError(f"rallies need at least {S + 1} strokes, batch has {ids.shape[1]}")
        mem = self.encode_sequences(ids[:, :S], xy[:, :S], rng=rng)
        return self.decode(ids[:, :-1], xy[:, :-1], mem, rng)

    # -- persistence ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def decode_step(model: MuLMINet, ids, xy, memories: Memories) -> HeadOutputs:
    """Head outputs for the stroke following the last one in ``ids`` (shape ``(B, T, 7)``)."""
    out = model.decode(ids, xy, memories)
    last = slice(out.mu.shape[1] - 1, out.mu.shape[1])
    return HeadOutputs(
        {k: v[:, last] for k, v in out.logits.items()}, out.mu[:, last], out.sigma[:, last], out.rho[:, last]
    )


# -- generation -------------------------------------------------------------------


@dataclass
class GeneratedRally:
    """``n_candidates`` sampled continuations of one prefix.

    ``shot_probs (C, T, V)`` are the model's untempered shot-type
    distributions at each step; ``xy (C, T, 2)`` normalized coordinates;
    ``ids (C, T, 7)`` the sampled categorical ids fed back to the decoder.
    """

    rally_id: str
    shot_probs: np.ndarray
    xy: np.ndarray
    ids: np.ndarray


def _sample_categorical(logits: np.ndarray, rngs, mode: str, temperature: float) -> np.ndarray:
    if mode == "argmax" or temperature <= 0:
        return logits.argmax(axis=-1)
    z = logits / temperature
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return np.array([rng.choice(p.shape[-1], p=row) for rng, row in zip(rngs, p)])


def generate(
    model: MuLMINet,
    prefix: EncodedRally,
    target_len: int,
    n_candidates: int = 6,
    seed: int = 0,
    mode: str = "sample",
    temperature: float = 1.0,
) -> GeneratedRally:
    """Autoregressively decode ``target_len`` strokes after the prefix, ``n_candidates`` times.

    Candidate ``c`` draws from its own stream keyed by (seed, rally id, c),
    so results do not depend on which other rallies or candidates are run.
    Categoricals are sampled from their softmax at ``temperature``;
    coordinates from the predicted bivariate Gaussian, clipped to [0, 1].
    ``mode="argmax"`` takes the most likely class and the Gaussian mean.
    """
    if mode not in ("sample", "argmax"):
        raise ValueError(f"mode must be 'sample' or 'argmax', got {mode!r}")
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    S = model.config.prefix_len
    if prefix.length < S:
        raise ValueError(f"prefix has {prefix.length} strokes, model needs {S}")
    C = n_candidates
    ids = np.repeat(prefix.ids[None, :S], C, axis=0)
    xy = np.repeat(prefix.xy[None, :S], C, axis=0)
    rngs = [stream(seed, f"sampling/{prefix.rally_id}", c) for c in range(C)]
    probs_out, xy_out, ids_out = [], [], []
    with nc.no_grad():
        mem = model.encode_sequences(ids, xy)
        for step in range(target_len):
            T = ids.shape[1]
            out = decode_step(model, ids, xy, mem)
            new_ids = np.zeros((C, len(CATEGORICAL_FEATURES)), dtype=np.int64)
            for f in CATEGORICAL_HEADS:
                lg = out.logits[f].data[:, 0]
                new_ids[:, FEATURE_COLUMN[f]] = _sample_categorical(lg, rngs, mode, temperature)
            # the next hitter is whoever hit two strokes earlier
            new_ids[:, PLAYER_COL] = ids[:, T - 2, PLAYER_COL]
            mu = out.mu.data[:, 0]
            if mode == "argmax":
                pt = mu.copy()
            else:
                sig = out.sigma.data[:, 0]
                rho = out.rho.data[:, 0]
                z = np.array([rng.standard_normal(2) for rng in rngs])
                pt = np.column_stack([
                    mu[:, 0] + sig[:, 0] * z[:, 0],
                    mu[:, 1] + sig[:, 1] * (rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]),
                ])
            pt = np.clip(pt, 0.0, 1.0)
            probs_out.append(out.probs("shot_type")[:, 0])
            xy_out.append(pt)
            ids_out.append(new_ids)
            ids = np.concatenate([ids, new_ids[:, None]], axis=1)
            xy = np.concatenate([xy, pt[:, None]], axis=1)
    return GeneratedRally(
        prefix.rally_id,
        np.stack(probs_out, axis=1),
        np.stack(xy_out, axis=1),
        np.stack(ids_out, axis=1),
    )


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_KIND = "mulminet"


def save_checkpoint(path, model: MuLMINet, preprocessing: Preprocessing, extra: Mapping | None = None) -> None:
    """Parameters, model config and the fitted vocabularies/scaler in one file."""
    meta = {
        "kind": CHECKPOINT_KIND,
        "model_config": model.config.to_dict(),
        "preprocessing": preprocessing.to_dict(),
        "extra": dict(extra or {}),
    }
    nc.save_params(path, model.state_dict(), meta)


def load_checkpoint(path) -> tuple[MuLMINet, Preprocessing]:
    try:
        raw_meta = nc.load_params(path)[1]
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if raw_meta.get("kind") != CHECKPOINT_KIND:
        raise nc.CheckpointError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(raw_meta["model_config"])
    arrays, _ = nc.load_params(path, expected_shapes=parameter_shapes(config))
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}
    return MuLMINet(config, params), Preprocessing.from_dict(raw_meta["preprocessing"])
