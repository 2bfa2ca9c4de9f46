from dataclasses import replace

import numpy as np
import pytest

from rallycast import numcore as nc
from rallycast.ingest import CATEGORICAL_FEATURES, PAD_ID, GeneratorConfig, encode_rally, generate_synthetic
from rallycast.model import (
    ConfigError, ModelConfig, MuLMINet, generate, load_checkpoint, parameter_count, positional_encoding,
    save_checkpoint,
)
from rallycast.training import composite_loss

from conftest import make_model

VOCAB = {f: 5 + i for i, f in enumerate(CATEGORICAL_FEATURES)}


def expected_count(d, L, vs, h=None):
    h = h or d
    ctx = [f for f in CATEGORICAL_FEATURES if f != "shot_type"]
    attn = 4 * (d * d + d)
    ff = d * h + h + h * d + d
    n = sum(vs[f] * d for f in CATEGORICAL_FEATURES)
    n += sum(vs[f] * d for f in ctx) + 2 * d + d
    n += 2 * (L * (4 * d + attn + ff) + 2 * d)
    n += L * (6 * d + 3 * attn + 3 * d * d + d + ff) + 2 * d
    heads = ["shot_type", "aroundhead", "backhand", "landing_height", "player_location_area",
             "opponent_location_area"]
    n += sum(d * vs[f] + vs[f] for f in heads) + 5 * d + 5
    return n


@pytest.mark.parametrize("d,L", [(8, 1), (16, 2), (32, 3)])
def test_parameter_count_matches_formula(d, L):
    cfg = ModelConfig(dim=d, layers=L, vocab_sizes=VOCAB)
    assert parameter_count(cfg) == expected_count(d, L, VOCAB)
    assert MuLMINet(cfg).num_parameters == expected_count(d, L, VOCAB)


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(dim=10, n_heads=3, vocab_sizes=VOCAB).validate()
    with pytest.raises(ConfigError, match="vocab_sizes"):
        ModelConfig().validate()
    with pytest.raises(ConfigError, match="embedding_mode"):
        ModelConfig(embedding_mode="concat", vocab_sizes=VOCAB).validate()


def test_init_is_seed_deterministic():
    cfg = ModelConfig(dim=8, vocab_sizes=VOCAB)
    a, b, c = MuLMINet(cfg, seed=1), MuLMINet(cfg, seed=1), MuLMINet(cfg, seed=2)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)
    assert not np.array_equal(a["head.shot_type.w"].data, c["head.shot_type.w"].data)


def test_positional_encoding_values():
    pe = positional_encoding(np.arange(3), 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[2], [np.sin(2), np.cos(2), np.sin(2 / 100), np.cos(2 / 100)])


def test_memory_shapes(tiny_setup):
    _, _, _, model, batch = tiny_setup
    mem = model.encode_sequences(batch.ids[:, :4], batch.xy[:, :4])
    assert mem.rally.shape == (3, 4, 8)
    assert mem.player_memory(0, 0).shape == (2, 8)
    assert mem.player_memory(0, 1).shape == (2, 8)


def test_player_memory_uses_only_that_players_strokes(tiny_setup):
    _, _, _, model, batch = tiny_setup
    ids, xy = batch.ids[:, :4], batch.xy[:, :4]
    mem = model.encode_sequences(ids, xy)
    for side, cols in ((0, [0, 2]), (1, [1, 3])):
        alone = model.encode_sequences(ids[:, cols], xy[:, cols], positions=np.tile(cols, (3, 1)))
        for b in range(3):
            np.testing.assert_allclose(mem.player_memory(b, side), alone.player.data[b], atol=1e-12)


def test_zero_parameters_give_uniform_outputs(tiny_setup):
    _, _, _, model, batch = tiny_setup
    zero = MuLMINet(model.config, {k: nc.Tensor(np.zeros(v.shape)) for k, v in model.params.items()})
    out = zero.forward(batch.ids, batch.xy)
    p = out.probs("shot_type")
    V = p.shape[-1]
    np.testing.assert_allclose(p[..., PAD_ID], 0.0, atol=1e-300)
    np.testing.assert_allclose(p[..., 1:], 1.0 / (V - 1), rtol=1e-12)
    np.testing.assert_array_equal(out.mu.data, 0.0)
    np.testing.assert_allclose(out.sigma.data, np.log(2.0) + 1e-4, rtol=1e-12)
    np.testing.assert_array_equal(out.rho.data, 0.0)


def test_type1_embedding_is_sum_of_rows(tiny_setup):
    _, _, _, model, batch = tiny_setup
    ids = batch.ids[:, :3]
    manual = sum(model[f"emb1.{f}"].data[ids[..., i]] for i, f in enumerate(CATEGORICAL_FEATURES))
    np.testing.assert_allclose(model.encode_type1(ids).data, manual, atol=1e-14)


def test_type2_embedding_is_affine_in_coordinates(tiny_setup, rng):
    _, _, _, model, batch = tiny_setup
    ids = batch.ids[:, :3]
    a, b = rng.uniform(size=(3, 3, 2)), rng.uniform(size=(3, 3, 2))
    lam = 0.3
    mix = model.encode_type2(ids, lam * a + (1 - lam) * b).data
    np.testing.assert_allclose(mix, lam * model.encode_type2(ids, a).data
                               + (1 - lam) * model.encode_type2(ids, b).data, atol=1e-12)


def perturbed(model, prefix, rng):
    params = {k: nc.Tensor(v.data + (rng.normal(size=v.shape) if k.startswith(prefix) else 0.0))
              for k, v in model.params.items()}
    return MuLMINet(model.config, params)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_gate_saturation_selects_one_stream(layers, rng):
    r = generate_synthetic(2, seed=11, params=GeneratorConfig(min_length=6, max_length=6))
    from rallycast.ingest import fit_preprocessing
    from rallycast.training import collate
    prep = fit_preprocessing(r)
    batch = collate([encode_rally(x, prep.vocabularies) for x in prep.normalize(r)])
    base = make_model(prep, seed=4, dim=8, layers=layers)
    for bias, frozen_stream, moved_stream in ((60.0, "xr", "xp"), (-60.0, "xp", "xr")):
        for i in range(layers):
            base[f"dec.{i}.gate.w"].data[:] = 0.0
            base[f"dec.{i}.gate.b"].data[:] = bias
        trace = []
        ref = base.forward(batch.ids, batch.xy)
        base.decode(batch.ids[:, :-1], batch.xy[:, :-1], base.encode_sequences(batch.ids[:, :4], batch.xy[:, :4]),
                    gate_trace=trace)
        expected_g = 1.0 if bias > 0 else 0.0
        assert all(np.allclose(g, expected_g, atol=1e-20) for g in trace)
        # changing the ignored stream leaves outputs unchanged; changing the selected one does not
        ignored = perturbed(base, tuple(f"dec.{i}.{moved_stream}" for i in range(layers)), rng)
        np.testing.assert_allclose(ignored.forward(batch.ids, batch.xy).logits["shot_type"].data,
                                   ref.logits["shot_type"].data, atol=1e-12)
        used = perturbed(base, tuple(f"dec.{i}.{frozen_stream}" for i in range(layers)), rng)
        assert not np.allclose(used.forward(batch.ids, batch.xy).logits["shot_type"].data,
                               ref.logits["shot_type"].data, atol=1e-6)


def test_decoder_is_causal(tiny_setup):
    _, _, _, model, batch = tiny_setup
    mem = model.encode_sequences(batch.ids[:, :4], batch.xy[:, :4])
    ids, xy = batch.ids[:, :5].copy(), batch.xy[:, :5].copy()
    ref = model.decode(ids, xy, mem).logits["shot_type"].data
    xy[:, 3] += 0.37
    ids[:, 3, 0] = 2 if ids[0, 3, 0] != 2 else 3
    out = model.decode(ids, xy, mem).logits["shot_type"].data
    np.testing.assert_array_equal(out[:, :3], ref[:, :3])
    assert not np.allclose(out[:, 3:], ref[:, 3:])


def test_output_depends_on_stroke_order(tiny_setup):
    _, _, _, model, batch = tiny_setup
    ref = model.forward(batch.ids, batch.xy).mu.data
    ids, xy = batch.ids.copy(), batch.xy.copy()
    ids[:, [0, 2]] = ids[:, [2, 0]]
    xy[:, [0, 2]] = xy[:, [2, 0]]
    assert not np.allclose(model.forward(ids, xy).mu.data, ref)


def test_depth_changes_outputs(tiny_setup):
    _, prep, _, _, batch = tiny_setup
    one = make_model(prep, seed=0, dim=8, layers=1).forward(batch.ids, batch.xy).mu.data
    two = make_model(prep, seed=0, dim=8, layers=2).forward(batch.ids, batch.xy).mu.data
    assert one.shape == two.shape and not np.allclose(one, two)


def test_full_loss_gradient_matches_finite_differences(tiny_setup):
    _, _, _, model, batch = tiny_setup

    def loss():
        out = model.forward(batch.ids, batch.xy)
        return composite_loss(out, batch.target_ids, batch.target_xy, batch.loss_mask, 0.4)[0]

    names = sorted(model.params)
    errs = nc.check_gradients(loss, [model[k] for k in names], max_entries=2, rng=np.random.default_rng(0))
    assert max(errs.values()) <= 1e-3


# -- generation -------------------------------------------------------------------


def test_generation_shapes_and_probabilities(tiny_setup):
    _, prep, enc, model, _ = tiny_setup
    gen = generate(model, enc[0], target_len=2, seed=0)
    V = prep.vocabularies["shot_type"].size
    assert gen.shot_probs.shape == (6, 2, V) and gen.xy.shape == (6, 2, 2) and gen.ids.shape == (6, 2, 7)
    np.testing.assert_allclose(gen.shot_probs.sum(-1), 1.0, atol=1e-6)
    assert np.all((gen.xy >= 0) & (gen.xy <= 1))
    assert np.all(gen.ids[..., 0] != PAD_ID)
    # players keep alternating
    players = np.concatenate([np.repeat(enc[0].ids[None, :4, 6], 6, 0), gen.ids[..., 6]], axis=1)
    assert np.all(players[:, 2:] == players[:, :-2])


def test_argmax_candidates_identical(tiny_setup):
    _, _, enc, model, _ = tiny_setup
    gen = generate(model, enc[0], target_len=2, mode="argmax")
    for c in range(1, 6):
        np.testing.assert_array_equal(gen.xy[c], gen.xy[0])
        np.testing.assert_array_equal(gen.shot_probs[c], gen.shot_probs[0])


def test_sampling_reproducible_and_seed_dependent(tiny_setup):
    _, _, enc, model, _ = tiny_setup
    a = generate(model, enc[0], target_len=2, seed=1)
    b = generate(model, enc[0], target_len=2, seed=1)
    c = generate(model, enc[0], target_len=2, seed=2)
    np.testing.assert_array_equal(a.xy, b.xy)
    assert not np.array_equal(a.xy, c.xy)
    assert len({a.xy[i].tobytes() for i in range(6)}) > 1


def test_generation_validates_arguments(tiny_setup):
    _, _, enc, model, _ = tiny_setup
    with pytest.raises(ValueError, match="mode"):
        generate(model, enc[0], 2, mode="beam")
    with pytest.raises(ValueError, match="target_len"):
        generate(model, enc[0], 0)


def test_checkpoint_roundtrip(tmp_path, tiny_setup):
    _, prep, _, model, batch = tiny_setup
    save_checkpoint(tmp_path / "m.ckpt", model, prep)
    loaded, prep2 = load_checkpoint(tmp_path / "m.ckpt")
    assert prep2.to_dict() == prep.to_dict()
    np.testing.assert_array_equal(loaded.forward(batch.ids, batch.xy).mu.data, model.forward(batch.ids, batch.xy).mu.data)
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_mismatched_parameters_rejected(tiny_setup):
    _, _, _, model, _ = tiny_setup
    params = dict(model.params)
    params.pop("dec.ln_f.g")
    with pytest.raises(ConfigError, match="dec.ln_f.g"):
        MuLMINet(model.config, params)
    bigger = replace(model.config, dim=16)
    with pytest.raises(ConfigError, match="shape"):
        MuLMINet(bigger, {k: v for k, v in model.params.items()})
