import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dcgra2seq import tensor as T
from dcgra2seq.data import rasterize
from dcgra2seq.model import (CheckpointMismatch, Gra2Seq, ModelConfig, load_model, mixture_from_raw,
                             read_checkpoint, reconstruction_nll, save_checkpoint)
from dcgra2seq.tensor import ShapeError, Tensor, gradient, no_grad


def raw_row(k=1, pi=0.0, mux=0.0, muy=0.0, log_sx=0.0, log_sy=0.0, rho=0.0, pen=(0.0, 0.0, 0.0)):
    vals = [pi] * k + [mux] * k + [muy] * k + [log_sx] * k + [log_sy] * k + [rho] * k + list(pen)
    return np.array(vals, dtype=np.float64)


def one_step_target(dx, dy, pen_index):
    t = np.zeros((1, 1, 5))
    t[0, 0, :2] = dx, dy
    t[0, 0, 2 + pen_index] = 1
    return t


# -- likelihood ----------------------------------------------------------------

def test_centered_unit_gaussian_offset_nll_is_log_two_pi():
    mix = mixture_from_raw(Tensor(raw_row(mux=0.7, muy=-1.2, pen=(50.0, 0.0, 0.0))[None, None]), 1)
    nll = float(reconstruction_nll(mix, one_step_target(0.7, -1.2, 0), np.array([1])).data)
    pen_part = -math.log(math.exp(50) / (math.exp(50) + 2))
    assert nll - pen_part == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert math.log(2 * math.pi) == pytest.approx(1.8379, abs=1e-4)


def test_uniform_pen_logits_cost_log_three():
    mix = mixture_from_raw(Tensor(raw_row()[None, None]), 1)
    # a length-0 sequence: only the end token's pen state is scored
    nll = float(reconstruction_nll(mix, one_step_target(0, 0, 2), np.array([0])).data)
    assert nll == pytest.approx(math.log(3), abs=1e-12)
    assert math.log(3) == pytest.approx(1.0986, abs=1e-4)


def test_mass_far_from_target_costs_more():
    target = one_step_target(0.0, 0.0, 0)
    near = mixture_from_raw(Tensor(raw_row()[None, None]), 1)
    far = mixture_from_raw(Tensor(raw_row(mux=4.0, muy=-3.0)[None, None]), 1)
    assert float(reconstruction_nll(far, target).data) > float(reconstruction_nll(near, target).data)


def test_nll_matches_scipy_mixture_density():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(0)
    k = 3
    raw = rng.normal(size=(1, 1, 6 * k + 3))
    mix = mixture_from_raw(Tensor(raw), k)
    x = np.array([0.3, -0.4])
    dens = 0.0
    for j in range(k):
        sx, sy, r = mix.sigma_x.data[0, 0, j], mix.sigma_y.data[0, 0, j], mix.rho.data[0, 0, j]
        cov = [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
        mean = [mix.mu_x.data[0, 0, j], mix.mu_y.data[0, 0, j]]
        dens += mix.pi[0, 0, j] * multivariate_normal(mean, cov).pdf(x)
    pen = raw[0, 0, -3:]
    pen_lp = pen[1] - np.log(np.exp(pen).sum())
    expected = -np.log(dens) - pen_lp
    got = float(reconstruction_nll(mix, one_step_target(*x, 1), np.array([1])).data)
    assert got == pytest.approx(expected, rel=1e-10)


@given(arrays(np.float64, (2, 3, 6 * 4 + 3), elements=st.floats(-1e4, 1e4)))
@settings(max_examples=100, deadline=None)
def test_emission_validity_for_arbitrary_raw_values(raw):
    mix = mixture_from_raw(Tensor(raw), 4)
    assert (mix.sigma_x.data > 0).all() and (mix.sigma_y.data > 0).all()
    assert (np.abs(mix.rho.data) < 1).all()
    np.testing.assert_allclose(mix.pi.sum(-1), 1, atol=1e-6)
    assert (mix.pi >= 0).all()


# -- encoder ---------------------------------------------------------------------

def test_toy_encoder_shape_on_eight_pixel_patches():
    cfg = ModelConfig.preset("toy", patches=5, input_size=8)
    model = Gra2Seq(cfg)
    v = model.encode_patches(np.random.default_rng(0).random((2, 6, 8, 8)))
    assert v.shape == (2, 6, 16)


def test_identical_patches_give_identical_rows(toy_model):
    toy_model.eval()
    img = np.random.default_rng(0).random((16, 16))
    v = toy_model.encode_patches(np.stack([img] * 5)[None]).data
    for row in v[0, 1:]:
        np.testing.assert_array_equal(row, v[0, 0])


def test_blank_patch_gives_constant_row(toy_model):
    toy_model.eval()
    a = toy_model.encode_patches(np.zeros((1, 5, 16, 16))).data
    b = toy_model.encode_patches(np.zeros((1, 5, 16, 16))).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0, 1], a[0, 0])


def test_encoder_rejects_wrong_size(toy_model):
    with pytest.raises(ShapeError, match="16x16"):
        toy_model.encode_patches(np.zeros((1, 5, 8, 8)))
    with pytest.raises(ShapeError, match="5 images"):
        toy_model.encode_patches(np.zeros((1, 4, 16, 16)))


# -- aggregation -------------------------------------------------------------------

def loop_aggregate(model, v, a_norm, use_abs, use_rel):
    """Per-pair oracle: H_i = Σ_j Â(i,j)·(V_j + R(i,j)) + P_i with explicit loops."""
    n = v.shape[0]
    h = np.zeros_like(v)
    for i in range(n):
        for j in range(n):
            r = model.rel_pe.lookup(i, j).data if use_rel else 0.0
            h[i] += a_norm[i, j] * (v[j] + r)
        if use_abs:
            h[i] += model.abs_pe_table()[i]
    return h


@pytest.mark.parametrize("use_abs,use_rel", [(True, True), (True, False), (False, True), (False, False)])
def test_aggregation_matches_per_pair_oracle(use_abs, use_rel):
    model = Gra2Seq(ModelConfig.preset("toy", patches=5), seed=1, dtype=np.float64)
    rng = np.random.default_rng(7)
    for r in model.rel_pe.offsets:
        r.data = rng.normal(size=r.shape)
    v = rng.normal(size=(2, 6, 16))
    a = rng.random((2, 6, 6))
    h = model.aggregate(Tensor(v), Tensor(a), use_abs, use_rel).data
    for b in range(2):
        np.testing.assert_allclose(h[b], loop_aggregate(model, v[b], a[b], use_abs, use_rel), atol=1e-12)


def test_identity_graph_without_encodings_returns_embeddings():
    model = Gra2Seq(ModelConfig.preset("toy", patches=3), dtype=np.float64)
    v = np.random.default_rng(0).normal(size=(1, 4, 16))
    h = model.aggregate(Tensor(v), Tensor(np.eye(4)[None]), False, False).data
    np.testing.assert_array_equal(h, v)


def test_single_patch_self_loop():
    model = Gra2Seq(ModelConfig.preset("toy", patches=1), dtype=np.float64)
    v = np.random.default_rng(0).normal(size=(1, 2, 16))
    a = np.array([[[0.7, 0.0], [0.0, 0.4]]])
    h = model.aggregate(Tensor(v), Tensor(a), True, True).data
    expected = 0.4 * (v[0, 1] + model.rel_pe.offsets[0].data) + model.abs_pe_table()[1]
    np.testing.assert_allclose(h[0, 1], expected, atol=1e-12)


# -- latent head ----------------------------------------------------------------------

def test_zero_noise_gives_mean(toy_model):
    h = Tensor(np.random.default_rng(0).normal(size=(3, 5, 16)).astype(np.float32))
    code = toy_model.latent(h, np.zeros((3, 8)))
    np.testing.assert_array_equal(code.y.data, code.mu.data)


def test_clamped_logvar_leaves_y_at_mean(toy_model):
    toy_model.head2.bias.data[8:] = -1e6
    h = Tensor(np.random.default_rng(0).normal(size=(2, 5, 16)).astype(np.float32))
    code = toy_model.latent(h, np.ones((2, 8)))
    np.testing.assert_array_equal(code.logvar.data, -20)
    np.testing.assert_allclose(code.y.data, code.mu.data, atol=1e-4)


def test_unit_sigma_zero_mean_returns_noise(toy_model):
    toy_model.head2.weight.data[:] = 0
    toy_model.head2.bias.data[:] = 0
    e = np.random.default_rng(0).normal(size=(2, 8))
    code = toy_model.latent(Tensor(np.ones((2, 5, 16), np.float32)), e)
    np.testing.assert_allclose(code.y.data, e, rtol=1e-6)


# -- decoder -------------------------------------------------------------------------------

def test_zero_length_target_gives_no_emissions(toy_model):
    mix = toy_model.decode_sequence(Tensor(np.zeros((2, 8), np.float32)), np.zeros((2, 0, 5)))
    assert mix.mu_x.shape == (2, 0, 3)


def test_emissions_depend_on_code(toy_model, corpus):
    t5, _ = toy_model.targets(corpus[:1])
    y = np.random.default_rng(0).normal(size=(2, 8)).astype(np.float32)
    a = toy_model.decode_sequence(Tensor(y[:1]), t5[:, :6])
    b = toy_model.decode_sequence(Tensor(y[1:]), t5[:, :6])
    assert not np.allclose(a.mu_x.data, b.mu_x.data)
    np.testing.assert_allclose(a.pi.sum(-1), 1, atol=1e-6)


def test_teacher_forcing_feeds_previous_ground_truth(toy_model, corpus):
    # the emission at step t may only depend on target rows < t
    t5, _ = toy_model.targets(corpus[:1])
    y = Tensor(np.ones((1, 8), np.float32))
    a = toy_model.decode_sequence(y, t5[:, :6]).mu_x.data
    changed = t5.copy()
    changed[:, 3, :2] += 5.0
    b = toy_model.decode_sequence(y, changed[:, :6]).mu_x.data
    np.testing.assert_array_equal(a[:, :4], b[:, :4])
    assert not np.allclose(a[:, 4:], b[:, 4:])


def test_generation_is_deterministic_and_validates_temperature(toy_model):
    y = np.random.default_rng(0).normal(size=8)
    a = toy_model.generate(y, 0.7, np.random.default_rng(5))
    b = toy_model.generate(y, 0.7, np.random.default_rng(5))
    assert a == b
    assert len(a) <= toy_model.cfg.max_len
    with pytest.raises(ValueError, match="temperature"):
        toy_model.generate(y, 0.0)
    with pytest.raises(ValueError, match="temperature"):
        toy_model.generate(y, 1.5)


def test_low_temperature_approaches_greedy(toy_model):
    y = np.random.default_rng(0).normal(size=8)
    greedy = toy_model.generate(y, greedy=True)
    cold = toy_model.generate(y, 1e-12, np.random.default_rng(9))
    assert len(cold) == len(greedy)
    np.testing.assert_allclose(cold.points, greedy.points, atol=1e-3)


def test_distant_codes_draw_different_pictures(briefly_trained, corpus):
    model = briefly_trained.model
    mu = model.encode_mu(model.images_for([corpus[0], corpus[-1]]))
    a = model.generate(mu[0], greedy=True)
    b = model.generate(mu[1], greedy=True)
    assert (rasterize(a) != rasterize(b)).any()


# -- positional-encoding reachability -----------------------------------------------------

def _loss(model, corpus, n=2):
    images = model.images_for(corpus[:n])
    t5, lengths = model.targets(corpus[:n])
    return model.loss(images, t5, lengths, np.zeros((n, model.cfg.z_dim)))


def test_relative_bank_receives_gradient(corpus):
    model = Gra2Seq(ModelConfig.preset("toy"), seed=0)
    grads = gradient(_loss(model, corpus))
    assert any(np.abs(grads[r].data).sum() > 0 for r in model.rel_pe.offsets)
    assert model.rel_pe.placeholder not in grads


def test_disabled_relative_encoding_is_unreachable(corpus):
    model = Gra2Seq(ModelConfig.preset("toy", use_relative_pe=False), seed=0)
    grads = gradient(_loss(model, corpus))
    assert not any(r in grads for r in model.rel_pe.offsets)
    assert model.encoder.proj.weight in grads


def test_disabled_absolute_encoding_ignores_table(corpus):
    model = Gra2Seq(ModelConfig.preset("toy", use_absolute_pe=False), seed=0)
    before = float(_loss(model, corpus).data)
    model._const["abs_pe"] = model._const["abs_pe"] + 5.0
    assert float(_loss(model, corpus).data) == before


def test_positional_encodings_never_change_the_graph(corpus):
    model = Gra2Seq(ModelConfig.preset("toy"), seed=0)
    model.eval()
    images = model.images_for(corpus[:3])
    _, adj = model.encode(images)
    model._const["abs_pe"] = np.random.default_rng(0).normal(size=model._const["abs_pe"].shape)
    for r in model.rel_pe.offsets:
        r.data = r.data + 1.0
    _, adj2 = model.encode(images)
    assert adj.masked.data.tobytes() == adj2.masked.data.tobytes()
    assert adj.normalized.data.tobytes() == adj2.normalized.data.tobytes()


def test_absolute_table_survives_training(corpus):
    from dcgra2seq.training import TrainConfig, train

    model = Gra2Seq(ModelConfig.preset("toy"), seed=0)
    digest = hashlib.sha256(model._const["abs_pe"].tobytes()).hexdigest()
    train(corpus[:8], TrainConfig.preset("toy", epochs=1), model=model)
    assert hashlib.sha256(model._const["abs_pe"].tobytes()).hexdigest() == digest
    np.testing.assert_array_equal(model.rel_pe.placeholder.data, 0)


# -- checkpoints -----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, corpus):
    model = Gra2Seq(ModelConfig.preset("toy"), seed=4)
    model.offset_scale[0] = 123.0
    save_checkpoint(tmp_path / "m.dck", model, extra={"note": "x"})
    back, header = load_model(tmp_path / "m.dck", expect=ModelConfig.preset("toy"))
    assert header["extra"] == {"note": "x"}
    for (na, a), (nb, b) in zip(sorted(model.state_dict().items()), sorted(back.state_dict().items())):
        assert na == nb
        np.testing.assert_array_equal(a, b)
    with no_grad():
        assert float(_loss(model, corpus).data) == float(_loss(back, corpus).data)


def test_checkpoint_refuses_mismatched_architecture(tmp_path):
    save_checkpoint(tmp_path / "m.dck", Gra2Seq(ModelConfig.preset("toy"), seed=4))
    with pytest.raises(CheckpointMismatch):
        load_model(tmp_path / "m.dck", expect=ModelConfig.preset("toy", patches=6))


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "bad.dck").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "bad.dck")


def test_fingerprint_tracks_every_field():
    base = ModelConfig.preset("toy")
    assert base.fingerprint() == ModelConfig.preset("toy").fingerprint()
    assert base.fingerprint() != ModelConfig.preset("toy", pe_in_edges=True).fingerprint()
    assert ModelConfig.from_dict(base.to_dict()) == base


def test_paper_defaults():
    cfg = ModelConfig()
    assert cfg.channels == (8, 32, 64, 128, 256, 512, 512)
    assert (cfg.patches, cfg.dim, cfg.z_dim, cfg.hidden, cfg.mixtures, cfg.max_len) == (20, 512, 128, 512, 20, 200)
