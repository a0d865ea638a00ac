import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2fmeta import bde
from c2fmeta.bde import (
    SGD,
    AugmentConfig,
    BdeParams,
    TrainConfig,
    augment,
    augment_batch,
    class_probs,
    encode,
    encode_batch,
    init_params,
    instance_match_probs,
    load_bde,
    load_checkpoint,
    loss_joint,
    loss_semantic,
    loss_visual,
    save_bde,
    train_bde,
)
from c2fmeta.data import CoarseDataset, SynthSpec, generate_hierarchical
from c2fmeta.errors import (
    DimensionMismatch,
    DivergenceDetected,
    FormatError,
    InvalidLabel,
    NonPositiveTemperature,
    ZeroNorm,
)
from c2fmeta.numerics import check_gradient, make_rng, softmax

from conftest import unit_rows

mpmath.mp.dps = 40


# --- scalar oracles, evaluated term by term in high precision --------------

def oracle_visual(F, G, tau):
    m = F.shape[0]
    dot = lambda a, b: mpmath.fsum(mpmath.mpf(x) * mpmath.mpf(y) for x, y in zip(a, b))  # noqa: E731

    def P(i, probe):
        num = mpmath.exp(dot(F[i], probe) / tau)
        return num / mpmath.fsum(mpmath.exp(dot(F[k], probe) / tau) for k in range(m))

    total = -mpmath.fsum(mpmath.log(P(i, G[i])) for i in range(m))
    total -= mpmath.fsum(mpmath.log(1 - P(i, F[j])) for i in range(m) for j in range(m) if j != i)
    return float(total)


def oracle_semantic(W, F, G, y):
    C = W.shape[1]
    total = mpmath.mpf(0)
    for f, g, c in zip(F, G, y):
        for probe in (f, g):
            s = [mpmath.fsum(mpmath.mpf(W[d, k]) * mpmath.mpf(probe[d]) for d in range(W.shape[0]))
                 for k in range(C)]
            total -= s[c] - mpmath.log(mpmath.fsum(mpmath.exp(v) for v in s))
    return float(total)


# --- encoder ---------------------------------------------------------------

def test_encode_unit_norm_and_pure(rng):
    p = init_params(7, 3, make_rng(0), hidden=9, dim=5)
    x = rng.normal(size=7)
    f = encode(p, x)
    assert f.shape == (5,)
    assert abs(f @ f - 1) < 1e-9
    assert np.array_equal(encode(p, x), f)
    F = encode_batch(p.encoder, rng.normal(size=(20, 7)) * 30)
    np.testing.assert_allclose(np.einsum("ij,ij->i", F, F), 1.0, atol=1e-9)


def test_encode_errors(rng):
    p = init_params(4, 2, make_rng(0), hidden=3, dim=2)
    with pytest.raises(DimensionMismatch):
        encode(p, np.ones(5))
    p.encoder["W3"][:] = 0
    with pytest.raises(ZeroNorm):
        encode(p, np.ones(4))


def test_params_validation():
    p = init_params(3, 2, make_rng(0), hidden=3, dim=2)
    with pytest.raises(NonPositiveTemperature):
        BdeParams(p.encoder, p.W, tau=0.0)
    assert list(p.tensors()) == ["W1", "b1", "W2", "b2", "W3", "b3", "W"]
    assert (p.tau, p.m, p.n) == (0.1, 1.0, 10.0)


# --- augmentation ----------------------------------------------------------

def test_augment_identity_and_determinism(rng):
    x = rng.normal(size=6)
    zero = AugmentConfig(0.0, 0.0, 0.0)
    assert np.array_equal(augment(x, zero, make_rng(3)), x)
    cfg = AugmentConfig()
    assert np.array_equal(augment(x, cfg, make_rng(3)), augment(x, cfg, make_rng(3)))
    assert not np.array_equal(augment(x, cfg, make_rng(3)), augment(x, cfg, make_rng(4)))


def test_augment_invalid_config():
    with pytest.raises(ValueError):
        AugmentConfig(dropout_prob=1.0)
    with pytest.raises(ValueError):
        AugmentConfig(noise_sigma=-0.1)


def test_augment_monte_carlo_mean():
    # kept coordinates are scale * (x + noise); scale has mean 1 and noise mean 0
    cfg = AugmentConfig()
    x = np.array([1.0, -2.0, 0.5, 3.0])
    n = 10_000
    Xh = augment_batch(np.tile(x, (n, 1)), cfg, make_rng(0))
    kept = Xh != 0
    drop_rate = 1 - kept.mean()
    assert abs(drop_rate - cfg.dropout_prob) < 3 * math.sqrt(0.09 / (n * 4))
    for d in range(4):
        diff = Xh[kept[:, d], d] - x[d]
        sigma = math.sqrt(cfg.noise_sigma**2 * (1 + cfg.scale_jitter**2 / 3) + x[d] ** 2 * cfg.scale_jitter**2 / 3)
        assert abs(diff.mean()) < 3 * sigma / math.sqrt(kept[:, d].sum())


# --- instance matching and the visual loss ----------------------------------

def test_instance_match_probs_examples():
    assert instance_match_probs(np.array([[0.6, 0.8]]), np.array([1.0, 0.0]), 0.1).tolist() == [1.0]
    F = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]])
    np.testing.assert_allclose(instance_match_probs(F, np.array([1.0, 0.0]), 0.1), [1 / 3] * 3, rtol=1e-15)
    p = instance_match_probs(np.eye(2), np.array([1.0, 0.0]), 0.1)
    e = mpmath.exp(-10)
    np.testing.assert_allclose(p, [float(1 / (1 + e)), float(e / (1 + e))], rtol=1e-14)
    with pytest.raises(NonPositiveTemperature):
        instance_match_probs(np.eye(2), np.array([1.0, 0.0]), 0.0)
    with pytest.raises(DimensionMismatch):
        instance_match_probs(np.eye(2), np.ones(3), 0.1)


def test_visual_single_instance_is_zero(rng):
    F, G = unit_rows(rng, 1, 4), unit_rows(rng, 1, 4)
    out = loss_visual(F, G, 0.1)
    assert out.value == 0.0
    assert np.all(out.dF == 0) and np.all(out.dF_hat == 0)


def test_visual_orthonormal_pair_against_oracle():
    F = np.eye(2)
    value = loss_visual(F, F, 0.1).value
    e = mpmath.exp(-10)
    # each P(i|x_hat_i) = 1/(1+e^-10); each cross 1 - P(i|x_j) = 1/(1+e^-10)
    closed = float(-4 * mpmath.log(1 / (1 + e)))
    assert value == pytest.approx(closed, rel=1e-12)
    assert value == pytest.approx(oracle_visual(F, F, 0.1), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.floats(0.05, 2.0), st.integers(0, 2**32))
def test_visual_matches_oracle(m, d, tau, seed):
    r = np.random.default_rng(seed)
    F, G = unit_rows(r, m, d), unit_rows(r, m, d)
    out = loss_visual(F, G, tau)
    assert out.value >= 0
    assert out.value == pytest.approx(oracle_visual(F, G, tau), rel=1e-9, abs=1e-12)


def test_visual_gradient(rng):
    F, G = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8)
    tau = 0.3
    err_f = check_gradient(lambda v: loss_visual(v.reshape(F.shape), G, tau).value,
                           lambda v: loss_visual(v.reshape(F.shape), G, tau).dF, F.ravel())
    err_g = check_gradient(lambda v: loss_visual(F, v.reshape(G.shape), tau).value,
                           lambda v: loss_visual(F, v.reshape(G.shape), tau).dF_hat, G.ravel())
    assert err_f < 1e-4 and err_g < 1e-4


def test_visual_clamp_counted():
    # with unit rows P(i|x_j) <= 1/2 for j != i, so the clamp only fires on off-sphere inputs
    F = unit_rows(np.random.default_rng(0), 3, 2)
    assert loss_visual(F, F, 0.01).clamped == 0
    F = np.array([[10.0, 0.0], [1.0, 0.0]])
    out = loss_visual(F, F, 0.01)
    assert out.clamped == 1
    assert np.isfinite(out.value) and np.all(np.isfinite(out.dF))
    with pytest.raises(DimensionMismatch):
        loss_visual(np.eye(2), np.eye(3), 0.1)


# --- semantic loss ---------------------------------------------------------

def test_class_probs_examples(rng):
    f = unit_rows(rng, 1, 4)[0]
    assert class_probs(rng.normal(size=(4, 1)), f).tolist() == [1.0]
    np.testing.assert_allclose(class_probs(np.zeros((4, 3)), f), [1 / 3] * 3)
    W = rng.normal(size=(4, 5))
    np.testing.assert_allclose(class_probs(W, f), softmax(W.T @ f), rtol=1e-14)
    with pytest.raises(DimensionMismatch):
        class_probs(np.zeros((3, 2)), f)


def test_semantic_examples(rng):
    F, G = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    assert loss_semantic(rng.normal(size=(4, 1)), F, G, np.zeros(5, int)).value == 0.0
    y = rng.integers(0, 3, size=5)
    assert loss_semantic(np.zeros((4, 3)), F, G, y).value == pytest.approx(2 * 5 * math.log(3), rel=1e-14)


def test_semantic_one_hot_equals_int_labels(rng):
    F, G = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    W = rng.normal(size=(3, 2))
    y = np.array([0, 1, 1, 0])
    a = loss_semantic(W, F, G, y)
    b = loss_semantic(W, F, G, np.eye(2)[y])
    assert a.value == b.value
    with pytest.raises(InvalidLabel):
        loss_semantic(W, F, G, np.array([0, 2, 1, 0]))
    with pytest.raises(InvalidLabel):
        loss_semantic(W, F, G, np.full((4, 2), 0.5))
    with pytest.raises(DimensionMismatch):
        loss_semantic(W, F, G, np.array([0, 1]))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32))
def test_semantic_matches_oracle(b, d, C, seed):
    r = np.random.default_rng(seed)
    F, G = unit_rows(r, b, d), unit_rows(r, b, d)
    W = r.normal(size=(d, C)) * 2
    y = r.integers(0, C, size=b)
    out = loss_semantic(W, F, G, y)
    assert out.value >= 0
    assert out.value == pytest.approx(oracle_semantic(W, F, G, y), rel=1e-9, abs=1e-12)
    # decomposes into two standard cross-entropies
    ce = lambda E: -sum(math.log(softmax(W.T @ e)[c]) for e, c in zip(E, y))  # noqa: E731
    assert out.value == pytest.approx(ce(F) + ce(G), rel=1e-9, abs=1e-12)


def test_semantic_gradient(rng):
    F, G = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    W = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=5)
    for name, arr in (("W", W), ("F", F), ("G", G)):
        def f(v, name=name, arr=arr):
            args = {"W": W, "F": F, "G": G, name: v.reshape(arr.shape)}
            return loss_semantic(args["W"], args["F"], args["G"], y)
        key = {"W": "dW", "F": "dF", "G": "dF_hat"}[name]
        assert check_gradient(lambda v: f(v).value, lambda v: getattr(f(v), key), arr.ravel()) < 1e-4


# --- joint loss ------------------------------------------------------------

def joint_grad_error(params, X, y, Xh):
    worst = 0.0
    base = loss_joint(params, X, y, X_hat=Xh).grads
    for name, arr in params.tensors().items():
        orig = arr.copy()

        def f(v):
            arr[...] = v.reshape(orig.shape)
            out = loss_joint(params, X, y, X_hat=Xh).value
            arr[...] = orig
            return out

        worst = max(worst, check_gradient(f, lambda v, name=name: base[name], orig.ravel()))
    return worst


def test_joint_gradient_small_config():
    r = make_rng(5)
    p = init_params(6, 2, r, hidden=5, dim=4)
    X = r.normal(size=(3, 6))
    Xh = augment_batch(X, AugmentConfig(), r)
    assert joint_grad_error(p, X, np.array([0, 1, 1]), Xh) < 1e-4


def test_joint_annihilated_weights(rng):
    p = init_params(4, 2, make_rng(0), hidden=3, dim=3, m=0.0, n=0.0)
    out = loss_joint(p, rng.normal(size=(3, 4)), np.array([0, 1, 0]), make_rng(1))
    assert out.value == 0.0
    assert all(np.all(g == 0) for g in out.grads.values())


def test_joint_linear_combination(monkeypatch, rng):
    from c2fmeta.bde import SemanticLoss, VisualLoss

    def fake_visual(F, G, tau):
        return VisualLoss(2.0, np.zeros_like(F), np.zeros_like(G), 0)

    def fake_semantic(W, F, G, y):
        return SemanticLoss(0.5, np.zeros_like(W), np.zeros_like(F), np.zeros_like(G))

    monkeypatch.setattr(bde, "loss_visual", fake_visual)
    monkeypatch.setattr(bde, "loss_semantic", fake_semantic)
    p = init_params(4, 2, make_rng(0), hidden=3, dim=3)
    assert loss_joint(p, rng.normal(size=(2, 4)), np.array([0, 1]), make_rng(1)).value == 7.0


def test_joint_shares_encoder(rng):
    # identical inputs for both branches give identical embeddings, hence P(i|x_hat_i) = P(i|x_i)
    p = init_params(4, 2, make_rng(0), hidden=6, dim=3)
    X = rng.normal(size=(3, 4))
    out = loss_joint(p, X, np.array([0, 1, 0]), X_hat=X)
    F = encode_batch(p.encoder, X)
    assert out.visual == pytest.approx(loss_visual(F, F, p.tau).value, rel=1e-14)


# --- optimiser and schedule --------------------------------------------------

def test_sgd_without_momentum_is_gradient_descent(rng):
    w0 = rng.normal(size=(3, 2))
    A = rng.normal(size=(3, 3))
    A = A @ A.T
    grad = lambda w: A @ w  # noqa: E731
    t = {"W": w0.copy()}
    opt = SGD(t, momentum=0.0, weight_decay=0.0)
    ref = w0.copy()
    for _ in range(20):
        opt.step({"W": grad(t["W"])}, 0.05)
        ref = ref - 0.05 * grad(ref)
        np.testing.assert_allclose(t["W"], ref, rtol=0, atol=1e-12)


def test_sgd_momentum_and_decay():
    t = {"W": np.array([1.0]), "b": np.array([1.0])}
    opt = SGD(t, momentum=0.9, weight_decay=0.1)
    opt.step({"W": np.array([1.0]), "b": np.array([1.0])}, 0.5)
    # v = g + wd * w = 1.1 for W; biases are not decayed
    assert t["W"][0] == pytest.approx(1 - 0.5 * 1.1)
    assert t["b"][0] == pytest.approx(0.5)
    opt.step({"W": np.array([0.0]), "b": np.array([0.0])}, 0.5)
    assert t["b"][0] == pytest.approx(0.5 - 0.5 * 0.9)


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 0.3 and cfg.lr_at(119) == 0.3
    assert cfg.lr_at(120) == pytest.approx(0.03)
    assert cfg.lr_at(160) == pytest.approx(0.003)
    comp = TrainConfig(lr_mode="compound")
    assert comp.lr_at(160) == pytest.approx(0.3 * 0.1 * 0.01)


@pytest.mark.parametrize("kw", [
    dict(lr_milestones=(160, 120)),
    dict(lr_factors=(0.01, 0.1)),
    dict(epochs=100),
    dict(lr_milestones=(10,), lr_factors=(0.1, 0.01)),
    dict(lr_mode="cosine"),
])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# --- training --------------------------------------------------------------

def tiny():
    return generate_hierarchical(SynthSpec(C=2, fine_per_coarse=2, samples_per_fine=6, D_in=5, seed=1))


def test_zero_lr_leaves_params():
    ds = CoarseDataset(make_rng(0).normal(size=(4, 3)), [0, 1, 0, 1], 2)
    cfg = TrainConfig(epochs=1, base_lr=0.0, lr_milestones=(), lr_factors=(), weight_decay=0.0, hidden=4, dim=3)
    init = init_params(3, 2, make_rng(9), hidden=4, dim=3)
    out, hist = train_bde(ds, cfg, init=init)
    for k, v in init.tensors().items():
        assert np.array_equal(out.tensors()[k], v)
    assert len(hist.loss) == 1


def test_training_deterministic():
    cfg = TrainConfig(epochs=3, batch_size=8, lr_milestones=(1,), lr_factors=(0.1,), hidden=6, dim=4)
    a, ha = train_bde(tiny(), cfg)
    b, hb = train_bde(tiny(), cfg)
    for k in a.tensors():
        assert np.array_equal(a.tensors()[k], b.tensors()[k])
    assert ha.loss == hb.loss


def test_semantic_only_training_trace():
    cfg = TrainConfig(epochs=3, batch_size=8, lr_milestones=(), lr_factors=(), hidden=6, dim=4, m=0.0)
    _, hist = train_bde(tiny(), cfg)
    assert hist.visual == [0.0, 0.0, 0.0]
    for total, sem in zip(hist.loss, hist.semantic):
        assert total == pytest.approx(10.0 * sem, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_on_default_benchmark(seed):
    ds = generate_hierarchical(SynthSpec(seed=seed))
    cfg = TrainConfig(epochs=8, lr_milestones=(5,), lr_factors=(0.1,), seed=seed)
    _, hist = train_bde(ds, cfg)
    assert np.all(np.isfinite(hist.loss))
    assert hist.loss[-1] < hist.loss[0]


def test_divergence_detected(monkeypatch):
    def nan_loss(*a, **k):
        return bde.JointLoss(float("nan"), {}, 0.0, 0.0, 0)

    monkeypatch.setattr(bde, "loss_joint", nan_loss)
    with pytest.raises(DivergenceDetected):
        train_bde(tiny(), TrainConfig(epochs=1, lr_milestones=(), lr_factors=(), hidden=4, dim=3))


def test_model_selection_holdout():
    cfg = TrainConfig(epochs=4, batch_size=8, lr_milestones=(), lr_factors=(), hidden=6, dim=4,
                      select_fraction=0.2, select_k=5)
    _, hist = train_bde(tiny(), cfg)
    assert len(hist.selection) == 4
    assert hist.selected_epoch == int(np.argmax(hist.selection))


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = init_params(5, 3, make_rng(2), hidden=4, dim=3, tau=0.2, m=1.0, n=5.0)
    save_bde(tmp_path / "ck", p, {"epoch": 7, "seed": 2})
    back = load_bde(tmp_path / "ck")
    for k, v in p.tensors().items():
        assert np.array_equal(back.tensors()[k], v)
    assert (back.tau, back.m, back.n) == (0.2, 1.0, 5.0)
    _, manifest = load_checkpoint(tmp_path / "ck")
    assert [item["name"] for item in manifest["layout"]] == ["W1", "b1", "W2", "b2", "W3", "b3", "W"]
    assert manifest["dtype"] == "<f8" and manifest["epoch"] == 7
    n_values = sum(v.size for v in p.tensors().values())
    assert (tmp_path / "ck.bin").stat().st_size == 8 * n_values


def test_checkpoint_length_errors(tmp_path):
    p = init_params(3, 2, make_rng(2), hidden=2, dim=2)
    save_bde(tmp_path / "ck", p)
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ck")
    (tmp_path / "ck.bin").write_bytes(raw + raw[:8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ck")
