import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emgtta import autodiff as ad
from emgtta.align import (
    GESTURE_GROUP,
    REST_GROUP,
    AlignConfig,
    ConfigurationError,
    ContractError,
    SourceStats,
    TargetBuffer,
    adapt_align,
    class_conditional_loss,
    collect_source_stats,
    der_loss,
    fit_source_stats,
    moment_loss,
    pseudo_label,
    swd,
)
from emgtta.data import synth_sessions
from emgtta.replay import fill_buffer
from emgtta.tcn import TcnConfig, build, inject_lora

from oracles import central_difference, rel_err

TINY = TcnConfig(input_channels=3, blocks=2, channels=4, kernel_size=2, classes=3, lora_block=1, lora_rank=2)


def _grad(fn, x):
    tape = ad.Tape()
    v = tape.variable(x)
    return ad.backward(tape, fn(v), [v])[v].data


def _standardized(rng, n, d):
    """Rows whose mean is exactly 0 and population covariance exactly I."""
    z = rng.normal(size=(n, d))
    z -= z.mean(axis=0)
    w = np.linalg.cholesky(z.T @ z / n)
    return z @ np.linalg.inv(w).T


# ---------------------------------------------------------------- source moments


def test_fit_source_stats_two_points():
    mu, cov = fit_source_stats([[0.0, 0.0], [2.0, 2.0]])
    assert np.array_equal(mu, [1.0, 1.0])
    assert np.array_equal(cov, [[1.0, 1.0], [1.0, 1.0]])


def test_fit_source_stats_monte_carlo():
    mu, cov = fit_source_stats(np.random.default_rng(0).normal(size=(100_000, 3)))
    assert np.all(np.abs(mu) < 0.02)
    assert np.all(np.abs(np.diag(cov) - 1) < 0.05)


def test_fit_source_stats_duplication_and_psd():
    z = np.random.default_rng(1).normal(size=(40, 5))
    a, b = fit_source_stats(z), fit_source_stats(np.concatenate([z, z]))
    np.testing.assert_allclose(a[0], b[0], rtol=1e-14)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-15)
    assert np.array_equal(a[1], a[1].T)
    assert np.linalg.eigvalsh(a[1]).min() >= -1e-10
    with pytest.raises(ContractError):
        fit_source_stats(z[:1])


# ---------------------------------------------------------------- moment losses


def test_moment_loss_zero_at_source_stats():
    z = np.random.default_rng(2).normal(size=(30, 4))
    mu, cov = fit_source_stats(z)
    assert moment_loss(z, mu, cov).item() == pytest.approx(0.0, abs=1e-24)


def test_moment_loss_unit_shift():
    z = _standardized(np.random.default_rng(3), 50, 3)
    shift = np.array([1.0, 0.0, 0.0])
    assert moment_loss(z + shift, np.zeros(3), np.eye(3)).item() == pytest.approx(1.0, abs=1e-12)


def test_moment_loss_rejects_empty():
    with pytest.raises(ContractError):
        moment_loss(np.zeros((0, 3)), np.zeros(3), np.eye(3))


@settings(max_examples=30, deadline=None)
@given(z=hnp.arrays(np.float64, (6, 2), elements=st.floats(-10, 10)), lam=st.floats(0, 5))
def test_moment_loss_non_negative(z, lam):
    assert moment_loss(z, np.ones(2), np.eye(2), lam, lam).item() >= 0.0


@pytest.mark.parametrize("seed", range(3))
def test_moment_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 3))
    mu, cov = rng.normal(size=3), np.eye(3) * 0.5
    g = _grad(lambda v: moment_loss(v, mu, cov, 0.7, 1.3), z)
    numeric = central_difference(lambda a: moment_loss(a, mu, cov, 0.7, 1.3).item(), [z], 0)
    assert rel_err(g, numeric) < 1e-5


def _class_moments(rng, d=3):
    return {
        REST_GROUP: (rng.normal(size=d), np.eye(d) * 0.3),
        GESTURE_GROUP: (rng.normal(size=d) + 2, np.eye(d) * 1.5),
    }


def test_class_conditional_zero_at_class_stats():
    rng = np.random.default_rng(4)
    zr, zg = rng.normal(size=(10, 3)), rng.normal(size=(12, 3)) + 1
    moments = {REST_GROUP: fit_source_stats(zr), GESTURE_GROUP: fit_source_stats(zg)}
    groups = np.array([REST_GROUP] * 10 + [GESTURE_GROUP] * 12)
    loss, partial = class_conditional_loss(np.concatenate([zr, zg]), groups, moments)
    assert loss.item() == pytest.approx(0.0, abs=1e-24) and not partial


def test_class_conditional_rest_only_is_partial():
    rng = np.random.default_rng(5)
    moments = _class_moments(rng)
    z = rng.normal(size=(9, 3))
    loss, partial = class_conditional_loss(z, np.full(9, REST_GROUP), moments)
    assert partial
    assert loss.item() == moment_loss(z, *moments[REST_GROUP]).item()


def test_class_conditional_is_sum_of_group_losses():
    rng = np.random.default_rng(6)
    moments = _class_moments(rng)
    z = rng.normal(size=(20, 3)) + np.linspace(0, 2, 20)[:, None]
    groups = rng.integers(0, 2, size=20)
    loss, partial = class_conditional_loss(z, groups, moments, 0.5, 2.0)
    ref = sum(moment_loss(z[groups == k], *moments[k], 0.5, 2.0).item() for k in (0, 1))
    assert not partial
    assert abs(loss.item() - ref) <= 1e-12 * max(1.0, ref)
    g = _grad(lambda v: class_conditional_loss(v, groups, moments, 0.5, 2.0)[0], z)
    numeric = central_difference(lambda a: class_conditional_loss(a, groups, moments, 0.5, 2.0)[0].item(), [z], 0)
    assert rel_err(g, numeric) < 1e-5


def test_pseudo_labels():
    assert pseudo_label(np.array([3.0, 1.0, 2.0])) == REST_GROUP
    assert pseudo_label(np.array([1.0, 1.0, 2.0])) == GESTURE_GROUP
    assert pseudo_label(np.array([2.0, 2.0, 0.0])) == GESTURE_GROUP  # ties go to gesture
    np.testing.assert_array_equal(pseudo_label(np.array([[1.0, 0.0], [0.0, 1.0]])), [REST_GROUP, GESTURE_GROUP])


# ---------------------------------------------------------------- sliced Wasserstein


def test_swd_identical_sets():
    a = np.random.default_rng(7).normal(size=(15, 4))
    assert swd(a, a.copy(), 16, seed=1).item() == 0.0


def test_swd_one_dimensional_hand_case():
    for seed in range(5):  # the single direction is +1 or -1; both give 2
        assert swd([[0.0], [1.0]], [[2.0], [3.0]], 1, seed=seed).item() == pytest.approx(2.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 12), m=st.integers(1, 12))
def test_swd_symmetric_and_non_negative(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) + 1
    ab, ba = swd(a, b, 8, seed).item(), swd(b, a, 8, seed).item()
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-12, abs=1e-15)
    # unequal cardinalities subsample the larger set
    assert swd(a, rng.normal(size=(m, 3)), 8, seed).item() >= 0


def test_swd_dimension_mismatch():
    with pytest.raises(ContractError):
        swd(np.zeros((3, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_swd_gradient(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(10, 3))
    b = rng.normal(size=(10, 3)) * 2 + 1
    g = _grad(lambda v: swd(b, v, 5, seed=seed), a)
    numeric = central_difference(lambda x: swd(b, x, 5, seed=seed).item(), [a], 0, step=1e-6)
    assert rel_err(g, numeric) < 1e-5


# ---------------------------------------------------------------- replay loss


def test_der_loss_gradient_on_tiny_model():
    rng = np.random.default_rng(8)
    model = inject_lora(build(TINY, 1), seed=2)
    model.adapters = {k: rng.normal(scale=0.5, size=v.shape) for k, v in model.adapters.items()}
    windows = rng.normal(size=(4, 3, TINY.receptive_field))
    labels = rng.integers(0, 3, size=4)
    stored = rng.normal(size=(4, 3))
    names = sorted(model.adapters)

    def value(*arrays):
        return der_loss(model, windows, labels, stored, params=dict(zip(names, arrays))).item()

    tape = ad.Tape()
    phi = {k: tape.variable(model.adapters[k]) for k in names}
    loss = der_loss(model, windows, labels, stored, params=phi)
    assert loss.item() >= 0
    gm = ad.backward(tape, loss, list(phi.values()))
    arrays = [model.adapters[k] for k in names]
    for i, k in enumerate(names):
        assert rel_err(gm[phi[k]].data, central_difference(value, arrays, i)) < 1e-5, k


def test_der_loss_empty_buffer():
    with pytest.raises(ContractError):
        der_loss(build(TINY), np.zeros((0, 3, 5)), np.zeros(0, dtype=int), np.zeros((0, 3)))


# ---------------------------------------------------------------- target buffer and cache


def test_target_buffer_ring():
    buf = TargetBuffer(3, 2)
    for i in range(5):
        buf.push([i, -i], group=i % 2)
    assert len(buf) == 3
    np.testing.assert_array_equal(buf.features()[:, 0], [2, 3, 4])
    np.testing.assert_array_equal(buf.groups(), [0, 1, 0])
    with pytest.raises(ContractError):
        buf.push([1.0, 2.0, 3.0])


@pytest.fixture(scope="module")
def cached():
    cfg = TcnConfig(input_channels=14, blocks=2, channels=8, kernel_size=3, classes=8, lora_block=1)
    model = inject_lora(build(cfg, 0), seed=0)
    sessions = synth_sessions(3, 7, 1, seed=1)
    replay = fill_buffer(model, sessions[:2], 12, seed=0)
    stats = collect_source_stats(model, sessions[:2], n_components=3, seed=0, exemplars=replay)
    return model, sessions, stats


def test_source_stats_round_trip(tmp_path, cached):
    _, _, stats = cached
    p1 = stats.save(tmp_path / "a.npz")
    back = SourceStats.load(p1)
    p2 = back.save(tmp_path / "b.npz")
    assert p1.read_bytes() == p2.read_bytes()
    assert back.exemplars.digest() == stats.exemplars.digest()
    assert set(back.class_moments) == {REST_GROUP, GESTURE_GROUP}
    np.testing.assert_array_equal(back.gmm.means, stats.gmm.means)


def test_zero_weights_leave_model_bit_exact(cached):
    model, sessions, stats = cached
    res = adapt_align(model, sessions[2].segment(0, 300), stats, AlignConfig(align_weight=0.0, der_weight=0.0))
    assert res.model.digest() == model.digest()
    assert res.losses == []


@pytest.mark.parametrize("mode", ["mom", "cc", "gmm"])
def test_alignment_touches_only_adapters(cached, mode):
    model, sessions, stats = cached
    cfg = AlignConfig(mode=mode, steps=3, lr=0.1, der_weight=0.5)
    res = adapt_align(model, sessions[2].segment(0, 400), stats, cfg)
    assert len(res.losses) == 3 and all(np.isfinite(res.losses))
    for k, v in model.params.items():
        assert np.array_equal(res.model.params[k], v)
    for k, (m, s) in model.bn_stats.items():
        assert np.array_equal(res.model.bn_stats[k][0], m) and np.array_equal(res.model.bn_stats[k][1], s)
    assert any(not np.array_equal(res.model.adapters[k], v) for k, v in model.adapters.items())
    again = adapt_align(model, sessions[2].segment(0, 400), stats, cfg)
    assert again.model.digest() == res.model.digest()


def test_configuration_errors(cached):
    model, sessions, stats = cached
    prefix = sessions[2].segment(0, 200)
    bare = SourceStats(stats.layer, stats.mean, stats.cov)
    with pytest.raises(ConfigurationError, match="GMM"):
        adapt_align(model, prefix, bare, AlignConfig(mode="gmm", der_weight=0.0))
    with pytest.raises(ConfigurationError, match="class-conditional"):
        adapt_align(model, prefix, bare, AlignConfig(mode="cc", der_weight=0.0))
    with pytest.raises(ConfigurationError, match="exemplar"):
        adapt_align(model, prefix, bare, AlignConfig(mode="mom", der_weight=1.0))
    with pytest.raises(ConfigurationError, match="adapters"):
        adapt_align(build(model.config), prefix, stats, AlignConfig())
    with pytest.raises(ConfigurationError, match="mode"):
        adapt_align(model, prefix, stats, AlignConfig(mode="kl"))
    moved = SourceStats(0, stats.mean, stats.cov, stats.class_moments, stats.gmm, stats.exemplars)
    with pytest.raises(ConfigurationError, match="block"):
        adapt_align(model, prefix, moved, AlignConfig())
