import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridvmr import autodiff as ad
from hybridvmr.alignment import (DomainClassifier, MmdConfig, TapBatch,
                                 alignment_loss, domain_forward, domain_loss,
                                 joint_mmd, median_heuristic, mmd_squared)
from hybridvmr.autodiff import ModelParams, Tensor
from hybridvmr.errors import ConfigError, DataError, ShapeError
from hybridvmr.gradcheck import check_gradients
from hybridvmr.model import BranchTaps


def _mmd_oracle(src, tgt, cfg):
    """Double-loop MMD with its own bandwidth computation."""
    if cfg.fixed_bandwidth is not None:
        sigma = cfg.fixed_bandwidth
    else:
        merged = np.vstack([src, tgt])
        dists = []
        for i in range(len(merged)):
            for j in range(i + 1, len(merged)):
                dists.append(math.sqrt(((merged[i] - merged[j]) ** 2).sum()))
        sigma = float(np.median(dists)) if dists else cfg.fallback_bandwidth
        if sigma <= 0.0:
            sigma = cfg.fallback_bandwidth

    def k(a, b, h):
        return math.exp(-((a - b) ** 2).sum() / (2.0 * h * h))

    total = 0.0
    for scale in cfg.bandwidth_scales:
        h = scale * sigma
        ss = sum(k(a, b, h) for a in src for b in src) / len(src) ** 2
        tt = sum(k(a, b, h) for a in tgt for b in tgt) / len(tgt) ** 2
        st_ = sum(k(a, b, h) for a in src for b in tgt) / (len(src) * len(tgt))
        total += ss + tt - 2.0 * st_
    return total / len(cfg.bandwidth_scales)


# -- mmd estimator -------------------------------------------------------


def test_mmd_matches_double_loop_oracle_50_pairs():
    rng = np.random.default_rng(42)
    cfg = MmdConfig()
    for _ in range(50):
        n_s, n_t = rng.integers(2, 17, size=2)
        d = int(rng.integers(2, 33))
        src = rng.standard_normal((n_s, d))
        tgt = rng.standard_normal((n_t, d)) + rng.uniform(-1, 1)
        got = mmd_squared(Tensor(src), Tensor(tgt), cfg).item()
        assert abs(got - _mmd_oracle(src, tgt, cfg)) < 1e-10
        assert got >= -1e-10


def test_mmd_identical_sets_is_zero(rng):
    x = rng.standard_normal((8, 5))
    assert abs(mmd_squared(Tensor(x), Tensor(x), MmdConfig()).item()) <= 1e-10


def test_mmd_symmetry(rng):
    a = rng.standard_normal((6, 4))
    b = rng.standard_normal((9, 4)) + 0.3
    cfg = MmdConfig()
    ab = mmd_squared(Tensor(a), Tensor(b), cfg).item()
    ba = mmd_squared(Tensor(b), Tensor(a), cfg).item()
    assert abs(ab - ba) < 1e-12


def test_mmd_grows_with_mean_separation(rng):
    a = rng.standard_normal((12, 3))
    cfg = MmdConfig(fixed_bandwidth=1.0)
    near = mmd_squared(Tensor(a), Tensor(a + 0.1), cfg).item()
    far = mmd_squared(Tensor(a), Tensor(a + 3.0), cfg).item()
    assert far > near


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5),
       st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_mmd_nonnegative_and_symmetric_property(n_s, n_t, d, seed):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((n_s, d))
    tgt = rng.standard_normal((n_t, d))
    cfg = MmdConfig()
    m = mmd_squared(Tensor(src), Tensor(tgt), cfg).item()
    assert m >= -1e-10
    assert abs(m - mmd_squared(Tensor(tgt), Tensor(src), cfg).item()) < 1e-12


def test_mmd_shape_and_data_errors():
    cfg = MmdConfig()
    with pytest.raises(ShapeError):
        mmd_squared(Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))), cfg)
    with pytest.raises(ShapeError):
        mmd_squared(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), cfg)
    with pytest.raises(DataError):
        mmd_squared(Tensor(np.zeros((0, 3))), Tensor(np.zeros((2, 3))), cfg)


def test_mmd_gradient_with_fixed_bandwidth(rng):
    src = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    tgt = Tensor(rng.standard_normal((5, 3)) + 0.5, requires_grad=True)
    cfg = MmdConfig(fixed_bandwidth=1.3)
    err = check_gradients(lambda: mmd_squared(src, tgt, cfg), [src, tgt])
    assert err < 1e-6


def test_mmd_config_validation():
    with pytest.raises(ConfigError):
        MmdConfig(bandwidth_scales=()).validate()
    with pytest.raises(ConfigError):
        MmdConfig(bandwidth_scales=(1.0, -2.0)).validate()
    with pytest.raises(ConfigError):
        MmdConfig(lambda_vid=-0.1).validate()
    with pytest.raises(ConfigError):
        MmdConfig(fixed_bandwidth=0.0).validate()
    MmdConfig().validate()


def test_median_heuristic_two_points():
    assert median_heuristic(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0


def test_median_heuristic_degenerate_falls_back():
    assert median_heuristic(np.zeros((1, 4)), fallback=2.5) == 2.5
    assert median_heuristic(np.ones((6, 4)), fallback=2.5) == 2.5


# -- alignment and joint losses ------------------------------------------


def _taps(rng, n, d, shift=0.0):
    return [BranchTaps(video_before=Tensor(rng.standard_normal((5, d)) + shift),
                       query_before=Tensor(rng.standard_normal((3, d)) + shift),
                       video_after=Tensor(rng.standard_normal((5, d)) + shift),
                       query_after=Tensor(rng.standard_normal((3, d)) + shift))
            for _ in range(n)]


def test_alignment_loss_is_weighted_sum_of_four_terms(rng):
    cfg = MmdConfig(lambda_vid=0.7, fixed_bandwidth=1.0)
    tf = TapBatch.from_taps(_taps(rng, 4, 6))
    tw = TapBatch.from_taps(_taps(rng, 5, 6, shift=0.5))

    def pooled(seqs):
        return Tensor(np.stack([s.data.mean(axis=0) for s in seqs]))

    want = (mmd_squared(pooled(tf.video_before), pooled(tw.video_before), cfg).item() * 0.7
            + mmd_squared(pooled(tf.query_before), pooled(tw.query_before), cfg).item()
            + mmd_squared(pooled(tf.video_after), pooled(tw.video_after), cfg).item() * 0.7
            + mmd_squared(pooled(tf.query_after), pooled(tw.query_after), cfg).item())
    got = alignment_loss(tf, tw, cfg).item()
    assert abs(got - want) < 1e-12


def test_alignment_video_weight_zero_ignores_video_taps(rng):
    cfg = MmdConfig(lambda_vid=0.0, fixed_bandwidth=1.0)
    tf, tw = _taps(rng, 4, 6), _taps(rng, 4, 6, shift=10.0)
    # make query taps identical so only the (huge) video gap could contribute
    for a, b in zip(tf, tw):
        b.query_before = Tensor(a.query_before.data.copy())
        b.query_after = Tensor(a.query_after.data.copy())
    loss = alignment_loss(TapBatch.from_taps(tf), TapBatch.from_taps(tw), cfg)
    assert abs(loss.item()) <= 1e-10


def test_alignment_empty_batch_rejected(rng):
    cfg = MmdConfig()
    with pytest.raises(DataError):
        alignment_loss(TapBatch.from_taps([]), TapBatch.from_taps(_taps(rng, 2, 4)), cfg)


def test_joint_mmd_weighting(rng):
    cfg = MmdConfig(lambda_vid=2.0, fixed_bandwidth=1.0)
    vf, vw = rng.standard_normal((6, 4)), rng.standard_normal((6, 4)) + 1.0
    qf, qw = rng.standard_normal((6, 4)), rng.standard_normal((6, 4)) - 0.5
    want = (2.0 * mmd_squared(Tensor(vf), Tensor(vw), cfg).item()
            + mmd_squared(Tensor(qf), Tensor(qw), cfg).item())
    got = joint_mmd(Tensor(vf), Tensor(vw), Tensor(qf), Tensor(qw), cfg).item()
    assert abs(got - want) < 1e-12


# -- domain classifier ---------------------------------------------------


def _clf(rng, d=5, lam=0.5):
    return DomainClassifier(ModelParams(), "dom", d, rng, grl_lambda=lam)


def test_domain_forward_is_distribution(rng):
    clf = _clf(rng)
    p = domain_forward(clf, Tensor(rng.standard_normal(5)),
                       Tensor(rng.standard_normal(5)))
    assert p.shape == (2,)
    assert np.all(p.data > 0.0)
    assert abs(p.data.sum() - 1.0) < 1e-12


def test_domain_forward_shape_error(rng):
    clf = _clf(rng)
    with pytest.raises(ShapeError):
        domain_forward(clf, Tensor(np.zeros(4)), Tensor(np.zeros(5)))


def test_grl_forward_bit_identity_and_reversed_gradient(rng):
    """Paired backward: upstream grad is exactly -lambda times the
    classifier-side gradient, and the forward pass is bit-identical."""
    lam = 0.37
    clf = _clf(rng, lam=lam)
    v_np = rng.standard_normal(5)
    q_np = rng.standard_normal(5)

    v = Tensor(v_np.copy(), requires_grad=True)
    q = Tensor(q_np.copy(), requires_grad=True)
    p = domain_forward(clf, v, q)
    ad.log(ad.slice_rows(p, 1, 2)).sum().backward()

    # same weights, no reversal: classifier's own view of the input gradient
    v2 = Tensor(v_np.copy(), requires_grad=True)
    q2 = Tensor(q_np.copy(), requires_grad=True)
    p2 = ad.softmax_rows(clf.fc1(clf.fc2(ad.concat([v2, q2]))))
    ad.log(ad.slice_rows(p2, 1, 2)).sum().backward()

    assert np.array_equal(p.data, p2.data)
    assert np.array_equal(v.grad, -lam * v2.grad)
    assert np.array_equal(q.grad, -lam * q2.grad)


def test_grl_lambda_zero_blocks_upstream_gradient(rng):
    clf = _clf(rng, lam=0.0)
    v = Tensor(rng.standard_normal(5), requires_grad=True)
    q = Tensor(rng.standard_normal(5), requires_grad=True)
    p = domain_forward(clf, v, q)
    ad.log(ad.slice_rows(p, 1, 2)).sum().backward()
    assert np.all(v.grad == 0.0)
    assert np.all(q.grad == 0.0)
    # classifier's own weights still receive gradient
    assert np.any(clf.fc1.w.tensor.grad != 0.0)


def test_negative_grl_lambda_rejected(rng):
    with pytest.raises(ConfigError):
        _clf(rng, lam=-0.1)


# -- domain loss ---------------------------------------------------------


def test_domain_loss_spot_value_at_half():
    p = Tensor(np.array([0.5, 0.5]))
    got = domain_loss(p, Tensor(np.array([0.5, 0.5]))).item()
    assert abs(got - 2.0 * math.log(2.0)) < 1e-9


def test_domain_loss_batch_average():
    full = [Tensor(np.array([0.9, 0.1])), Tensor(np.array([0.7, 0.3]))]
    weak = [Tensor(np.array([0.2, 0.8]))]
    want = (-(math.log(0.9) + math.log(0.7)) / 2.0) - math.log(0.8)
    assert abs(domain_loss(full, weak).item() - want) < 1e-12


def test_domain_loss_confident_classifier_stays_finite():
    full = Tensor(np.array([0.0, 1.0]))  # wrong and fully confident
    weak = Tensor(np.array([1.0, 0.0]))
    loss = domain_loss(full, weak).item()
    assert np.isfinite(loss)
    assert abs(loss - 2.0 * -math.log(1e-12)) < 1e-6


def test_domain_loss_empty_side_rejected():
    with pytest.raises(DataError):
        domain_loss([], Tensor(np.array([0.5, 0.5])))


def test_domain_loss_gradient_direction(rng):
    """The loss decreases when the classifier gets each batch right."""
    confident = domain_loss(Tensor(np.array([0.99, 0.01])),
                            Tensor(np.array([0.01, 0.99]))).item()
    confused = domain_loss(Tensor(np.array([0.5, 0.5])),
                           Tensor(np.array([0.5, 0.5]))).item()
    assert confident < confused
