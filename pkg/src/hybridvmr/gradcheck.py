"""Finite-difference gradient checking.

The numeric side rebuilds the forward graph from scratch for every
perturbed entry, so it stays independent of the backward implementation
it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad

DEFAULT_H = 1e-5


def numeric_gradient(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                     h: float = DEFAULT_H) -> list[np.ndarray]:
    """Central finite differences of the scalar f() w.r.t. each listed tensor."""
    grads = []
    for t in wrt:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray],
                       numeric: Sequence[np.ndarray]) -> float:
    """max over entries of |a - n| / max(1, |a|, |n|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                    h: float = DEFAULT_H) -> float:
    """Run backward once, compare against central differences.

    Returns the maximum relative error across all checked tensors. Tensors
    that the output does not depend on are treated as having zero gradient.
    """
    for t in wrt:
        t.grad = None
    out = f()
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    return max_relative_error(analytic, numeric_gradient(f, wrt, h))


# ---------------------------------------------------------------------------
# The full suite behind the `gradcheck` subcommand: every differentiable op
# over several seeds, the gradient-reversal exactness check, and both branch
# losses end to end on a miniature model.

from dataclasses import dataclass

from . import autodiff as ad


@dataclass
class CheckResult:
    name: str
    max_err: float
    passed: bool


def _spaced(rng, shape, gap=2e-3):
    """Random values whose pairwise gaps exceed `gap`, so argmax-style ops
    keep the same winner under finite-difference perturbation."""
    n = int(np.prod(shape))
    vals = np.sort(rng.uniform(-1.0, 1.0, size=n))
    while np.min(np.diff(vals)) < gap:
        vals = np.sort(rng.uniform(-1.0, 1.0, size=n))
    return rng.permutation(vals).reshape(shape)


def _w(rng, shape):
    return Tensor(rng.normal(size=shape))


def _op_cases(rng):
    """(name, build) pairs; build() returns (f, wrt) for check_gradients."""
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    pos = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
    den = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)) *
                 np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0),
                 requires_grad=True)
    s1 = Tensor(np.array(rng.uniform(0.5, 1.5)), requires_grad=True)
    w34 = _w(rng, (3, 4))
    # Weighting tensors are drawn once, outside the closures: f() must be a
    # fixed function of the checked tensors or finite differences are void.
    w34b = _w(rng, (3, 4))
    w4 = _w(rng, (4,))
    w5 = _w(rng, (5,))
    w3 = _w(rng, (3,))
    w36 = _w(rng, (3, 6))
    w54 = _w(rng, (5, 4))
    w24 = _w(rng, (2, 4))
    w9 = _w(rng, (9,))
    w45 = _w(rng, (4, 5))
    w44 = _w(rng, (4, 4))
    cases = []

    def case(name, f, wrt):
        cases.append((name, f, wrt))

    case("add", lambda: (a + b).sum(), [a, b])
    case("add_scalar_tensor", lambda: ((a + s1) * w34).sum(), [a, s1])
    case("sub", lambda: ((a - b) * w34).sum(), [a, b])
    case("mul", lambda: (a * b).sum(), [a, b])
    case("div", lambda: ((a / den) * w34).sum(), [a, den])
    case("neg", lambda: ((-a) * w34).sum(), [a])
    case("sigmoid", lambda: (ad.sigmoid(a) * w34).sum(), [a])
    case("tanh", lambda: (ad.tanh(a) * w34).sum(), [a])
    relu_in = Tensor(np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0)
                     * rng.uniform(0.2, 1.5, size=(3, 4)), requires_grad=True)
    case("relu", lambda: (ad.relu(relu_in) * w34).sum(), [relu_in])
    case("log", lambda: (ad.log(pos) * w34).sum(), [pos])
    case("exp", lambda: (ad.exp(a) * w34).sum(), [a])
    clip_in = Tensor(_spaced(rng, (3, 4)) * 2.0, requires_grad=True)
    case("clip", lambda: (ad.clip(clip_in, -1.0, 1.0) * w34).sum(), [clip_in])

    m1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    v5 = Tensor(rng.normal(size=5), requires_grad=True)
    v3 = Tensor(rng.normal(size=3), requires_grad=True)
    w35 = _w(rng, (3, 5))
    case("matmul_mat_mat", lambda: ((m1 @ m2) * w34b).sum(), [m1, m2])
    case("matmul_mat_vec", lambda: ((m1 @ v5) * Tensor(v3.data)).sum(), [m1, v5])
    case("matmul_vec_mat", lambda: ((v5 @ m2) * w4).sum(), [v5, m2])
    vv = Tensor(rng.normal(size=5))
    case("matmul_vec_vec", lambda: (v5 @ vv).sum(), [v5])
    case("transpose", lambda: ((m1.T @ Tensor(w35.data))
                               * Tensor(np.eye(5))).sum(), [m1])

    wm = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    bv = Tensor(rng.normal(size=6), requires_grad=True)
    case("affine_rows", lambda: (ad.affine_rows(m1, wm, bv)
                                 * w36).sum(), [m1, wm, bv])
    case("softmax_rows", lambda: (ad.softmax_rows(a) * w34).sum(), [a])
    case("softmax_rows_1d", lambda: (ad.softmax_rows(v5) * w5).sum(), [v5])

    c1 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    c2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    case("concat_axis0", lambda: (ad.concat([c1, c2], axis=0)
                                  * w54).sum(), [c1, c2])
    c3 = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    case("concat_axis1", lambda: (ad.concat([c2, c3], axis=1)
                                  * w36).sum(), [c2, c3])
    r1 = Tensor(rng.normal(size=4), requires_grad=True)
    r2 = Tensor(rng.normal(size=4), requires_grad=True)
    case("stack_rows", lambda: (ad.stack_rows([r1, r2]) * w24).sum(),
         [r1, r2])
    case("slice_rows", lambda: (ad.slice_rows(c2, 1, 3) * w24).sum(), [c2])
    case("tile_rows", lambda: (ad.tile_rows(r1, 3) * w34b).sum(), [r1])
    case("sum_all", lambda: a.sum(), [a])
    case("sum_axis0", lambda: (a.sum(axis=0) * w4).sum(), [a])
    case("sum_axis1", lambda: (a.sum(axis=1) * w3).sum(), [a])
    case("mean_rows", lambda: (ad.mean_rows(c2) * w4).sum(), [c2])

    mp = Tensor(_spaced(rng, (3, 4)), requires_grad=True)
    case("maxpool_axis0", lambda: (ad.maxpool_axis(mp, 0)[0] * w4).sum(),
         [mp])
    case("maxpool_axis1", lambda: (ad.maxpool_axis(mp, 1)[0] * w3).sum(),
         [mp])

    sig = Tensor(rng.normal(size=9), requires_grad=True)
    ker = Tensor(rng.normal(size=3), requires_grad=True)
    cb = Tensor(rng.normal(size=1), requires_grad=True)
    case("conv1d_k3", lambda: (ad.conv1d(sig, ker, cb) * w9).sum(),
         [sig, ker, cb])
    ker5 = Tensor(rng.normal(size=5), requires_grad=True)
    case("conv1d_k5", lambda: (ad.conv1d(sig, ker5, cb) * w9).sum(),
         [sig, ker5, cb])

    px = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    py = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    case("pairwise_sqdist", lambda: (ad.pairwise_sqdist(px, py)
                                     * w45).sum(), [px, py])
    case("pairwise_sqdist_self", lambda: (ad.pairwise_sqdist(px, px)
                                          * w44).sum(), [px])
    return cases


def _grl_exactness(rng) -> CheckResult:
    """grad_reverse must pass values through untouched and scale the upstream
    gradient by exactly -lambda; finite differences would report +lambda."""
    lam = 0.37
    x = Tensor(rng.normal(size=6), requires_grad=True)
    w = rng.normal(size=6)
    out = (ad.grad_reverse(x, lam) * Tensor(w)).sum()
    if not np.array_equal(out.data, np.sum(x.data * w)):
        return CheckResult("grad_reverse_exact", float("inf"), False)
    out.backward()
    err = float(np.max(np.abs(x.grad - (-lam) * w)))
    return CheckResult("grad_reverse_exact", err, err == 0.0)


def _end_to_end_cases(rng):
    """Both branch losses plus the coupling losses on a miniature model."""
    from .alignment import (DomainClassifier, MmdConfig, TapBatch,
                            alignment_loss, domain_forward, domain_loss)
    from .model import ModelConfig, build_model, forward_full, forward_weak
    from .objectives import LossWeights, full_loss, weak_loss

    cfg = ModelConfig(d=6, d_c=5, d_w=4, window_sizes=(2, 3), stride=2,
                      conv_kernel=3)
    model = build_model(cfg, frozenset({"cross"}), with_full_branch=True,
                        rng=rng)
    clf = DomainClassifier(model.params, "domain", cfg.d, rng, grl_lambda=0.01)
    videos = [Tensor(rng.normal(size=(5, 5))) for _ in range(2)]
    queries = [Tensor(rng.normal(size=(3, 4))) for _ in range(2)]
    wrt = [p.tensor for p in model.params]
    weights = LossWeights()
    # The median-heuristic bandwidth is gradient-free by design, so finite
    # differences only see the intended derivative when it is pinned.
    mmd_cfg = MmdConfig(fixed_bandwidth=1.5)

    def weak_e2e():
        outs = [forward_weak(model.weak, v, q, cfg.window_sizes, cfg.stride)
                for v, q in zip(videos, queries)]
        vneg = [forward_weak(model.weak, videos[1], queries[0],
                             cfg.window_sizes, cfg.stride).video_score,
                forward_weak(model.weak, videos[0], queries[1],
                             cfg.window_sizes, cfg.stride).video_score]
        qneg = [forward_weak(model.weak, videos[0], queries[1],
                             cfg.window_sizes, cfg.stride).video_score,
                forward_weak(model.weak, videos[1], queries[0],
                             cfg.window_sizes, cfg.stride).video_score]
        return weak_loss([o.video_score for o in outs], vneg, qneg)

    def full_e2e():
        outs = [forward_full(model.full, v, q) for v, q in zip(videos, queries)]
        trip0 = (outs[0].video_score,
                 forward_full(model.full, videos[1], queries[0],
                              score_only=True).video_score,
                 forward_full(model.full, videos[0], queries[1],
                              score_only=True).video_score)
        return full_loss(outs[0].boundary_s, outs[0].boundary_e, 1, 3, trip0,
                         weights)

    def align_e2e():
        outs_w = [forward_weak(model.weak, v, q, cfg.window_sizes, cfg.stride)
                  for v, q in zip(videos, queries)]
        outs_f = [forward_full(model.full, v, q)
                  for v, q in zip(videos, queries)]
        return alignment_loss(TapBatch.from_taps([o.taps for o in outs_f]),
                              TapBatch.from_taps([o.taps for o in outs_w]),
                              mmd_cfg)

    def domain_e2e():
        # Checked only against the classifier's own parameters: everything
        # upstream of the reversal layer intentionally receives the negated
        # gradient, which finite differences cannot see.
        outs_w = [forward_weak(model.weak, v, q, cfg.window_sizes, cfg.stride)
                  for v, q in zip(videos, queries)]
        outs_f = [forward_full(model.full, v, q)
                  for v, q in zip(videos, queries)]
        probs_f = [domain_forward(clf, *o.pooled_joint()) for o in outs_f]
        probs_w = [domain_forward(clf, *o.pooled_joint()) for o in outs_w]
        return domain_loss(probs_f, probs_w)

    clf_wrt = [p.tensor for p in clf.parameters()]
    return [("weak_branch_end_to_end", weak_e2e, wrt),
            ("full_branch_end_to_end", full_e2e, wrt),
            ("alignment_loss_end_to_end", align_e2e, wrt),
            ("domain_loss_vs_classifier_params", domain_e2e, clf_wrt)]


def run_suite(n_seeds: int = 5, h: float = DEFAULT_H,
              tol: float = 1e-4) -> list[CheckResult]:
    """Finite-difference checks for every op across seeds, the GRL exactness
    check, and the end-to-end cases (one seed; they dominate the runtime)."""
    results = []
    worst = {}
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, f, wrt in _op_cases(rng):
            err = check_gradients(f, wrt, h)
            worst[name] = max(worst.get(name, 0.0), err)
    results.extend(CheckResult(name, err, err < tol)
                   for name, err in worst.items())
    results.append(_grl_exactness(np.random.default_rng(77)))
    rng = np.random.default_rng(4242)
    for name, f, wrt in _end_to_end_cases(rng):
        err = check_gradients(f, wrt, h)
        results.append(CheckResult(name, err, err < tol))
    return results


def suite_ok(results) -> bool:
    return all(r.passed for r in results)
