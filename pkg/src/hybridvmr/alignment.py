"""Cross-domain coupling: multi-bandwidth RBF MMD, the before/after feature
alignment loss, and the adversarial joint-modal domain classifier.

The MMD estimator is the biased V-statistic form; the kernel is averaged over
a small bandwidth ladder scaled from the median pairwise distance of the
merged batch, so no bandwidth tuning is needed. The domain classifier sits
behind a gradient-reversal layer: its own weights descend the classification
loss while everything upstream ascends it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .errors import ConfigError, DataError, ShapeError
from .model import Affine, BranchTaps

PROB_FLOOR = 1e-12


@dataclass
class MmdConfig:
    """Kernel ladder (multiples of the median heuristic) and the video weight.

    `fixed_bandwidth` replaces the per-batch median heuristic with a constant;
    it exists for finite-difference checks and oracle tests, where the
    (intentionally) gradient-free bandwidth must not move with the data.
    """

    bandwidth_scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    lambda_vid: float = 0.8
    fallback_bandwidth: float = 1.0
    fixed_bandwidth: Optional[float] = None

    def validate(self):
        if not self.bandwidth_scales or any(s <= 0 for s in self.bandwidth_scales):
            raise ConfigError(f"bandwidth scales must be positive, got "
                              f"{self.bandwidth_scales}")
        if self.lambda_vid < 0:
            raise ConfigError(f"lambda_vid must be >= 0, got {self.lambda_vid}")
        if self.fallback_bandwidth <= 0:
            raise ConfigError("fallback bandwidth must be positive")
        if self.fixed_bandwidth is not None and self.fixed_bandwidth <= 0:
            raise ConfigError("fixed bandwidth must be positive")


def median_heuristic(points: np.ndarray, fallback: float = 1.0) -> float:
    """Median pairwise Euclidean distance over distinct pairs, no gradient.

    Degenerate inputs (fewer than two points, or all points coincident) fall
    back to a fixed unit bandwidth so downstream kernels stay well-defined.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        return fallback
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    if med <= 0.0 or not np.isfinite(med):
        return fallback
    return med


def mmd_squared(src: Tensor, tgt: Tensor, cfg: MmdConfig) -> Tensor:
    """Biased squared MMD between two sample sets, (n_s, d) and (n_t, d).

    M^2 = mean K(s,s) + mean K(t,t) - 2 mean K(s,t), with the RBF kernel
    K(a,b) = exp(-||a-b||^2 / (2 h^2)) averaged over the bandwidth ladder.
    Differentiable w.r.t. both sets; the bandwidth itself carries no gradient.
    """
    cfg.validate()
    if src.ndim != 2 or tgt.ndim != 2:
        raise ShapeError(f"mmd_squared expects 2-D sample sets, got {src.shape} "
                         f"and {tgt.shape}")
    n_s, d = src.shape
    n_t, d_t = tgt.shape
    if n_s < 1 or n_t < 1:
        raise DataError("mmd_squared needs at least one sample per set")
    if d != d_t:
        raise ShapeError(f"sample dimensions differ: {d} vs {d_t}")

    if cfg.fixed_bandwidth is not None:
        sigma = cfg.fixed_bandwidth
    else:
        sigma = median_heuristic(np.vstack([src.data, tgt.data]),
                                 cfg.fallback_bandwidth)
    d_ss = ad.pairwise_sqdist(src, src)
    d_tt = ad.pairwise_sqdist(tgt, tgt)
    d_st = ad.pairwise_sqdist(src, tgt)

    total = None
    for scale in cfg.bandwidth_scales:
        h = scale * sigma
        coef = -1.0 / (2.0 * h * h)
        est = (ad.exp(d_ss * coef).sum() * (1.0 / (n_s * n_s))
               + ad.exp(d_tt * coef).sum() * (1.0 / (n_t * n_t))
               - ad.exp(d_st * coef).sum() * (2.0 / (n_s * n_t)))
        total = est if total is None else total + est
    return total * (1.0 / len(cfg.bandwidth_scales))


@dataclass
class TapBatch:
    """Per-sample tap sequences from one branch, for a whole batch."""

    video_before: list
    query_before: list
    video_after: list
    query_after: list

    @classmethod
    def from_taps(cls, taps: Sequence[BranchTaps]) -> "TapBatch":
        return cls(video_before=[t.video_before for t in taps],
                   query_before=[t.query_before for t in taps],
                   video_after=[t.video_after for t in taps],
                   query_after=[t.query_after for t in taps])


def _pool_stack(seqs: Sequence[Tensor]) -> Tensor:
    """Mean-pool each (n_i, d) sequence to one vector and stack to (n, d)."""
    if not seqs:
        raise DataError("alignment needs a non-empty batch of tap sequences")
    return ad.stack_rows([ad.mean_rows(s) for s in seqs])


def alignment_loss(taps_full: TapBatch, taps_weak: TapBatch, cfg: MmdConfig) -> Tensor:
    """Weighted MMD between branches on the taps around the cross attention.

    Video terms carry lambda_vid; query terms carry weight 1. Each sequence is
    mean-pooled over its time/word axis first, so variable lengths never leak
    into the sample sets.
    """
    m_vb = mmd_squared(_pool_stack(taps_full.video_before),
                       _pool_stack(taps_weak.video_before), cfg)
    m_qb = mmd_squared(_pool_stack(taps_full.query_before),
                       _pool_stack(taps_weak.query_before), cfg)
    m_va = mmd_squared(_pool_stack(taps_full.video_after),
                       _pool_stack(taps_weak.video_after), cfg)
    m_qa = mmd_squared(_pool_stack(taps_full.query_after),
                       _pool_stack(taps_weak.query_after), cfg)
    return m_vb * cfg.lambda_vid + m_qb + m_va * cfg.lambda_vid + m_qa


def joint_mmd(video_pooled_f: Tensor, video_pooled_w: Tensor,
              query_pooled_f: Tensor, query_pooled_w: Tensor,
              cfg: MmdConfig) -> Tensor:
    """MMD constraint on the max-pooled features that feed the joint vector."""
    m_v = mmd_squared(video_pooled_f, video_pooled_w, cfg)
    m_q = mmd_squared(query_pooled_f, query_pooled_w, cfg)
    return m_v * cfg.lambda_vid + m_q


class DomainClassifier:
    """Two affine layers and a softmax over the reversed joint feature."""

    def __init__(self, params: ModelParams, prefix: str, d: int,
                 rng: np.random.Generator, grl_lambda: float = 0.01):
        if grl_lambda < 0:
            raise ConfigError(f"grl_lambda must be >= 0, got {grl_lambda}")
        self.d = d
        self.grl_lambda = grl_lambda
        self.fc2 = Affine(params, f"{prefix}.fc2", 2 * d, d, rng)
        self.fc1 = Affine(params, f"{prefix}.fc1", d, 2, rng)

    def parameters(self):
        return self.fc2.parameters() + self.fc1.parameters()


def domain_forward(clf: DomainClassifier, video_pooled: Tensor,
                   query_pooled: Tensor) -> Tensor:
    """Class probabilities (p_source, p_target) for one pooled sample pair."""
    if video_pooled.shape != (clf.d,) or query_pooled.shape != (clf.d,):
        raise ShapeError(f"domain classifier expects two ({clf.d},) vectors, got "
                         f"{video_pooled.shape} and {query_pooled.shape}")
    joint = ad.grad_reverse(ad.concat([video_pooled, query_pooled]),
                            clf.grl_lambda)
    return ad.softmax_rows(clf.fc1(clf.fc2(joint)))


def _prob_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def domain_loss(p_full, p_weak) -> Tensor:
    """Classification loss pushing target probability to 0 (full-branch batch)
    and 1 (weak-branch batch); each side is averaged over its batch.

    Accepts single probability pairs or sequences of them. Probabilities are
    floored at 1e-12 before the log so a confident classifier stays finite.
    """
    fulls, weaks = _prob_list(p_full), _prob_list(p_weak)
    if not fulls or not weaks:
        raise DataError("domain_loss needs at least one probability pair per side")

    def nll(terms):
        acc = None
        for t in terms:
            acc = t if acc is None else acc + t
        return -(acc * (1.0 / len(terms)))

    full_terms = [ad.log(ad.clip((ad.slice_rows(p, 1, 2) * -1.0) + 1.0,
                                 PROB_FLOOR, 1.0))
                  for p in fulls]
    weak_terms = [ad.log(ad.clip(ad.slice_rows(p, 1, 2), PROB_FLOOR, 1.0))
                  for p in weaks]
    return (nll(full_terms) + nll(weak_terms)).sum()
