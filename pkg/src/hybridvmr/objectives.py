"""Loss functions: weak video-level BCE with in-batch negatives, the
supervised boundary loss, and the assembled total objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError

SCORE_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_r: float = 0.1
    lambda_f: float = 1.0
    lambda_align: float = 1.0
    lambda_domain: float = 0.01
    lambda_vid: float = 0.8

    def validate(self):
        for name in ("lambda_r", "lambda_f", "lambda_align", "lambda_domain",
                     "lambda_vid"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


def _score_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _mean(terms: Sequence[Tensor]) -> Tensor:
    acc = None
    for t in terms:
        acc = t if acc is None else acc + t
    return acc * (1.0 / len(terms))


def _log_clamped(t: Tensor) -> Tensor:
    return ad.log(ad.clip(t, SCORE_FLOOR, 1.0 - SCORE_FLOOR))


def _log_one_minus(t: Tensor) -> Tensor:
    return ad.log(ad.clip((t * -1.0) + 1.0, SCORE_FLOOR, 1.0 - SCORE_FLOOR))


def weak_loss(score_pos, score_vneg, score_qneg) -> Tensor:
    """Video-level BCE: the positive term counts twice, one term per negative.

    Per sample: 2*(-log s_pos) - log(1 - s_vneg) - log(1 - s_qneg). Accepts
    single score tensors or equal-length sequences; sequences are averaged.
    Scores are clamped to [1e-12, 1 - 1e-12] before any log.
    """
    pos, vneg, qneg = (_score_list(score_pos), _score_list(score_vneg),
                       _score_list(score_qneg))
    if not pos or len(pos) != len(vneg) or len(pos) != len(qneg):
        raise DataError(f"weak_loss needs equal non-empty score lists, got "
                        f"{len(pos)}/{len(vneg)}/{len(qneg)}")
    terms = [_log_clamped(p) * -2.0 - _log_one_minus(v) - _log_one_minus(q)
             for p, v, q in zip(pos, vneg, qneg)]
    return _mean(terms).sum()


def full_loss(p_s: Tensor, p_e: Tensor, gt_start_idx: int, gt_end_idx: int,
              video_score_triplet, weights: LossWeights) -> Tensor:
    """Boundary cross-entropy plus the branch's own video-level BCE.

    L_r = -log P_s[start] - log P_e[end]; the result is
    lambda_r * L_r + weak-style BCE over the branch's video scores. Boundary
    labels are clip indices into the distributions (inclusive end index).
    """
    if p_s.ndim != 1 or p_e.ndim != 1 or p_s.shape != p_e.shape:
        raise DataError(f"boundary distributions must be matching 1-D, got "
                        f"{p_s.shape} and {p_e.shape}")
    n_c = p_s.shape[0]
    if not (0 <= gt_start_idx <= gt_end_idx < n_c):
        raise DataError(f"label indices ({gt_start_idx}, {gt_end_idx}) out of "
                        f"range for {n_c} clips")
    l_r = -(_log_clamped(ad.slice_rows(p_s, gt_start_idx, gt_start_idx + 1))
            + _log_clamped(ad.slice_rows(p_e, gt_end_idx, gt_end_idx + 1)))
    l_bce = weak_loss(*video_score_triplet)
    return (l_r.sum() * weights.lambda_r) + l_bce


@dataclass
class TotalLoss:
    """Backpropagated scalar plus its logged decomposition."""

    total: Tensor
    components: dict


def total_loss(l_w: Tensor, l_f: Optional[Tensor], l_align: Optional[Tensor],
               l_domain: Optional[Tensor], weights: LossWeights) -> TotalLoss:
    """Assemble L = L_w + lambda_f*L_f + lambda_align*L_align + L_domain.

    The domain term enters with weight 1: its adversarial sign lives inside
    the graph via the gradient-reversal layer, so no outer minus is applied.
    Disabled components pass None and contribute zero. Non-finite components
    raise NumericError naming the component.
    """
    weights.validate()
    parts = {"L_w": l_w, "L_f": l_f, "L_align": l_align, "L_domain": l_domain}
    comps = {}
    for name, t in parts.items():
        val = 0.0 if t is None else t.item()
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss component {name}: {val}")
        comps[name] = val
    total = l_w
    if l_f is not None:
        total = total + l_f * weights.lambda_f
    if l_align is not None:
        total = total + l_align * weights.lambda_align
    if l_domain is not None:
        total = total + l_domain
    comps["L_total"] = total.item()
    return TotalLoss(total=total, components=comps)


@dataclass
class NegativePairing:
    """In-batch negative indices: vneg[i] supplies V-, qneg[i] supplies Q-."""

    vneg: list
    qneg: list


def sample_negatives(video_ids: Sequence[int],
                     seed: Union[int, np.random.Generator]) -> NegativePairing:
    """Uniform in-batch negatives avoiding each sample's own video.

    For sample i, both negatives are drawn uniformly from batch positions
    whose video differs from video_ids[i]; this enforces V- != V and keeps
    Q- unpaired with V (queries are paired only with their own video).
    Deterministic given the seed; draws vneg then qneg for each i in order.
    """
    n = len(video_ids)
    if n < 2:
        raise DataError(f"negative sampling needs a batch of >= 2, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    vneg, qneg = [], []
    for i in range(n):
        candidates = [j for j in range(n) if video_ids[j] != video_ids[i]]
        if not candidates:
            raise DataError(f"no valid negative for batch position {i}: all "
                            f"samples share video {video_ids[i]}")
        vneg.append(int(candidates[rng.integers(len(candidates))]))
        qneg.append(int(candidates[rng.integers(len(candidates))]))
    return NegativePairing(vneg=vneg, qneg=qneg)
