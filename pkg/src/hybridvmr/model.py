"""Architecture blocks for the two-branch retrieval network.

A branch processes one (video, query) pair: input projections, a first pair
of self-attention units, an optional proposal stage (weak branch only), a
cross-modal attention pair, a second pair of self-attention units, and a
head. Modules listed in the sharing set are constructed once and referenced
by both branches, so their parameters accumulate gradients from both losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Parameter, Tensor, uniform_init
from .errors import ConfigError, DataError, ShapeError

SHAREABLE_MODULES = ("self1", "self2", "cross")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults mirror the reference setting."""

    d: int = 256
    d_c: int = 32
    d_w: int = 16
    window_sizes: tuple[int, ...] = (8, 16, 32, 64, 128)
    stride: int = 8
    conv_kernel: int = 3

    def validate(self):
        if self.d < 1 or self.d_c < 1 or self.d_w < 1:
            raise ConfigError("feature dimensions must be positive")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if any(w < 1 for w in self.window_sizes):
            raise ConfigError(f"window sizes must be positive, got {self.window_sizes}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv kernel width must be odd, got {self.conv_kernel}")


class Affine:
    """Affine map d_in -> d_out, applied row-wise to 2-D inputs."""

    def __init__(self, params: ModelParams, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.w = params.new(f"{prefix}.w", uniform_init(rng, (d_out, d_in), d_in))
        self.b = params.new(f"{prefix}.b", uniform_init(rng, (d_out,), d_in))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.affine_rows(x, self.w.tensor, self.b.tensor)
        return self.w.tensor @ x + self.b.tensor

    def parameters(self):
        return [self.w, self.b]


class AttentionUnit:
    """Residual scaled dot-product attention that attends y using x.

    R = softmax_rows(y Wq^T Wk x^T / sqrt(d)); out = fc(y + R x Wv^T).
    """

    def __init__(self, params: ModelParams, prefix: str, d: int,
                 rng: np.random.Generator):
        self.d = d
        self.w_q = params.new(f"{prefix}.w_q", uniform_init(rng, (d, d), d))
        self.w_k = params.new(f"{prefix}.w_k", uniform_init(rng, (d, d), d))
        self.w_v = params.new(f"{prefix}.w_v", uniform_init(rng, (d, d), d))
        self.fc = Affine(params, f"{prefix}.fc", d, d, rng)

    def __call__(self, y: Tensor, x: Tensor) -> Tensor:
        if y.ndim != 2 or x.ndim != 2 or y.shape[1] != self.d or x.shape[1] != self.d:
            raise ShapeError(f"attention expects (*, {self.d}) inputs, got "
                             f"{y.shape} and {x.shape}")
        scores = (y @ self.w_q.tensor.T) @ (self.w_k.tensor @ x.T)
        r = ad.softmax_rows(scores * (1.0 / math.sqrt(self.d)))
        return self.fc(y + r @ (x @ self.w_v.tensor.T))

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v] + self.fc.parameters()


@dataclass
class Proposal:
    """Candidate moment: half-open clip interval with its pooled feature."""

    start_clip: int
    end_clip: int
    feature: Tensor


def proposal_intervals(n_c: int, window_sizes: Sequence[int], stride: int) -> list[tuple[int, int]]:
    """Sliding-window intervals, clamped to [0, n_c), deduplicated.

    Deterministic order: ascending window size, then start. Starts advance by
    `stride` while start < n_c; ends clamp at n_c.
    """
    if n_c < 1:
        raise DataError("cannot enumerate proposals for an empty video")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if not window_sizes or any(w < 1 for w in window_sizes):
        raise ConfigError(f"window sizes must be positive, got {window_sizes}")
    seen = set()
    out = []
    for w in sorted(set(window_sizes)):
        for start in range(0, n_c, stride):
            end = min(start + w, n_c)
            if (start, end) not in seen:
                seen.add((start, end))
                out.append((start, end))
    return out


def generate_proposals(clips: Tensor, window_sizes: Sequence[int], stride: int) -> list[Proposal]:
    """Pool each sliding-window interval of the clip sequence into a Proposal.

    The proposal feature is the mean of the clip features it covers.
    """
    intervals = proposal_intervals(clips.shape[0], window_sizes, stride)
    return [Proposal(s, e, ad.mean_rows(ad.slice_rows(clips, s, e)))
            for s, e in intervals]


class FusionHead:
    """Scores a proposal against a query through a joint representation.

    j = (p + qbar) || (p * qbar) || fc(p || qbar) with qbar the max-pooled
    query; the score is sigmoid of an affine map of j.
    """

    def __init__(self, params: ModelParams, prefix: str, d: int,
                 rng: np.random.Generator):
        self.d = d
        self.fc_pair = Affine(params, f"{prefix}.fc_pair", 2 * d, d, rng)
        self.fc_score = Affine(params, f"{prefix}.fc_score", 3 * d, 1, rng)

    def score(self, p: Tensor, query: Tensor) -> Tensor:
        """Score one proposal feature (d,) against word features (n_w, d)."""
        if p.shape != (self.d,) or query.ndim != 2 or query.shape[1] != self.d:
            raise ShapeError(f"fusion expects ({self.d},) and (*, {self.d}), got "
                             f"{p.shape} and {query.shape}")
        qbar, _ = ad.maxpool_axis(query, 0)
        j = ad.concat([p + qbar, p * qbar, self.fc_pair(ad.concat([p, qbar]))])
        return ad.sigmoid(self.fc_score(j))

    def score_rows(self, feats: Tensor, query: Tensor) -> Tensor:
        """Vectorized scores (n, 1) for a stack of proposal features (n, d)."""
        qbar, _ = ad.maxpool_axis(query, 0)
        qt = ad.tile_rows(qbar, feats.shape[0])
        j = ad.concat([feats + qt, feats * qt,
                       self.fc_pair(ad.concat([feats, qt], axis=1))], axis=1)
        return ad.sigmoid(ad.affine_rows(j, self.fc_score.w.tensor, self.fc_score.b.tensor))

    def parameters(self):
        return self.fc_pair.parameters() + self.fc_score.parameters()


def video_level_score(proposal_scores: Sequence[Tensor]) -> Tensor:
    """Max over per-proposal scores; gradient reaches only the argmax one."""
    if not proposal_scores:
        raise ShapeError("video_level_score of an empty score list")
    pooled, _ = ad.maxpool_axis(ad.concat([s for s in proposal_scores]), 0)
    return pooled


class BoundaryHead:
    """Start/end boundary distributions from a video-query score curve.

    The query is pooled attentively into one vector, dotted with every clip
    feature, and the resulting curve feeds two 1-D convolutions. Sigmoid
    outputs are renormalized so each boundary is a distribution.
    """

    def __init__(self, params: ModelParams, prefix: str, d: int, kernel_width: int,
                 rng: np.random.Generator):
        self.d = d
        self.pool_w = params.new(f"{prefix}.pool_w", uniform_init(rng, (d,), d))
        self.pool_b = params.new(f"{prefix}.pool_b", uniform_init(rng, (1,), d))
        self.kernel_s = params.new(f"{prefix}.kernel_s",
                                   uniform_init(rng, (kernel_width,), kernel_width))
        self.bias_s = params.new(f"{prefix}.bias_s",
                                 uniform_init(rng, (1,), kernel_width))
        self.kernel_e = params.new(f"{prefix}.kernel_e",
                                   uniform_init(rng, (kernel_width,), kernel_width))
        self.bias_e = params.new(f"{prefix}.bias_e",
                                 uniform_init(rng, (1,), kernel_width))

    def modular_query(self, query: Tensor) -> Tensor:
        """Attentive pooling of word features into a single query vector."""
        weights = ad.softmax_rows(query @ self.pool_w.tensor + self.pool_b.tensor)
        return weights @ query

    def probs(self, video: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
        if video.shape[0] < 2:
            raise DataError(f"boundary prediction needs >= 2 clips, got {video.shape[0]}")
        if video.shape[1] != self.d or query.shape[1] != self.d:
            raise ShapeError(f"boundary head expects (*, {self.d}) inputs, got "
                             f"{video.shape} and {query.shape}")
        curve = video @ self.modular_query(query)
        p_s = ad.sigmoid(ad.conv1d(curve, self.kernel_s.tensor, self.bias_s.tensor))
        p_e = ad.sigmoid(ad.conv1d(curve, self.kernel_e.tensor, self.bias_e.tensor))
        return p_s / p_s.sum(), p_e / p_e.sum()

    def parameters(self):
        return [self.pool_w, self.pool_b, self.kernel_s, self.bias_s,
                self.kernel_e, self.bias_e]


@dataclass
class BranchPipeline:
    """One branch of the network; attention units may be shared across branches."""

    proj_video: Affine
    proj_query: Affine
    self1_video: AttentionUnit
    self1_query: AttentionUnit
    cross_video: AttentionUnit  # attends the video sequence using the query
    cross_query: AttentionUnit  # attends the query sequence using the video
    self2_video: AttentionUnit
    self2_query: AttentionUnit
    fusion: FusionHead
    boundary: Optional[BoundaryHead] = None

    def param_names(self) -> set[str]:
        mods = [self.proj_video, self.proj_query, self.self1_video, self.self1_query,
                self.cross_video, self.cross_query, self.self2_video, self.self2_query,
                self.fusion]
        if self.boundary is not None:
            mods.append(self.boundary)
        return {p.name for m in mods for p in m.parameters()}


@dataclass
class BranchTaps:
    """Sequence features captured before and after the cross-modal attention."""

    video_before: Tensor
    query_before: Tensor
    video_after: Tensor
    query_after: Tensor


@dataclass
class VideoStage1:
    """Query-independent part of a branch forward, cacheable per video."""

    clips: Tensor                 # (n_c, d) after projection and self1
    units: Tensor                 # weak: stacked proposal features; full: clips
    proposals: Optional[list[Proposal]] = None


def video_stage1(pipeline: BranchPipeline, video: Tensor,
                 window_sizes: Optional[Sequence[int]] = None,
                 stride: Optional[int] = None) -> VideoStage1:
    """Project and self-attend the clip sequence; pool proposals if windows given."""
    clips = pipeline.proj_video(video)
    clips = pipeline.self1_video(clips, clips)
    if window_sizes is None:
        return VideoStage1(clips=clips, units=clips)
    proposals = generate_proposals(clips, window_sizes, stride)
    units = ad.stack_rows([p.feature for p in proposals])
    return VideoStage1(clips=clips, units=units, proposals=proposals)


def query_stage1(pipeline: BranchPipeline, query: Tensor) -> Tensor:
    words = pipeline.proj_query(query)
    return pipeline.self1_query(words, words)


@dataclass
class PairForward:
    """Everything downstream code needs from one (video, query) pass."""

    taps: BranchTaps
    video_final: Tensor           # (n_units, d) after self2
    query_final: Tensor           # (n_w, d) after self2
    proposals: Optional[list[Proposal]]
    proposal_scores: Optional[Tensor]   # weak branch: (n_p, 1)
    video_score: Optional[Tensor]       # (1,)
    boundary_s: Optional[Tensor] = None
    boundary_e: Optional[Tensor] = None

    def pooled_joint(self) -> tuple[Tensor, Tensor]:
        """Max-pooled per-sample video and query vectors feeding the joint feature."""
        vp, _ = ad.maxpool_axis(self.video_final, 0)
        qp, _ = ad.maxpool_axis(self.query_final, 0)
        return vp, qp


def cross_and_self2(pipeline: BranchPipeline, units: Tensor, words: Tensor):
    """Shared middle of both branches: cross attention then the second self stage."""
    v_after = pipeline.cross_video(units, words)
    q_after = pipeline.cross_query(words, units)
    return v_after, q_after, pipeline.self2_video(v_after, v_after), \
        pipeline.self2_query(q_after, q_after)


def forward_weak(pipeline: BranchPipeline, video: Tensor, query: Tensor,
                 window_sizes: Sequence[int], stride: int,
                 vstage: Optional[VideoStage1] = None,
                 words: Optional[Tensor] = None,
                 score_only: bool = False) -> PairForward:
    """Weak-branch pass: proposals are scored and max-pooled to a video score.

    `vstage`/`words` allow reusing the query-independent stage-1 work when the
    same video or query appears in several pairs of a batch.
    """
    if vstage is None:
        vstage = video_stage1(pipeline, video, window_sizes, stride)
    if words is None:
        words = query_stage1(pipeline, query)
    v_after, q_after, v_final, q_final = cross_and_self2(pipeline, vstage.units, words)
    scores = pipeline.fusion.score_rows(v_final, q_final)
    vscore, _ = ad.maxpool_axis(scores, 0)
    taps = None if score_only else BranchTaps(vstage.units, words, v_after, q_after)
    return PairForward(taps=taps, video_final=v_final, query_final=q_final,
                       proposals=vstage.proposals, proposal_scores=scores,
                       video_score=vscore)


def forward_full(pipeline: BranchPipeline, video: Tensor, query: Tensor,
                 vstage: Optional[VideoStage1] = None,
                 words: Optional[Tensor] = None,
                 score_only: bool = False) -> PairForward:
    """Full-branch pass: boundary distributions plus a video-level score.

    The video-level score reuses the branch's own fusion head on the
    mean-pooled clip sequence, treated as a single whole-video proposal.
    """
    if pipeline.boundary is None:
        raise ConfigError("forward_full needs a pipeline with a boundary head")
    if vstage is None:
        vstage = video_stage1(pipeline, video)
    if words is None:
        words = query_stage1(pipeline, query)
    v_after, q_after, v_final, q_final = cross_and_self2(pipeline, vstage.units, words)
    vscore = pipeline.fusion.score(ad.mean_rows(v_final), q_final)
    if score_only:
        return PairForward(taps=None, video_final=v_final, query_final=q_final,
                           proposals=None, proposal_scores=None, video_score=vscore)
    p_s, p_e = pipeline.boundary.probs(v_final, q_final)
    taps = BranchTaps(vstage.units, words, v_after, q_after)
    return PairForward(taps=taps, video_final=v_final, query_final=q_final,
                       proposals=None, proposal_scores=None, video_score=vscore,
                       boundary_s=p_s, boundary_e=p_e)


_AFFINE_SUFFIXES = ("w", "b")
_ATTENTION_SUFFIXES = ("w_q", "w_k", "w_v", "fc.w", "fc.b")
_FUSION_SUFFIXES = ("fc_pair.w", "fc_pair.b", "fc_score.w", "fc_score.b")
_BOUNDARY_SUFFIXES = ("pool_w", "pool_b", "kernel_s", "bias_s", "kernel_e", "bias_e")


def pipeline_param_items(pipeline: BranchPipeline) -> list:
    """(canonical name, Parameter) pairs for every parameter a branch uses.

    Canonical names describe the slot inside the branch, independent of
    whether a module's registry name carries a sharing prefix; they are what
    inference artifacts are keyed by.
    """
    slots = [("proj_video", pipeline.proj_video, _AFFINE_SUFFIXES),
             ("proj_query", pipeline.proj_query, _AFFINE_SUFFIXES),
             ("self1.video", pipeline.self1_video, _ATTENTION_SUFFIXES),
             ("self1.query", pipeline.self1_query, _ATTENTION_SUFFIXES),
             ("cross.video", pipeline.cross_video, _ATTENTION_SUFFIXES),
             ("cross.query", pipeline.cross_query, _ATTENTION_SUFFIXES),
             ("self2.video", pipeline.self2_video, _ATTENTION_SUFFIXES),
             ("self2.query", pipeline.self2_query, _ATTENTION_SUFFIXES),
             ("fusion", pipeline.fusion, _FUSION_SUFFIXES)]
    if pipeline.boundary is not None:
        slots.append(("boundary", pipeline.boundary, _BOUNDARY_SUFFIXES))
    items = []
    for prefix, module, suffixes in slots:
        params = module.parameters()
        assert len(params) == len(suffixes)
        items.extend((f"{prefix}.{suffix}", p) for suffix, p in zip(suffixes, params))
    return items


@dataclass
class Model:
    """Both pipelines plus the shared parameter registry."""

    params: ModelParams
    config: ModelConfig
    sharing: frozenset
    weak: BranchPipeline
    full: Optional[BranchPipeline] = None

    def shared_names(self) -> set[str]:
        if self.full is None:
            return set()
        return self.weak.param_names() & self.full.param_names()


def _attention_pair(params, prefix, d, rng):
    return (AttentionUnit(params, f"{prefix}.video", d, rng),
            AttentionUnit(params, f"{prefix}.query", d, rng))


def build_model(config: ModelConfig, sharing: frozenset = frozenset({"cross"}),
                with_full_branch: bool = True,
                rng: Optional[np.random.Generator] = None) -> Model:
    """Construct pipelines, sharing the configured attention modules.

    Shared modules are created once under a `shared.` name prefix and
    referenced from both branches, so one gradient accumulator serves both.
    """
    config.validate()
    unknown = set(sharing) - set(SHAREABLE_MODULES)
    if unknown:
        raise ConfigError(f"unknown shareable modules {sorted(unknown)}; "
                          f"valid: {SHAREABLE_MODULES}")
    if rng is None:
        rng = np.random.default_rng(0)
    params = ModelParams()
    d = config.d

    shared_units = {}
    for mod in SHAREABLE_MODULES:
        if mod in sharing and with_full_branch:
            shared_units[mod] = _attention_pair(params, f"shared.{mod}", d, rng)

    def branch(name: str, with_boundary: bool) -> BranchPipeline:
        def pair(mod):
            if mod in shared_units:
                return shared_units[mod]
            return _attention_pair(params, f"{name}.{mod}", d, rng)

        proj_v = Affine(params, f"{name}.proj_video", config.d_c, d, rng)
        proj_q = Affine(params, f"{name}.proj_query", config.d_w, d, rng)
        s1v, s1q = pair("self1")
        cv, cq = pair("cross")
        s2v, s2q = pair("self2")
        fusion = FusionHead(params, f"{name}.fusion", d, rng)
        boundary = BoundaryHead(params, f"{name}.boundary", d, config.conv_kernel,
                                rng) if with_boundary else None
        return BranchPipeline(proj_v, proj_q, s1v, s1q, cv, cq, s2v, s2q,
                              fusion, boundary)

    weak = branch("weak", with_boundary=False)
    full = branch("full", with_boundary=True) if with_full_branch else None
    return Model(params=params, config=config, sharing=frozenset(sharing),
                 weak=weak, full=full)
