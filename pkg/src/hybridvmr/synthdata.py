"""Two-domain synthetic dataset: a fully-labelled source and a weakly-labelled
target with controllable feature shift and vocabulary overlap.

Videos are sequences of clip features built from per-concept visual
prototypes: clips inside the ground-truth moment carry the query's concept,
clips outside carry distractor concepts, and everything gets isotropic noise.
Queries mix occurrences of the concept's domain-specific word vector with
random filler words. Target-domain clip features additionally pass through an
orthogonal rotation plus bias, modelling distribution shift; vocabulary
overlap controls which concepts both domains can express.

Moments are placed on the sliding-window grid the retrieval model searches
over, so the task is solvable by construction: a concept-matching oracle can
recover every moment exactly on noise-free data.

On-disk format ("EVDS"): little-endian header (magic, version, domain,
sample count, dims), then per sample a fixed descriptor followed by row-major
float32 clip and word features. A key=value manifest sits alongside each
split.
"""

from __future__ import annotations

import struct
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, DataError, FormatError

MAGIC = b"EVDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")   # magic, version, domain, pad, n, d_c, d_w
_DESC = struct.Struct("<IIIIIf")       # n_c, n_w, gt_start, gt_end, concept, duration
_DOMAIN_CODES = {"source": 0, "target": 1}
_DOMAIN_NAMES = {v: k for k, v in _DOMAIN_CODES.items()}

# ---------------------------------------------------------------------------
# Label-access auditing.
#
# Ground-truth fields are behind properties that record which audit zone read
# them. Training wraps its loss computations in named zones; the weak branch's
# zone must end with a zero count, proving target labels never leaked into it.

_audit_stack: list = []
_audit_counts: Counter = Counter()


@contextmanager
def audit_zone(name: str):
    """Attribute any ground-truth reads inside the block to `name`."""
    _audit_stack.append(name)
    try:
        yield
    finally:
        _audit_stack.pop()


def _record_label_access(domain: str):
    zone = _audit_stack[-1] if _audit_stack else "unscoped"
    _audit_counts[(zone, domain)] += 1


def label_audit_counts() -> dict:
    """Snapshot of (zone, domain) -> number of ground-truth reads."""
    return dict(_audit_counts)


def reset_label_audit():
    _audit_counts.clear()


class SyntheticSample:
    """One (video, query) record; ground-truth reads are audited."""

    __slots__ = ("domain", "clip_features", "word_features", "duration_seconds",
                 "concept_id", "_gt_start", "_gt_end")

    def __init__(self, domain: str, clip_features: np.ndarray,
                 word_features: np.ndarray, gt_start: int, gt_end: int,
                 duration_seconds: float, concept_id: int):
        if domain not in _DOMAIN_CODES:
            raise DataError(f"unknown domain {domain!r}")
        n_c = clip_features.shape[0]
        if not (0 <= gt_start < gt_end <= n_c):
            raise DataError(f"moment [{gt_start}, {gt_end}) out of range for "
                            f"{n_c} clips")
        self.domain = domain
        self.clip_features = clip_features
        self.word_features = word_features
        self.duration_seconds = float(duration_seconds)
        self.concept_id = int(concept_id)
        self._gt_start = int(gt_start)
        self._gt_end = int(gt_end)

    @property
    def n_c(self) -> int:
        return self.clip_features.shape[0]

    @property
    def n_w(self) -> int:
        return self.word_features.shape[0]

    @property
    def gt_start(self) -> int:
        _record_label_access(self.domain)
        return self._gt_start

    @property
    def gt_end(self) -> int:
        _record_label_access(self.domain)
        return self._gt_end

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (self.domain == other.domain
                and self._gt_start == other._gt_start
                and self._gt_end == other._gt_end
                and self.concept_id == other.concept_id
                and self.duration_seconds == other.duration_seconds
                and np.array_equal(self.clip_features, other.clip_features)
                and np.array_equal(self.word_features, other.word_features))


# ---------------------------------------------------------------------------
# Concept bank and shift configuration.


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def _orthonormal_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """n orthonormal d-vectors with a deterministic sign convention."""
    q, r = np.linalg.qr(rng.standard_normal((d, n)))
    return (q * np.sign(np.diag(r))).T


@dataclass
class ConceptBank:
    """Shared concepts plus per-domain word dictionaries and visual prototypes.

    The first `round(overlap * n)` concepts are expressible in both domains;
    the remainder alternate between source-only and target-only. Each domain's
    dictionary entry is its own noisy copy of the concept vector, so shared
    concepts are phrased differently per domain but stay correlated.
    """

    concept_vectors: np.ndarray        # (n_concepts, d_w), unit rows
    visual_prototypes: np.ndarray      # (n_concepts, d_c), orthonormal rows
    vocab_overlap: float
    source_vocab: dict
    target_vocab: dict

    @property
    def n_concepts(self) -> int:
        return self.concept_vectors.shape[0]

    def vocabulary(self, domain: str) -> dict:
        return self.source_vocab if domain == "source" else self.target_vocab

    def expressible(self, domain: str) -> list:
        return sorted(self.vocabulary(domain))

    def inexpressible(self, domain: str) -> list:
        vocab = self.vocabulary(domain)
        return [c for c in range(self.n_concepts) if c not in vocab]

    @classmethod
    def build(cls, n_concepts: int, d_c: int, d_w: int, vocab_overlap: float,
              word_noise: float, rng: np.random.Generator) -> "ConceptBank":
        if not (0.0 <= vocab_overlap <= 1.0):
            raise ConfigError(f"vocab_overlap must be in [0, 1], got {vocab_overlap}")
        if n_concepts < 2:
            raise ConfigError(f"need >= 2 concepts, got {n_concepts}")
        if n_concepts > min(d_c, d_w):
            raise ConfigError(f"{n_concepts} concepts exceed the {min(d_c, d_w)} "
                              f"orthogonal directions available")
        concepts = _orthonormal_rows(rng, n_concepts, d_w)
        prototypes = _orthonormal_rows(rng, n_concepts, d_c)
        n_shared = int(round(vocab_overlap * n_concepts))
        source_ids = list(range(n_shared))
        target_ids = list(range(n_shared))
        for k, cid in enumerate(range(n_shared, n_concepts)):
            (source_ids if k % 2 == 0 else target_ids).append(cid)

        def vocab_for(ids):
            return {cid: _unit_rows(concepts[cid]
                                    + word_noise * rng.standard_normal(d_w))
                    for cid in ids}

        return cls(concept_vectors=concepts, visual_prototypes=prototypes,
                   vocab_overlap=vocab_overlap,
                   source_vocab=vocab_for(source_ids),
                   target_vocab=vocab_for(target_ids))


@dataclass
class ShiftConfig:
    """Target-domain feature map y = rotation @ x + bias (+ noise), plus the
    per-domain length distributions."""

    rotation: np.ndarray
    bias: np.ndarray
    noise_sigma: float
    source_n_c: tuple
    source_n_w: tuple
    target_n_c: tuple
    target_n_w: tuple

    def validate(self):
        d = self.rotation.shape[0]
        if self.rotation.shape != (d, d) or self.bias.shape != (d,):
            raise ConfigError(f"rotation {self.rotation.shape} / bias "
                              f"{self.bias.shape} dimensions disagree")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(d)).max()
        if err > 1e-8:
            raise ConfigError(f"rotation is not orthogonal (deviation {err:.2e})")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        for name in ("source_n_c", "source_n_w", "target_n_c", "target_n_w"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ConfigError(f"bad length range {name}=({lo}, {hi})")

    def lengths(self, domain: str) -> tuple:
        if domain == "source":
            return self.source_n_c, self.source_n_w
        return self.target_n_c, self.target_n_w


@dataclass
class DataConfig:
    """Everything `generate` needs; defaults give a minutes-scale CPU dataset."""

    n_train: int = 800
    n_val: int = 200
    d_c: int = 32
    d_w: int = 16
    n_concepts: int = 8
    vocab_overlap: float = 0.5
    word_noise: float = 0.25
    occurrence_noise: float = 0.05
    n_c_range: tuple = (16, 48)
    n_w_range: tuple = (4, 12)
    target_n_c_range: Optional[tuple] = None
    target_n_w_range: Optional[tuple] = None
    moment_windows: tuple = (8, 16, 32)
    moment_grid: int = 8
    noise_sigma: float = 0.1
    rotation_strength: float = 0.7
    bias_scale: float = 0.5
    target_start_beta: tuple = (2.0, 5.0)

    def validate(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("split sizes must be >= 1")
        if self.moment_grid < 1:
            raise ConfigError("moment_grid must be >= 1")
        if not self.moment_windows or any(w < 1 for w in self.moment_windows):
            raise ConfigError(f"bad moment windows {self.moment_windows}")
        for rng_name in ("n_c_range", "n_w_range"):
            lo, hi = getattr(self, rng_name)
            if not (1 <= lo <= hi):
                raise ConfigError(f"bad {rng_name}=({lo}, {hi})")
        for lo_hi in (self.n_c_range, self.target_n_c_range or self.n_c_range):
            if min(self.moment_windows) > lo_hi[0]:
                raise ConfigError(f"smallest moment window "
                                  f"{min(self.moment_windows)} exceeds the "
                                  f"shortest video length {lo_hi[0]}")
        if self.noise_sigma < 0 or self.word_noise < 0 or self.occurrence_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.rotation_strength < 0 or self.bias_scale < 0:
            raise ConfigError("shift magnitudes must be >= 0")
        a, b = self.target_start_beta
        if a <= 0 or b <= 0:
            raise ConfigError(f"beta parameters must be positive, got ({a}, {b})")

    def build_shift(self, rng: np.random.Generator) -> ShiftConfig:
        skew = rng.standard_normal((self.d_c, self.d_c))
        skew = 0.5 * (skew - skew.T)
        rotation = expm(self.rotation_strength * skew)
        bias = self.bias_scale * _unit_rows(rng.standard_normal(self.d_c))
        shift = ShiftConfig(rotation=rotation, bias=bias,
                            noise_sigma=self.noise_sigma,
                            source_n_c=tuple(self.n_c_range),
                            source_n_w=tuple(self.n_w_range),
                            target_n_c=tuple(self.target_n_c_range or self.n_c_range),
                            target_n_w=tuple(self.target_n_w_range or self.n_w_range))
        shift.validate()
        return shift

    def build_bank(self, rng: np.random.Generator) -> ConceptBank:
        return ConceptBank.build(self.n_concepts, self.d_c, self.d_w,
                                 self.vocab_overlap, self.word_noise, rng)


def benchmark_data_config() -> DataConfig:
    """The smaller corpus the ablation grids train on: rotated + biased target
    features with 0.6 vocabulary overlap, sized so a full component sweep
    stays within a coffee break on one core.

    Target queries are deliberately terse (3-6 words against the source's
    4-12), which caps how far weak supervision alone can get on the target
    domain and leaves visible headroom for the coupled branches."""
    return DataConfig(n_train=240, n_val=96, vocab_overlap=0.6,
                      target_n_w_range=(3, 6))


def probe_data_config() -> DataConfig:
    """Corpus preset for the domain-invariance probe experiment; the probe
    pair trains on the same benchmark corpus the ablation grids use."""
    return benchmark_data_config()


# ---------------------------------------------------------------------------
# Sample synthesis.


def _moment_on_grid(n_c: int, cfg: DataConfig, domain: str,
                    rng: np.random.Generator) -> tuple:
    """Pick a moment that coincides with one sliding-window proposal.

    Source moments are uniform over grid positions; target moments are
    beta-skewed toward the start of the video.
    """
    allowed = [w for w in sorted(set(cfg.moment_windows)) if w <= n_c]
    w = allowed[rng.integers(len(allowed))]
    starts = list(range(0, n_c - w + 1, cfg.moment_grid))
    if domain == "source":
        start = starts[rng.integers(len(starts))]
    else:
        frac = rng.beta(*cfg.target_start_beta)
        start = starts[min(int(frac * len(starts)), len(starts) - 1)]
    return start, start + w


def _pick_distractors(bank: ConceptBank, domain: str, concept: int,
                      rng: np.random.Generator) -> list:
    """Prefer concepts the domain cannot express as queries, so video-level
    negatives stay label-clean; fall back to any other concept."""
    pool = bank.inexpressible(domain)
    if not pool:
        pool = [c for c in range((bank.n_concepts)) if c != concept]
    if len(pool) == 1:
        return [pool[0], pool[0]]
    picked = rng.choice(len(pool), size=2, replace=False)
    return [pool[int(picked[0])], pool[int(picked[1])]]


def _make_sample(domain: str, cfg: DataConfig, bank: ConceptBank,
                 shift: ShiftConfig, rng: np.random.Generator) -> SyntheticSample:
    (c_lo, c_hi), (w_lo, w_hi) = shift.lengths(domain)
    n_c = int(rng.integers(c_lo, c_hi + 1))
    n_w = int(rng.integers(w_lo, w_hi + 1))
    expressible = bank.expressible(domain)
    concept = expressible[int(rng.integers(len(expressible)))]
    gt_start, gt_end = _moment_on_grid(n_c, cfg, domain, rng)
    before, after = _pick_distractors(bank, domain, concept, rng)

    clip_ids = np.empty(n_c, dtype=np.int64)
    clip_ids[:gt_start] = before
    clip_ids[gt_start:gt_end] = concept
    clip_ids[gt_end:] = after
    clips = bank.visual_prototypes[clip_ids]
    if domain == "target":
        clips = clips @ shift.rotation.T + shift.bias
    clips = clips + shift.noise_sigma * rng.standard_normal(clips.shape)

    n_occ = max(1, n_w // 3)
    word_vec = bank.vocabulary(domain)[concept]
    words = np.empty((n_w, cfg.d_w))
    words[:n_occ] = word_vec + cfg.occurrence_noise * rng.standard_normal((n_occ, cfg.d_w))
    if n_w > n_occ:
        words[n_occ:] = _unit_rows(rng.standard_normal((n_w - n_occ, cfg.d_w)))
    words = words[rng.permutation(n_w)]

    duration = n_c * rng.uniform(0.5, 2.0)
    return SyntheticSample(domain=domain,
                           clip_features=clips.astype("<f4"),
                           word_features=words.astype("<f4"),
                           gt_start=gt_start, gt_end=gt_end,
                           duration_seconds=float(np.float32(duration)),
                           concept_id=concept)


# ---------------------------------------------------------------------------
# Serialization.


def _write_split(path: Path, samples: Sequence[SyntheticSample], d_c: int, d_w: int):
    domain = samples[0].domain
    buf = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, _DOMAIN_CODES[domain], 0,
                                 len(samples), d_c, d_w))
    for s in samples:
        buf += _DESC.pack(s.n_c, s.n_w, s._gt_start, s._gt_end, s.concept_id,
                          s.duration_seconds)
        buf += np.ascontiguousarray(s.clip_features, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(s.word_features, dtype="<f4").tobytes()
    path.write_bytes(bytes(buf))


def write_manifest(path: Path, entries: dict):
    lines = [f"{k}={entries[k]}" for k in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {i + 1} is not key=value: {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def generate(config: DataConfig, seed: int, out_dir) -> dict:
    """Write train/val splits for both domains; identical seeds give
    byte-identical files. Returns split name -> file path."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank = config.build_bank(np.random.default_rng([seed, 11]))
    shift = config.build_shift(np.random.default_rng([seed, 13]))

    paths = {}
    for d_idx, domain in enumerate(("source", "target")):
        for s_idx, (split, count) in enumerate((("train", config.n_train),
                                                ("val", config.n_val))):
            rng = np.random.default_rng([seed, 17, d_idx, s_idx])
            samples = [_make_sample(domain, config, bank, shift, rng)
                       for _ in range(count)]
            name = f"{domain}_{split}"
            path = out / f"{name}.evds"
            _write_split(path, samples, config.d_c, config.d_w)
            write_manifest(path.with_suffix(".manifest"), {
                "format": "EVDS", "version": FORMAT_VERSION, "seed": seed,
                "domain": domain, "split": split, "n_samples": count,
                "d_c": config.d_c, "d_w": config.d_w,
                "n_concepts": config.n_concepts,
                "vocab_overlap": config.vocab_overlap,
                "word_noise": config.word_noise,
                "occurrence_noise": config.occurrence_noise,
                "noise_sigma": config.noise_sigma,
                "rotation_strength": config.rotation_strength,
                "bias_scale": config.bias_scale,
                "moment_windows": ",".join(str(w) for w in config.moment_windows),
                "moment_grid": config.moment_grid,
                "n_c_range": f"{config.n_c_range[0]}-{config.n_c_range[1]}",
                "n_w_range": f"{config.n_w_range[0]}-{config.n_w_range[1]}",
            })
            paths[name] = path
    return paths


def load_split(path) -> list:
    """Read one split; any structural problem raises FormatError with the
    byte offset where parsing stopped making sense."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such dataset file: {p}")
    data = p.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header",
                          offset=len(data))
    magic, version, domain_code, _, n, d_c, d_w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if domain_code not in _DOMAIN_NAMES:
        raise FormatError(f"unknown domain code {domain_code}", offset=6)
    if d_c < 1 or d_w < 1:
        raise FormatError(f"implausible dims d_c={d_c}, d_w={d_w}", offset=12)
    domain = _DOMAIN_NAMES[domain_code]

    samples = []
    off = _HEADER.size
    for i in range(n):
        if off + _DESC.size > len(data):
            raise FormatError(f"truncated descriptor for sample {i}", offset=off)
        n_c, n_w, gt_s, gt_e, concept, duration = _DESC.unpack_from(data, off)
        if not (1 <= n_c <= 10 ** 6) or not (1 <= n_w <= 10 ** 6):
            raise FormatError(f"implausible lengths n_c={n_c}, n_w={n_w} in "
                              f"sample {i}", offset=off)
        if not (0 <= gt_s < gt_e <= n_c):
            raise FormatError(f"invalid moment [{gt_s}, {gt_e}) for {n_c} clips "
                              f"in sample {i}", offset=off)
        if not (duration > 0) or not np.isfinite(duration):
            raise FormatError(f"invalid duration {duration} in sample {i}",
                              offset=off)
        off += _DESC.size
        need = 4 * (n_c * d_c + n_w * d_w)
        if off + need > len(data):
            raise FormatError(f"truncated payload for sample {i}", offset=off)
        clips = np.frombuffer(data, dtype="<f4", count=n_c * d_c,
                              offset=off).reshape(n_c, d_c).copy()
        off += 4 * n_c * d_c
        words = np.frombuffer(data, dtype="<f4", count=n_w * d_w,
                              offset=off).reshape(n_w, d_w).copy()
        off += 4 * n_w * d_w
        samples.append(SyntheticSample(domain=domain, clip_features=clips,
                                       word_features=words, gt_start=gt_s,
                                       gt_end=gt_e, duration_seconds=duration,
                                       concept_id=concept))
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after {n} samples",
                          offset=off)
    return samples


# ---------------------------------------------------------------------------
# Solvability oracle.


def concept_oracle_predictions(samples: Sequence[SyntheticSample],
                               bank: ConceptBank, shift: ShiftConfig,
                               window_sizes: Sequence[int], stride: int) -> list:
    """Score every proposal by cosine similarity between its mean-pooled clip
    features and the query concept's (domain-adjusted) prototype; return the
    argmax interval per sample, preferring longer then earlier on ties.

    On noise-free data this recovers the planted moment exactly, which is the
    ground for treating the dataset as solvable before any learning.
    """
    from .model import proposal_intervals

    shifted = bank.visual_prototypes @ shift.rotation.T + shift.bias
    preds = []
    for s in samples:
        proto = (bank.visual_prototypes if s.domain == "source" else shifted)[s.concept_id]
        proto_norm = np.linalg.norm(proto)
        clips64 = s.clip_features.astype(np.float64)
        best_key, best = None, None
        for a, b in proposal_intervals(s.n_c, window_sizes, stride):
            pooled = clips64[a:b].mean(axis=0)
            denom = np.linalg.norm(pooled) * proto_norm
            score = float(pooled @ proto / denom) if denom > 1e-12 else 0.0
            key = (score, b - a, -a)
            if best_key is None or key > best_key:
                best_key, best = key, (a, b)
        preds.append(best)
    return preds
