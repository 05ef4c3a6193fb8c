import numpy as np
import pytest

from hybridvmr.alignment import MmdConfig, mmd_squared
from hybridvmr.autodiff import Tensor
from hybridvmr.errors import ConfigError, DataError, FormatError
from hybridvmr.evaluation import temporal_iou
from hybridvmr.synthdata import (ConceptBank, DataConfig, SyntheticSample,
                                 audit_zone, benchmark_data_config,
                                 concept_oracle_predictions, generate,
                                 label_audit_counts, load_split, read_manifest,
                                 reset_label_audit, write_manifest)

SMALL = DataConfig(n_train=24, n_val=8, n_c_range=(8, 24), n_w_range=(3, 8),
                   moment_windows=(4, 8), moment_grid=4)


@pytest.fixture(scope="module")
def small_dirs(tmp_path_factory):
    a = tmp_path_factory.mktemp("gen_a")
    generate(SMALL, seed=3, out_dir=a)
    return a


# -- generation ----------------------------------------------------------


def test_generate_writes_all_splits_with_manifests(small_dirs):
    for name in ("source_train", "source_val", "target_train", "target_val"):
        assert (small_dirs / f"{name}.evds").exists()
        man = read_manifest(small_dirs / f"{name}.manifest")
        assert man["format"] == "EVDS"
        assert man["seed"] == "3"
        assert man["domain"] in name


def test_generate_is_byte_identical_across_runs(tmp_path, small_dirs):
    again = tmp_path / "again"
    generate(SMALL, seed=3, out_dir=again)
    for name in ("source_train", "source_val", "target_train", "target_val"):
        assert (again / f"{name}.evds").read_bytes() == \
            (small_dirs / f"{name}.evds").read_bytes()


def test_generate_seed_changes_bytes(tmp_path, small_dirs):
    other = tmp_path / "other"
    generate(SMALL, seed=4, out_dir=other)
    assert (other / "source_train.evds").read_bytes() != \
        (small_dirs / "source_train.evds").read_bytes()


def test_round_trip_loads_identical_samples(small_dirs):
    once = load_split(small_dirs / "target_train.evds")
    twice = load_split(small_dirs / "target_train.evds")
    assert len(once) == SMALL.n_train
    for a, b in zip(once, twice):
        assert a == b
        assert a.clip_features.dtype == np.float32
        assert a.word_features.dtype == np.float32


def test_loaded_moments_sit_on_the_proposal_grid(small_dirs):
    for name in ("source_train", "target_train"):
        for s in load_split(small_dirs / f"{name}.evds"):
            with audit_zone("test"):
                start, end = s.gt_start, s.gt_end
            assert 0 <= start < end <= s.n_c
            assert end - start in SMALL.moment_windows
            assert start % SMALL.moment_grid == 0
            assert SMALL.n_c_range[0] <= s.n_c <= SMALL.n_c_range[1]
            assert SMALL.n_w_range[0] <= s.n_w <= SMALL.n_w_range[1]


def test_target_moments_skew_toward_video_start(tmp_path):
    cfg = DataConfig(n_train=150, n_val=2)
    generate(cfg, seed=0, out_dir=tmp_path)

    def mean_start_fraction(name):
        fracs = []
        for s in load_split(tmp_path / name):
            with audit_zone("test"):
                fracs.append(s.gt_start / s.n_c)
        return float(np.mean(fracs))

    assert mean_start_fraction("target_train.evds") < \
        mean_start_fraction("source_train.evds") - 0.05


def test_domain_shift_visible_in_feature_mmd(small_dirs):
    def pooled(name):
        rows = [s.clip_features.mean(axis=0)
                for s in load_split(small_dirs / f"{name}.evds")]
        return Tensor(np.stack(rows).astype(np.float64))

    cfg = MmdConfig()
    cross = mmd_squared(pooled("source_train"), pooled("target_train"), cfg).item()
    within = mmd_squared(pooled("source_train"), pooled("source_val"), cfg).item()
    assert cross > 3.0 * within


def test_target_length_override(tmp_path):
    cfg = DataConfig(n_train=30, n_val=2, target_n_w_range=(3, 5))
    generate(cfg, seed=1, out_dir=tmp_path)
    tgt_lengths = {s.n_w for s in load_split(tmp_path / "target_train.evds")}
    src_lengths = {s.n_w for s in load_split(tmp_path / "source_train.evds")}
    assert tgt_lengths <= {3, 4, 5}
    assert max(src_lengths) > 5


# -- corruption reporting ------------------------------------------------


def _corrupt(path, tmp_path, mutate):
    data = bytearray(path.read_bytes())
    mutate(data)
    out = tmp_path / "bad.evds"
    out.write_bytes(bytes(data))
    return out


def test_load_missing_file():
    with pytest.raises(DataError):
        load_split("/nonexistent/nowhere.evds")


def test_load_bad_magic(small_dirs, tmp_path):
    bad = _corrupt(small_dirs / "source_val.evds", tmp_path,
                   lambda d: d.__setitem__(slice(0, 4), b"NOPE"))
    with pytest.raises(FormatError) as exc:
        load_split(bad)
    assert exc.value.offset == 0


def test_load_bad_version(small_dirs, tmp_path):
    bad = _corrupt(small_dirs / "source_val.evds", tmp_path,
                   lambda d: d.__setitem__(slice(4, 6), (99).to_bytes(2, "little")))
    with pytest.raises(FormatError) as exc:
        load_split(bad)
    assert exc.value.offset == 4


def test_load_truncated_header(tmp_path):
    out = tmp_path / "short.evds"
    out.write_bytes(b"EVDS\x01")
    with pytest.raises(FormatError) as exc:
        load_split(out)
    assert exc.value.offset == 5


def test_load_truncated_payload(small_dirs, tmp_path):
    whole = (small_dirs / "source_val.evds").read_bytes()
    out = tmp_path / "trunc.evds"
    out.write_bytes(whole[:len(whole) - 10])
    with pytest.raises(FormatError) as exc:
        load_split(out)
    assert exc.value.offset is not None
    assert "truncated" in str(exc.value)


def test_load_trailing_garbage(small_dirs, tmp_path):
    bad = _corrupt(small_dirs / "source_val.evds", tmp_path,
                   lambda d: d.extend(b"\x00\x00\x00"))
    with pytest.raises(FormatError, match="trailing"):
        load_split(bad)


def test_load_corrupt_moment_bounds(small_dirs, tmp_path):
    # gt_start lives 8 bytes into the first descriptor (after n_c, n_w)
    header_end = 20

    def swap(d):
        d[header_end + 8:header_end + 16] = \
            (10 ** 5).to_bytes(4, "little") + (1).to_bytes(4, "little")

    bad = _corrupt(small_dirs / "source_val.evds", tmp_path, swap)
    with pytest.raises(FormatError, match="moment"):
        load_split(bad)


# -- manifest ------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.manifest"
    entries = {"seed": "7", "note": "with = sign", "empty": ""}
    write_manifest(path, entries)
    assert read_manifest(path) == entries


def test_manifest_rejects_bare_line(tmp_path):
    path = tmp_path / "m.manifest"
    path.write_text("seed=1\nnot a pair\n", encoding="utf-8")
    with pytest.raises(FormatError, match="line 2"):
        read_manifest(path)


# -- label auditing ------------------------------------------------------


def test_label_reads_attributed_to_active_zone():
    s = SyntheticSample("target", np.zeros((6, 2), dtype=np.float32),
                        np.zeros((3, 2), dtype=np.float32), 0, 4, 5.0, 1)
    reset_label_audit()
    with audit_zone("outer"):
        _ = s.gt_start
        with audit_zone("inner"):
            _ = s.gt_end
    _ = s.gt_start
    counts = label_audit_counts()
    assert counts[("outer", "target")] == 1
    assert counts[("inner", "target")] == 1
    assert counts[("unscoped", "target")] == 1
    reset_label_audit()
    assert label_audit_counts() == {}


def test_sample_validation():
    clips = np.zeros((6, 2), dtype=np.float32)
    words = np.zeros((3, 2), dtype=np.float32)
    with pytest.raises(DataError):
        SyntheticSample("nowhere", clips, words, 0, 4, 5.0, 1)
    with pytest.raises(DataError):
        SyntheticSample("source", clips, words, 4, 4, 5.0, 1)
    with pytest.raises(DataError):
        SyntheticSample("source", clips, words, 0, 7, 5.0, 1)


# -- concept bank --------------------------------------------------------


def test_vocab_overlap_structure():
    bank = ConceptBank.build(8, 32, 16, 0.6, 0.1, np.random.default_rng(0))
    assert bank.expressible("source") == [0, 1, 2, 3, 4, 5, 7]
    assert bank.expressible("target") == [0, 1, 2, 3, 4, 6]
    assert bank.inexpressible("source") == [6]
    assert bank.inexpressible("target") == [5, 7]


def test_concept_bank_orthonormal_rows():
    bank = ConceptBank.build(6, 16, 12, 0.5, 0.2, np.random.default_rng(1))
    for m in (bank.concept_vectors, bank.visual_prototypes):
        gram = m @ m.T
        assert np.abs(gram - np.eye(len(m))).max() < 1e-10


def test_concept_bank_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        ConceptBank.build(8, 32, 16, 1.5, 0.1, rng)
    with pytest.raises(ConfigError):
        ConceptBank.build(1, 32, 16, 0.5, 0.1, rng)
    with pytest.raises(ConfigError):
        ConceptBank.build(20, 32, 16, 0.5, 0.1, rng)  # > min(d_c, d_w) dims


def test_shift_rotation_is_orthogonal():
    shift = DataConfig().build_shift(np.random.default_rng(5))
    d = shift.rotation.shape[0]
    assert np.abs(shift.rotation @ shift.rotation.T - np.eye(d)).max() < 1e-8
    shift.validate()


def test_data_config_validation():
    with pytest.raises(ConfigError):
        DataConfig(n_train=0).validate()
    with pytest.raises(ConfigError):
        DataConfig(moment_windows=(8,), n_c_range=(4, 20)).validate()
    with pytest.raises(ConfigError):
        DataConfig(target_start_beta=(0.0, 5.0)).validate()
    with pytest.raises(ConfigError):
        DataConfig(n_w_range=(5, 3)).validate()
    DataConfig().validate()
    benchmark_data_config().validate()


def test_benchmark_preset_shape():
    cfg = benchmark_data_config()
    assert (cfg.n_train, cfg.n_val) == (240, 96)
    assert cfg.vocab_overlap == 0.6
    assert cfg.target_n_w_range == (3, 6)


# -- solvability oracle --------------------------------------------------


def test_oracle_recovers_moments_on_clean_data(tmp_path):
    cfg = DataConfig(n_train=60, n_val=4, noise_sigma=0.0)
    generate(cfg, seed=2, out_dir=tmp_path)
    bank = cfg.build_bank(np.random.default_rng([2, 11]))
    shift = cfg.build_shift(np.random.default_rng([2, 13]))
    for name in ("source_train", "target_train"):
        samples = load_split(tmp_path / f"{name}.evds")
        preds = concept_oracle_predictions(samples, bank, shift,
                                           cfg.moment_windows, cfg.moment_grid)
        with audit_zone("eval"):
            hits = [temporal_iou(p, (s.gt_start, s.gt_end)) >= 0.5
                    for p, s in zip(preds, samples)]
        assert np.mean(hits) > 0.95, f"{name}: {np.mean(hits):.3f}"
