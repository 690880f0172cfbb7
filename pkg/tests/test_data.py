import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_array_equal
from sklearn.linear_model import LogisticRegression

from stead.data import (
    ABNORMAL,
    NORMAL,
    BalancedSampler,
    FeatureClip,
    Manifest,
    ManifestEntry,
    check_feature_file,
    decode_record,
    encode_record,
    generate_synthetic,
    load_manifest,
    pool_clip_features,
    read_feature_file,
    sample_batch,
    write_feature_file,
    write_manifest,
)
from stead.errors import ContractError, FormatError, ManifestError
from stead.metrics import auc_roc

finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)
clips = hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, max_side=5), elements=finite32)


def same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


class TestFormat:
    def test_full_size_round_trip(self, tmp_path, rng):
        arr = rng.standard_normal((192, 16, 10, 10)).astype(np.float32)
        write_feature_file(FeatureClip(arr, ABNORMAL, "video-7/clip-3"), tmp_path / "c.stdf")
        back = read_feature_file(tmp_path / "c.stdf")
        assert same_bits(back.tensor, arr)
        assert (back.label, back.id) == (ABNORMAL, "video-7/clip-3")

    @settings(max_examples=100, deadline=None)
    @given(clips, st.integers(0, 1), st.text(max_size=20))
    def test_round_trip_is_bit_exact(self, arr, label, ident):
        out, lab, name, end = decode_record(encode_record(arr, label, ident))
        assert same_bits(out, arr) and lab == label and name == ident

    def test_negative_zero_survives(self):
        arr = np.array([0.0, -0.0, -1.5, np.finfo(np.float32).tiny], np.float32).reshape(1, 1, 2, 2)
        out = decode_record(encode_record(arr))[0]
        assert np.signbit(out).tolist() == np.signbit(arr).tolist()

    def test_byte_layout(self):
        blob = encode_record(np.arange(2, dtype=np.float32).reshape(1, 1, 1, 2), ABNORMAL, "ab")
        assert blob[:4] == b"STDF" and blob[4] == 1 and blob[5] == 1
        assert struct.unpack_from("<H", blob, 6)[0] == 2 and blob[8:10] == b"ab"
        assert blob[10] == 4 and struct.unpack_from("<4I", blob, 11) == (1, 1, 1, 2)
        assert np.frombuffer(blob[27:], "<f4").tolist() == [0.0, 1.0]

    def test_bad_magic_at_offset_zero(self, tmp_path):
        blob = bytearray(encode_record(np.ones((1, 1, 1, 1), np.float32)))
        blob[:4] = b"XXXX"
        (tmp_path / "x.stdf").write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0") as info:
            read_feature_file(tmp_path / "x.stdf")
        assert info.value.offset == 0

    def test_truncated_payload(self, tmp_path, rng):
        blob = encode_record(rng.standard_normal((192, 16, 10, 10)).astype(np.float32))
        (tmp_path / "t.stdf").write_bytes(blob[:-100])
        with pytest.raises(FormatError, match="truncated payload"):
            read_feature_file(tmp_path / "t.stdf")
        with pytest.raises(FormatError, match="truncated payload"):
            check_feature_file(tmp_path / "t.stdf")

    def test_truncated_header(self):
        blob = encode_record(np.ones((2, 2, 2, 2), np.float32), 0, "abc")
        for cut in (2, 6, 9, 12):
            with pytest.raises(FormatError):
                decode_record(blob[:cut])

    def test_dimension_overflow(self):
        header = b"STDF" + struct.pack("<BBH", 1, 0, 0) + struct.pack("<B", 4) + struct.pack("<4I", *[2**32 - 1] * 4)
        with pytest.raises(FormatError, match="overflow") as info:
            decode_record(header)
        assert info.value.offset == 9

    def test_zero_dimension(self):
        header = b"STDF" + struct.pack("<BBHB4I", 1, 0, 0, 4, 1, 0, 1, 1)
        with pytest.raises(FormatError, match="zero"):
            decode_record(header)

    def test_bad_version_and_label(self):
        blob = bytearray(encode_record(np.ones((1, 1, 1, 1), np.float32)))
        blob[4] = 9
        with pytest.raises(FormatError, match="version"):
            decode_record(bytes(blob))
        blob[4], blob[5] = 1, 7
        with pytest.raises(FormatError, match="label"):
            decode_record(bytes(blob))

    def test_trailing_bytes(self, tmp_path):
        blob = encode_record(np.ones((1, 1, 1, 1), np.float32))
        (tmp_path / "t.stdf").write_bytes(blob + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            read_feature_file(tmp_path / "t.stdf")

    def test_rank_must_be_four_for_clips(self, tmp_path):
        with pytest.raises(ContractError):
            write_feature_file(FeatureClip(np.ones((2, 2), np.float32), 0, "x"), tmp_path / "x.stdf")

    def test_non_finite_refused(self):
        with pytest.raises(ContractError):
            encode_record(np.array([np.nan], np.float32))


def make_manifest(tmp_path, labels, split="train"):
    entries = []
    for i, label in enumerate(labels):
        path = tmp_path / f"c{i}.stdf"
        write_feature_file(FeatureClip(np.full((1, 1, 1, 1), i, np.float32), label, f"c{i}"), path)
        entries.append(ManifestEntry(path, label, f"c{i}"))
    m = Manifest(entries, split)
    write_manifest(m, tmp_path / "m.manifest")
    return m


class TestManifest:
    def test_round_trip(self, tmp_path):
        make_manifest(tmp_path, [0, 1, 1], split="test")
        m = load_manifest(tmp_path / "m.manifest")
        assert m.split == "test"
        assert [(e.id, e.label) for e in m.entries] == [("c0", 0), ("c1", 1), ("c2", 1)]
        assert (tmp_path / "m.manifest").read_text().splitlines()[1] == "c0.stdf\t0\tc0"

    def test_duplicate_id(self, tmp_path):
        make_manifest(tmp_path, [0, 1])
        path = tmp_path / "m.manifest"
        path.write_text(path.read_text() + "c1.stdf\t1\tc0\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        (tmp_path / "m.manifest").write_text("gone.stdf\t0\tg\n")
        with pytest.raises(ManifestError, match="missing"):
            load_manifest(tmp_path / "m.manifest")
        assert len(load_manifest(tmp_path / "m.manifest", validate=False)) == 1

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.manifest").write_text("a.stdf 0 a\n")
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(tmp_path / "m.manifest")

    def test_bad_split(self, tmp_path):
        (tmp_path / "m.manifest").write_text("# split: val\n")
        with pytest.raises(ManifestError, match="split"):
            load_manifest(tmp_path / "m.manifest")

    def test_corrupt_clip_detected_at_load(self, tmp_path):
        make_manifest(tmp_path, [0, 1])
        (tmp_path / "c1.stdf").write_bytes(b"XXXX")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "m.manifest")


class TestSampler:
    def test_one_plus_one(self, tmp_path):
        m = make_manifest(tmp_path, [0, 1])
        a = [c.id for c in sample_batch(m, 1, seed=3)]
        assert a == ["c0", "c1"] == [c.id for c in sample_batch(m, 1, seed=3)]

    def test_counts_balanced_despite_imbalance(self, tmp_path):
        m = make_manifest(tmp_path, [0] * 9 + [1] * 4)
        sampler = BalancedSampler(m, 2, seed=0)
        assert sampler.steps_per_epoch == 2
        for batch in sampler.epoch(0):
            assert [e.label for e in batch] == [0, 0, 1, 1]

    def test_without_replacement_within_epoch(self, tmp_path):
        m = make_manifest(tmp_path, [0] * 6 + [1] * 6)
        ids = [e.id for batch in BalancedSampler(m, 3, seed=1).epoch(0) for e in batch]
        assert len(ids) == len(set(ids)) == 12

    def test_seeded_epochs(self, tmp_path):
        m = make_manifest(tmp_path, [0] * 6 + [1] * 6)
        ids = lambda s, e: [x.id for b in BalancedSampler(m, 2, seed=s).epoch(e) for x in b]  # noqa: E731
        assert ids(5, 0) == ids(5, 0)
        assert ids(5, 0) != ids(5, 1)

    def test_insufficient_label(self, tmp_path):
        m = make_manifest(tmp_path, [0, 0, 0, 1])
        with pytest.raises(ContractError, match="1 abnormal"):
            BalancedSampler(m, 2, seed=0)


class TestPooling:
    def test_single_clip_unchanged(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        assert_array_equal(pool_clip_features([a]), a)

    def test_zero_clip_is_relu(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        assert_array_equal(pool_clip_features([a, np.zeros_like(a)]), np.maximum(a, 0))

    def test_dominance(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        b = a + rng.uniform(0, 1, a.shape)
        assert_array_equal(pool_clip_features([a, b]), b)

    @given(st.lists(hnp.arrays(np.float32, (2, 2, 1, 3), elements=finite32), min_size=1, max_size=4), st.randoms())
    def test_algebraic_properties(self, arrs, rnd):
        pooled = pool_clip_features(arrs)
        assert_array_equal(pool_clip_features([pooled, pooled]), pooled)  # idempotent
        shuffled = list(arrs)
        rnd.shuffle(shuffled)
        assert_array_equal(pool_clip_features(shuffled), pooled)  # commutative
        left = pool_clip_features([pool_clip_features(arrs[:1]), pool_clip_features(arrs[1:] or arrs[:1])])
        assert_array_equal(left, pooled)  # associative

    def test_empty_and_mismatched(self):
        with pytest.raises(ContractError):
            pool_clip_features([])
        with pytest.raises(ContractError):
            pool_clip_features([np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 2))])


def _arrays(manifest):
    clips = manifest.load()
    return np.stack([c.tensor for c in clips]).astype(np.float64), np.array([c.label for c in clips])


def _probe_auc(X_train, y_train, X_test, y_test):
    clf = LogisticRegression(C=1.0, max_iter=2000).fit(X_train, y_train)
    return auc_roc(clf.decision_function(X_test), y_test)


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        a = generate_synthetic(tmp_path / "a", 2, 2, shape=(8, 4, 4, 4), seed=11, anomaly_kind="static_blob")
        b = generate_synthetic(tmp_path / "b", 2, 2, shape=(8, 4, 4, 4), seed=11, anomaly_kind="static_blob")
        for x, y in zip(a.entries, b.entries):
            assert x.path.read_bytes() == y.path.read_bytes()
        c = generate_synthetic(tmp_path / "c", 2, 2, shape=(8, 4, 4, 4), seed=12)
        assert a.entries[0].path.read_bytes() != c.entries[0].path.read_bytes()

    def test_layout_on_disk(self, synthetic_splits):
        root, train, test = synthetic_splits
        assert len(load_manifest(root / "train.manifest")) == 200
        m = load_manifest(root / "test.manifest")
        assert m.split == "test" and len(m.by_label(NORMAL)) == len(m.by_label(ABNORMAL)) == 50
        assert read_feature_file(m.entries[0].path).tensor.shape == (192, 16, 10, 10)

    def test_single_frames_are_uninformative(self, synthetic_splits):
        _, train, test = synthetic_splits
        (Xtr, ytr), (Xte, yte) = _arrays(train), _arrays(test)
        rng = np.random.default_rng(0)

        def one_frame(X):
            return X[np.arange(len(X)), :, rng.integers(0, X.shape[2], len(X))].reshape(len(X), -1)

        def every_frame(X):  # each frame pooled over H, W becomes its own sample
            return X.mean(axis=(3, 4)).transpose(0, 2, 1).reshape(-1, X.shape[1])

        T = Xtr.shape[2]
        assert _probe_auc(one_frame(Xtr), ytr, one_frame(Xte), yte) <= 0.6
        assert _probe_auc(every_frame(Xtr), np.repeat(ytr, T), every_frame(Xte), np.repeat(yte, T)) <= 0.6

    def test_whole_clips_are_linearly_separable(self, synthetic_splits):
        _, train, test = synthetic_splits
        (Xtr, ytr), (Xte, yte) = _arrays(train), _arrays(test)

        def flat(X):  # mean over H, W, concatenated over T
            return X.mean(axis=(3, 4)).reshape(len(X), -1)

        assert _probe_auc(flat(Xtr), ytr, flat(Xte), yte) >= 0.9

    def test_static_blob_variant_is_separable_too(self, tmp_path):
        train = generate_synthetic(tmp_path, 100, 100, seed=0, anomaly_kind="static_blob")
        test = generate_synthetic(tmp_path, 50, 50, seed=1, anomaly_kind="static_blob", split="test")
        (Xtr, ytr), (Xte, yte) = _arrays(train), _arrays(test)
        flat = lambda X: X.mean(axis=(3, 4)).reshape(len(X), -1)  # noqa: E731
        frames = lambda X: X.mean(axis=(3, 4)).transpose(0, 2, 1).reshape(-1, X.shape[1])  # noqa: E731
        assert _probe_auc(flat(Xtr), ytr, flat(Xte), yte) >= 0.9
        assert _probe_auc(frames(Xtr), np.repeat(ytr, 16), frames(Xte), np.repeat(yte, 16)) <= 0.6

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, 1, 1, shape=(4, 2, 2, 2), anomaly_kind="explosion")
