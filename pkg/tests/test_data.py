import numpy as np
import pytest

from tspretrain import data as D
from tspretrain.errors import HeaderInconsistent, MagicMismatch, TruncatedFile


def small_meta(task="multiclass", num_classes=3):
    return D.DomainMeta("toy", channels=2, length=8, patch_size=2, task=task, num_classes=num_classes)


def make_dataset(meta, count=4, seed=0):
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(count):
        values = rng.normal(size=(meta.channels, meta.length)).astype(np.float32)
        if meta.task == D.TASK_MULTICLASS:
            label = i % meta.num_classes
        else:
            label = (rng.uniform(size=meta.num_classes) < 0.5).astype(np.uint8)
        instances.append(D.TimeSeriesInstance(values=values, label=label))
    return D.DomainDataset(meta=meta, instances=instances)


# ---------------------------------------------------------------------------
# normalization and patching


def test_znormalize_per_channel():
    values = np.array([[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]])
    out = D.znormalize(values)
    np.testing.assert_allclose(out.mean(axis=-1), [0.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(out[0].std(), 1.0, atol=1e-4)
    np.testing.assert_allclose(out[1], 0.0, atol=1e-6)  # constant channel maps to zeros
    assert out.dtype == np.float32


def test_patchify_shapes():
    values = np.arange(24.0).reshape(2, 12)
    seq = D.patchify(values, 3)
    assert seq.patches.shape == (4, 2, 3)
    np.testing.assert_allclose(seq.patches[1, 0], [3.0, 4.0, 5.0])
    np.testing.assert_allclose(seq.patches[1, 1], [15.0, 16.0, 17.0])


def test_patchify_truncates_tail():
    values = np.arange(10.0).reshape(1, 10)
    seq = D.patchify(values, 3)
    assert seq.patches.shape == (3, 1, 3)
    np.testing.assert_allclose(seq.patches[-1, 0], [6.0, 7.0, 8.0])


def test_patchify_counts_match_spec_shapes():
    assert D.patchify(np.zeros((9, 128)), 2).patches.shape[0] == 64
    assert D.patchify(np.zeros((2, 3000)), 25).patches.shape[0] == 120
    assert D.patchify(np.zeros((1, 10)), 3).patches.shape[0] == 3


def test_patchify_rejects_oversized_patch():
    with pytest.raises(ValueError):
        D.patchify(np.zeros((1, 4)), 5)


# ---------------------------------------------------------------------------
# TSB round trips and error handling


def test_tsb_round_trip_multiclass(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    path = str(tmp_path / "split.tsb")
    D.save_tsb(path, ds)
    loaded = D.load_tsb(path, meta)
    assert len(loaded) == len(ds)
    for a, b in zip(ds.instances, loaded.instances):
        assert a.values.tobytes() == b.values.tobytes()
        assert int(a.label) == int(b.label)


def test_tsb_round_trip_multilabel(tmp_path):
    meta = small_meta(task="multilabel", num_classes=4)
    ds = make_dataset(meta)
    path = str(tmp_path / "split.tsb")
    D.save_tsb(path, ds)
    loaded = D.load_tsb(path, meta)
    for a, b in zip(ds.instances, loaded.instances):
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(a.label, b.label)


def test_tsb_bad_magic(tmp_path):
    path = tmp_path / "bad.tsb"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(MagicMismatch):
        D.load_tsb(str(path))


def test_tsb_truncated(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    path = tmp_path / "split.tsb"
    D.save_tsb(str(path), ds)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(TruncatedFile):
        D.load_tsb(str(path), meta)


def test_tsb_trailing_garbage(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    path = tmp_path / "split.tsb"
    D.save_tsb(str(path), ds)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(HeaderInconsistent):
        D.load_tsb(str(path), meta)


def test_tsb_bad_version(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    path = tmp_path / "split.tsb"
    D.save_tsb(str(path), ds)
    blob = bytearray(path.read_bytes())
    blob[4] = 9  # version field
    path.write_bytes(bytes(blob))
    with pytest.raises(HeaderInconsistent):
        D.load_tsb(str(path), meta)


def test_tsb_meta_disagreement(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    path = str(tmp_path / "split.tsb")
    D.save_tsb(path, ds)
    other = D.DomainMeta("toy", channels=3, length=8, patch_size=2, task="multiclass", num_classes=3)
    with pytest.raises(HeaderInconsistent):
        D.load_tsb(path, other)


def test_tsb_label_out_of_range(tmp_path):
    meta = small_meta()
    ds = make_dataset(meta)
    ds.instances[0].label = 7
    with pytest.raises(HeaderInconsistent):
        D.save_tsb(str(tmp_path / "bad.tsb"), ds)


# ---------------------------------------------------------------------------
# domain directories and metadata files


def test_domain_round_trip(tmp_path):
    meta = small_meta()
    train, test = make_dataset(meta, 6, seed=1), make_dataset(meta, 3, seed=2)
    D.save_domain(str(tmp_path / "toy"), train, test)
    loaded_train, loaded_test = D.load_domain(str(tmp_path / "toy"))
    assert loaded_train.meta == meta
    assert len(loaded_train) == 6 and len(loaded_test) == 3
    assert loaded_train.instances[0].values.tobytes() == train.instances[0].values.tobytes()


def test_meta_unknown_key_rejected():
    text = D.format_meta(small_meta()) + "extra=1\n"
    with pytest.raises(HeaderInconsistent):
        D.parse_meta(text)


def test_meta_missing_key_rejected():
    lines = D.format_meta(small_meta()).splitlines()
    with pytest.raises(HeaderInconsistent):
        D.parse_meta("\n".join(lines[:-1]))


def test_meta_round_trip():
    meta = small_meta(task="multilabel", num_classes=5)
    assert D.parse_meta(D.format_meta(meta)) == meta


def test_meta_rejects_bad_task():
    with pytest.raises(HeaderInconsistent):
        D.DomainMeta("x", 1, 8, 2, "regression", 2)


def test_meta_rejects_patch_larger_than_length():
    with pytest.raises(HeaderInconsistent):
        D.DomainMeta("x", 1, 8, 16, "multiclass", 2)


# ---------------------------------------------------------------------------
# CSV ingestion


def test_import_csv_multiclass(tmp_path):
    meta = D.DomainMeta("csv", channels=2, length=3, patch_size=1, task="multiclass", num_classes=2)
    path = tmp_path / "rows.csv"
    path.write_text("1, 1.0,2.0,3.0, 4.0,5.0,6.0\n0, 0,0,0, 1,1,1\n")
    ds = D.import_csv(str(path), meta)
    assert len(ds) == 2
    assert ds.instances[0].label == 1
    np.testing.assert_allclose(ds.instances[0].values, [[1, 2, 3], [4, 5, 6]])


def test_import_csv_multilabel(tmp_path):
    meta = D.DomainMeta("csv", channels=1, length=2, patch_size=1, task="multilabel", num_classes=3)
    path = tmp_path / "rows.csv"
    path.write_text("1,0,1, 0.5,0.25\n")
    ds = D.import_csv(str(path), meta)
    np.testing.assert_array_equal(ds.instances[0].label, [1, 0, 1])


def test_import_csv_wrong_width_names_row(tmp_path):
    meta = D.DomainMeta("csv", channels=1, length=3, patch_size=1, task="multiclass", num_classes=2)
    path = tmp_path / "rows.csv"
    path.write_text("0, 1.0,2.0,3.0\n1, 1.0,2.0\n")
    with pytest.raises(ValueError, match="row 2"):
        D.import_csv(str(path), meta)


def test_import_csv_bad_value_names_column(tmp_path):
    meta = D.DomainMeta("csv", channels=1, length=3, patch_size=1, task="multiclass", num_classes=2)
    path = tmp_path / "rows.csv"
    path.write_text("0, 1.0,oops,3.0\n")
    with pytest.raises(ValueError, match="column 3"):
        D.import_csv(str(path), meta)


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synth_corpus_is_deterministic():
    a = D.synth_corpus(123, train_size=24, test_size=12)
    b = D.synth_corpus(123, train_size=24, test_size=12)
    for name in D.DEFAULT_DOMAINS:
        assert a[name][0].values_array().tobytes() == b[name][0].values_array().tobytes()
        np.testing.assert_array_equal(a[name][0].labels_array(), b[name][0].labels_array())


def test_synth_corpus_seeds_differ():
    a = D.synth_corpus(1, train_size=24, test_size=12)
    b = D.synth_corpus(2, train_size=24, test_size=12)
    assert a["motion"][0].values_array().tobytes() != b["motion"][0].values_array().tobytes()


def test_synth_corpus_shapes_and_tasks():
    corpus = D.synth_corpus(7, train_size=12, test_size=12)
    assert corpus["motion"][0].values_array().shape == (12, 3, 128)
    assert corpus["waves"][0].values_array().shape == (12, 2, 300)
    assert corpus["beats"][0].values_array().shape == (12, 4, 500)
    assert corpus["beats"][0].meta.task == D.TASK_MULTILABEL
    assert corpus["beats"][0].labels_array().shape == (12, 5)


def test_synth_multiclass_splits_are_balanced():
    corpus = D.synth_corpus(3, train_size=24, test_size=12)
    for name in ("motion", "waves"):
        labels = corpus[name][0].labels_array()
        counts = np.bincount(labels, minlength=corpus[name][0].meta.num_classes)
        assert len(set(counts.tolist())) == 1


def test_synth_train_test_independent():
    small = D.synth_corpus(5, train_size=24, test_size=12)
    large = D.synth_corpus(5, train_size=48, test_size=12)
    assert small["waves"][1].values_array().tobytes() == large["waves"][1].values_array().tobytes()


def test_synth_rejects_unbalanced_count():
    with pytest.raises(ValueError):
        D.synth_corpus(1, train_size=13, test_size=6, domains=("motion",))


def test_synth_rejects_unknown_domain():
    with pytest.raises(ValueError):
        D.synth_corpus(1, domains=("stocks",))
