import json

import numpy as np
import pytest

from shotfi.csi import CsiTensor, DomainDescriptor, Sample, pad_label_set
from shotfi.dataset import (DatasetLoadError, LabelAccessError, load_dataset, stack_samples,
                            write_dataset)
from shotfi.synth import BenchmarkConfig, build_benchmark


def tiny_samples(store_raw=True):
    cfg = BenchmarkConfig(n_source=3, n_target=2, n_holdout=0, T=20, N_sc=4, seed=5)
    return build_benchmark(cfg, keep_raw=store_raw)["source"]


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"profile": "synthetic", "samples": []}))
    assert load_dataset(p) == []


def test_roundtrip_raw_bit_exact(tmp_path):
    samples = tiny_samples()
    path = write_dataset(samples[:1], tmp_path, preprocess="amplitude")
    back = load_dataset(path)
    assert len(back) == 1
    np.testing.assert_array_equal(back[0].raw.values, samples[0].raw.values)
    np.testing.assert_array_equal(back[0].features, samples[0].features)
    assert back[0].labels == samples[0].labels


def test_roundtrip_features_preserves_order(tmp_path):
    samples = tiny_samples(store_raw=False)
    back = load_dataset(write_dataset(samples, tmp_path, store="features"))
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.features, b.features)
        assert a.labels == b.labels


def test_wrong_byte_length(tmp_path):
    path = write_dataset(tiny_samples(), tmp_path, preprocess="amplitude")
    meta = json.loads(path.read_text())
    blob = tmp_path / meta["samples"][1]["blob"]
    data = blob.read_bytes()[:-8]
    blob.write_bytes(data)
    import hashlib
    meta["samples"][1]["checksum_sha256"] = hashlib.sha256(data).hexdigest()
    path.write_text(json.dumps(meta))
    with pytest.raises(DatasetLoadError, match="sample 1"):
        load_dataset(path)


def test_checksum_and_missing_blob(tmp_path):
    path = write_dataset(tiny_samples(), tmp_path, preprocess="amplitude")
    meta = json.loads(path.read_text())
    blob = tmp_path / meta["samples"][0]["blob"]
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(DatasetLoadError, match="checksum"):
        load_dataset(path)
    blob.unlink()
    with pytest.raises(DatasetLoadError, match="missing blob"):
        load_dataset(path)


def test_schema_violation(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"profile": "other", "samples": []}))
    with pytest.raises(DatasetLoadError, match="schema"):
        load_dataset(p)


def test_wimans_f32_blob_is_transposed(tmp_path):
    feats_tf = np.arange(2 * 5, dtype=np.float32).reshape(1, 5, 2)
    s = Sample(feats_tf.copy(), pad_label_set([1], 2, 3), DomainDescriptor("r", 2.4e9))
    path = write_dataset([s], tmp_path, profile="wimans-amp", store="features")
    back = load_dataset(path)[0]
    assert back.features.shape == (1, 2, 5)
    np.testing.assert_array_equal(back.features[0], feats_tf[0].T)


def test_unlabeled_view_tripwire():
    data = stack_samples(tiny_samples(False))
    view = data.unlabeled()
    assert view.x.shape == data.x.shape
    with pytest.raises(LabelAccessError):
        _ = view.y
    with pytest.raises(LabelAccessError):
        _ = view.labels
    assert view.label_access_count == 2
    batches = list(view.batches(2, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches)) == list(range(len(view)))


def test_stack_single_user_rejects_empty_slots():
    s = Sample(np.zeros((1, 2, 3), np.float32), pad_label_set([], 1, 6), DomainDescriptor("r", 1.0))
    with pytest.raises(ValueError):
        stack_samples([s], single_user=True)
    ok = Sample(np.zeros((1, 2, 3), np.float32), pad_label_set([4], 1, 6), DomainDescriptor("r", 1.0))
    assert stack_samples([ok], single_user=True).y.tolist() == [4]
