import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmim import data


def test_six_datasets_with_expected_kinds():
    specs = data.default_corpus("tiny", 0)
    assert [(s.name, s.kind, s.out_of_network) for s in specs] == [
        ("RFMiD", "multilabel", False), ("DR", "severity", False), ("EYEPACS", "binary", False),
        ("REFUGE2", "seg-disc", False), ("LACDHS", "seg-vessel", True), ("JSIEC", "multiclass", True)]


@pytest.mark.parametrize("scale,train", [("small", [19, 296, 80, 8, 8, 8]), ("tiny", [9, 148, 40, 8, 8, 8])])
def test_scaled_sizes(scale, train):
    specs = data.default_corpus(scale, 0)
    assert [s.n_train for s in specs] == train
    assert all(s.n_test >= data.MIN_TEST for s in specs)


def test_relative_sizes_follow_the_source_table():
    sizes = {name: n for name, _, n, *_ in data.TABLE}
    assert sizes["DR"] > sizes["EYEPACS"] > sizes["RFMiD"] > sizes["JSIEC"] > sizes["REFUGE2"] > sizes["LACDHS"]


def test_unknown_scale_and_bad_spec():
    with pytest.raises(ValueError):
        data.default_corpus("huge")
    with pytest.raises(ValueError):
        data.SynthTaskSpec("x", "regression", 1, 1)
    with pytest.raises(ValueError):
        data.SynthTaskSpec("x", "binary", 1, 1, image_size=48)


def test_generation_is_deterministic():
    spec = data.default_corpus("tiny", 3)[0]
    a, b = data.generate(spec), data.generate(spec)
    assert a.ids() == b.ids()
    assert all(np.array_equal(r.image, s.image) and r.label == s.label for r, s in zip(a.records, b.records))


def test_seed_changes_images():
    a = data.generate(data.default_corpus("tiny", 0)[3])
    b = data.generate(data.default_corpus("tiny", 1)[3])
    assert not np.array_equal(a.records[0].image, b.records[0].image)


@pytest.mark.parametrize("kind", ["severity", "binary", "multilabel", "multiclass"])
def test_labels_are_functions_of_sample_params(kind):
    spec = data.SynthTaskSpec("T", kind, 30, 16, seed=5)
    for i in range(30):
        rec, params = data.generate_sample(spec, "train", i)
        lesions = params.lesions
        if kind == "severity":
            expected = 0 if not lesions else min(4, (len(lesions) + 1) // 2)
        elif kind == "binary":
            expected = int(len(lesions) >= 3)
        elif kind == "multilabel":
            per_type = [sum(1 for l in lesions if l[3] == t) for t in (0, 1)]
            expected = tuple(int(per_type[t] > k) for t in (0, 1) for k in range(4))
        else:
            expected = params.disc_anchor * 2 + params.disc_size
        assert rec.label == expected


def test_label_ranges(corpus):
    for m in corpus:
        spec = m.spec
        labels = m.labels()
        if spec.kind == "multilabel":
            assert labels.shape[1] == data.NUM_LABELS and set(np.unique(labels)) <= {0, 1}
        elif spec.kind in data.SEG_KINDS:
            assert labels.shape[1:] == (spec.image_size, spec.image_size)
        else:
            assert labels.min() >= 0 and labels.max() < max(2, spec.num_outputs)


def test_disc_mask_is_disc_pixels():
    spec = data.SynthTaskSpec("D", "seg-disc", 5, 16, seed=2)
    for i in range(5):
        rec, params = data.generate_sample(spec, "train", i)
        yy, xx = np.mgrid[0:32, 0:32] + 0.5
        cx, cy = params.disc_center
        np.testing.assert_array_equal(rec.mask, (xx - cx) ** 2 + (yy - cy) ** 2 <= params.disc_radius ** 2)
        assert rec.mask.any()


def test_vessel_masks_are_nonempty(corpus):
    vessels = corpus[4].labels()
    assert vessels.sum(axis=(1, 2)).min() > 0


def test_images_are_in_unit_range(corpus):
    x = corpus[0].images()
    assert x.dtype == np.float32 and x.shape[1:] == (3, 32, 32)
    assert 0.0 <= x.min() and x.max() <= 1.0


def test_corpus_roundtrip(corpus, tmp_path):
    data.write_corpus(corpus, str(tmp_path))
    back = data.read_corpus(str(tmp_path))
    for m, b in zip(corpus, back):
        assert m.spec == b.spec and m.ids() == b.ids()
        assert np.array_equal(m.images(), b.images())
        assert np.array_equal(m.labels(), b.labels())
    with pytest.raises(FileNotFoundError):
        data.read_corpus(str(tmp_path / "nowhere"))


def test_container_rejects_wrong_magic():
    blob = data.encode_images(np.zeros((2, 4, 4, 3), np.uint8))
    with pytest.raises(ValueError):
        data.decode_masks(blob)
    np.testing.assert_array_equal(data.decode_images(blob), np.zeros((2, 4, 4, 3), np.uint8))


def _toy(sizes):
    specs = [data.SynthTaskSpec(f"D{k}", "binary", n, 16, seed=k) for k, n in enumerate(sizes)]
    return [data.generate(s) for s in specs]


_TOY_CACHE = {}


def _toy_cached(sizes):
    key = tuple(sizes)
    if key not in _TOY_CACHE:
        _TOY_CACHE[key] = _toy(sizes)
    return _TOY_CACHE[key]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(8, 14), min_size=1, max_size=3), st.integers(1, 5), st.integers(0, 100))
def test_split2_is_disjoint_equal_and_within_source(sizes, clients, seed):
    ms = [m.subset("train") for m in _toy_cached(sizes)]
    shards = data.partition(ms, "split2", clients, seed)
    seen = [set(s.ids()) for s in shards]
    for i in range(clients):
        for j in range(i + 1, clients):
            assert not seen[i] & seen[j]
    all_ids = set().union(*[set(m.ids()) for m in ms])
    assert set().union(*seen) <= all_ids
    for m in ms:
        name = m.spec.name
        counts = {sum(1 for r in s.records if r.dataset == name) for s in shards}
        assert counts == {len(m) // clients}


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(8, 14), min_size=1, max_size=3))
def test_split1_gives_each_client_one_whole_dataset(sizes):
    ms = _toy_cached(sizes)
    shards = data.partition(ms, "split1", len(ms))
    for m, s in zip(ms, shards):
        assert s.ids() == m.ids() and list(s.specs) == list(m.specs)


def test_partition_errors():
    ms = _toy_cached([8, 9])
    with pytest.raises(ValueError):
        data.partition(ms, "split1", 3)
    with pytest.raises(ValueError):
        data.partition(ms, "split2", 100)
    with pytest.raises(ValueError):
        data.partition(ms, "split3", 2)


def test_manifest_spec_requires_single_dataset():
    with pytest.raises(ValueError):
        data.merge(_toy_cached([8, 9])).spec
