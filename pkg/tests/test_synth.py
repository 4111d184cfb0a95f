import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from fedpsyau import synth
from fedpsyau.errors import ConfigError, ContractError, FormatError
from fedpsyau.priors import default_catalog

CAT = default_catalog()
LAYOUT = synth.RoiLayout.default(CAT)


def small(**kw):
    return synth.GeneratorSpec(**({"n_subjects": 6, "samples_per_subject": (3, 6), "of_size": 16} | kw))


# ------------------------------------------------------------------ layout


def test_layout_shape_and_range():
    assert LAYOUT.n_rois == 65
    assert np.all((LAYOUT.coords >= 0) & (LAYOUT.coords <= 1))
    assert len(LAYOUT.areas) == 65


def test_every_au_renders_mostly_into_its_group():
    flow = LAYOUT.flow_matrix()
    for g_idx, g in enumerate(CAT.groups, start=1):
        rois = list(CAT.roi_group(g_idx))
        for au in g.aus:
            energy = (flow[CAT.index(au)] ** 2).sum(axis=1)
            assert energy[rois].sum() > 0.5 * energy.sum(), au


# ------------------------------------------------------------------ generate


def test_sample_shapes():
    ds = synth.generate(small())
    n = len(ds)
    assert ds.roi.shape == (n, 65, 3, 5, 5)
    assert ds.of.shape == (n, 3, 16, 16)
    assert ds.au.shape == (n, 12) and set(np.unique(ds.au)) <= {0.0, 1.0}
    assert ds.emotion.min() >= 0 and ds.emotion.max() < 3
    assert np.all(ds.au.sum(axis=1) >= 1)


def test_generation_is_deterministic():
    a, b = synth.generate(small(seed=11)), synth.generate(small(seed=11))
    assert synth.encode_dataset(a) == synth.encode_dataset(b)
    assert synth.encode_dataset(a) != synth.encode_dataset(synth.generate(small(seed=12)))


def test_zero_noise_single_au_concentrates_flow():
    spec = small(n_classes=1, prototypes={"brow": {1: 1.0}}, noise=0.0, au_flip=0.0, subject_bias=0.0)
    ds = synth.generate(spec)
    assert np.all(ds.au[:, CAT.index(1)] == 1) and ds.au.sum() == len(ds)
    energy = (ds.roi[:, :, :2] ** 2).sum(axis=(2, 3, 4))
    touched = set(LAYOUT.primary_rois(1)) | set(LAYOUT.secondary_rois(1))
    untouched = [r for r in range(65) if r not in touched]
    assert np.all(energy[:, list(LAYOUT.primary_rois(1))] > 0)
    assert not energy[:, untouched].any()
    prim = energy[:, list(LAYOUT.primary_rois(1))].sum()
    assert prim > 0.9 * energy.sum()


def test_inactive_au_exclusive_rois_are_mean_zero():
    spec = small(n_subjects=20, prototypes=None, noise=0.5)
    ds = synth.generate(spec)
    for au in (5, 10, 17):
        rois = list(LAYOUT.exclusive_rois(au))
        off = ds.au[:, CAT.index(au)] == 0
        flow = ds.roi[off][:, rois, :2]
        se = flow.std() / np.sqrt(flow.size)
        assert abs(flow.mean()) < 5 * se


def test_cooccurrence_matches_closed_form():
    spec = synth.GeneratorSpec(n_subjects=500, samples_per_subject=(20, 20), subject_bias=0.0, au_flip=0.05)
    ds = synth.generate(spec, labels_only=True)
    assert len(ds) == 10_000
    empirical = ds.au.T @ ds.au / len(ds)
    expected = synth.cooccurrence_closed_form(spec, CAT)
    assert np.max(np.abs(empirical - expected)) <= 0.05


def test_linear_probe_on_flow_energy_at_zero_noise():
    spec = synth.GeneratorSpec(n_subjects=40, noise=0.0, au_flip=0.1, of_size=8, seed=3)
    ds = synth.generate(spec)
    energy = (ds.roi[:, :, :2] ** 2).sum(axis=(2, 3, 4))
    cut = int(0.7 * len(ds))
    for a in range(12):
        y = ds.au[:, a]
        clf = LogisticRegression(max_iter=2000).fit(energy[:cut], y[:cut])
        assert clf.score(energy[cut:], y[cut:]) > 0.9, CAT.au_ids[a]


def class_distance(bias, seed, clients=5):
    ds = synth.generate(synth.GeneratorSpec(n_subjects=30, subject_bias=bias, seed=seed), labels_only=True)
    freq = np.array([np.bincount(p.emotion, minlength=3) / len(p) for p in synth.partition_clients(ds, clients, seed)])
    d = [np.abs(freq[i] - freq[j]).sum() for i in range(clients) for j in range(i + 1, clients)]
    return float(np.mean(d))


def test_heterogeneity_is_monotone_in_subject_bias():
    means = [np.mean([class_distance(b, s) for s in range(5)]) for b in (0.0, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(means, means[1:])), means


def test_spec_validation():
    with pytest.raises(ConfigError):
        synth.GeneratorSpec(noise=-1)
    with pytest.raises(ConfigError):
        synth.GeneratorSpec(n_classes=5)
    with pytest.raises(ConfigError):
        synth.GeneratorSpec(prototypes={"a": {1: 2.0}}, n_classes=1)


def test_degenerate_specs_are_legal():
    ds = synth.generate(small(n_classes=1, prototypes={"only": {12: 1.0}}, noise=0.0))
    assert np.all(ds.emotion == 0)


# ------------------------------------------------------------------ partition


def test_ten_subjects_five_clients():
    ds = synth.generate(small(n_subjects=10), labels_only=True)
    parts = synth.partition_clients(ds, 5, seed=0)
    assert [len(np.unique(p.subject)) for p in parts] == [2] * 5


def test_remainder_goes_to_lowest_ids():
    ds = synth.generate(small(n_subjects=7), labels_only=True)
    assert [len(np.unique(p.subject)) for p in synth.partition_clients(ds, 3)] == [3, 2, 2]


def test_one_client_gets_everything():
    ds = synth.generate(small(), labels_only=True)
    (only,) = synth.partition_clients(ds, 1)
    assert len(only) == len(ds)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000))
def test_partition_keeps_subjects_whole(k, seed):
    ds = synth.generate(small(n_subjects=12, seed=seed), labels_only=True)
    parts = synth.partition_clients(ds, k, seed)
    seen = [set(np.unique(p.subject)) for p in parts]
    assert sum(len(s) for s in seen) == 12 and len(set().union(*seen)) == 12
    assert sum(len(p) for p in parts) == len(ds)


def test_partition_errors():
    ds = synth.generate(small(), labels_only=True)
    with pytest.raises(ContractError):
        synth.partition_clients(ds, 0)
    with pytest.raises(ContractError):
        synth.partition_clients(ds, 7)


# ------------------------------------------------------------------ split


def labelled(n, n_classes=3, seed=0):
    y = np.random.default_rng(seed).integers(0, n_classes, size=n)
    return synth.Dataset(np.zeros((n, 0, 3, 5, 5)), np.zeros((n, 3, 0, 0)), np.zeros((n, 12)), y, np.zeros(n, int),
                         n_classes)


def test_hundred_samples_split_seventy_thirty():
    splits = synth.split_train_test(labelled(100), 0.7, 10, seed=0)
    assert len(splits) == 10
    assert all(len(s.train) == 70 and len(s.test) == 30 for s in splits)
    assert len({s.seed for s in splits}) == 10
    assert len({s.train.tobytes() for s in splits}) == 10


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 200), st.integers(0, 10_000), st.integers(1, 5))
def test_split_partitions_dataset(n, seed, n_classes):
    ds = labelled(n, n_classes, seed)
    for s in synth.split_train_test(ds, 0.7, 3, seed):
        assert len(np.intersect1d(s.train, s.test)) == 0
        assert np.array_equal(np.union1d(s.train, s.test), np.arange(n))


def test_stratified_split_keeps_class_shares():
    ds = labelled(300, 3, 1)
    for s in synth.split_train_test(ds, 0.7, 3, seed=1):
        assert s.stratified
        share_all = np.bincount(ds.emotion, minlength=3) / 300
        share_train = np.bincount(ds.emotion[s.train], minlength=3) / len(s.train)
        assert np.max(np.abs(share_all - share_train)) < 0.01


def test_singleton_class_disables_stratification():
    ds = labelled(20, 2, 0)
    ds.emotion[:] = 0
    ds.emotion[0] = 1
    assert not synth.split_train_test(ds, 0.7, 1)[0].stratified


def test_split_errors():
    with pytest.raises(ContractError):
        synth.split_train_test(labelled(0))
    with pytest.raises(ContractError):
        synth.split_train_test(labelled(3))


# ------------------------------------------------------------------ files


def test_dataset_file_roundtrip(tmp_path):
    ds = synth.generate(small(seed=4))
    ds.save(tmp_path / "client_0.fpds")
    back = synth.Dataset.load(tmp_path / "client_0.fpds")
    assert synth.encode_dataset(back) == synth.encode_dataset(ds)
    assert (tmp_path / "client_0.fpds").read_bytes()[:4] == b"FPDS"


def test_dataset_file_rejects_param_stream():
    from fedpsyau.params import ParamSet, serialize

    with pytest.raises(FormatError, match="magic"):
        synth.decode_dataset(serialize(ParamSet()))


def test_dump_json():
    rows = json.loads(synth.dump_json(synth.generate(small()), limit=2))
    assert len(rows) == 2 and len(rows[0]["au_labels"]) == 12 and len(rows[0]["roi_energy"]) == 65
