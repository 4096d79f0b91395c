import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmirror.datagen import (
    DatasetSpec,
    Modality,
    assign_modalities,
    audio_only_count,
    dirichlet_partition,
    dumps_dataset,
    export_csv,
    generate_dataset,
    load_dataset,
    n_test_samples,
    save_dataset,
)
from modmirror.nnkit import InvalidInput


def _lstsq_probe(x_tr, y_tr, x_te, k):
    """Reference linear probe: least squares onto one-hot targets with a bias column."""
    A = np.hstack([x_tr, np.ones((len(x_tr), 1))])
    W, *_ = np.linalg.lstsq(A, np.eye(k)[y_tr], rcond=None)
    return (np.hstack([x_te, np.ones((len(x_te), 1))]) @ W).argmax(axis=1)


def test_no_ambiguity_audio_is_linearly_separable():
    spec = DatasetSpec(audio_ambiguous_pairs=(), audio_noise_sigma=0.05, visual_noise_sigma=0.05, seed=3)
    ds = generate_dataset(spec)
    pred = _lstsq_probe(ds.train.audio, ds.train.labels, ds.test.audio, spec.num_classes)
    assert np.mean(pred == ds.test.labels) > 0.95


def test_ambiguous_pair_is_indistinguishable_by_audio_only():
    spec = DatasetSpec(audio_ambiguous_pairs=((0, 1),), audio_noise_sigma=0.05, visual_noise_sigma=0.05, seed=1)
    ds = generate_dataset(spec)
    assert np.array_equal(ds.audio_centers[0], ds.audio_centers[1])
    mask = ds.test.labels <= 1
    y = ds.test.labels[mask]

    def nearest(x, centers):
        return np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)

    # audio-only Bayes classifier cannot tell 0 from 1: both posteriors are equal, so
    # any rule picks one label for the whole pair and scores the class share
    audio_pred = nearest(ds.test.audio[mask], ds.audio_centers)
    assert set(audio_pred) <= {0}
    assert np.mean(audio_pred == y) == pytest.approx(0.5, abs=0.05)
    # a fitted probe does no better than chance on the pair
    tr = ds.train.labels <= 1
    probe = _lstsq_probe(ds.train.audio[tr], ds.train.labels[tr], ds.test.audio[mask], 2)
    assert abs(np.mean(probe == y) - 0.5) < 0.15
    # with visual features the pair separates
    both = np.hstack([ds.test.audio[mask], ds.test.visual[mask]])
    centers = np.hstack([ds.audio_centers, ds.visual_centers])
    assert np.mean(nearest(both, centers) == y) > 0.99


def test_ambiguity_geometry_invariant():
    ds = generate_dataset(DatasetSpec(seed=5))
    v = ds.visual_centers
    pairs = ds.spec.audio_ambiguous_pairs
    in_pair = {frozenset(p) for p in pairs}
    others = [
        np.linalg.norm(v[i] - v[j])
        for i in range(len(v))
        for j in range(i + 1, len(v))
        if frozenset((i, j)) not in in_pair
    ]
    for a, b in pairs:
        assert np.linalg.norm(ds.audio_centers[a] - ds.audio_centers[b]) == 0.0
        assert np.linalg.norm(v[a] - v[b]) >= min(others)
    # every non-paired class keeps its own audio center
    rest = [c for c in range(10) if c not in {0, 1, 2, 3}]
    a = ds.audio_centers[rest]
    assert len({tuple(r) for r in a}) == len(rest)


def test_split_sizes_and_labels():
    spec = DatasetSpec(samples_per_class=50)
    ds = generate_dataset(spec)
    assert n_test_samples(50) == 10
    assert np.array_equal(np.bincount(ds.test.labels), np.full(10, 10))
    assert np.array_equal(np.bincount(ds.train.labels), np.full(10, 40))
    assert ds.train.audio.shape == (400, 16) and ds.test.visual.shape == (100, 16)


def test_generation_is_deterministic():
    a = generate_dataset(DatasetSpec(seed=11))
    b = generate_dataset(DatasetSpec(seed=11))
    assert dumps_dataset(a) == dumps_dataset(b)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != generate_dataset(DatasetSpec(seed=12)).fingerprint()


@pytest.mark.parametrize(
    "bad",
    [
        dict(audio_ambiguous_pairs=((0, 10),)),
        dict(audio_ambiguous_pairs=((0, 1), (1, 2))),
        dict(num_classes=1),
        dict(audio_dim=1),
        dict(audio_noise_sigma=0.0),
    ],
)
def test_invalid_specs(bad):
    with pytest.raises(InvalidInput):
        generate_dataset(DatasetSpec(**bad))


def test_serialization_roundtrip(tmp_path):
    ds = generate_dataset(DatasetSpec(samples_per_class=20, seed=2))
    save_dataset(ds, tmp_path / "d.ndjson")
    back = load_dataset(tmp_path / "d.ndjson")
    assert back.spec == ds.spec
    for s1, s2 in ((ds.train, back.train), (ds.test, back.test)):
        assert np.array_equal(s1.audio, s2.audio)
        assert np.array_equal(s1.visual, s2.visual)
        assert np.array_equal(s1.labels, s2.labels)
    assert back.fingerprint() == ds.fingerprint()
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 1 + 200
    assert lines[0].split(",")[:3] == ["split", "label", "a0"]


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ndjson"
    p.write_text('{"format": "other"}\n')
    with pytest.raises(InvalidInput):
        load_dataset(p)


# ---------------------------------------------------------------- partition


def test_partition_single_client():
    labels = np.repeat(np.arange(3), 5)
    assert dirichlet_partition(labels, 1, 0.1, 0) == [list(range(15))]


def test_partition_empty_labels():
    with pytest.raises(InvalidInput):
        dirichlet_partition([], 3, 1.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_partition_conservation(n_clients, alpha, seed):
    labels = np.random.default_rng(seed).integers(0, 7, 300)
    shards = dirichlet_partition(labels, n_clients, alpha, seed)
    assert len(shards) == n_clients
    flat = [i for s in shards for i in s]
    assert sorted(flat) == list(range(300))
    assert all(len(s) > 0 for s in shards)


def _histograms(alpha, seed):
    labels = np.repeat(np.arange(10), 1000)
    shards = dirichlet_partition(labels, 10, alpha, seed)
    return np.array([np.bincount(labels[s], minlength=10) for s in shards])


def test_partition_large_alpha_near_uniform():
    cells = np.concatenate([_histograms(1000.0, s).ravel() for s in range(5)])
    # uniform share is 100 samples per (client, class)
    assert np.mean(np.abs(cells - 100) <= 20) >= 0.95


@pytest.mark.parametrize("seed", range(5))
def test_partition_small_alpha_concentrated(seed):
    h = _histograms(0.1, seed)
    top2 = np.sort(h, axis=1)[:, -2:].sum(axis=1) / h.sum(axis=1)
    assert np.mean(top2 >= 0.6) >= 0.5


def test_partition_repairs_empty_shards():
    labels = np.zeros(20, dtype=int)
    shards = dirichlet_partition(labels, 15, 0.01, 0)
    assert all(len(s) >= 1 for s in shards)
    assert sorted(i for s in shards for i in s) == list(range(20))


def test_partition_deterministic():
    labels = np.repeat(np.arange(5), 40)
    assert dirichlet_partition(labels, 8, 0.3, 9) == dirichlet_partition(labels, 8, 0.3, 9)


# ---------------------------------------------------------------- modalities


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_assign_modalities_examples(seed):
    m = assign_modalities(10, 0.3, seed)
    assert m.count(Modality.AUDIO_ONLY) == 3 and m.count(Modality.MULTIMODAL) == 7
    assert all(x is Modality.MULTIMODAL for x in assign_modalities(10, 0.0, seed))
    assert all(x is Modality.AUDIO_ONLY for x in assign_modalities(10, 1.0, seed))


def test_audio_only_count_rounds_half_up():
    assert audio_only_count(10, 0.25) == 3
    assert audio_only_count(10, 0.35) == 4
    assert audio_only_count(20, 0.1) == 2
    assert audio_only_count(3, 0.5) == 2
    assert audio_only_count(100, 0.3) == 30


@given(st.integers(1, 200), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_assign_modalities_count(n, r, seed):
    m = assign_modalities(n, r, seed)
    assert len(m) == n
    assert abs(m.count(Modality.AUDIO_ONLY) - r * n) <= 0.5 + 1e-9


def test_assign_modalities_rejects_bad_rate():
    with pytest.raises(InvalidInput):
        assign_modalities(10, 1.5, 0)
