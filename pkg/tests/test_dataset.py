import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siger.dataset import (DataFormatError, InteractionTable, ModalityFeatureMatrix, SyntheticSpec,
                           generate_synthetic, kcore_filter, load_interactions, load_modality_features,
                           save_interactions, save_modality_features, split_cold_start, split_general)

from conftest import random_pairs


def _pairs(split):
    return {tuple(p) for part in (split.train, split.valid, split.test) for p in part.tolist()}


# --------------------------------------------------------------------------
# interactions


def test_load_counts_and_maps(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("# header\nu1\ti1\nu1\ti2\n\nu2\ti1\n")
    table = load_interactions(path)
    assert (table.n_users, table.n_items, len(table)) == (2, 2, 3)
    assert (tmp_path / "inter.users.tsv").read_text() == "u1\t0\nu2\t1\n"
    assert table.item_tokens == ("i1", "i2")


def test_duplicates_collapse(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("u1\ti1\nu1\ti1\n")
    assert len(load_interactions(path)) == 1


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("u1\ti1\nu1\n")
    with pytest.raises(DataFormatError, match=r"inter.tsv:2"):
        load_interactions(path)


def test_empty_file(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("# nothing\n")
    with pytest.raises(DataFormatError, match="no interactions"):
        load_interactions(path)


def test_sidecar_maps_are_reused(tmp_path):
    path = tmp_path / "inter.tsv"
    (tmp_path / "inter.users.tsv").write_text("b\t0\na\t1\n")
    (tmp_path / "inter.items.tsv").write_text("x\t0\n")
    path.write_text("a\tx\n")
    table = load_interactions(path)
    assert table.pairs.tolist() == [[1, 0]] and table.n_users == 2


def test_interactions_round_trip(tmp_path, synthetic):
    table = synthetic[0]
    save_interactions(table, tmp_path / "a.tsv")
    again = load_interactions(tmp_path / "a.tsv")
    assert np.array_equal(again.pairs, table.pairs)
    assert again.user_tokens == table.user_tokens


def test_table_invariants():
    with pytest.raises(ValueError, match="duplicate"):
        InteractionTable(2, 2, [[0, 0], [0, 0]])
    with pytest.raises(ValueError, match="range"):
        InteractionTable(1, 1, [[0, 1]])
    with pytest.raises(ValueError):
        InteractionTable(1, 1, np.empty((0, 2)))


# --------------------------------------------------------------------------
# features


def test_text_features(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("2 3\n1 2 3\n4 5 6\n")
    m = load_modality_features(path, "visual")
    assert m.modality == "v" and m.data.shape == (2, 3) and m.data[1, 2] == 6.0


def test_text_features_truncated(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("2 3\n1 2 3\n4 5\n")
    with pytest.raises(DataFormatError, match="truncated"):
        load_modality_features(path, "t")


def test_nan_names_row(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("2 2\n1 2\nnan 3\n")
    with pytest.raises(DataFormatError, match="row 1"):
        load_modality_features(path, "t")


@pytest.mark.parametrize("binary", [True, False])
def test_feature_round_trip(tmp_path, binary):
    rng = np.random.default_rng(0)
    m = ModalityFeatureMatrix("t", rng.standard_normal((7, 5)).astype(np.float32))
    first, second = tmp_path / "a", tmp_path / "b"
    save_modality_features(m, first, binary)
    once = load_modality_features(first, "t")
    save_modality_features(once, second, binary)
    twice = load_modality_features(second, "t")
    assert np.array_equal(once.data, m.data) and np.array_equal(twice.data, once.data)
    assert first.read_bytes() == second.read_bytes()


def test_binary_truncated(tmp_path):
    path = tmp_path / "f.bin"
    path.write_bytes(b"SIGER-FEAT 1 2 2\n" + np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(DataFormatError, match="expected 4"):
        load_modality_features(path, "v")


# --------------------------------------------------------------------------
# k-core


def _peel(pairs, k):
    alive = set(map(tuple, pairs))
    while True:
        ud, idg = {}, {}
        for u, i in alive:
            ud[u] = ud.get(u, 0) + 1
            idg[i] = idg.get(i, 0) + 1
        keep = {(u, i) for u, i in alive if ud[u] >= k and idg[i] >= k}
        if keep == alive:
            return keep
        alive = keep


def test_kcore_chain():
    table = InteractionTable(2, 2, [[0, 0], [1, 0], [1, 1]])
    assert _peel(table.pairs.tolist(), 2) == set()
    with pytest.raises(ValueError, match="k-core empty"):
        kcore_filter(table, 2)


def test_kcore_identity_at_one(synthetic):
    table = synthetic[0]
    assert np.array_equal(kcore_filter(table, 1).pairs, table.pairs)


def test_kcore_too_large():
    with pytest.raises(ValueError, match="k-core empty"):
        kcore_filter(InteractionTable(3, 3, [[0, 0], [1, 1], [2, 2]]), 100)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_kcore_matches_peeling_oracle(seed, k):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, 8, 9, density=0.4)
    table = InteractionTable(8, 9, pairs)
    survivors = _peel(pairs.tolist(), k)
    if not survivors:
        with pytest.raises(ValueError):
            kcore_filter(table, k)
        return
    out = kcore_filter(table, k)
    assert len(out) == len(survivors)
    assert out.user_degrees().min() >= k and out.item_degrees().min() >= k
    users = sorted({u for u, _ in survivors})
    items = sorted({i for _, i in survivors})
    remapped = {(users.index(u), items.index(i)) for u, i in survivors}
    assert set(map(tuple, out.pairs.tolist())) == remapped


# --------------------------------------------------------------------------
# splits


def test_general_split_proportions():
    table = InteractionTable(2, 10, [[0, i] for i in range(10)] + [[1, 3], [1, 4]])
    s = split_general(table, seed=1)
    assert [(s.part(p)[:, 0] == 0).sum() for p in ("train", "valid", "test")] == [8, 1, 1]
    assert (s.train[:, 0] == 1).sum() == 2


def test_general_split_deterministic(synthetic):
    a, b = split_general(synthetic[0], seed=4), split_general(synthetic[0], seed=4)
    assert all(np.array_equal(a.part(p), b.part(p)) for p in ("train", "valid", "test"))
    c = split_general(synthetic[0], seed=5)
    assert not np.array_equal(a.test, c.test)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_split_partition_property(seed):
    rng = np.random.default_rng(seed)
    table = InteractionTable(12, 15, random_pairs(rng, 12, 15, density=0.3))
    s = split_general(table, seed=seed)
    parts = [set(map(tuple, s.part(p).tolist())) for p in ("train", "valid", "test")]
    assert sum(map(len, parts)) == len(table) and _pairs(s) == set(map(tuple, table.pairs.tolist()))
    for a, b in itertools.combinations(parts, 2):
        assert not a & b
    train_users = set(s.train[:, 0].tolist())
    assert all(u in train_users for u in np.flatnonzero(table.user_degrees() >= 3))


def test_cold_start_single_item():
    pairs = [[u, 0] for u in range(4)] + [[u, i] for u in range(4) for i in range(1, 8)]
    table = InteractionTable(4, 8, pairs)
    s = split_cold_start(table, item_fraction=0.1, seed=0)
    assert len(s.cold_items) == 1
    cold = int(s.cold_items[0])
    assert s.test.tolist() == [[u, cold] for u in range(4)]


def test_cold_start_invariants(synthetic):
    table = synthetic[0]
    s = split_cold_start(table, 0.2, seed=3)
    assert len(s.cold_items) == 20
    assert not np.isin(s.train[:, 1], s.cold_items).any()
    assert np.isin(s.cold_items, s.test[:, 1]).all()
    assert _pairs(s) == set(map(tuple, table.pairs.tolist()))
    assert np.array_equal(split_cold_start(table, 0.2, seed=3).cold_items, s.cold_items)


def test_cold_start_dropped_users_counted():
    table = InteractionTable(2, 5, [[0, 0], [1, 1], [1, 2], [1, 3], [1, 4]])
    # item 0 is user 0's only interaction, so whenever it is cold user 0 is dropped
    for seed in range(20):
        s = split_cold_start(table, 0.2, seed=seed)
        assert s.dropped_users == int(0 in s.cold_items.tolist())


# --------------------------------------------------------------------------
# synthetic data


def test_synthetic_counts_and_determinism():
    spec = SyntheticSpec(n_users=20, interactions_per_user=5)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    assert len(a[0]) == 100
    assert np.array_equal(a[0].pairs, b[0].pairs)
    assert np.array_equal(a[1].data, b[1].data) and np.array_equal(a[2].data, b[2].data)


def test_synthetic_clusters_visible_in_features():
    table, vis, txt, cluster = generate_synthetic(SyntheticSpec(noise_std=0.0), return_clusters=True)
    for feats in (vis, txt):
        x = feats.data / np.linalg.norm(feats.data, axis=1, keepdims=True)
        cos = x @ x.T
        same = cluster[:, None] == cluster[None, :]
        off = ~np.eye(len(cluster), dtype=bool)
        assert cos[same & off].mean() > cos[~same].mean()


def test_synthetic_modalities_use_independent_noise():
    _, vis, txt = generate_synthetic(SyntheticSpec(feature_dims=(16, 16)))
    assert not np.allclose(vis.data, txt.data)
