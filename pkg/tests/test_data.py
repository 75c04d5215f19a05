import struct

import numpy as np
import pytest

from fedsim.data import (ClientDataset, DomainSpec, IdxArray, PartitionPlan,
                         SyntheticConfig, class_patterns, domain_transform,
                         gen_synthetic, pair_idx, parse_idx, partition,
                         rotation_matrix)
from fedsim.errors import (BadMagic, CountMismatch, EmptyResult, InvalidConfig,
                           Truncated, UnknownDomain)

from idx_fixtures import serialize_idx_images, serialize_idx_labels


def two_domain_config(**kw):
    defaults = dict(
        num_classes=3, input_dim=8,
        domains=(DomainSpec("a"), DomainSpec("b", rotation_deg=45.0)),
        samples_per_class_per_domain=60, test_fraction=1.0 / 3.0, seed=5)
    defaults.update(kw)
    return SyntheticConfig(**defaults)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        two_domain_config(num_classes=1)
    with pytest.raises(InvalidConfig):
        two_domain_config(domains=(DomainSpec("a"),))
    with pytest.raises(InvalidConfig):
        two_domain_config(test_fraction=0.0)
    with pytest.raises(InvalidConfig):
        DomainSpec("x", scale=0.0)


def test_identity_domains_share_class_means():
    cfg = two_domain_config(
        domains=(DomainSpec("a", noise_level=0.0), DomainSpec("b", noise_level=0.0)))
    data = gen_synthetic(cfg)
    for m in range(cfg.num_classes):
        a = data["a"].train_x[data["a"].train_y == m].mean(axis=0)
        b = data["b"].train_x[data["b"].train_y == m].mean(axis=0)
        assert np.max(np.abs(a - b)) < 1e-12


def test_generation_deterministic():
    cfg = two_domain_config()
    d1, d2 = gen_synthetic(cfg), gen_synthetic(cfg)
    for name in ("a", "b"):
        assert d1[name].train_x.tobytes() == d2[name].train_x.tobytes()
        assert d1[name].test_x.tobytes() == d2[name].test_x.tobytes()


def test_rotated_domain_mean_matches_transform():
    sigma = 0.4
    cfg = two_domain_config(
        samples_per_class_per_domain=1200,
        domains=(DomainSpec("a", noise_level=sigma),
                 DomainSpec("b", rotation_deg=45.0, noise_level=sigma)))
    data = gen_synthetic(cfg)
    base = class_patterns(cfg)
    lin_b, off_b = domain_transform(cfg.domains[1], cfg.input_dim)
    n_train = len(data["b"].train_x) // cfg.num_classes
    bound = 4.0 * sigma / np.sqrt(n_train)
    for m in range(cfg.num_classes):
        emp = data["b"].train_x[data["b"].train_y == m].mean(axis=0)
        want = lin_b @ base[m] + off_b
        assert np.max(np.abs(emp - want)) < bound


def test_rotation_matrix_orthogonal():
    r = rotation_matrix(9, 67.0)
    assert np.max(np.abs(r @ r.T - np.eye(9))) < 1e-12


def test_label_sets_and_split_sizes():
    cfg = two_domain_config()
    data = gen_synthetic(cfg)
    labels = set(range(cfg.num_classes))
    for dd in data.values():
        assert set(np.unique(dd.train_y)) == labels
        assert set(np.unique(dd.test_y)) == labels
        per_class = cfg.samples_per_class_per_domain
        assert len(dd.test_y) == cfg.num_classes * round(per_class / 3)
        assert len(dd.train_y) + len(dd.test_y) == cfg.num_classes * per_class


def test_train_test_disjoint():
    cfg = two_domain_config(domains=(
        DomainSpec("a", noise_level=0.3), DomainSpec("b", noise_level=0.3)))
    dd = gen_synthetic(cfg)["a"]
    train_rows = {row.tobytes() for row in dd.train_x}
    assert all(row.tobytes() not in train_rows for row in dd.test_x)


# --- partitioning ---

def test_partition_full_fraction():
    cfg = two_domain_config()
    data = gen_synthetic(cfg)
    plan = PartitionPlan({0: ("a", 1.0), 1: ("b", 1.0)}, seed=1)
    clients = partition(data, plan)
    assert len(clients[0]) == len(data["a"].train_x)
    assert np.array_equal(np.sort(clients[0].y), np.sort(data["a"].train_y))


def test_partition_deterministic():
    cfg = two_domain_config()
    data = gen_synthetic(cfg)
    plan = PartitionPlan({0: ("a", 0.4), 1: ("a", 0.4)}, seed=9)
    a = partition(data, plan)
    b = partition(data, plan)
    for ca, cb in zip(a, b):
        assert ca.x.tobytes() == cb.x.tobytes()


def test_partition_fraction_floor_min_one():
    cfg = two_domain_config(samples_per_class_per_domain=750, num_classes=2)
    data = gen_synthetic(cfg)
    n_train = len(data["a"].train_x)
    assert n_train == 1000
    plan = PartitionPlan({0: ("a", 0.2)}, seed=0)
    assert len(partition(data, plan)[0]) == 200
    tiny = PartitionPlan({0: ("a", 1e-6)}, seed=0)
    assert len(partition(data, tiny)[0]) == 1


def test_partition_unknown_domain():
    cfg = two_domain_config()
    data = gen_synthetic(cfg)
    with pytest.raises(UnknownDomain):
        partition(data, PartitionPlan({0: ("zz", 0.5)}))


def test_partition_disjoint_mode():
    cfg = two_domain_config()
    data = gen_synthetic(cfg)
    plan = PartitionPlan({0: ("a", 0.4), 1: ("a", 0.4)}, seed=2, mode="disjoint")
    c0, c1 = partition(data, plan)
    rows0 = {r.tobytes() for r in c0.x}
    assert all(r.tobytes() not in rows0 for r in c1.x)
    over = PartitionPlan({0: ("a", 0.7), 1: ("a", 0.7)}, seed=2, mode="disjoint")
    with pytest.raises(EmptyResult):
        partition(data, over)


def test_client_dataset_class_index():
    ds = ClientDataset(0, "a", np.zeros((5, 2)),
                       np.array([0, 1, 0, 2, 1]))
    assert sum(len(v) for v in ds.class_index.values()) == len(ds)
    assert list(ds.class_index[0]) == [0, 2]


def test_client_dataset_rejects_empty():
    with pytest.raises(EmptyResult):
        ClientDataset(0, "a", np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


# --- IDX ---

def test_parse_idx_hand_built_buffer():
    imgs = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    parsed = parse_idx(serialize_idx_images(imgs))
    assert parsed.kind == "images"
    assert parsed.array.shape == (2, 3, 3)
    assert np.array_equal(parsed.array, imgs)


def test_parse_idx_labels():
    labs = np.array([7, 1, 0], dtype=np.uint8)
    parsed = parse_idx(serialize_idx_labels(labs))
    assert parsed.kind == "labels"
    assert np.array_equal(parsed.array, labs)


def test_parse_idx_empty_stream():
    with pytest.raises(Truncated):
        parse_idx(b"")


def test_parse_idx_wrong_magic():
    with pytest.raises(BadMagic):
        parse_idx(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)


def test_parse_idx_truncated_pixels():
    imgs = np.ones((2, 4, 4), dtype=np.uint8)
    buf = serialize_idx_images(imgs)
    with pytest.raises(Truncated):
        parse_idx(buf[:-3])


def test_pair_idx_count_mismatch():
    imgs = parse_idx(serialize_idx_images(np.zeros((2, 2, 2), dtype=np.uint8)))
    labs = parse_idx(serialize_idx_labels(np.zeros(3, dtype=np.uint8)))
    with pytest.raises(CountMismatch):
        pair_idx(imgs, labs)


def test_idx_roundtrip():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 6), dtype=np.uint8)
    labs = rng.integers(0, 10, size=5, dtype=np.uint8)
    x, y = pair_idx(parse_idx(serialize_idx_images(imgs)),
                    parse_idx(serialize_idx_labels(labs)))
    assert np.array_equal(x, imgs) and np.array_equal(y, labs)
