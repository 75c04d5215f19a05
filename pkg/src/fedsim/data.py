"""Domain-heterogeneous data provisioning.

The synthetic generator builds one Gaussian pattern per class and renders
it into each domain through that domain's affine map (paired-coordinate
rotation, scale, offset) plus Gaussian noise, so every domain shares the
label set while the feature distributions diverge.  An IDX reader covers
digit-style binary corpora; the partitioner hands each client a seeded
subset of one domain's training split.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagic, CountMismatch, EmptyResult, InvalidConfig,
                     Truncated, UnknownDomain)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class DomainSpec:
    name: str
    rotation_deg: float = 0.0
    scale: float = 1.0
    offset: float | tuple[float, ...] = 0.0
    noise_level: float = 0.5

    def __post_init__(self):
        if self.scale <= 0.0:
            raise InvalidConfig(f"domain {self.name}: scale must be positive")
        if self.noise_level < 0.0:
            raise InvalidConfig(f"domain {self.name}: negative noise level")


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    input_dim: int = 32
    domains: tuple[DomainSpec, ...] = ()
    samples_per_class_per_domain: int = 150
    test_fraction: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfig("need at least 2 classes")
        if self.input_dim < 1:
            raise InvalidConfig("input_dim must be positive")
        if len(self.domains) < 2:
            raise InvalidConfig("need at least 2 domains")
        if len({d.name for d in self.domains}) != len(self.domains):
            raise InvalidConfig("domain names must be unique")
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidConfig("test_fraction must lie in (0, 1)")
        if self.samples_per_class_per_domain < 2:
            raise InvalidConfig("need at least 2 samples per class per domain")


@dataclass(frozen=True)
class DomainData:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass(frozen=True)
class PartitionPlan:
    """client id -> (domain name, sample fraction)."""
    assignments: dict[int, tuple[str, float]]
    seed: int = 0
    mode: str = "independent"  # or "disjoint"

    def __post_init__(self):
        if not self.assignments:
            raise InvalidConfig("partition plan has no clients")
        for cid, (_, frac) in self.assignments.items():
            if not 0.0 < frac <= 1.0:
                raise InvalidConfig(f"client {cid}: fraction must be in (0, 1]")
        if self.mode not in ("independent", "disjoint"):
            raise InvalidConfig(f"unknown partition mode: {self.mode}")


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    domain: str
    x: np.ndarray
    y: np.ndarray
    class_index: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) == 0:
            raise EmptyResult(f"client {self.client_id} has no samples")
        if not self.class_index:
            idx = {}
            for cls in np.unique(self.y):
                idx[int(cls)] = np.flatnonzero(self.y == cls)
            object.__setattr__(self, "class_index", idx)

    def __len__(self) -> int:
        return len(self.x)


def rotation_matrix(dim: int, degrees: float) -> np.ndarray:
    """Orthogonal map rotating each consecutive coordinate pair by the angle."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.eye(dim)
    for i in range(0, dim - 1, 2):
        rot[i, i], rot[i, i + 1] = c, -s
        rot[i + 1, i], rot[i + 1, i + 1] = s, c
    return rot


def class_patterns(config: SyntheticConfig) -> np.ndarray:
    """Base Gaussian mean vector per class, shared by all domains."""
    rng = np.random.default_rng([config.seed, 0xBA5E])
    return rng.normal(0.0, 1.0, size=(config.num_classes, config.input_dim))


def domain_transform(spec: DomainSpec, dim: int) -> tuple[np.ndarray, np.ndarray]:
    rot = rotation_matrix(dim, spec.rotation_deg)
    if isinstance(spec.offset, (int, float)):
        offset = np.full(dim, float(spec.offset))
    else:
        offset = np.asarray(spec.offset, dtype=np.float64)
        if offset.shape != (dim,):
            raise InvalidConfig(
                f"domain {spec.name}: offset length {offset.shape} != {dim}")
    return rot * spec.scale, offset


def gen_synthetic(config: SyntheticConfig) -> dict[str, DomainData]:
    """Deterministic per-seed train/test sets for every domain."""
    base = class_patterns(config)
    n = config.samples_per_class_per_domain
    n_test = int(round(n * config.test_fraction))
    n_test = min(max(n_test, 1), n - 1)

    out: dict[str, DomainData] = {}
    for di, spec in enumerate(config.domains):
        lin, offset = domain_transform(spec, config.input_dim)
        train_x, train_y, test_x, test_y = [], [], [], []
        for m in range(config.num_classes):
            rng = np.random.default_rng([config.seed, di, m])
            centre = lin @ base[m] + offset
            draws = centre + spec.noise_level * rng.normal(size=(n, config.input_dim))
            test_x.append(draws[:n_test])
            train_x.append(draws[n_test:])
            test_y.append(np.full(n_test, m, dtype=np.int64))
            train_y.append(np.full(n - n_test, m, dtype=np.int64))
        out[spec.name] = DomainData(
            spec.name,
            np.concatenate(train_x), np.concatenate(train_y),
            np.concatenate(test_x), np.concatenate(test_y))
    return out


def partition(domain_data: dict[str, DomainData],
              plan: PartitionPlan) -> list[ClientDataset]:
    """Seeded per-client subsets of each client's domain training split."""
    clients: list[ClientDataset] = []
    cursors: dict[str, int] = {}
    perms: dict[str, np.ndarray] = {}
    for cid in sorted(plan.assignments):
        domain, fraction = plan.assignments[cid]
        if domain not in domain_data:
            raise UnknownDomain(f"client {cid} assigned to unknown domain "
                                f"{domain!r}")
        dd = domain_data[domain]
        n = len(dd.train_x)
        k = max(1, int(n * fraction))
        if plan.mode == "independent":
            rng = np.random.default_rng([plan.seed, cid])
            idx = np.sort(rng.choice(n, size=k, replace=False))
        else:
            if domain not in perms:
                drng = np.random.default_rng(
                    [plan.seed, zlib.crc32(domain.encode())])
                perms[domain] = drng.permutation(n)
                cursors[domain] = 0
            start = cursors[domain]
            if start + k > n:
                raise EmptyResult(
                    f"domain {domain!r} exhausted in disjoint mode at client {cid}")
            idx = np.sort(perms[domain][start:start + k])
            cursors[domain] = start + k
        clients.append(ClientDataset(cid, domain, dd.train_x[idx].copy(),
                                     dd.train_y[idx].copy()))
    return clients


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdxArray:
    kind: str  # "images" or "labels"
    array: np.ndarray


def parse_idx(data: bytes) -> IdxArray:
    """Parse one IDX byte stream (big-endian, magic-tagged)."""
    if len(data) < 4:
        raise Truncated(f"IDX header needs 4 bytes, have {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise Truncated("IDX image header needs 16 bytes")
        count, rows, cols = struct.unpack(">III", data[4:16])
        need = 16 + count * rows * cols
        if len(data) < need:
            raise Truncated(f"IDX images need {need} bytes, have {len(data)}")
        if len(data) > need:
            raise Truncated(f"IDX images carry {len(data) - need} extra bytes")
        arr = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols,
                            offset=16).reshape(count, rows, cols)
        return IdxArray("images", arr.copy())
    if magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise Truncated("IDX label header needs 8 bytes")
        (count,) = struct.unpack(">I", data[4:8])
        if len(data) < 8 + count:
            raise Truncated(f"IDX labels need {8 + count} bytes, have {len(data)}")
        if len(data) > 8 + count:
            raise Truncated(f"IDX labels carry {len(data) - 8 - count} extra bytes")
        return IdxArray("labels",
                        np.frombuffer(data, dtype=np.uint8, count=count,
                                      offset=8).copy())
    raise BadMagic(f"unknown IDX magic 0x{magic:08x}")


def pair_idx(images: IdxArray, labels: IdxArray) -> tuple[np.ndarray, np.ndarray]:
    """Pair image and label arrays, checking the sample counts agree."""
    if images.kind != "images" or labels.kind != "labels":
        raise BadMagic(f"expected images+labels, got {images.kind}+{labels.kind}")
    if len(images.array) != len(labels.array):
        raise CountMismatch(f"{len(images.array)} images vs "
                            f"{len(labels.array)} labels")
    return images.array, labels.array


def load_idx_domain(name: str, train_images: str, train_labels: str,
                    test_images: str, test_labels: str) -> DomainData:
    """Read an IDX file quadruple into normalized (H, W, 1) float samples."""
    def load_pair(img_path, lab_path):
        with open(img_path, "rb") as f:
            imgs = parse_idx(f.read())
        with open(lab_path, "rb") as f:
            labs = parse_idx(f.read())
        x, y = pair_idx(imgs, labs)
        x = (x.astype(np.float64) / 255.0)[..., np.newaxis]
        return x, y.astype(np.int64)

    tr_x, tr_y = load_pair(train_images, train_labels)
    te_x, te_y = load_pair(test_images, test_labels)
    return DomainData(name, tr_x, tr_y, te_x, te_y)
