"""Feature-bag persistence, synthetic dataset generation, and splitting.

The on-disk bag format (CCFB) is a little-endian binary container:

    magic "CCFB" | u16 version=1 | u32 N | u32 D_f | u32 rows_total |
    u32 cols_total | u8 label | u8-length-prefixed bag_id (UTF-8) |
    u8-length-prefixed patient_id | N x (u32 row, u32 col) |
    N*D_f float32 row-major

Synthetic bags carry the supervision signal in a handful of "witness"
tokens drawn around a class-specific mean; everything else is standard
normal noise. This gives a desk-scale task whose solvability can be
certified independently of any trained model.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .posenc import GridCoord

CCFB_MAGIC = b"CCFB"
CCFB_VERSION = 1


@dataclass
class FeatureBag:
    """All feature tokens of one slide, with grid coordinates and label."""

    bag_id: str
    patient_id: str
    label: int
    tokens: np.ndarray  # N x D_f float32
    rows: np.ndarray  # N, grid row per token
    cols: np.ndarray  # N, grid col per token
    rows_total: int
    cols_total: int

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.validate()

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def d_feature(self):
        return self.tokens.shape[1]

    def coords(self):
        return [
            GridCoord(int(r), int(c), self.rows_total, self.cols_total)
            for r, c in zip(self.rows, self.cols)
        ]

    def validate(self):
        n = self.tokens.shape[0]
        if n < 1:
            raise DataError(f"bag {self.bag_id!r} is empty")
        if self.rows.shape != (n,) or self.cols.shape != (n,):
            raise DataError(f"bag {self.bag_id!r}: coordinate count does not match token count")
        if (self.rows < 0).any() or (self.rows >= self.rows_total).any():
            raise DataError(f"bag {self.bag_id!r}: row index outside grid")
        if (self.cols < 0).any() or (self.cols >= self.cols_total).any():
            raise DataError(f"bag {self.bag_id!r}: col index outside grid")
        flat = self.rows * self.cols_total + self.cols
        if np.unique(flat).size != n:
            raise DataError(f"bag {self.bag_id!r}: duplicate coordinates")


def _encode_id(s):
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise DataError(f"identifier longer than 255 UTF-8 bytes: {s[:32]!r}...")
    return struct.pack("<B", len(raw)) + raw


def write_bag(bag, path):
    buf = bytearray()
    buf += CCFB_MAGIC
    buf += struct.pack("<H", CCFB_VERSION)
    buf += struct.pack("<IIII", bag.n_tokens, bag.d_feature, bag.rows_total, bag.cols_total)
    if not 0 <= bag.label <= 255:
        raise DataError(f"label {bag.label} does not fit in one byte")
    buf += struct.pack("<B", bag.label)
    buf += _encode_id(bag.bag_id)
    buf += _encode_id(bag.patient_id)
    coords = np.empty((bag.n_tokens, 2), dtype="<u4")
    coords[:, 0] = bag.rows
    coords[:, 1] = bag.cols
    buf += coords.tobytes()
    buf += np.ascontiguousarray(bag.tokens, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated file while reading {what}", offset=self.offset)
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_bag(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != CCFB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != CCFB_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    n, d_f, rows_total, cols_total = r.unpack("<IIII", "header extents")
    (label,) = r.unpack("<B", "label")
    (id_len,) = r.unpack("<B", "bag_id length")
    bag_id = r.take(id_len, "bag_id").decode("utf-8")
    (pid_len,) = r.unpack("<B", "patient_id length")
    patient_id = r.take(pid_len, "patient_id").decode("utf-8")
    coords = np.frombuffer(r.take(8 * n, "coordinates"), dtype="<u4").reshape(n, 2)
    tokens = np.frombuffer(r.take(4 * n * d_f, "tokens"), dtype="<f4").reshape(n, d_f)
    if r.offset != len(blob):
        raise FormatError("trailing bytes after token payload", offset=r.offset)
    return FeatureBag(
        bag_id=bag_id,
        patient_id=patient_id,
        label=label,
        tokens=tokens.copy(),
        rows=coords[:, 0].astype(np.int64),
        cols=coords[:, 1].astype(np.int64),
        rows_total=rows_total,
        cols_total=cols_total,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """An in-memory bag collection, optionally with witness bookkeeping."""

    bags: list
    witness_indices: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {b.bag_id: b for b in self.bags}
        if len(self._by_id) != len(self.bags):
            raise DataError("duplicate bag ids in dataset")

    def __len__(self):
        return len(self.bags)

    def by_id(self, bag_id):
        return self._by_id[bag_id]

    def bag_ids(self):
        return [b.bag_id for b in self.bags]


def generate_synthetic(
    n_bags,
    n_per_bag_range=(20, 50),
    d_feature=64,
    witness_shift=4.0,
    witness_count_range=(2, 5),
    grid=(16, 16),
    n_classes=2,
    seed=0,
):
    """Deterministic synthetic MIL dataset.

    Every class-c bag carries witness tokens drawn from N(mu_c, I) where
    mu_c = witness_shift * e_c (the c-th standard basis direction);
    background tokens are standard normal. Coordinates are sampled
    without replacement from the grid; patients own 1-3 consecutive bags.
    """
    rows_total, cols_total = grid
    n_min, n_max = n_per_bag_range
    if n_min < 1 or n_max < n_min:
        raise ConfigError(f"bad bag-size range {n_per_bag_range}")
    if rows_total * cols_total < n_max:
        raise ConfigError(f"grid {grid} has fewer cells than the largest bag ({n_max})")
    if n_classes < 2 or n_classes > d_feature:
        raise ConfigError(f"n_classes must be in [2, d_feature], got {n_classes}")
    w_min, w_max = witness_count_range
    if w_min < 1 or w_max < w_min or w_max > n_min:
        raise ConfigError(f"bad witness count range {witness_count_range} for bag sizes {n_per_bag_range}")

    rng = np.random.default_rng(seed)
    bags = []
    witness_indices = {}
    patient_idx = 0
    bags_left_for_patient = 0
    for i in range(n_bags):
        if bags_left_for_patient == 0:
            patient_idx += 1
            bags_left_for_patient = int(rng.integers(1, 4))
        bags_left_for_patient -= 1
        label = i % n_classes
        n = int(rng.integers(n_min, n_max + 1))
        tokens = rng.standard_normal((n, d_feature))
        n_wit = int(rng.integers(w_min, w_max + 1))
        wit_idx = rng.choice(n, size=n_wit, replace=False)
        tokens[wit_idx, label] += witness_shift
        cells = rng.choice(rows_total * cols_total, size=n, replace=False)
        bag = FeatureBag(
            bag_id=f"bag{i:04d}",
            patient_id=f"patient{patient_idx:04d}",
            label=label,
            tokens=tokens.astype(np.float32),
            rows=cells // cols_total,
            cols=cells % cols_total,
            rows_total=rows_total,
            cols_total=cols_total,
        )
        bags.append(bag)
        witness_indices[bag.bag_id] = np.sort(wit_idx)
    return Dataset(bags=bags, witness_indices=witness_indices)


def write_manifest(dataset, paths, manifest_path):
    """CSV of (bag_id, patient_id, label, path); paths maps bag_id -> file."""
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "patient_id", "label", "path"])
        for bag in dataset.bags:
            writer.writerow([bag.bag_id, bag.patient_id, bag.label, paths[bag.bag_id]])


def load_manifest(manifest_path):
    """Read every bag listed in a manifest CSV back into a Dataset.

    Relative paths resolve against the manifest's own directory, so a
    dataset directory can be moved wholesale.
    """
    import os

    base = os.path.dirname(os.path.abspath(manifest_path))
    bags = []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            path = row["path"]
            if not os.path.isabs(path):
                path = os.path.join(base, path)
            bags.append(read_bag(path))
    return Dataset(bags=bags)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class FoldSplit:
    train_ids: list
    val_ids: list
    test_ids: list


@dataclass
class SplitPlan:
    k: int
    folds: list  # of FoldSplit
    seed: int

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "subset", "bag_id"])
            for i, fold in enumerate(self.folds):
                for subset, ids in (("train", fold.train_ids), ("val", fold.val_ids), ("test", fold.test_ids)):
                    for bag_id in ids:
                        writer.writerow([i, subset, bag_id])

    @classmethod
    def read_csv(cls, path, seed=0):
        folds = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fold = folds.setdefault(int(row["fold"]), {"train": [], "val": [], "test": []})
                fold[row["subset"]].append(row["bag_id"])
        ordered = [folds[i] for i in sorted(folds)]
        return cls(
            k=len(ordered),
            folds=[FoldSplit(f["train"], f["val"], f["test"]) for f in ordered],
            seed=seed,
        )


def patient_grouped_kfold(bags, k, val_fraction=0.2, seed=0):
    """Deal patients into k test groups; split the rest into train/val.

    All bags of one patient land in exactly one subset of one fold. With
    k=4 and val_fraction=0.2 the proportions target 60/15/25.
    """
    by_patient = {}
    for bag in bags:
        by_patient.setdefault(bag.patient_id, []).append(bag.bag_id)
    patients = sorted(by_patient)
    if k > len(patients):
        raise ConfigError(f"cannot make {k} folds from {len(patients)} patients")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    test_groups = [order[i::k] for i in range(k)]

    folds = []
    for i in range(k):
        test_patients = set(test_groups[i])
        test_ids = [bid for p in test_groups[i] for bid in by_patient[p]]
        rest = [p for p in order if p not in test_patients]
        rest_bag_count = sum(len(by_patient[p]) for p in rest)
        val_target = round(val_fraction * rest_bag_count)
        fold_rng = np.random.default_rng(seed + 7919 * (i + 1))
        rest_shuffled = [rest[j] for j in fold_rng.permutation(len(rest))]
        val_ids = []
        train_ids = []
        for p in rest_shuffled:
            if len(val_ids) < val_target:
                val_ids.extend(by_patient[p])
            else:
                train_ids.extend(by_patient[p])
        folds.append(FoldSplit(train_ids=train_ids, val_ids=val_ids, test_ids=test_ids))
    return SplitPlan(k=k, folds=folds, seed=seed)


def subsample_fraction(train_ids, fraction, seed):
    """Seeded shuffle + prefix take, so subsets nest across fractions."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    train_ids = list(train_ids)
    if fraction == 1:
        return train_ids
    rng = np.random.default_rng(seed)
    order = [train_ids[i] for i in rng.permutation(len(train_ids))]
    keep = math.ceil(fraction * len(train_ids))
    return order[:keep]
