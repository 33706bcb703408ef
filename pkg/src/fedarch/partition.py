"""Client shards for IID and label-skewed federations, plus the mean pairwise
Kolmogorov-Smirnov skew measure.

Shards hold indices into one :class:`~fedarch.data.Dataset`. Train indices
come from the dataset's train split and are stored sorted; per-client
validation indices are drawn from the dataset's val split with the client's
own label mix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset

PRESETS = ("iid", "split2", "split3", "edge_case")
VAL_FRACTION = 0.10


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    label_histogram: np.ndarray

    @property
    def n(self) -> int:
        return int(self.train_indices.size)


@dataclass(frozen=True)
class PartitionReport:
    shards: tuple[ClientShard, ...]
    mean_ks: float
    pairwise_ks: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.shards)


def _histogram(dataset: Dataset, indices: np.ndarray) -> np.ndarray:
    return np.bincount(dataset.labels[indices], minlength=dataset.num_classes).astype(np.int64)


def ks_statistic(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Max absolute difference between two label CDFs over ascending class ids."""
    ta, tb = hist_a.sum(), hist_b.sum()
    if ta <= 0 or tb <= 0:
        raise PartitionError("KS statistic needs two non-empty label histograms")
    cdf_a = np.cumsum(hist_a) / ta
    cdf_b = np.cumsum(hist_b) / tb
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_pairwise_mean(shards: Sequence[ClientShard]) -> tuple[float, np.ndarray]:
    """Mean KS over unordered client pairs and the full symmetric matrix.

    Fewer than two shards give a mean of 0 by convention.
    """
    k = len(shards)
    matrix = np.zeros((k, k))
    if k < 2:
        return 0.0, matrix
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            ks = ks_statistic(shards[i].label_histogram, shards[j].label_histogram)
            matrix[i, j] = matrix[j, i] = ks
            total += ks
    return total / (k * (k - 1) / 2), matrix


def _report(shards: list[ClientShard]) -> PartitionReport:
    mean_ks, matrix = ks_pairwise_mean(shards)
    return PartitionReport(tuple(shards), mean_ks, matrix)


def _carve_val(dataset: Dataset, train_lists: list[np.ndarray], seed: int) -> list[np.ndarray]:
    """Per-client val sets from the global val split, matching each client's
    label mix at 10% of its train size (min 1). Drawn without replacement
    across clients while the pool lasts."""
    rng = np.random.default_rng([seed, 17])
    val = dataset.val_indices
    pools = {c: list(rng.permutation(val[dataset.labels[val] == c])) for c in range(dataset.num_classes)}
    out = []
    for idx in train_lists:
        hist = _histogram(dataset, idx)
        if hist.sum() == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        want = max(1, int(round(VAL_FRACTION * hist.sum())))
        # largest-remainder allocation of `want` over the client's classes
        exact = want * hist / hist.sum()
        counts = np.floor(exact).astype(int)
        for c in np.argsort(-(exact - counts), kind="stable")[: want - counts.sum()]:
            counts[c] += 1
        chosen = []
        for c in range(dataset.num_classes):
            take = min(counts[c], len(pools[c]))
            chosen.extend(pools[c][:take])
            del pools[c][:take]
        out.append(np.sort(np.asarray(chosen, dtype=np.int64)))
    return out


def _build(dataset: Dataset, train_lists: list[np.ndarray], seed: int, with_val: bool = True) -> PartitionReport:
    vals = _carve_val(dataset, train_lists, seed) if with_val else [np.zeros(0, dtype=np.int64)] * len(train_lists)
    shards = [
        ClientShard(i, np.sort(idx).astype(np.int64), vals[i], _histogram(dataset, idx))
        for i, idx in enumerate(train_lists)
    ]
    return _report(shards)


def partition_iid(dataset: Dataset, num_clients: int, seed: int = 0) -> PartitionReport:
    """Random equal-size disjoint shards of the train split."""
    train = dataset.train_indices
    if num_clients < 1:
        raise PartitionError("need at least one client")
    if num_clients > train.size:
        raise PartitionError(f"{num_clients} clients exceed {train.size} train samples")
    perm = np.random.default_rng([seed, 3]).permutation(train)
    return _build(dataset, list(np.array_split(perm, num_clients)), seed)


def partition_label_skew(
    dataset: Dataset, class_assignment: Sequence[Sequence[tuple[int, float]]], seed: int = 0
) -> PartitionReport:
    """Give client ``i`` the requested fraction of each listed class's train samples.

    ``class_assignment[i]`` is a list of ``(class_id, fraction)`` pairs. Per
    class, fractions may not sum above 1. Samples are drawn without
    replacement; counts use floor, and a class handed out in full (sum == 1)
    gives its remainder to the last client holding it.
    """
    train = dataset.train_indices
    rng = np.random.default_rng([seed, 5])
    totals: dict[int, float] = {}
    for client, pairs in enumerate(class_assignment):
        for cls, frac in pairs:
            if not 0 <= cls < dataset.num_classes:
                raise PartitionError(f"client {client}: class {cls} out of range")
            if frac < 0:
                raise PartitionError(f"client {client}: negative fraction for class {cls}")
            totals[cls] = totals.get(cls, 0.0) + frac
    over = {c: t for c, t in totals.items() if t > 1 + 1e-9}
    if over:
        raise PartitionError(f"oversubscribed classes (fraction sum > 1): {over}")

    pools = {c: rng.permutation(train[dataset.labels[train] == c]) for c in totals}
    cursor = {c: 0 for c in totals}
    remaining = {c: t for c, t in totals.items()}
    lists: list[list[np.ndarray]] = [[] for _ in class_assignment]
    for client, pairs in enumerate(class_assignment):
        for cls, frac in pairs:
            pool = pools[cls]
            remaining[cls] -= frac
            if abs(remaining[cls]) < 1e-9 and abs(totals[cls] - 1.0) < 1e-9:
                take = pool.size - cursor[cls]
            else:
                take = int(math.floor(frac * pool.size + 1e-9))
            lists[client].append(pool[cursor[cls] : cursor[cls] + take])
            cursor[cls] += take
    train_lists = [np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64) for parts in lists]
    for i, idx in enumerate(train_lists):
        if idx.size == 0:
            raise PartitionError(f"client {i} received no samples")
    return _build(dataset, train_lists, seed)


def split3_assignment(num_clients: int, num_classes: int) -> list[list[tuple[int, float]]]:
    """Contiguous disjoint class blocks: {0,1} -> client 0, {2,3} -> client 1, ..."""
    if num_classes < num_clients:
        raise PartitionError(f"split3 needs at least one class per client ({num_classes} < {num_clients})")
    blocks = np.array_split(np.arange(num_classes), num_clients)
    return [[(int(c), 1.0) for c in block] for block in blocks]


def split2_assignment(num_clients: int, num_classes: int) -> list[list[tuple[int, float]]]:
    """Client 0 holds two classes outright; every other client holds four
    classes taken cyclically (stride 2) from the remaining ones, each class
    shared equally among the clients holding it."""
    rest = list(range(2, num_classes))
    if num_clients < 2 or len(rest) < 4:
        raise PartitionError("split2 needs >= 2 clients and >= 6 classes")
    held = [[0, 1]]
    for j in range(num_clients - 1):
        held.append([rest[(2 * j + t) % len(rest)] for t in range(4)])
    owners: dict[int, int] = {}
    for classes in held:
        for c in classes:
            owners[c] = owners.get(c, 0) + 1
    return [[(c, 1.0 / owners[c]) for c in classes] for classes in held]


def partition_preset(dataset: Dataset, name: str, num_clients: int, seed: int = 0) -> PartitionReport:
    if name == "iid":
        return partition_iid(dataset, num_clients, seed)
    if name == "split2":
        return partition_label_skew(dataset, split2_assignment(num_clients, dataset.num_classes), seed)
    if name == "split3":
        return partition_label_skew(dataset, split3_assignment(num_clients, dataset.num_classes), seed)
    if name == "edge_case":
        return partition_edge_case(dataset)
    raise PartitionError(f"unknown partition preset {name!r}; expected one of {PRESETS}")


def partition_edge_case(dataset: Dataset) -> PartitionReport:
    """One client per train sample and no per-client validation data."""
    train = dataset.train_indices
    empty = np.zeros(0, dtype=np.int64)
    shards = []
    for i, idx in enumerate(train):
        hist = np.zeros(dataset.num_classes, dtype=np.int64)
        hist[dataset.labels[idx]] = 1
        shards.append(ClientShard(i, np.array([idx], dtype=np.int64), empty, hist))
    if len(shards) < 2:
        return _report(shards)
    # Single-sample clients: KS between two clients is 0 for equal labels and
    # |CDF gap| otherwise, so the mean depends only on label counts.
    mean_ks = _edge_case_mean_ks(dataset.labels[train], dataset.num_classes)
    return PartitionReport(tuple(shards), mean_ks, np.zeros((0, 0)))


def _edge_case_mean_ks(labels: np.ndarray, num_classes: int) -> float:
    # For point masses at a < b the CDF gap is 1, so every differently
    # labelled pair contributes exactly 1.
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    n = counts.sum()
    pairs = n * (n - 1) / 2
    same = float((counts * (counts - 1) / 2).sum())
    return (pairs - same) / pairs


def share_globally(dataset: Dataset, report: PartitionReport, fraction: float, seed: int = 0) -> PartitionReport:
    """Pool ``ceil(fraction * n_i)`` random train samples from every client and
    add the whole pool to every client's train set (own samples are not
    duplicated)."""
    if not 0 <= fraction <= 1:
        raise PartitionError("share fraction must lie in [0, 1]")
    if fraction == 0:
        return report
    pool_parts = []
    for shard in report.shards:
        rng = np.random.default_rng([seed, 11, shard.client_id])
        take = math.ceil(fraction * shard.n)
        pool_parts.append(rng.choice(shard.train_indices, size=min(take, shard.n), replace=False))
    pool = np.unique(np.concatenate(pool_parts))
    shards = []
    for shard in report.shards:
        merged = np.union1d(shard.train_indices, pool).astype(np.int64)
        shards.append(replace(shard, train_indices=merged, label_histogram=_histogram(dataset, merged)))
    return _report(shards)
