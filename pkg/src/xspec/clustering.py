"""Intra-domain agglomerative clustering with single linkage, silhouette
filtering, and the non-parametric memory-bank objective.

Merging is batched: every iteration sorts the current cluster pairs by
linkage distance and greedily merges the top ceil(merge_fraction * K) pairs
that do not reuse a cluster, stopping once the target count is reached.
Ties break on (smaller cluster id, smaller partner id); a cluster's id is
the smallest sample index it contains, so the whole procedure is
deterministic and invariant to input permutation up to relabeling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention
from .errors import (
    BadLabelError,
    DimMismatchError,
    EmptyClusterError,
    InvalidConfigError,
    InvalidParamsError,
    SingleClusterError,
)
from .feature_store import FeatureMap

NO_CLUSTER = -1


@dataclass(frozen=True)
class ClusterParams:
    target_clusters: int
    merge_fraction: float = 0.05
    silhouette_threshold: float = 0.6
    min_cluster_size: int = 2
    max_cluster_size_factor: float = 3.0
    mb_temperature: float = 0.1
    mb_steps: int = 0

    def __post_init__(self):
        if self.target_clusters < 1:
            raise InvalidConfigError(f"target_clusters must be >= 1, got {self.target_clusters}")
        if not (0.0 < self.merge_fraction <= 1.0):
            raise InvalidConfigError(f"merge_fraction must be in (0, 1], got {self.merge_fraction}")
        if self.min_cluster_size < 1:
            raise InvalidConfigError("min_cluster_size must be >= 1")
        if self.max_cluster_size_factor <= 0:
            raise InvalidConfigError("max_cluster_size_factor must be > 0")
        if self.mb_temperature <= 0:
            raise InvalidConfigError("mb_temperature must be > 0")
        if self.mb_steps < 0:
            raise InvalidConfigError("mb_steps must be >= 0")


@dataclass
class ClusterState:
    """Partition of n samples. assignment[i] is a cluster id or NO_CLUSTER.

    cluster_ids is sorted; centroids rows align with it.  eligible marks
    clusters usable as voting anchors (set by filter_clusters).  silhouettes
    is filled by filter_clusters and doubles as its has-run marker.
    """

    assignment: np.ndarray
    cluster_ids: np.ndarray
    members: dict
    centroids: np.ndarray
    eligible: np.ndarray
    silhouettes: Optional[np.ndarray] = None

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    def row_of(self, cluster_id: int) -> int:
        idx = int(np.searchsorted(self.cluster_ids, cluster_id))
        if idx >= len(self.cluster_ids) or self.cluster_ids[idx] != cluster_id:
            raise BadLabelError(f"unknown cluster id {cluster_id}")
        return idx

    def is_eligible(self, cluster_id: int) -> bool:
        return bool(self.eligible[self.row_of(cluster_id)])


def descriptor_for_clustering(
    f: FeatureMap, params: Optional[attention.AttentionParams], prob_space: bool = False
) -> np.ndarray:
    """Patch-averaged channel vector when params is None, else the flattened
    attended descriptor of the sample under the current model."""
    if params is None:
        return np.asarray(f.data, dtype=np.float64).mean(axis=0)
    return attention.single_descriptor(f, params, prob_space)


def descriptor_matrix(
    samples, params: Optional[attention.AttentionParams], prob_space: bool = False
) -> np.ndarray:
    if len(samples) == 0:
        return np.zeros((0, 0), dtype=np.float64)
    return np.stack([descriptor_for_clustering(f, params, prob_space) for f in samples])


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between row sets; clamps tiny negatives."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimMismatchError(f"cannot pair rows of shapes {a.shape} and {b.shape}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def linkage_distance(members_a, members_b, desc: np.ndarray) -> float:
    """Single linkage: min pairwise distance across the two member sets."""
    ma = np.asarray(list(members_a), dtype=np.int64)
    mb = np.asarray(list(members_b), dtype=np.int64)
    if len(ma) == 0 or len(mb) == 0:
        raise EmptyClusterError("linkage over an empty cluster")
    return float(pairwise_distances(desc[ma], desc[mb]).min())


def _rebuild(assignment: np.ndarray, desc: np.ndarray, eligible_map: Optional[dict] = None):
    ids = np.unique(assignment[assignment >= 0])
    members = {int(c): np.flatnonzero(assignment == c) for c in ids}
    if len(ids):
        centroids = np.stack([desc[members[int(c)]].mean(axis=0) for c in ids])
    else:
        centroids = np.zeros((0, desc.shape[1] if desc.ndim == 2 else 0), dtype=np.float64)
    if eligible_map is None:
        eligible = np.ones(len(ids), dtype=bool)
    else:
        eligible = np.array([eligible_map.get(int(c), True) for c in ids], dtype=bool)
    return ids.astype(np.int64), members, centroids, eligible


def agglomerate(desc: np.ndarray, params: ClusterParams) -> ClusterState:
    """Bottom-up single-linkage clustering down to exactly target_clusters."""
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[0] < 1:
        raise InvalidParamsError(f"descriptor matrix must be (n, D), got {desc.shape}")
    n = desc.shape[0]
    if n < params.target_clusters:
        raise InvalidParamsError(f"{n} samples cannot form {params.target_clusters} clusters")

    # linkage matrix over original ids; a merged cluster keeps the smaller id,
    # which is also its smallest member index
    link = pairwise_distances(desc, desc)
    np.fill_diagonal(link, np.inf)
    members = {i: [i] for i in range(n)}

    while len(members) > params.target_clusters:
        active = np.array(sorted(members), dtype=np.int64)
        k = len(active)
        budget = min(math.ceil(params.merge_fraction * k), k - params.target_clusters)
        sub = link[np.ix_(active, active)]
        iu, ju = np.triu_indices(k, 1)
        order = np.lexsort((ju, iu, sub[iu, ju]))
        used, merges = set(), 0
        for o in order:
            a, b = int(active[iu[o]]), int(active[ju[o]])
            if a in used or b in used:
                continue
            members[a].extend(members[b])
            del members[b]
            row = np.minimum(link[a], link[b])
            link[a, :] = row
            link[:, a] = row
            link[a, a] = np.inf
            link[b, :] = np.inf
            link[:, b] = np.inf
            used.update((a, b))
            merges += 1
            if merges >= budget:
                break

    assignment = np.full(n, NO_CLUSTER, dtype=np.int64)
    for new_id, old_id in enumerate(sorted(members)):
        assignment[members[old_id]] = new_id
    ids, mem, cents, elig = _rebuild(assignment, desc)
    return ClusterState(assignment=assignment, cluster_ids=ids, members=mem, centroids=cents, eligible=elig)


def _mean_dist_to_clusters(state: ClusterState, desc: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """(len(idx), K) mean distance from each listed sample to each cluster."""
    out = np.empty((len(idx), state.n_clusters), dtype=np.float64)
    for col, cid in enumerate(state.cluster_ids):
        m = state.members[int(cid)]
        out[:, col] = pairwise_distances(desc[idx], desc[m]).mean(axis=1)
    return out


def _silhouettes_for(state: ClusterState, desc: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Silhouette of each listed (assigned) sample against the current partition.

    intra: mean distance to co-members, self excluded; 0 for a singleton.
    inter: mean distance to the nearest other cluster (nearest by that mean).
    score: (inter - intra) / max(inter, intra), with 0/0 mapped to 0.
    """
    mean_d = _mean_dist_to_clusters(state, desc, idx)
    rows = np.array([state.row_of(int(state.assignment[i])) for i in idx])
    sizes = np.array([len(state.members[int(state.assignment[i])]) for i in idx], dtype=np.float64)
    own_mean = mean_d[np.arange(len(idx)), rows]
    # the self term contributes distance 0; rescale the mean to exclude it
    intra = np.where(sizes > 1, own_mean * sizes / np.maximum(sizes - 1, 1), 0.0)
    masked = mean_d.copy()
    masked[np.arange(len(idx)), rows] = np.inf
    inter = masked.min(axis=1)
    denom = np.maximum(inter, intra)
    return np.where(denom > 0, (inter - intra) / np.where(denom > 0, denom, 1.0), 0.0)


def silhouette(i: int, state: ClusterState, desc: np.ndarray) -> float:
    """(inter - intra) / max(inter, intra) for one sample; see _silhouettes_for."""
    if state.n_clusters < 2:
        raise SingleClusterError("silhouette needs at least 2 clusters")
    if int(state.assignment[i]) == NO_CLUSTER:
        raise InvalidParamsError(f"sample {i} is unassigned")
    desc = np.asarray(desc, dtype=np.float64)
    return float(_silhouettes_for(state, desc, np.array([i]))[0])


def filter_clusters(state: ClusterState, desc: np.ndarray, params: ClusterParams) -> ClusterState:
    """Drop low-silhouette samples, then flag anchor eligibility by size.

    Silhouettes are computed once from the input partition and recorded on
    the result; a state that already carries them is returned unchanged, so
    the operation is idempotent and survivors are never re-judged against
    the thinned clusters.
    """
    if state.silhouettes is not None:
        return state
    desc = np.asarray(desc, dtype=np.float64)
    n = len(state.assignment)
    sil = np.full(n, np.nan)
    assignment = state.assignment.copy()
    assigned = np.flatnonzero(assignment != NO_CLUSTER)
    if state.n_clusters >= 2 and len(assigned):
        s = _silhouettes_for(state, desc, assigned)
        sil[assigned] = s
        assignment[assigned[s <= params.silhouette_threshold]] = NO_CLUSTER

    ids, mem, cents, _ = _rebuild(assignment, desc)
    n_assigned = int((assignment != NO_CLUSTER).sum())
    eligible = np.ones(len(ids), dtype=bool)
    if len(ids):
        mean_size = n_assigned / len(ids)
        for row, cid in enumerate(ids):
            size = len(mem[int(cid)])
            eligible[row] = (
                size >= params.min_cluster_size
                and size <= params.max_cluster_size_factor * mean_size
            )
    return ClusterState(
        assignment=assignment,
        cluster_ids=ids,
        members=mem,
        centroids=cents,
        eligible=eligible,
        silhouettes=sil,
    )


def memory_bank_loss(f: np.ndarray, label: int, bank: np.ndarray, temperature: float):
    """Non-parametric softmax cross-entropy of descriptor f against centroid
    rows of the bank; returns (loss, grad wrt f)."""
    f = np.asarray(f, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[0] < 1:
        raise EmptyClusterError("memory bank is empty")
    if f.ndim != 1 or f.shape[0] != bank.shape[1]:
        raise DimMismatchError(f"descriptor dim {f.shape} vs bank {bank.shape}")
    if not (0 <= label < bank.shape[0]):
        raise BadLabelError(f"label {label} outside bank of {bank.shape[0]} rows")
    if temperature <= 0:
        raise InvalidConfigError("temperature must be > 0")
    logits = bank @ f / temperature
    m = logits.max()
    z = np.exp(logits - m)
    p = z / z.sum()
    loss = float(np.log(z.sum()) + m - logits[label])
    grad = (p @ bank - bank[label]) / temperature
    return loss, grad


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimMismatchError(f"label vectors differ: {a.shape} vs {b.shape}")
    n = len(a)
    if n == 0:
        raise EmptyClusterError("ARI over zero items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    comb2 = lambda x: x * (x - 1) / 2.0
    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def export_assignments_csv(state: ClusterState, samples, path) -> None:
    """One row per sample: sample_id, domain, cluster_id, silhouette, eligible."""
    sil = state.silhouettes if state.silhouettes is not None else np.full(len(samples), np.nan)
    lines = ["sample_id,domain,cluster_id,silhouette,eligible"]
    for i, fm in enumerate(samples):
        cid = int(state.assignment[i])
        elig = 1 if cid != NO_CLUSTER and state.is_eligible(cid) else 0
        lines.append(
            f"{fm.sample_id},{fm.domain.tag},{cid},{_fmt(float(sil[i]))},{elig}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
