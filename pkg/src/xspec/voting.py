"""Cross-spectral cluster association by majority voting, and pseudo-triplet
mining from the accepted associations.

Every member of an RGB cluster votes for the cluster of its nearest IR
sample (by descriptor distance, over currently assigned IR samples).  The
modal IR cluster wins only with at least half of the votes; a tie between
modal labels rejects the round.  An IR cluster can be claimed by at most one
RGB cluster per epoch, first claim wins, and the RGB clusters are visited in
a seeded random order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .clustering import NO_CLUSTER, ClusterState, pairwise_distances
from .errors import EmptyClusterError, NoNegativeAvailableError, ShapeMismatchError


@dataclass(frozen=True)
class Association:
    """Accepted RGB-cluster to IR-cluster pairing for one epoch."""

    rgb_cluster: int
    ir_cluster: int
    votes_for_winner: int
    votes_total: int
    epoch: int

    def __post_init__(self):
        if self.votes_total < 1 or not (0 < self.votes_for_winner <= self.votes_total):
            raise ShapeMismatchError(
                f"bad vote counts {self.votes_for_winner}/{self.votes_total}"
            )
        if 2 * self.votes_for_winner < self.votes_total:
            raise ShapeMismatchError("association below majority bound")


@dataclass(frozen=True)
class Triplet:
    """Indices into the per-domain sample lists: anchor/negative are RGB
    positions, positive is an IR position."""

    anchor: int
    positive: int
    negative: int
    rgb_cluster: int
    ir_cluster: int


def partial_distances(rgb_desc: np.ndarray, ir_desc: np.ndarray) -> np.ndarray:
    """Distance block between one RGB cluster's descriptors and IR candidates."""
    return pairwise_distances(rgb_desc, ir_desc)


def vote(d_partial: np.ndarray, ir_labels: np.ndarray):
    """Majority vote of the rows of d_partial over IR cluster labels.

    Each row votes for the label of its argmin column (ties take the
    smallest column index).  Returns (winner, count, total) where winner is
    None when the modal label is tied or holds less than half of the votes.
    """
    d = np.asarray(d_partial, dtype=np.float64)
    labels = np.asarray(ir_labels, dtype=np.int64)
    if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
        raise EmptyClusterError(f"vote needs a non-empty distance block, got {d.shape}")
    if labels.shape != (d.shape[1],):
        raise ShapeMismatchError(f"{d.shape[1]} columns but {labels.shape} labels")
    votes = labels[np.argmin(d, axis=1)]
    cast, counts = np.unique(votes, return_counts=True)
    top = counts.max()
    total = len(votes)
    if (counts == top).sum() > 1:
        return None, int(top), total
    winner = int(cast[np.argmax(counts)])
    if 2 * top < total:
        return None, int(top), total
    return winner, int(top), total


def associate_epoch(
    rgb_state: ClusterState,
    ir_state: ClusterState,
    rgb_desc: np.ndarray,
    ir_desc: np.ndarray,
    rng: np.random.Generator,
    epoch: int = 0,
) -> list:
    """Run the vote for every eligible RGB cluster in seeded random order.

    IR candidates are all currently assigned IR samples regardless of their
    cluster's anchor eligibility.  Rejections and already-claimed winners
    are skipped for this epoch only.
    """
    ir_candidates = np.flatnonzero(ir_state.assignment != NO_CLUSTER)
    out = []
    if len(ir_candidates) == 0:
        return out
    ir_labels = ir_state.assignment[ir_candidates]
    anchors = [int(c) for c in rgb_state.cluster_ids if rgb_state.is_eligible(int(c))]
    order = rng.permutation(len(anchors))
    claimed = set()
    for idx in order:
        cid = anchors[int(idx)]
        members = rgb_state.members[cid]
        winner, count, total = vote(
            partial_distances(rgb_desc[members], ir_desc[ir_candidates]), ir_labels
        )
        if winner is None or winner in claimed:
            continue
        claimed.add(winner)
        out.append(
            Association(
                rgb_cluster=cid,
                ir_cluster=winner,
                votes_for_winner=count,
                votes_total=total,
                epoch=epoch,
            )
        )
    return out


def mine_triplets(
    associations,
    rgb_state: ClusterState,
    ir_state: ClusterState,
    rgb_desc: np.ndarray,
    rng: np.random.Generator,
    per_assoc: int = 16,
) -> list:
    """Sample anchor-positive combinations per association and attach the
    hardest negative.

    The negative pool is the RGB cluster nearest to the anchor's cluster by
    centroid distance in the current descriptor space (ties to the smaller
    cluster id); within it the member closest to the anchor is taken.  Up to
    per_assoc anchor-positive combos are drawn without replacement; fewer
    combos than per_assoc means all of them are used.
    """
    if len(rgb_state.cluster_ids) < 2:
        raise NoNegativeAvailableError("triplet mining needs at least 2 RGB clusters")
    cents = np.stack(
        [rgb_desc[rgb_state.members[int(c)]].mean(axis=0) for c in rgb_state.cluster_ids]
    )
    triplets = []
    for assoc in associations:
        row = rgb_state.row_of(assoc.rgb_cluster)
        cdist = pairwise_distances(cents[row : row + 1], cents)[0]
        cdist[row] = np.inf
        neg_members = rgb_state.members[int(rgb_state.cluster_ids[int(np.argmin(cdist))])]
        anchors = rgb_state.members[assoc.rgb_cluster]
        positives = ir_state.members[assoc.ir_cluster]
        combos = len(anchors) * len(positives)
        if per_assoc >= combos:
            chosen = np.arange(combos)
        else:
            chosen = rng.choice(combos, size=per_assoc, replace=False)
        for flat in chosen:
            ai, pi = divmod(int(flat), len(positives))
            anchor = int(anchors[ai])
            d_neg = pairwise_distances(rgb_desc[anchor : anchor + 1], rgb_desc[neg_members])[0]
            triplets.append(
                Triplet(
                    anchor=anchor,
                    positive=int(positives[pi]),
                    negative=int(neg_members[int(np.argmin(d_neg))]),
                    rgb_cluster=assoc.rgb_cluster,
                    ir_cluster=assoc.ir_cluster,
                )
            )
    return triplets


def export_associations_csv(associations, path, correct: Optional[list] = None) -> None:
    """Rows: rgb_cluster, ir_cluster, votes, total, correct (blank if unknown)."""
    if correct is not None and len(correct) != len(associations):
        raise ShapeMismatchError("correctness list length mismatch")
    lines = ["rgb_cluster,ir_cluster,votes,total,correct"]
    for i, a in enumerate(associations):
        tail = "" if correct is None else str(int(correct[i]))
        lines.append(f"{a.rgb_cluster},{a.ir_cluster},{a.votes_for_winner},{a.votes_total},{tail}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
