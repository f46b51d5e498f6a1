"""Cross-spectral retrieval and verification metrics.

Scoring is pairwise: every (probe, gallery) pair runs one attention forward
and the score is the Euclidean distance between the two attended-output
descriptors of that pair.  Ranking ties break on gallery index.
Verification treats negated distances as similarity scores; the ROC sweeps
every distinct score as a threshold with TAR/FAR defined by >= t, the AUC is
the trapezoid over the resulting polyline (equal to the Mann-Whitney rank
statistic, ties counted half), and EER / TAR@FAR interpolate linearly.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attention
from .errors import (
    DomainMismatchError,
    EmptyInputError,
    LabelMissingError,
    ShapeMismatchError,
)
from .feature_store import Domain

DEFAULT_RANKS = (1, 5, 10, 20)
DEFAULT_FAR_POINTS = (0.01, 0.05)


@dataclass
class ScoreMatrix:
    """distances[i, j] scores probe i against gallery j (smaller = closer)."""

    distances: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        for name in ("probe_labels", "gallery_labels", "probe_ids", "gallery_ids"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n_p, n_g = self.distances.shape
        if self.probe_labels.shape != (n_p,) or self.probe_ids.shape != (n_p,):
            raise ShapeMismatchError("probe metadata length mismatch")
        if self.gallery_labels.shape != (n_g,) or self.gallery_ids.shape != (n_g,):
            raise ShapeMismatchError("gallery metadata length mismatch")


def _pair_distance(rgb_fm, ir_fm, params, prob_space):
    pa = attention.forward_pair(rgb_fm, ir_fm, params, prob_space)
    return float(
        np.linalg.norm(attention.descriptor(pa, "a") - attention.descriptor(pa, "b"))
    )


def score_all(
    probes,
    gallery,
    params: attention.AttentionParams,
    prob_space: bool = False,
    threads: int = 1,
) -> ScoreMatrix:
    """Score every probe against every gallery sample.

    The two lists must come from opposite spectra; either may be the RGB
    side, so swapping probe/gallery roles covers both benchmark directions.
    Rows are independent, so the optional thread pool changes nothing about
    the result.
    """
    if not probes or not gallery:
        raise EmptyInputError("need at least one probe and one gallery sample")
    pdom = {fm.domain for fm in probes}
    gdom = {fm.domain for fm in gallery}
    if len(pdom) != 1 or len(gdom) != 1:
        raise DomainMismatchError("mixed domains within probe or gallery list")
    if pdom == gdom:
        raise DomainMismatchError("probe and gallery must come from opposite spectra")
    probe_is_rgb = probes[0].domain is Domain.RGB

    dist = np.zeros((len(probes), len(gallery)), dtype=np.float64)

    def fill_row(i):
        p = probes[i]
        for j, g in enumerate(gallery):
            rgb_fm, ir_fm = (p, g) if probe_is_rgb else (g, p)
            dist[i, j] = _pair_distance(rgb_fm, ir_fm, params, prob_space)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(len(probes))))
    else:
        for i in range(len(probes)):
            fill_row(i)

    return ScoreMatrix(
        distances=dist,
        probe_labels=np.array([fm.true_label for fm in probes], dtype=np.int64),
        gallery_labels=np.array([fm.true_label for fm in gallery], dtype=np.int64),
        probe_ids=np.array([fm.sample_id for fm in probes], dtype=np.int64),
        gallery_ids=np.array([fm.sample_id for fm in gallery], dtype=np.int64),
    )


def _check_labels(sm: ScoreMatrix):
    gal = set(sm.gallery_labels.tolist())
    for lbl in sm.probe_labels.tolist():
        if lbl < 0 or lbl not in gal:
            raise LabelMissingError(f"probe label {lbl} absent from gallery")


def cmc_curve(sm: ScoreMatrix) -> np.ndarray:
    """Full cumulative match curve, entry k-1 = rank-k identification rate."""
    _check_labels(sm)
    n_p, n_g = sm.distances.shape
    hits = np.zeros(n_g, dtype=np.float64)
    for i in range(n_p):
        order = np.argsort(sm.distances[i], kind="stable")
        match = sm.gallery_labels[order] == sm.probe_labels[i]
        first = int(np.flatnonzero(match)[0])
        hits[first:] += 1.0
    return hits / n_p


def cmc(sm: ScoreMatrix, ks=DEFAULT_RANKS) -> dict:
    """Rank-k identification rates; k beyond the gallery size saturates."""
    curve = cmc_curve(sm)
    return {int(k): float(curve[min(int(k), len(curve)) - 1]) for k in ks}


def map_score(sm: ScoreMatrix) -> float:
    """Mean average precision over probes with multiple-match support."""
    _check_labels(sm)
    n_p = sm.distances.shape[0]
    aps = np.zeros(n_p, dtype=np.float64)
    for i in range(n_p):
        order = np.argsort(sm.distances[i], kind="stable")
        match = (sm.gallery_labels[order] == sm.probe_labels[i]).astype(np.float64)
        ranks = np.arange(1, len(order) + 1, dtype=np.float64)
        precision = np.cumsum(match) / ranks
        aps[i] = (precision * match).sum() / match.sum()
    return float(aps.mean())


def verification_scores(sm: ScoreMatrix):
    """Split negated distances into genuine and impostor similarity scores."""
    same = sm.probe_labels[:, None] == sm.gallery_labels[None, :]
    scores = -sm.distances
    return scores[same].ravel(), scores[~same].ravel()


@dataclass
class RocResult:
    points: np.ndarray  # (m, 2) rows of (far, tar), far non-decreasing
    auc: float
    eer: float
    tar_at_far: dict


def roc_metrics(genuine, impostor, far_points=DEFAULT_FAR_POINTS) -> RocResult:
    g = np.asarray(genuine, dtype=np.float64).ravel()
    im = np.asarray(impostor, dtype=np.float64).ravel()
    if len(g) == 0 or len(im) == 0:
        raise EmptyInputError("roc needs non-empty genuine and impostor scores")

    thresholds = np.unique(np.concatenate([g, im]))[::-1]
    far = np.concatenate([[0.0], [np.mean(im >= t) for t in thresholds]])
    tar = np.concatenate([[0.0], [np.mean(g >= t) for t in thresholds]])

    auc = float(np.sum((far[1:] - far[:-1]) * (tar[1:] + tar[:-1]) * 0.5))

    frr = 1.0 - tar
    diff = far - frr  # non-decreasing from -1 to +1
    k = int(np.searchsorted(diff >= 0, True))
    if diff[k] == 0.0:
        eer = float(far[k])
    else:
        dfar = far[k] - far[k - 1]
        dfrr = frr[k] - frr[k - 1]
        s = (frr[k - 1] - far[k - 1]) / (dfar - dfrr)
        eer = float(far[k - 1] + s * dfar)

    # best attainable TAR per FAR level, then linear interpolation
    uniq_far, last_idx = np.unique(far, return_index=True)
    best_tar = np.array([tar[far == f].max() for f in uniq_far])
    tar_at = {float(x): float(np.interp(x, uniq_far, best_tar)) for x in far_points}

    return RocResult(
        points=np.stack([far, tar], axis=1),
        auc=auc,
        eer=eer,
        tar_at_far=tar_at,
    )


@dataclass
class EvalReport:
    n_probes: int
    n_gallery: int
    cmc: dict
    map: float
    auc: float
    eer: float
    tar_at_far: dict
    roc_points: list
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "n_probes": self.n_probes,
            "n_gallery": self.n_gallery,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "map": self.map,
            "auc": self.auc,
            "eer": self.eer,
            "tar_at_far": {f"{k:g}": v for k, v in sorted(self.tar_at_far.items())},
            "roc": [[float(a), float(b)] for a, b in self.roc_points],
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        obj = json.loads(text)
        return EvalReport(
            n_probes=obj["n_probes"],
            n_gallery=obj["n_gallery"],
            cmc={int(k): float(v) for k, v in obj["cmc"].items()},
            map=float(obj["map"]),
            auc=float(obj["auc"]),
            eer=float(obj["eer"]),
            tar_at_far={float(k): float(v) for k, v in obj["tar_at_far"].items()},
            roc_points=[(float(a), float(b)) for a, b in obj["roc"]],
            metadata=obj.get("metadata", {}),
        )


def evaluate(sm: ScoreMatrix, ks=DEFAULT_RANKS, far_points=DEFAULT_FAR_POINTS, metadata=None) -> EvalReport:
    """All retrieval and verification metrics for one score matrix."""
    genuine, impostor = verification_scores(sm)
    roc = roc_metrics(genuine, impostor, far_points)
    return EvalReport(
        n_probes=sm.distances.shape[0],
        n_gallery=sm.distances.shape[1],
        cmc=cmc(sm, ks),
        map=map_score(sm),
        auc=roc.auc,
        eer=roc.eer,
        tar_at_far=roc.tar_at_far,
        roc_points=[(float(a), float(b)) for a, b in roc.points],
        metadata=metadata or {},
    )


def export_roc_csv(report: EvalReport, path) -> None:
    lines = ["far,tar"] + [f"{a!r},{b!r}" for a, b in report.roc_points]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_cmc_csv(sm: ScoreMatrix, path) -> None:
    curve = cmc_curve(sm)
    lines = ["rank,rate"] + [f"{k + 1},{float(v)!r}" for k, v in enumerate(curve)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
