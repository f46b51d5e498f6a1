"""Training loop: cluster once, then per epoch re-describe, vote, mine and
optimize with RMSProp; plus the finite-difference gradient audit.

The loop never sees identity labels: it operates on a label-stripped view of
the dataset.  Labels, when present in the original dataset, feed only the
logging side channel (association correctness, validation rank-1, early
stop) and never influence clustering, voting, mining or gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attention, clustering, evaluation, losses, voting
from .attention import PARAM_FIELDS, AttentionParams
from .errors import (
    InvalidConfigError,
    InvalidParamsError,
    LabelMissingError,
    NoNegativeAvailableError,
)
from .feature_store import Dataset


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    seed: int = 0
    early_stop: bool = False
    val_fraction: float = 0.0
    c_out: int = 128
    per_assoc: int = 16
    recluster_every: int = 0
    prob_space: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise InvalidConfigError("lr must be > 0")
        if not (0.0 < self.rmsprop_decay < 1.0):
            raise InvalidConfigError("rmsprop_decay must be in (0, 1)")
        if self.rmsprop_eps <= 0:
            raise InvalidConfigError("rmsprop_eps must be > 0")
        if not (0.0 <= self.val_fraction < 0.5):
            raise InvalidConfigError("val_fraction must be in [0, 0.5)")
        if self.c_out < 1 or self.per_assoc < 1:
            raise InvalidConfigError("c_out and per_assoc must be positive")
        if self.recluster_every < 0:
            raise InvalidConfigError("recluster_every must be >= 0")


@dataclass
class OptState:
    """RMSProp squared-gradient accumulators, one per parameter array."""

    acc: tuple
    step: int = 0

    @staticmethod
    def zeros(params: AttentionParams) -> "OptState":
        return OptState(acc=tuple(np.zeros_like(a) for a in params.as_tuple()), step=0)


def rmsprop_step(
    params: AttentionParams, grads: attention.ParamGrads, opt: OptState, cfg: TrainConfig
):
    """acc <- rho*acc + (1-rho)*g^2;  theta <- theta - lr * g / (sqrt(acc)+eps)."""
    rho = cfg.rmsprop_decay
    new_acc, new_arrays = [], []
    for theta, g, acc in zip(params.as_tuple(), grads.as_tuple(), opt.acc):
        a = rho * acc + (1.0 - rho) * g * g
        new_acc.append(a)
        new_arrays.append(theta - cfg.lr * g / (np.sqrt(a) + cfg.rmsprop_eps))
    return AttentionParams(*new_arrays), OptState(acc=tuple(new_acc), step=opt.step + 1)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    no_associations: bool = False
    stopped_early: bool = False

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _split_indices(n: int, fraction: float, rng: np.random.Generator):
    n_val = int(fraction * n)
    if n_val == 0:
        return np.arange(n), np.array([], dtype=np.int64)
    val = np.sort(rng.choice(n, size=n_val, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[val] = False
    return np.flatnonzero(mask), val


def _modal_label(labels: np.ndarray) -> int:
    vals, counts = np.unique(labels, return_counts=True)
    return int(vals[np.argmax(counts)])


def _triplet_grads(params, anchor_fm, pos_fm, neg_fm, loss_cfg, prob_space):
    pa = attention.forward_pair(anchor_fm, pos_fm, params, prob_space)
    neg = attention.negative_activation(pa, neg_fm, params)
    loss, ga, gb, gn = losses.total_loss(pa, neg, loss_cfg)
    grads = attention.backward_pair(pa, ga, gb, params, neg, gn)
    return loss, grads


def _cluster_domain(samples, desc, cluster_params):
    state = clustering.agglomerate(desc, cluster_params)
    return clustering.filter_clusters(state, desc, cluster_params)


def _warmup(params, opt, train_rgb, train_ir, rgb_state, ir_state, cluster_params, cfg):
    """Optional memory-bank warm-up: non-parametric softmax CE of each
    assigned sample's descriptor against its domain's cluster centroids."""
    for _ in range(cluster_params.mb_steps):
        total = attention.zero_grads(params)
        count = 0
        for samples, state in ((train_rgb, rgb_state), (train_ir, ir_state)):
            assigned = np.flatnonzero(state.assignment != clustering.NO_CLUSTER)
            if len(assigned) == 0 or state.n_clusters < 1:
                continue
            acts = [attention.single_activation(samples[i], params, cfg.prob_space) for i in assigned]
            desc = np.stack([a.f_out.reshape(-1) for a in acts])
            bank = np.stack(
                [
                    desc[np.searchsorted(assigned, state.members[int(c)])].mean(axis=0)
                    for c in state.cluster_ids
                ]
            )
            for a, i in zip(acts, assigned):
                row = state.row_of(int(state.assignment[i]))
                _, gf = clustering.memory_bank_loss(
                    a.f_out.reshape(-1), row, bank, cluster_params.mb_temperature
                )
                g = attention.backward_single(a, gf.reshape(a.f_out.shape), params)
                for t, s in zip(total.as_tuple(), g.as_tuple()):
                    t += s
                count += 1
        if count == 0:
            break
        for t in total.as_tuple():
            t /= count
        params, opt = rmsprop_step(params, total, opt, cfg)
    return params, opt


def train(
    ds: Dataset,
    cluster_params: clustering.ClusterParams,
    loss_cfg: losses.LossConfig,
    cfg: TrainConfig,
):
    """Full unsupervised run; returns (params, TrainLog).

    A run in which no epoch yields a single triplet returns the seeded
    initial parameters unchanged, with the log flagged instead of raising.
    """
    if ds.channels < 1:
        raise InvalidParamsError("dataset has no samples")
    labeled = ds.has_labels()
    view = ds.training_view()

    split_rng = _rng(cfg.seed, 1)
    tr_rgb_idx, val_rgb_idx = _split_indices(len(view.rgb), cfg.val_fraction, split_rng)
    tr_ir_idx, val_ir_idx = _split_indices(len(view.ir), cfg.val_fraction, split_rng)
    train_rgb = [view.rgb[i] for i in tr_rgb_idx]
    train_ir = [view.ir[i] for i in tr_ir_idx]
    # label side channel: aligned true labels from the original dataset,
    # used for logging and validation only
    rgb_labels = np.array([ds.rgb[i].true_label for i in tr_rgb_idx], dtype=np.int64)
    ir_labels = np.array([ds.ir[i].true_label for i in tr_ir_idx], dtype=np.int64)
    val_probes = [ds.ir[i] for i in val_ir_idx]
    val_gallery = [ds.rgb[i] for i in val_rgb_idx]

    params = attention.init_params(ds.channels, cfg.c_out, cfg.seed)
    opt = OptState.zeros(params)
    log = TrainLog()

    if not train_rgb or not train_ir:
        log.no_associations = True
        return params, log

    desc0_rgb = clustering.descriptor_matrix(train_rgb, None)
    desc0_ir = clustering.descriptor_matrix(train_ir, None)
    rgb_state = _cluster_domain(train_rgb, desc0_rgb, cluster_params)
    ir_state = _cluster_domain(train_ir, desc0_ir, cluster_params)

    if cluster_params.mb_steps > 0:
        params, opt = _warmup(
            params, opt, train_rgb, train_ir, rgb_state, ir_state, cluster_params, cfg
        )

    total_triplets = 0
    prev_rank1 = None
    for epoch in range(1, cfg.epochs + 1):
        desc_rgb = clustering.descriptor_matrix(train_rgb, params, cfg.prob_space)
        desc_ir = clustering.descriptor_matrix(train_ir, params, cfg.prob_space)

        if cfg.recluster_every > 0 and epoch > 1 and (epoch - 1) % cfg.recluster_every == 0:
            rgb_state = _cluster_domain(train_rgb, desc_rgb, cluster_params)
            ir_state = _cluster_domain(train_ir, desc_ir, cluster_params)

        epoch_rng = _rng(cfg.seed, 2, epoch)
        assocs = voting.associate_epoch(
            rgb_state, ir_state, desc_rgb, desc_ir, epoch_rng, epoch
        )
        try:
            triplets = (
                voting.mine_triplets(
                    assocs, rgb_state, ir_state, desc_rgb, epoch_rng, cfg.per_assoc
                )
                if assocs
                else []
            )
        except NoNegativeAvailableError:
            triplets = []

        record = {
            "epoch": epoch,
            "n_associations": len(assocs),
            "n_triplets": len(triplets),
            "loss": None,
        }
        if labeled:
            correct = [
                bool(
                    _modal_label(rgb_labels[rgb_state.members[a.rgb_cluster]])
                    == _modal_label(ir_labels[ir_state.members[a.ir_cluster]])
                )
                for a in assocs
            ]
            record["associations"] = [
                {
                    "rgb": a.rgb_cluster,
                    "ir": a.ir_cluster,
                    "votes": a.votes_for_winner,
                    "total": a.votes_total,
                    "correct": c,
                }
                for a, c in zip(assocs, correct)
            ]
            record["assoc_correct"] = (
                float(np.mean(correct)) if correct else None
            )
        else:
            record["associations"] = [
                {
                    "rgb": a.rgb_cluster,
                    "ir": a.ir_cluster,
                    "votes": a.votes_for_winner,
                    "total": a.votes_total,
                    "correct": None,
                }
                for a in assocs
            ]

        if triplets:
            total_triplets += len(triplets)
            order = epoch_rng.permutation(len(triplets))
            loss_sum = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                acc = attention.zero_grads(params)
                for t_idx in batch:
                    t = triplets[int(t_idx)]
                    loss, grads = _triplet_grads(
                        params,
                        train_rgb[t.anchor],
                        train_ir[t.positive],
                        train_rgb[t.negative],
                        loss_cfg,
                        cfg.prob_space,
                    )
                    loss_sum += loss
                    for a, g in zip(acc.as_tuple(), grads.as_tuple()):
                        a += g
                for a in acc.as_tuple():
                    a /= len(batch)
                params, opt = rmsprop_step(params, acc, opt, cfg)
            record["loss"] = loss_sum / len(triplets)

        if labeled and val_probes and val_gallery:
            try:
                sm = evaluation.score_all(val_probes, val_gallery, params, cfg.prob_space)
                rank1 = evaluation.cmc(sm, ks=(1,))[1]
                record["val_rank1"] = rank1
            except LabelMissingError:
                rank1 = None
                record["val_rank1"] = None
            log.records.append(record)
            if (
                cfg.early_stop
                and rank1 is not None
                and prev_rank1 is not None
                and rank1 < prev_rank1
            ):
                log.stopped_early = True
                break
            if rank1 is not None:
                prev_rank1 = rank1
        else:
            log.records.append(record)

    if total_triplets == 0:
        log.no_associations = True
    return params, log


@dataclass
class AuditResult:
    max_rel_error: float
    worst_coord: str
    trials: int


def finite_diff_audit(
    params: AttentionParams,
    ds: Dataset,
    loss_cfg: losses.LossConfig,
    eps: float = 1e-5,
    trials: int = 100,
    seed: int = 0,
) -> AuditResult:
    """Central-difference check of every parameter coordinate of the total
    triplet loss on random triplets drawn from ds.

    Instances too close to a hinge kink, a zero distance, or a sign flip of
    the sparsity term are skipped and redrawn, so the comparison stays in
    the smooth region.  Relative error uses an absolute floor of 1e-3 to
    keep finite-difference noise on near-zero coordinates from dominating.
    """
    if len(ds.rgb) < 2 or len(ds.ir) < 1:
        raise InvalidParamsError("audit needs at least 2 RGB and 1 IR samples")
    rng = _rng(seed, 3)
    guard = 50.0 * eps
    worst, worst_coord = 0.0, ""
    done, attempts = 0, 0
    while done < trials and attempts < trials * 100:
        attempts += 1
        a_i = int(rng.integers(len(ds.rgb)))
        p_i = int(rng.integers(len(ds.ir)))
        n_i = int(rng.integers(len(ds.rgb) - 1))
        if n_i >= a_i:
            n_i += 1
        fa, fp, fn = ds.rgb[a_i], ds.ir[p_i], ds.rgb[n_i]

        pa = attention.forward_pair(fa, fp, params)
        neg = attention.negative_activation(pa, fn, params)
        d_pos = np.linalg.norm(pa.f_out_a - pa.f_out_b)
        d_neg = np.linalg.norm(pa.f_out_a - neg.f_out_n)
        if d_pos < guard or d_neg < guard:
            continue
        if abs(d_pos - d_neg + loss_cfg.margin) < guard:
            continue
        if loss_cfg.sparsity_weight > 0:
            m = min(
                np.abs(pa.f_out_a).min(),
                np.abs(pa.f_out_b).min(),
                np.abs(neg.f_out_n).min(),
            )
            if m < guard:
                continue

        loss, ga, gb, gn = losses.total_loss(pa, neg, loss_cfg)
        analytic = attention.backward_pair(pa, ga, gb, params, neg, gn)

        def loss_at(p2):
            pa2 = attention.forward_pair(fa, fp, p2)
            neg2 = attention.negative_activation(pa2, fn, p2)
            return losses.total_loss(pa2, neg2, loss_cfg)[0]

        for name in PARAM_FIELDS:
            base = getattr(params, name)
            an = getattr(analytic, name)
            flat = base.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                p2 = params.copy()
                getattr(p2, name).reshape(-1)[k] = orig + eps
                lp = loss_at(p2)
                getattr(p2, name).reshape(-1)[k] = orig - eps
                lm = loss_at(p2)
                fd = (lp - lm) / (2.0 * eps)
                a_val = an.reshape(-1)[k]
                rel = float(abs(a_val - fd) / max(abs(a_val), abs(fd), 1e-3))
                if rel > worst:
                    worst = rel
                    idx = np.unravel_index(k, base.shape)
                    worst_coord = f"{name}[{','.join(str(i) for i in idx)}]"
        done += 1
    if done < trials:
        raise InvalidParamsError(
            f"audit drew {attempts} candidate triplets but only {done} cleared the kink guards"
        )
    return AuditResult(max_rel_error=worst, worst_coord=worst_coord, trials=done)
