"""Command line interface.

Subcommands: synth, cluster, train, eval, audit, report.  Every option can
also come from a flat JSON config file (--config); explicit flags win over
file values, file values win over defaults.  Each output directory receives
config.json with the fully resolved values actually used, and all outputs
are byte-reproducible for a fixed seed and flag set.

Exit codes: 0 ok, 1 audit tolerance exceeded, 2 bad config, 3 unreadable or
malformed dataset, 4 training produced no associations, 5 checkpoint or
shape/domain problems during evaluation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention, clustering, evaluation, feature_store, losses, trainer, voting
from .errors import (
    DimMismatchError,
    DomainMismatchError,
    DuplicateIdError,
    EmptyInputError,
    InvalidConfigError,
    InvalidParamsError,
    LabelMissingError,
    MalformedFileError,
    ShapeMismatchError,
    StoreIoError,
    XspecError,
)

AUDIT_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_AUDIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NO_ASSOCIATIONS = 4
EXIT_MODEL = 5

_DATASET_ERRORS = (MalformedFileError, DuplicateIdError, StoreIoError, ShapeMismatchError)


@dataclass(frozen=True)
class Opt:
    name: str
    typ: type
    default: object
    help: str = ""
    flag: bool = False  # boolean store_true option


_CLUSTER_OPTS = [
    Opt("target", int, 10, "cluster count to stop merging at"),
    Opt("merge_fraction", float, 0.05, "fraction of cluster pairs merged per sweep"),
    Opt("silhouette_threshold", float, 0.6, "drop samples at or below this silhouette"),
    Opt("min_cluster_size", int, 2, "smallest anchor-eligible cluster"),
    Opt("max_size_factor", float, 3.0, "largest eligible size as a multiple of the mean"),
]

_LOSS_OPTS = [
    Opt("margin", float, 0.3, "triplet hinge margin"),
    Opt("sparsity_weight", float, 1e-3, "weight of the L1 penalty on attended outputs"),
]

OPTIONS = {
    "synth": [
        Opt("ids", int, 10, "number of identities"),
        Opt("per_id", int, 8, "samples per identity per domain"),
        Opt("patches", int, 4, "patches per sample"),
        Opt("channels", int, 8, "channels per patch"),
        Opt("latent_dim", int, 6, "identity latent dimensionality"),
        Opt("gap", float, 0.15, "domain gap between the two generator maps"),
        Opt("noise", float, 0.01, "per-sample noise sigma"),
        Opt("seed", int, 0, "generator seed"),
    ],
    "cluster": [
        Opt("data", str, None, "dataset directory or manifest path"),
        Opt("domain", str, "both", "rgb, ir, or both"),
        *_CLUSTER_OPTS,
    ],
    "train": [
        Opt("data", str, None, "dataset directory or manifest path"),
        *_CLUSTER_OPTS,
        Opt("mb_steps", int, 0, "memory-bank warm-up steps"),
        Opt("mb_temperature", float, 0.1, "memory-bank softmax temperature"),
        *_LOSS_OPTS,
        Opt("epochs", int, 20, "training epochs"),
        Opt("batch_size", int, 32, "triplets per optimizer step"),
        Opt("lr", float, 1e-4, "RMSProp learning rate"),
        Opt("rmsprop_decay", float, 0.99, "RMSProp accumulator decay"),
        Opt("rmsprop_eps", float, 1e-8, "RMSProp denominator epsilon"),
        Opt("seed", int, 0, "seed for init, splits, voting order and mining"),
        Opt("early_stop", bool, False, "stop on validation rank-1 drop", flag=True),
        Opt("val_fraction", float, 0.0, "held-out fraction per domain"),
        Opt("c_out", int, 128, "projection output channels"),
        Opt("per_assoc", int, 16, "anchor-positive combos mined per association"),
        Opt("recluster_every", int, 0, "re-run clustering every N epochs (0 = never)"),
        Opt("attention_probs", bool, False, "mix with softmax probabilities instead of log-probabilities", flag=True),
    ],
    "eval": [
        Opt("data", str, None, "dataset directory or manifest path"),
        Opt("checkpoint", str, None, "trained checkpoint path"),
        Opt("mode", str, "ir2vis", "ir2vis (IR probes, RGB gallery) or vis2ir"),
        Opt("threads", int, None, "worker threads (default XSPEC_THREADS or 1)"),
        Opt("attention_probs", bool, False, "must match the flag used at training time", flag=True),
    ],
    "audit": [
        Opt("trials", int, 100, "random triplets to check"),
        Opt("eps", float, 1e-5, "central-difference step"),
        Opt("seed", int, 0, "instance seed"),
        Opt("patches", int, 4, "patches per synthetic sample"),
        Opt("c_in", int, 8, "input channels"),
        Opt("c_out", int, 4, "projection output channels"),
        *_LOSS_OPTS,
    ],
    "report": [],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xspec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=str, default=None, help="flat JSON key/value config file")
        if cmd == "report":
            p.add_argument("inputs", nargs="+", help="eval report JSON files")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            if o.flag:
                p.add_argument(flag, action="store_true", default=None, help=o.help)
            else:
                p.add_argument(flag, type=o.typ, default=None, help=o.help)
        if cmd == "audit":
            p.add_argument("-o", "--out", type=str, default=None, help="output directory")
        else:
            p.add_argument("-o", "--out", type=str, required=True, help="output directory")
    return parser


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; returns the full value map."""
    file_vals = {}
    if args.config:
        try:
            file_vals = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_vals, dict):
            raise InvalidConfigError("config file must hold a flat JSON object")
    known = {o.name: o for o in OPTIONS[cmd]}
    for key in file_vals:
        if key not in known:
            raise InvalidConfigError(f"unknown config key {key!r} for {cmd}")
    resolved = {"command": cmd}
    for o in OPTIONS[cmd]:
        value = getattr(args, o.name)
        if value is None:
            value = file_vals.get(o.name, o.default)
        if value is not None and not o.flag:
            try:
                value = o.typ(value)
            except (TypeError, ValueError) as exc:
                raise InvalidConfigError(f"bad value for {o.name}: {value!r}") from exc
        if o.flag:
            value = bool(value)
        resolved[o.name] = value
    resolved["out"] = args.out
    return resolved


def _write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _load_data(path) -> feature_store.Dataset:
    if path is None:
        raise InvalidConfigError("--data is required")
    return feature_store.load_dataset(path)


def _threads(cfg: dict) -> int:
    if cfg.get("threads") is not None:
        n = cfg["threads"]
    else:
        env = os.environ.get("XSPEC_THREADS", "").strip()
        if env:
            try:
                n = int(env)
            except ValueError:
                raise InvalidConfigError(f"XSPEC_THREADS={env!r} is not an integer") from None
        else:
            n = 1
    if n < 1:
        raise InvalidConfigError(f"thread count must be >= 1, got {n}")
    return n


def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    ds = feature_store.synth_dataset(
        feature_store.SynthConfig(
            n_identities=cfg["ids"],
            samples_per_id_per_domain=cfg["per_id"],
            patches=cfg["patches"],
            channels=cfg["channels"],
            latent_dim=cfg["latent_dim"],
            domain_gap=cfg["gap"],
            noise_sigma=cfg["noise"],
            seed=cfg["seed"],
        )
    )
    _write_config(cfg, out)
    feature_store.write_dataset(ds, out)
    print(f"wrote {len(ds.rgb)} RGB + {len(ds.ir)} IR samples to {out}")
    return EXIT_OK


def _cluster_params(cfg: dict, mb_steps: int = 0, mb_temperature: float = 0.1):
    return clustering.ClusterParams(
        target_clusters=cfg["target"],
        merge_fraction=cfg["merge_fraction"],
        silhouette_threshold=cfg["silhouette_threshold"],
        min_cluster_size=cfg["min_cluster_size"],
        max_cluster_size_factor=cfg["max_size_factor"],
        mb_temperature=mb_temperature,
        mb_steps=mb_steps,
    )


def cmd_cluster(cfg: dict) -> int:
    out = Path(cfg["out"])
    try:
        ds = _load_data(cfg["data"])
    except _DATASET_ERRORS as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    if cfg["domain"] not in ("rgb", "ir", "both"):
        raise InvalidConfigError(f"bad domain {cfg['domain']!r}")
    params = _cluster_params(cfg)
    _write_config(cfg, out)
    summary = {}
    tags = ("rgb", "ir") if cfg["domain"] == "both" else (cfg["domain"],)
    for tag in tags:
        samples = list(ds.rgb if tag == "rgb" else ds.ir)
        if not samples:
            summary[tag] = {"n_samples": 0}
            continue
        desc = clustering.descriptor_matrix(samples, None)
        raw = clustering.agglomerate(desc, params)
        state = clustering.filter_clusters(raw, desc, params)
        clustering.export_assignments_csv(state, samples, out / f"clusters_{tag}.csv")
        labels = np.array([fm.true_label for fm in samples])
        ari = (
            clustering.adjusted_rand_index(labels, raw.assignment)
            if (labels >= 0).all()
            else None
        )
        n_assigned = int((state.assignment != clustering.NO_CLUSTER).sum())
        summary[tag] = {
            "n_samples": len(samples),
            "n_clusters": int(state.n_clusters),
            "n_assigned": n_assigned,
            "n_removed": len(samples) - n_assigned,
            "n_eligible": int(state.eligible.sum()),
            "ari": ari,
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"clustered {'+'.join(tags)} into {out}")
    return EXIT_OK


def _write_assoc_csvs(log: trainer.TrainLog, out: Path) -> None:
    for rec in log.records:
        lines = ["rgb_cluster,ir_cluster,votes,total,correct"]
        for a in rec.get("associations", []):
            tail = "" if a["correct"] is None else str(int(a["correct"]))
            lines.append(f"{a['rgb']},{a['ir']},{a['votes']},{a['total']},{tail}")
        path = out / f"assoc_epoch_{rec['epoch']:03d}.csv"
        path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    try:
        ds = _load_data(cfg["data"])
    except _DATASET_ERRORS as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    cluster_params = _cluster_params(cfg, cfg["mb_steps"], cfg["mb_temperature"])
    loss_cfg = losses.LossConfig(margin=cfg["margin"], sparsity_weight=cfg["sparsity_weight"])
    train_cfg = trainer.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        rmsprop_decay=cfg["rmsprop_decay"],
        rmsprop_eps=cfg["rmsprop_eps"],
        seed=cfg["seed"],
        early_stop=cfg["early_stop"],
        val_fraction=cfg["val_fraction"],
        c_out=cfg["c_out"],
        per_assoc=cfg["per_assoc"],
        recluster_every=cfg["recluster_every"],
        prob_space=cfg["attention_probs"],
    )
    params, log = trainer.train(ds, cluster_params, loss_cfg, train_cfg)
    _write_config(cfg, out)
    attention.save_checkpoint(params, out / "model.ckpt", rng_seed=cfg["seed"])
    (out / "train_log.jsonl").write_text(log.to_jsonl())
    _write_assoc_csvs(log, out)
    if log.no_associations:
        print("warning: no associations in any epoch; checkpoint equals the seeded init", file=sys.stderr)
        return EXIT_NO_ASSOCIATIONS
    last = next((r["loss"] for r in reversed(log.records) if r["loss"] is not None), None)
    print(f"trained {len(log.records)} epochs, final loss {last}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    try:
        ds = _load_data(cfg["data"])
    except _DATASET_ERRORS as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    if cfg["mode"] not in ("ir2vis", "vis2ir"):
        raise InvalidConfigError(f"bad mode {cfg['mode']!r}")
    if cfg["checkpoint"] is None:
        raise InvalidConfigError("--checkpoint is required")
    try:
        params, _ = attention.load_checkpoint(cfg["checkpoint"])
        if params.c_in != ds.channels:
            raise ShapeMismatchError(
                f"checkpoint expects {params.c_in} channels, dataset has {ds.channels}"
            )
        probes, gallery = (
            (list(ds.ir), list(ds.rgb)) if cfg["mode"] == "ir2vis" else (list(ds.rgb), list(ds.ir))
        )
        sm = evaluation.score_all(
            probes, gallery, params, cfg["attention_probs"], threads=_threads(cfg)
        )
        report = evaluation.evaluate(
            sm, metadata={"mode": cfg["mode"], "checkpoint": cfg["checkpoint"]}
        )
    except (
        MalformedFileError,
        StoreIoError,
        ShapeMismatchError,
        DomainMismatchError,
        DimMismatchError,
        LabelMissingError,
        EmptyInputError,
    ) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    _write_config(cfg, out)
    (out / "report.json").write_text(report.to_json())
    evaluation.export_roc_csv(report, out / "roc.csv")
    evaluation.export_cmc_csv(sm, out / "cmc.csv")
    print(
        f"{cfg['mode']}: rank1 {report.cmc[1]:.4f}  map {report.map:.4f}  "
        f"auc {report.auc:.4f}  eer {report.eer:.4f}"
    )
    return EXIT_OK


def cmd_audit(cfg: dict) -> int:
    ds = feature_store.synth_dataset(
        feature_store.SynthConfig(
            n_identities=6,
            samples_per_id_per_domain=2,
            patches=cfg["patches"],
            channels=cfg["c_in"],
            latent_dim=min(cfg["c_in"], 4),
            domain_gap=0.3,
            noise_sigma=0.5,
            seed=cfg["seed"],
        )
    )
    params = attention.init_params(cfg["c_in"], cfg["c_out"], cfg["seed"])
    loss_cfg = losses.LossConfig(margin=cfg["margin"], sparsity_weight=cfg["sparsity_weight"])
    result = trainer.finite_diff_audit(
        params, ds, loss_cfg, eps=cfg["eps"], trials=cfg["trials"], seed=cfg["seed"]
    )
    ok = result.max_rel_error <= AUDIT_TOLERANCE
    payload = {
        "max_rel_error": result.max_rel_error,
        "worst_coord": result.worst_coord,
        "trials": result.trials,
        "tolerance": AUDIT_TOLERANCE,
        "pass": ok,
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if cfg["out"]:
        out = Path(cfg["out"])
        _write_config(cfg, out)
        (out / "audit.json").write_text(text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_AUDIT_FAIL


def cmd_report(cfg: dict, inputs) -> int:
    out = Path(cfg["out"])
    rows = []
    for path in inputs:
        try:
            rep = evaluation.EvalReport.from_json(Path(path).read_text())
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"cannot read report {path}: {exc}", file=sys.stderr)
            return EXIT_DATASET
        cells = [
            path,
            str(rep.n_probes),
            str(rep.n_gallery),
            *(repr(rep.cmc[k]) if k in rep.cmc else "" for k in (1, 5, 10, 20)),
            repr(rep.map),
            repr(rep.auc),
            repr(rep.eer),
            *(
                repr(rep.tar_at_far[x]) if x in rep.tar_at_far else ""
                for x in (0.01, 0.05)
            ),
        ]
        rows.append(",".join(cells))
    header = "path,n_probes,n_gallery,rank1,rank5,rank10,rank20,map,auc,eer,tar_far_0.01,tar_far_0.05"
    _write_config(cfg, out)
    (out / "report.csv").write_text("\n".join([header] + rows) + "\n")
    print(f"merged {len(rows)} reports into {out / 'report.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code) if exc.code else EXIT_OK
    try:
        cfg = _resolve(args.command, args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "audit":
            return cmd_audit(cfg)
        return cmd_report(cfg, args.inputs)
    except (InvalidConfigError, InvalidParamsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except XspecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())
