import json
import subprocess
import sys

import numpy as np
import pytest

from xspec import cli
from xspec.cli import (
    EXIT_CONFIG,
    EXIT_DATASET,
    EXIT_MODEL,
    EXIT_NO_ASSOCIATIONS,
    EXIT_OK,
    main,
)

SYNTH_EASY = [
    "--ids", "4", "--per-id", "4", "--patches", "4", "--channels", "8",
    "--gap", "0.2", "--noise", "0.02", "--seed", "0",
]
TRAIN_FAST = [
    "--target", "4", "--epochs", "2", "--batch-size", "8",
    "--lr", "1e-3", "--c-out", "8", "--per-assoc", "4",
]


def _dir_bytes(root, skip=()):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", *SYNTH_EASY, "-o", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("model")
    code = main(["train", "--data", str(dataset_dir), *TRAIN_FAST, "-o", str(out)])
    assert code == EXIT_OK
    return out


# --- synth ---------------------------------------------------------------------

def test_synth_outputs(dataset_dir):
    assert (dataset_dir / "manifest.json").exists()
    assert (dataset_dir / "config.json").exists()
    cfg = json.loads((dataset_dir / "config.json").read_text())
    assert cfg["command"] == "synth" and cfg["ids"] == 4
    from xspec.feature_store import load_dataset

    ds = load_dataset(dataset_dir)
    assert len(ds.rgb) == 16 and len(ds.ir) == 16


def test_synth_rerun_byte_identical(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", *SYNTH_EASY, "-o", str(out)]) == EXIT_OK
    first = _dir_bytes(out)
    for p in out.iterdir():
        p.unlink()
    assert main(["synth", *SYNTH_EASY, "-o", str(out)]) == EXIT_OK
    assert _dir_bytes(out) == first


# --- config resolution ------------------------------------------------------------

def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"ids": 3, "per_id": 2, "noise": 0.0}))
    out = tmp_path / "d"
    assert main(["synth", "--config", str(cfg_file), "--ids", "5", "-o", str(out)]) == EXIT_OK
    used = json.loads((out / "config.json").read_text())
    assert used["ids"] == 5       # flag beats file
    assert used["per_id"] == 2    # file beats default
    assert used["patches"] == 4   # default survives


def test_unknown_config_key_rejected(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"idz": 3}))
    assert main(["synth", "--config", str(cfg_file), "-o", str(tmp_path / "d")]) == EXIT_CONFIG


def test_malformed_config_rejected(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text("{nope")
    assert main(["synth", "--config", str(cfg_file), "-o", str(tmp_path / "d")]) == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "absent.json"), "-o", str(tmp_path / "d")]) == EXIT_CONFIG


def test_usage_error_exit_code():
    assert main([]) == 2
    assert main(["synth"]) == 2  # missing required -o


def test_bad_flag_value_exit_code(tmp_path):
    assert main(["synth", "--ids", "x", "-o", str(tmp_path / "d")]) == 2


# --- cluster -------------------------------------------------------------------

def test_cluster_pipeline(dataset_dir, tmp_path):
    out = tmp_path / "c"
    code = main([
        "cluster", "--data", str(dataset_dir), "--domain", "both",
        "--target", "4", "--silhouette-threshold", "-1.1", "-o", str(out),
    ])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    for tag in ("rgb", "ir"):
        assert summary[tag]["n_samples"] == 16
        assert summary[tag]["n_clusters"] == 4
        assert summary[tag]["ari"] == 1.0
        body = (out / f"clusters_{tag}.csv").read_text().splitlines()
        assert body[0] == "sample_id,domain,cluster_id,silhouette,eligible"
        assert len(body) == 17


def test_cluster_single_domain(dataset_dir, tmp_path):
    out = tmp_path / "c"
    assert main([
        "cluster", "--data", str(dataset_dir), "--domain", "ir", "--target", "4", "-o", str(out),
    ]) == EXIT_OK
    assert (out / "clusters_ir.csv").exists()
    assert not (out / "clusters_rgb.csv").exists()


def test_cluster_bad_domain(dataset_dir, tmp_path):
    assert main([
        "cluster", "--data", str(dataset_dir), "--domain", "thermal", "-o", str(tmp_path / "c"),
    ]) == EXIT_CONFIG


def test_cluster_missing_data(tmp_path):
    assert main(["cluster", "--data", str(tmp_path / "nope"), "-o", str(tmp_path / "c")]) == EXIT_DATASET


def test_cluster_corrupt_dataset(tmp_path, dataset_dir):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(dataset_dir, broken)
    victim = next(broken.glob("*.xsft"))
    victim.write_bytes(victim.read_bytes()[:-4])
    assert main(["cluster", "--data", str(broken), "--target", "4", "-o", str(tmp_path / "c")]) == EXIT_DATASET


# --- train ----------------------------------------------------------------------

def test_train_outputs(trained_dir):
    assert (trained_dir / "model.ckpt").exists()
    log_lines = (trained_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 2
    rec = json.loads(log_lines[0])
    assert rec["epoch"] == 1 and rec["n_triplets"] > 0
    assert (trained_dir / "assoc_epoch_001.csv").exists()
    assert (trained_dir / "assoc_epoch_002.csv").exists()
    head = (trained_dir / "assoc_epoch_001.csv").read_text().splitlines()[0]
    assert head == "rgb_cluster,ir_cluster,votes,total,correct"


def test_train_rerun_byte_identical(dataset_dir, tmp_path):
    out = tmp_path / "m"
    args = ["train", "--data", str(dataset_dir), *TRAIN_FAST, "-o", str(out)]
    assert main(args) == EXIT_OK
    first = _dir_bytes(out)
    for p in out.iterdir():
        p.unlink()
    assert main(args) == EXIT_OK
    assert _dir_bytes(out) == first


def test_train_no_associations_exit_code(dataset_dir, tmp_path):
    out = tmp_path / "m"
    code = main([
        "train", "--data", str(dataset_dir), *TRAIN_FAST,
        "--min-cluster-size", "10000", "-o", str(out),
    ])
    assert code == EXIT_NO_ASSOCIATIONS
    # outputs still written so the run can be inspected
    assert (out / "model.ckpt").exists()
    assert (out / "train_log.jsonl").exists()


def test_train_missing_data_flag(tmp_path):
    assert main(["train", *TRAIN_FAST, "-o", str(tmp_path / "m")]) == EXIT_CONFIG


# --- eval -----------------------------------------------------------------------

def test_eval_pipeline(dataset_dir, trained_dir, tmp_path):
    out = tmp_path / "e"
    code = main([
        "eval", "--data", str(dataset_dir), "--checkpoint", str(trained_dir / "model.ckpt"),
        "--mode", "ir2vis", "-o", str(out),
    ])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["n_probes"] == 16 and report["n_gallery"] == 16
    assert 0.0 <= report["cmc"]["1"] <= 1.0
    assert (out / "roc.csv").read_text().startswith("far,tar\n")
    assert (out / "cmc.csv").read_text().startswith("rank,rate\n1,")


def test_eval_modes_are_transposes(dataset_dir, trained_dir, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    ckpt = str(trained_dir / "model.ckpt")
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "--mode", "ir2vis", "-o", str(a)]) == EXIT_OK
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "--mode", "vis2ir", "-o", str(b)]) == EXIT_OK
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    # verification pools are shared between directions, ranking may differ
    assert ra["auc"] == pytest.approx(rb["auc"], abs=1e-12)
    assert ra["metadata"]["mode"] == "ir2vis" and rb["metadata"]["mode"] == "vis2ir"


def test_eval_rerun_byte_identical(dataset_dir, trained_dir, tmp_path):
    out = tmp_path / "e"
    args = [
        "eval", "--data", str(dataset_dir), "--checkpoint", str(trained_dir / "model.ckpt"),
        "-o", str(out),
    ]
    assert main(args) == EXIT_OK
    first = _dir_bytes(out)
    for p in out.iterdir():
        p.unlink()
    assert main(args) == EXIT_OK
    assert _dir_bytes(out) == first


def test_eval_threads_env_bitwise_equal(dataset_dir, trained_dir, tmp_path, monkeypatch):
    ckpt = str(trained_dir / "model.ckpt")
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "-o", str(a)]) == EXIT_OK
    monkeypatch.setenv("XSPEC_THREADS", "2")
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "-o", str(b)]) == EXIT_OK
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "roc.csv").read_bytes() == (b / "roc.csv").read_bytes()
    assert (a / "cmc.csv").read_bytes() == (b / "cmc.csv").read_bytes()


def test_eval_threads_env_invalid(dataset_dir, trained_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("XSPEC_THREADS", "lots")
    assert main([
        "eval", "--data", str(dataset_dir), "--checkpoint", str(trained_dir / "model.ckpt"),
        "-o", str(tmp_path / "e"),
    ]) == EXIT_CONFIG


def test_eval_missing_checkpoint(dataset_dir, tmp_path):
    assert main([
        "eval", "--data", str(dataset_dir), "--checkpoint", str(tmp_path / "no.ckpt"),
        "-o", str(tmp_path / "e"),
    ]) == EXIT_MODEL


def test_eval_checkpoint_shape_mismatch(dataset_dir, tmp_path):
    from xspec import attention

    ckpt = tmp_path / "wide.ckpt"
    attention.save_checkpoint(attention.init_params(16, 4, seed=0), ckpt)
    assert main([
        "eval", "--data", str(dataset_dir), "--checkpoint", str(ckpt), "-o", str(tmp_path / "e"),
    ]) == EXIT_MODEL


def test_eval_unlabeled_data_rejected(trained_dir, tmp_path):
    from xspec.feature_store import SynthConfig, synth_dataset, write_dataset

    ds = synth_dataset(SynthConfig(n_identities=4, samples_per_id_per_domain=4, seed=0)).training_view()
    anon = tmp_path / "anon"
    write_dataset(ds, anon)
    assert main([
        "eval", "--data", str(anon), "--checkpoint", str(trained_dir / "model.ckpt"),
        "-o", str(tmp_path / "e"),
    ]) == EXIT_MODEL


def test_eval_bad_mode(dataset_dir, trained_dir, tmp_path):
    assert main([
        "eval", "--data", str(dataset_dir), "--checkpoint", str(trained_dir / "model.ckpt"),
        "--mode", "sideways", "-o", str(tmp_path / "e"),
    ]) == EXIT_CONFIG


# --- audit ----------------------------------------------------------------------

def test_audit_passes_and_writes_json(tmp_path):
    out = tmp_path / "a"
    code = main(["audit", "--trials", "3", "--c-in", "6", "--c-out", "3", "-o", str(out)])
    assert code == EXIT_OK
    payload = json.loads((out / "audit.json").read_text())
    assert payload["pass"] is True
    assert payload["trials"] == 3
    assert payload["max_rel_error"] < 1e-4
    assert payload["tolerance"] == 1e-4


def test_audit_without_out_dir(capsys):
    assert main(["audit", "--trials", "2", "--c-in", "6", "--c-out", "3"]) == EXIT_OK
    assert '"pass": true' in capsys.readouterr().out


def test_audit_fails_on_corrupted_gradients(monkeypatch, tmp_path):
    from xspec import attention, trainer

    real = attention.backward_pair

    def crooked(*args, **kwargs):
        grads = real(*args, **kwargs)
        for g in grads.as_tuple():
            g *= 1.02
        return grads

    monkeypatch.setattr(trainer.attention, "backward_pair", crooked)
    code = main(["audit", "--trials", "2", "--c-in", "6", "--c-out", "3", "-o", str(tmp_path / "a")])
    assert code == cli.EXIT_AUDIT_FAIL
    payload = json.loads((tmp_path / "a" / "audit.json").read_text())
    assert payload["pass"] is False


# --- report ----------------------------------------------------------------------

def test_report_merges(dataset_dir, trained_dir, tmp_path):
    e1 = tmp_path / "e1"
    e2 = tmp_path / "e2"
    ckpt = str(trained_dir / "model.ckpt")
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "--mode", "ir2vis", "-o", str(e1)]) == EXIT_OK
    assert main(["eval", "--data", str(dataset_dir), "--checkpoint", ckpt, "--mode", "vis2ir", "-o", str(e2)]) == EXIT_OK
    out = tmp_path / "r"
    assert main(["report", str(e1 / "report.json"), str(e2 / "report.json"), "-o", str(out)]) == EXIT_OK
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == (
        "path,n_probes,n_gallery,rank1,rank5,rank10,rank20,map,auc,eer,tar_far_0.01,tar_far_0.05"
    )
    assert len(lines) == 3
    for ln in lines[1:]:
        cells = ln.split(",")
        assert cells[1] == "16" and cells[2] == "16"
        float(cells[3])  # rank1 parses


def test_report_bad_input(tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text("{}")
    assert main(["report", str(bad), "-o", str(tmp_path / "r")]) == EXIT_DATASET
    assert main(["report", str(tmp_path / "absent.json"), "-o", str(tmp_path / "r")]) == EXIT_DATASET


# --- console entry point -----------------------------------------------------------

def test_console_script_runs(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "xspec.cli", "synth", "--ids", "2", "--per-id", "2", "-o", str(tmp_path / "d")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "d" / "manifest.json").exists()
