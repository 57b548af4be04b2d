import hashlib
import json
import os

import pytest
import torch

from flowrestore.cli import main
from flowrestore.images import save_png
from flowrestore.pipeline import DatasetManifest
from flowrestore.shapes import random_spec, synth_image

import numpy as np

TINY_CONFIG = """
codec:
  spatial_factor: 2
  latent_channels: 4
  train: {epochs: 2, batch_size: 16, learning_rate: 0.003, hidden_channels: 16, seed: 0}
backbone:
  n_blocks: 2
  hidden_dim: 32
  n_heads: 2
  patch_size: 2
  text_dim: 8
  pooled_dim: 8
  vocab_size: 16
  time_freq_dim: 8
backbone_train: {steps: 6, batch_size: 8, learning_rate: 0.001, seed: 1}
adapter: {rank: 8, mode: se}
adapter_train: {steps: 4, batch_size: 4, learning_rate: 0.001, seed: 2}
generation: {count: 4, steps: 2, resolution: 16, seed: 3, batch_size: 2}
degradation:
  scale: 4
  master_seed: 11
  stage1:
    blur: {sigma_range: [0.2, 1.0], kernel_size_range: [3, 5]}
  stage2:
    blur: {prob: 0.5, sigma_range: [0.2, 0.6], kernel_size_range: [3, 5]}
    resize: {anchor: lq, scale_range: [0.8, 1.2]}
  final:
    sinc_kernel_size_range: [3, 5]
restore: {steps: 2, seed: 5, target_resolution: 16}
"""


def _hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_audit_params_prints_reference_total(capsys):
    assert main(["audit-params", "--hidden", "3072", "--blocks", "57", "--rank", "32"]) == 0
    out = capsys.readouterr().out
    assert "22.8M" in out
    assert "1076.2M" in out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["audit-params", "--bogus", "3"]) == 2


def test_missing_input_is_data_error(tmp_path, capsys):
    rc = main(["filter", "--scores-from", "proxy", "--manifest", str(tmp_path / "nope.jsonl")])
    assert rc == 3


def test_filter_keeps_95_of_100(tmp_path, capsys):
    rng = np.random.default_rng(0)
    records = []
    for i in range(100):
        img = synth_image(random_spec(rng))
        path = str(tmp_path / f"img_{i:03d}.png")
        save_png(img, path)
        records.append({"image_id": f"img_{i:03d}", "hq_path": path})
    manifest_path = str(tmp_path / "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    assert main(["filter", "--scores-from", "proxy", "--keep", "0.95",
                 "--manifest", manifest_path]) == 0
    manifest = DatasetManifest.load(manifest_path)
    assert sum(bool(r.selected) for r in manifest.records) == 95


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full tiny pipeline compose: every command feeds the next."""
    root = tmp_path_factory.mktemp("cli")
    cfg = str(root / "run.yaml")
    with open(cfg, "w") as fh:
        fh.write(TINY_CONFIG)

    corpus = str(root / "corpus")
    assert main(["synth-corpus", "--n", "30", "--seed", "0", "--resolution", "16",
                 "--out", corpus]) == 0
    codec = str(root / "codec.pt")
    assert main(["train-codec", "--config", cfg, "--corpus", corpus, "--out", codec]) == 0
    backbone = str(root / "backbone.pt")
    assert main(["train-backbone", "--config", cfg, "--corpus", corpus,
                 "--codec", codec, "--out", backbone]) == 0
    gen = str(root / "gen")
    assert main(["gen", "--config", cfg, "--backbone", backbone, "--codec", codec,
                 "--out", gen]) == 0
    manifest = os.path.join(gen, "manifest.jsonl")
    assert main(["filter", "--scores-from", "proxy,proxy-entropy", "--keep", "0.9",
                 "--manifest", manifest]) == 0
    lq_dir = str(root / "lq")
    assert main(["degrade", "--config", cfg, "--manifest", manifest, "--out", lq_dir]) == 0
    adapter = str(root / "adapter.pt")
    assert main(["train-adapter", "--config", cfg, "--backbone", backbone,
                 "--codec", codec, "--data", manifest, "--out", adapter]) == 0
    return {"root": root, "cfg": cfg, "corpus": corpus, "codec": codec,
            "backbone": backbone, "gen": gen, "manifest": manifest,
            "lq_dir": lq_dir, "adapter": adapter}


def test_pipeline_compose_artifacts_exist(workspace):
    manifest = DatasetManifest.load(workspace["manifest"])
    assert len(manifest) == 4
    selected = manifest.selected_records()
    assert selected and all(r.lq_path and os.path.exists(r.lq_path) for r in selected)
    assert os.path.exists(os.path.join(workspace["gen"], "run-record.json"))
    assert os.path.exists(workspace["adapter"] + ".run-record.json")
    assert os.path.exists(workspace["adapter"] + ".losslog.jsonl")


def test_restore_roundtrip_and_determinism(workspace, tmp_path):
    manifest = DatasetManifest.load(workspace["manifest"])
    lq_path = manifest.selected_records()[0].lq_path
    out1 = str(tmp_path / "restored1.png")
    out2 = str(tmp_path / "restored2.png")
    base = ["restore", "--config", workspace["cfg"], "--lq", lq_path,
            "--backbone", workspace["backbone"], "--adapter", workspace["adapter"],
            "--codec", workspace["codec"], "--steps", "2", "--seed", "7"]
    assert main(base + ["--out", out1]) == 0
    assert main(base + ["--out", out2]) == 0
    assert _hash(out1) == _hash(out2)


def test_restore_directory_and_eval(workspace, tmp_path):
    manifest = DatasetManifest.load(workspace["manifest"])
    lq_dir = str(tmp_path / "lq")
    os.makedirs(lq_dir)
    for rec in manifest.selected_records():
        os.link(rec.lq_path, os.path.join(lq_dir, os.path.basename(rec.lq_path)))
    restored = str(tmp_path / "restored")
    assert main(["restore", "--config", workspace["cfg"], "--lq", lq_dir,
                 "--backbone", workspace["backbone"], "--adapter", workspace["adapter"],
                 "--codec", workspace["codec"], "--out", restored]) == 0
    report = str(tmp_path / "report.json")
    assert main(["eval", "--restored", restored, "--metrics", "proxy",
                 "--report", report]) == 0
    data = json.load(open(report))
    assert data["count"] == len(manifest.selected_records())
    assert "proxy" in data["means"]


def test_eval_requires_reference_for_psnr(workspace, tmp_path):
    restored = str(tmp_path / "r")
    os.makedirs(restored)
    save_png(torch.rand(16, 16, 3), os.path.join(restored, "a.png"))
    rc = main(["eval", "--restored", restored, "--metrics", "psnr",
               "--report", str(tmp_path / "rep.json")])
    assert rc == 3


def test_fingerprint_mismatch_exit_code(workspace, tmp_path):
    """Adapter trained against one backbone must refuse another."""
    other_cfg = str(tmp_path / "other.yaml")
    with open(other_cfg, "w") as fh:
        fh.write(TINY_CONFIG.replace("backbone_train: {steps: 6, batch_size: 8, learning_rate: 0.001, seed: 1}",
                                     "backbone_train: {steps: 6, batch_size: 8, learning_rate: 0.001, seed: 99}"))
    other_backbone = str(tmp_path / "other_backbone.pt")
    assert main(["train-backbone", "--config", other_cfg,
                 "--corpus", workspace["corpus"], "--codec", workspace["codec"],
                 "--out", other_backbone]) == 0
    manifest = DatasetManifest.load(workspace["manifest"])
    lq_path = manifest.selected_records()[0].lq_path
    rc = main(["restore", "--config", workspace["cfg"], "--lq", lq_path,
               "--backbone", other_backbone, "--adapter", workspace["adapter"],
               "--codec", workspace["codec"], "--out", str(tmp_path / "x.png")])
    assert rc == 4


def test_degrade_verify_detects_missing_file(workspace):
    manifest = DatasetManifest.load(workspace["manifest"])
    victim = manifest.selected_records()[0].lq_path
    payload = open(victim, "rb").read()
    try:
        os.unlink(victim)
        rc = main(["degrade", "--config", workspace["cfg"],
                   "--manifest", workspace["manifest"], "--out", workspace["lq_dir"],
                   "--verify"])
        assert rc == 3
    finally:
        with open(victim, "wb") as fh:
            fh.write(payload)
    assert main(["degrade", "--config", workspace["cfg"],
                 "--manifest", workspace["manifest"], "--out", workspace["lq_dir"],
                 "--verify"]) == 0


def test_run_record_contents(workspace):
    record = json.load(open(os.path.join(workspace["gen"], "run-record.json")))
    assert record["command"] == "gen"
    assert record["config_echo"].strip().startswith("codec:")
    assert "torch_version" in record and "seeds" in record and "wall_time_s" in record


def test_train_backbone_is_seeded_reproducibly(workspace, tmp_path):
    out_a = str(tmp_path / "bb_a.pt")
    out_b = str(tmp_path / "bb_b.pt")
    for out in (out_a, out_b):
        assert main(["train-backbone", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"], "--codec", workspace["codec"],
                     "--out", out]) == 0
    from flowrestore.backbone import VelocityBackbone

    assert VelocityBackbone.load(out_a).fingerprint() == VelocityBackbone.load(out_b).fingerprint()
