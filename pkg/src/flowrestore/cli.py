"""Single command-line entry point for the whole workflow.

Subcommands cover corpus synthesis, codec/backbone pretraining, data
generation + filtering + degradation, adapter training, restoration,
evaluation, and the control-parameter audit. Every command writes a run
record (config echo, seeds, versions, wall time) next to its outputs so a
run can be reproduced from the record alone.

Exit codes: 0 success, 2 usage error, 3 data error, 4 fingerprint or
checkpoint-compatibility error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shlex
import sys
import time

import numpy as np
import torch

from . import __version__
from .adapter import AdapterConfigError, ControlAdapter, FingerprintMismatchError, count_adapter_params
from .backbone import VelocityBackbone
from .checkpoint import CheckpointError
from .codec import CodecConfigError, LatentCodec, train_codec
from .config import ConfigError, load_run_config
from .degradations import DegradationConfigError
from .images import load_png, save_png
from .metrics import MetricError, ScorerRegistry, SubprocessScorer, evaluate_dataset
from .pipeline import (
    DatasetManifest,
    PipelineError,
    apply_selection,
    build_pairs,
    generate_images,
    load_pair_tensors,
    score_images,
    select_top,
    verify_pairs,
)
from .sampling import generate_unconditional, restore
from .shapes import synth_corpus
from .training import encode_pairs, train_adapter, train_backbone

USAGE_EXIT, DATA_EXIT, COMPAT_EXIT = 2, 3, 4


class UsageError(ValueError):
    pass


def _echo(msg: str) -> None:
    print(msg, flush=True)


def _write_run_record(out: str, command: str, args: argparse.Namespace,
                      config_raw: str, config_obj, seeds: dict, wall: float,
                      outputs: dict) -> None:
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "config_echo": config_raw,
        "config": dataclasses.asdict(config_obj) if dataclasses.is_dataclass(config_obj) else config_obj,
        "seeds": seeds,
        "wall_time_s": wall,
        "outputs": outputs,
    }
    if os.path.isdir(out):
        path = os.path.join(out, "run-record.json")
    else:
        path = out + ".run-record.json"
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)


def _registry_from_args(args) -> ScorerRegistry:
    registry = ScorerRegistry()
    for spec in getattr(args, "plugin", None) or []:
        if "=" not in spec:
            raise UsageError(f"--plugin expects NAME=COMMAND, got {spec!r}")
        name, command = spec.split("=", 1)
        registry.register(SubprocessScorer(name, shlex.split(command)))
    return registry


# ---- subcommand implementations ----------------------------------------------


def cmd_synth_corpus(args) -> int:
    start = time.monotonic()
    images, specs = synth_corpus(args.n, args.seed, args.resolution)
    os.makedirs(args.out, exist_ok=True)
    spec_path = os.path.join(args.out, "specs.jsonl")
    with open(spec_path, "w") as fh:
        for i, (img, spec) in enumerate(zip(images, specs)):
            name = f"shape_{i:06d}.png"
            save_png(img, os.path.join(args.out, name))
            fh.write(json.dumps({"file": name, "spec": json.loads(spec.to_json())}) + "\n")
    _write_run_record(args.out, "synth-corpus", args, "", {"n": args.n, "resolution": args.resolution},
                      {"seed": args.seed}, time.monotonic() - start,
                      {"images": len(images), "specs": spec_path})
    _echo(f"wrote {len(images)} images to {args.out}")
    return 0


def _load_corpus_dir(path: str) -> torch.Tensor:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"corpus directory not found: {path}")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise PipelineError(f"no PNG images in corpus directory {path}")
    return torch.stack([load_png(os.path.join(path, n)) for n in names])


def cmd_train_codec(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    corpus = _load_corpus_dir(args.corpus)
    if cfg.codec.kind != "conv_autoencoder":
        raise CodecConfigError("train-codec only trains the conv_autoencoder kind")
    codec, history = train_codec(
        corpus,
        cfg.codec.train,
        spatial_factor=cfg.codec.spatial_factor,
        latent_channels=cfg.codec.latent_channels,
        log_fn=_echo,
    )
    codec.save(args.out)
    _write_run_record(args.out, "train-codec", args, raw, cfg,
                      {"seed": cfg.codec.train.seed}, time.monotonic() - start,
                      {"checkpoint": args.out, "final_l1": history[-1], "epochs": history})
    _echo(f"codec saved to {args.out} (final L1 {history[-1]:.5f})")
    return 0


def cmd_train_backbone(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    corpus = _load_corpus_dir(args.corpus)
    codec = LatentCodec.load(args.codec) if args.codec else LatentCodec.identity()
    torch.manual_seed(cfg.backbone_train.seed)
    backbone = VelocityBackbone(dataclasses.replace(cfg.backbone, latent_channels=codec.latent_channels))
    backbone, log = train_backbone(
        backbone, codec, corpus, cfg.backbone_train, cfg.sampler,
        log_path=args.out + ".losslog.jsonl", log_fn=_echo,
    )
    backbone.save(args.out)
    _write_run_record(args.out, "train-backbone", args, raw, cfg,
                      {"seed": cfg.backbone_train.seed}, time.monotonic() - start,
                      {"checkpoint": args.out, "final_loss": log.records[-1]["total"]})
    _echo(f"backbone saved to {args.out}")
    return 0


def cmd_gen(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    gen_cfg = cfg.generation
    if args.count is not None:
        gen_cfg = dataclasses.replace(gen_cfg, count=args.count)
    if args.seed is not None:
        gen_cfg = dataclasses.replace(gen_cfg, seed=args.seed)
    backbone = VelocityBackbone.load(args.backbone)
    codec = LatentCodec.load(args.codec) if args.codec else LatentCodec.identity()
    manifest = generate_images(backbone, codec, gen_cfg, args.out, log_fn=_echo)
    manifest_path = os.path.join(args.out, "manifest.jsonl")
    manifest.save(manifest_path)
    _write_run_record(args.out, "gen", args, raw, cfg, {"seed": gen_cfg.seed},
                      time.monotonic() - start,
                      {"manifest": manifest_path, "count": len(manifest)})
    _echo(f"generated {len(manifest)} images; manifest at {manifest_path}")
    return 0


def cmd_filter(args) -> int:
    start = time.monotonic()
    manifest = DatasetManifest.load(args.manifest)
    registry = _registry_from_args(args)
    scorer_names = [s.strip() for s in args.scores_from.split(",") if s.strip()]
    records = score_images(manifest, scorer_names, registry, log_fn=_echo)
    selected = select_top(records, args.keep)
    apply_selection(manifest, selected)
    out = args.out or args.manifest
    manifest.save(out)
    _write_run_record(out, "filter", args, "", {"scorers": scorer_names, "keep": args.keep},
                      {}, time.monotonic() - start,
                      {"manifest": out, "selected": len(selected), "total": len(manifest)})
    _echo(f"selected {len(selected)}/{len(manifest)} images (keep={args.keep})")
    return 0


def cmd_degrade(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    manifest = DatasetManifest.load(args.manifest)
    if args.verify:
        flagged = verify_pairs(manifest)
        for rid in flagged:
            _echo(f"flagged: {rid}")
        _echo(f"verify: {len(flagged)} flagged of {len(manifest.selected_records())} pairs")
        return DATA_EXIT if flagged else 0
    build_pairs(manifest, cfg.degradation, args.out, workers=args.workers, log_fn=_echo)
    out_manifest = args.manifest_out or args.manifest
    manifest.save(out_manifest)
    _write_run_record(args.out, "degrade", args, raw, cfg,
                      {"master_seed": cfg.degradation.master_seed},
                      time.monotonic() - start,
                      {"manifest": out_manifest, "pairs": len(manifest.selected_records())})
    _echo(f"degraded {len(manifest.selected_records())} images into {args.out}")
    return 0


def cmd_train_adapter(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    backbone = VelocityBackbone.load(args.backbone)
    codec = LatentCodec.load(args.codec) if args.codec else LatentCodec.identity()
    manifest = DatasetManifest.load(args.data)
    hq, lq = load_pair_tensors(manifest)
    z0, zlq = encode_pairs(hq, lq, codec, upsample=cfg.restore.upsample)

    torch.manual_seed(cfg.adapter_train.seed)
    adapter = ControlAdapter(backbone, rank=cfg.adapter.rank, mode=cfg.adapter.mode)
    resume_state = None
    if args.resume:
        resume_state = torch.load(args.resume, map_location="cpu", weights_only=False)
        _echo(f"resuming from step {resume_state['step']}")
    adapter, log, _ = train_adapter(
        backbone, adapter, codec, z0, zlq,
        cfg.adapter_train, cfg.sampler, cfg.loss,
        log_path=args.out + ".losslog.jsonl",
        checkpoint_path=args.out,
        resume_state=resume_state,
        log_fn=_echo,
    )
    _write_run_record(args.out, "train-adapter", args, raw, cfg,
                      {"seed": cfg.adapter_train.seed}, time.monotonic() - start,
                      {"checkpoint": args.out, "final_loss": log.records[-1]["total"] if log.records else None,
                       "pairs": int(z0.shape[0])})
    _echo(f"adapter saved to {args.out}")
    return 0


def cmd_restore(args) -> int:
    start = time.monotonic()
    cfg, raw = load_run_config(args.config)
    rcfg = cfg.restore
    if args.steps is not None:
        rcfg = dataclasses.replace(rcfg, steps=args.steps)
    if args.seed is not None:
        rcfg = dataclasses.replace(rcfg, seed=args.seed)
    backbone = VelocityBackbone.load(args.backbone)
    codec = LatentCodec.load(args.codec) if args.codec else LatentCodec.identity()
    adapter = ControlAdapter.load(args.adapter, backbone)

    if os.path.isdir(args.lq):
        names = sorted(f for f in os.listdir(args.lq) if f.lower().endswith(".png"))
        if not names:
            raise PipelineError(f"no PNG images in {args.lq}")
        os.makedirs(args.out, exist_ok=True)
        for n in names:
            img, _ = restore(load_png(os.path.join(args.lq, n)), backbone, adapter, codec, rcfg)
            save_png(img, os.path.join(args.out, n))
        count = len(names)
    else:
        lq = load_png(args.lq)
        img, traj = restore(lq, backbone, adapter, codec, rcfg,
                            keep_trajectory=bool(args.dump_trajectory))
        save_png(img, args.out)
        if args.dump_trajectory:
            os.makedirs(args.dump_trajectory, exist_ok=True)
            index = []
            for i, (t, z) in enumerate(traj.points):
                name = f"step_{i:03d}_t{t:.3f}.png"
                save_png(codec.decode(z), os.path.join(args.dump_trajectory, name))
                index.append({"k": i, "t": t, "file": name})
            with open(os.path.join(args.dump_trajectory, "index.json"), "w") as fh:
                json.dump(index, fh, indent=2)
        count = 1
    _write_run_record(args.out, "restore", args, raw, cfg, {"seed": rcfg.seed},
                      time.monotonic() - start, {"restored": count, "steps": rcfg.steps})
    _echo(f"restored {count} image(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    start = time.monotonic()
    registry = _registry_from_args(args)
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate_dataset(args.restored, args.reference, metric_names, registry)
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    _write_run_record(args.report, "eval", args, "", {"metrics": metric_names},
                      {}, time.monotonic() - start,
                      {"report": args.report, "count": report.count, "means": report.means})
    for metric, value in report.means.items():
        _echo(f"{metric}: {value:.4f}")
    return 0


def cmd_audit_params(args) -> int:
    start = time.monotonic()
    ranks = sorted({args.rank, 16, 32, 64, 128})
    lines = []
    for r in ranks:
        audit = count_adapter_params(args.hidden, r, args.blocks, args.branches)
        lines.append(f"rank {r:>4}: SE total {audit.se_total / 1e6:.1f}M "
                     f"({audit.se_total:,} params), ratio {100 * audit.ratio:.2f}% of full")
    full = count_adapter_params(args.hidden, args.rank, args.blocks, args.branches)
    lines.append(f"full-rank: {full.full_total / 1e6:.1f}M ({full.full_total:,} params)")
    for line in lines:
        _echo(line)
    if args.record:
        _write_run_record(args.record, "audit-params", args, "",
                          {"hidden": args.hidden, "blocks": args.blocks,
                           "rank": args.rank, "branches": args.branches},
                          {}, time.monotonic() - start, {"lines": lines})
    return 0


# ---- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowrestore",
        description="Rectified-flow image restoration: data factory, adapter training, inference.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="render the procedural shape corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_corpus)

    p = sub.add_parser("train-codec", help="train the convolutional latent codec")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_codec)

    p = sub.add_parser("train-backbone", help="pretrain the flow backbone")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_backbone)

    p = sub.add_parser("gen", help="generate images from the trained backbone")
    p.add_argument("--config")
    p.add_argument("--backbone", required=True)
    p.add_argument("--codec")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("filter", help="score images and keep the top fraction")
    p.add_argument("--scores-from", required=True, help="comma-separated scorer names")
    p.add_argument("--keep", type=float, default=0.95)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output manifest (default: update in place)")
    p.add_argument("--plugin", action="append", help="NAME=COMMAND subprocess scorer")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("degrade", help="build LQ/HQ training pairs")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--manifest-out")
    p.add_argument("--out", required=True, help="directory for LQ images")
    p.add_argument("--verify", action="store_true", help="check recorded pairs instead of building")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_degrade)

    p = sub.add_parser("train-adapter", help="train the control adapter")
    p.add_argument("--config")
    p.add_argument("--backbone", required=True)
    p.add_argument("--codec")
    p.add_argument("--data", required=True, help="paired dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="training-state file to resume from")
    p.set_defaults(fn=cmd_train_adapter)

    p = sub.add_parser("restore", help="restore one LQ image or a directory")
    p.add_argument("--config")
    p.add_argument("--lq", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--codec")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-trajectory", help="directory for per-step decoded frames")
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("eval", help="compute metrics over a restored directory")
    p.add_argument("--restored", required=True)
    p.add_argument("--reference")
    p.add_argument("--metrics", default="psnr,ssim,proxy")
    p.add_argument("--report", required=True)
    p.add_argument("--plugin", action="append", help="NAME=COMMAND subprocess scorer")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("audit-params", help="control-parameter accounting table")
    p.add_argument("--hidden", type=int, default=3072)
    p.add_argument("--blocks", type=int, default=57)
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--branches", type=int, default=2)
    p.add_argument("--record", help="write a run record next to this path")
    p.set_defaults(fn=cmd_audit_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, AdapterConfigError, CodecConfigError,
            DegradationConfigError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (FingerprintMismatchError, CheckpointError) as exc:
        print(f"error: compat: {exc}", file=sys.stderr)
        return COMPAT_EXIT
    except (PipelineError, MetricError, FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
