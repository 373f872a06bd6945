"""Command-line entry points: process, train, eval, datagen, ablate."""

import argparse
import dataclasses
import json
import os
import sys

from subaec import audio, pipeline, synth
from subaec.errors import ConfigurationError, FilterDesignError, TrainingError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="subaec",
        description="sub-band acoustic echo cancellation")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("process", help="cancel echo in a recording")
    pr.add_argument("--mic", required=True, help="microphone WAV")
    pr.add_argument("--farend", required=True, help="far-end reference WAV")
    pr.add_argument("--out", required=True, help="output WAV path")
    pr.add_argument("--config", help="key=value config file")
    pr.add_argument("--checkpoint", help="trained model weights")
    pr.add_argument("--linear-only", action="store_true",
                    help="skip the neural post-filter")

    tr = sub.add_parser("train", help="train the post-filter")
    tr.add_argument("--manifest", required=True, help="training manifest")
    tr.add_argument("--val-manifest", help="validation manifest")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--out-dir", required=True,
                    help="checkpoints and logs go here")

    ev = sub.add_parser("eval", help="measure ERLE and real-time factor")
    ev.add_argument("--manifest", required=True, help="evaluation manifest")
    ev.add_argument("--checkpoint", help="trained model weights")
    ev.add_argument("--report", required=True,
                    help="line-delimited JSON report path")
    ev.add_argument("--config", help="key=value config file")
    ev.add_argument("--limit", type=int, help="evaluate at most N clips")

    dg = sub.add_parser("datagen", help="synthesize a training corpus")
    dg.add_argument("--spec", required=True, help="dataset spec file")
    dg.add_argument("--out-dir", required=True, help="WAVs/manifest go here")
    dg.add_argument("--seed", type=int, default=0)

    ab = sub.add_parser("ablate", help="compare post-filter variants")
    ab.add_argument("--manifest", required=True, help="training manifest")
    ab.add_argument("--variants", default="linear," + ",".join(
        pipeline.ABLATION_VARIANTS),
        help="comma-separated list (linear,base,dsvad,tfcm,full)")
    ab.add_argument("--out-dir", default="ablation")
    ab.add_argument("--config", help="key=value config file")

    return p


def _single_thread():
    # timing-sensitive paths are specified single-threaded
    import torch
    torch.set_num_threads(1)


def _cmd_process(args) -> int:
    _single_thread()
    cfg, _ = pipeline.load_config(args.config)
    if args.checkpoint:
        cfg = dataclasses.replace(cfg, checkpoint=args.checkpoint)
    if args.linear_only:
        cfg = dataclasses.replace(cfg, linear_only=True)
    mic = audio.load_wav(args.mic)
    far = audio.load_wav(args.farend)
    canceller = pipeline.EchoCanceller(cfg)
    out = canceller.process(mic, far)
    audio.save_wav(args.out, out)
    print(f"wrote {args.out} ({out.duration:.2f} s, "
          f"latency {canceller.latency_samples()} samples)")
    return 0


def _cmd_train(args) -> int:
    cfg, tcfg = pipeline.load_config(args.config)
    trainer = pipeline.Trainer(args.manifest, args.out_dir,
                               val_manifest_path=args.val_manifest,
                               pipe_cfg=cfg, train_cfg=tcfg)
    history = trainer.train()
    for row in history:
        val = f"{row['val_loss']:.4f}" if row["val_loss"] is not None else "-"
        print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  "
              f"val {val}  lr {row['lr']:g}"
              + ("  (halved)" if row["lr_halved"] else ""))
    print(f"final checkpoint: {os.path.join(args.out_dir, 'final.ckpt')}")
    return 0


def _cmd_eval(args) -> int:
    _single_thread()
    cfg, _ = pipeline.load_config(args.config)
    report = pipeline.evaluate(args.manifest, checkpoint=args.checkpoint,
                               report_path=args.report, cfg=cfg,
                               limit=args.limit)
    print(report.table())
    print(f"\nper-clip records: {args.report}")
    return 0


def _parse_datagen_spec(path):
    """Dataset spec: clips/duration plus range.* and source.* overrides."""
    kv = pipeline.parse_config_file(path)
    n_clips, duration = 10, 8.0
    ranges, sources = {}, {}
    for key, raw in kv.items():
        try:
            if key == "clips":
                n_clips = int(raw)
            elif key == "duration":
                duration = float(raw)
            elif key.startswith("range."):
                name = key[len("range."):]
                if name not in synth.PAPER_RANGES:
                    raise ConfigurationError(
                        f"unknown range {name!r}; choose from "
                        f"{sorted(synth.PAPER_RANGES)}")
                lo, hi = raw.split(":", 1)
                ranges[name] = (float(lo), float(hi))
            elif key.startswith("source."):
                sources[key[len("source."):]] = \
                    [p.strip() for p in raw.split(",") if p.strip()]
            else:
                raise ConfigurationError(f"unknown dataset key {key!r}")
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from exc
    return n_clips, duration, ranges, sources


def _cmd_datagen(args) -> int:
    n_clips, duration, ranges, sources = _parse_datagen_spec(args.spec)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = os.path.join(args.out_dir, "manifest.jsonl")
    entries = synth.build_manifest(sources or None, n_clips, ranges or None,
                                   args.seed, manifest)
    synth.render_manifest(entries, args.out_dir, duration)
    counts = {}
    for e in entries:
        counts[e["scenario"]] = counts.get(e["scenario"], 0) + 1
    breakdown = ", ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
    print(f"rendered {len(entries)} clips ({breakdown})")
    print(f"manifest: {manifest}")
    return 0


def _cmd_ablate(args) -> int:
    _single_thread()
    cfg, tcfg = pipeline.load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = pipeline.ablate(args.manifest, variants, args.out_dir,
                           pipe_cfg=cfg, train_cfg=tcfg)
    with open(os.path.join(args.out_dir, "ablation.txt")) as f:
        print(f.read().rstrip())
    print(f"\nrecords: {os.path.join(args.out_dir, 'ablation.jsonl')}")
    return 0


_COMMANDS = {
    "process": _cmd_process,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "datagen": _cmd_datagen,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, FilterDesignError, TrainingError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
