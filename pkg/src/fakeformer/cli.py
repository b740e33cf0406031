"""``fakeformer`` command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import synthesis as syn
from . import vulnerability as vul
from .config import ConfigError, DataError, RunConfig, load_config, read_manifest, write_manifest
from .imageio import read_image, read_landmarks, write_gray, write_image, write_landmarks
from .training import CorpusItem, EpochRecord, make_fake, make_toy_corpus, predict_scores, train
from .weights import FormatError, load_params, save_params

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("fakeformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run config")
    p.add_argument("--seed", type=int, default=d, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="BLAS threads (default 1)")
    p.add_argument("--out", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fakeformer", description="Blending-based deepfake detection with a ViT and L2-Att.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write pseudo-fakes, boundaries and heatmap targets")
    _global_flags(p, suppress=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--toy", type=int, metavar="N", help="generate N procedural faces as the reals")
    src.add_argument("--manifest", help="manifest of real images with landmarks")
    p.add_argument("--mode", choices=("SBI", "BI"), help="synthesis mode (default from config)")

    p = sub.add_parser("train", help="train a detector")
    _global_flags(p, suppress=True)
    p.add_argument("--manifest", help="training manifest (default: toy corpus)")
    p.add_argument("--val-manifest", help="validation manifest")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    p = sub.add_parser("eval", help="score a labelled manifest")
    _global_flags(p, suppress=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stratify", action="store_true", help="per Mask-SSIM bin AUC (fakes need a reference)")
    p.add_argument("--perturb", action="store_true", help="robustness under unseen perturbations")

    p = sub.add_parser("infer", help="score one image")
    _global_flags(p, suppress=True)
    p.add_argument("--weights", required=True)
    p.add_argument("image")
    p.add_argument("--landmarks", help="landmark JSON (checked, not needed for scoring)")

    p = sub.add_parser("verify", help="run the oracle suite")
    _global_flags(p, suppress=True)
    return parser


# helpers


def _resolve(args) -> RunConfig:
    if args.config is None and args.seed is None:
        args.seed = 0
    cfg = load_config(args.config, args.seed)
    if args.out is not None:
        cfg.paths.out = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Optional[Path]) -> None:
    text = cfg.dumps()
    log.info("effective config:\n%s", text.rstrip())
    if out is not None:
        (out / "config.json").write_text(text)


def _load_corpus(manifest: str, model_cfg) -> list[CorpusItem]:
    """Group the real records of a manifest into per-source items."""
    groups: dict[str, list] = {}
    for rec in read_manifest(manifest):
        if rec.label != "real":
            continue
        if rec.landmarks is None:
            raise DataError(f"{rec.image}: real frames need landmarks for synthesis")
        img = _read_sized(rec.image, model_cfg)
        lms = read_landmarks(rec.landmarks, img.shape[1], img.shape[2])
        groups.setdefault(rec.source_id, []).append((img, lms))
    if not groups:
        raise DataError(f"{manifest}: no real frames")
    return [CorpusItem(sid, frames) for sid, frames in groups.items()]


def _read_sized(path: str, model_cfg=None) -> np.ndarray:
    try:
        img = read_image(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if model_cfg is not None and img.shape[1:] != (model_cfg.height, model_cfg.width):
        raise DataError(f"{path}: image is {img.shape[2]}x{img.shape[1]}, model expects {model_cfg.width}x{model_cfg.height}")
    return img


# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    mode = args.mode or cfg.train.synthesis
    size = cfg.model.height
    if args.manifest:
        corpus = _load_corpus(args.manifest, None)
    else:
        n = args.toy if args.toy is not None else cfg.toy_size
        if n < 1:
            raise UsageError("--toy needs N >= 1")
        corpus = make_toy_corpus(n, size=size, seed=cfg.seed)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(len(corpus))]
    p = cfg.model.patch_size
    records = []
    for item, rng in zip(corpus, rngs):
        for fi, (img, lms) in enumerate(item.frames):
            stem = f"{item.source_id}_{fi:03d}"
            real_path = out / "real" / f"{stem}.png"
            lms_path = out / "real" / f"{stem}.json"
            write_image(real_path, img)
            write_landmarks(lms_path, lms)
            fake = make_fake(item, (img, lms), corpus, rng, mode, cfg.synth)
            heat = vul.ground_truth_heatmap(fake.boundary, p, cfg.train.patch_mode, cfg.train.sigma)
            fake_path = out / "fake" / f"{stem}.png"
            write_image(fake_path, fake.image)
            write_gray(out / "boundary" / f"{stem}.png", fake.boundary)
            write_gray(out / "heatmap" / f"{stem}.png", heat)
            side = {
                "heatmap": heat.round(12).tolist(),
                "vulnerable_patches": sorted(list(pt) for pt in vul.vulnerable_patches(fake.boundary, p, cfg.train.patch_mode)),
                "boundary_max": float(fake.boundary.max()),
                "provenance": fake.provenance,
            }
            (out / "heatmap" / f"{stem}.json").write_text(json.dumps(side, sort_keys=True) + "\n")
            rel = lambda q: str(q.relative_to(out))  # noqa: E731
            records.append({"image": rel(real_path), "landmarks": rel(lms_path), "label": "real", "source_id": item.source_id})
            records.append(
                {
                    "image": rel(fake_path),
                    "landmarks": rel(lms_path),
                    "label": "fake",
                    # a pseudo-fake is a new video derived from its source
                    "source_id": f"{item.source_id}-fake",
                    "reference": rel(real_path),
                }
            )
    write_manifest(str(out / "manifest.jsonl"), records)
    _echo_config(cfg, out)
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "real": len(records) // 2, "fake": len(records) // 2}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.manifest:
        cfg.paths.manifest = args.manifest
    if args.val_manifest:
        cfg.paths.val_manifest = args.val_manifest
    if args.epochs is not None:
        cfg.train = type(cfg.train).from_dict({**cfg.train.to_dict(), "epochs": args.epochs})
    out = _out_dir(cfg)
    if cfg.paths.manifest:
        corpus = _load_corpus(cfg.paths.manifest, cfg.model)
        val = _load_corpus(cfg.paths.val_manifest, cfg.model) if cfg.paths.val_manifest else None
    else:
        toy = make_toy_corpus(cfg.toy_size, size=cfg.model.height, seed=cfg.seed)
        n_val = int(round(cfg.val_fraction * len(toy)))
        corpus, val = toy[: len(toy) - n_val], (toy[len(toy) - n_val :] or None)
    _echo_config(cfg, out)
    hist_path = out / "history.jsonl"
    hist_path.write_text("")
    every = cfg.train.checkpoint_every

    def on_epoch(rec: EpochRecord, params) -> None:
        with open(hist_path, "a") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        if every and (rec.epoch + 1) % every == 0:
            save_params(params, out / "checkpoints" / f"epoch_{rec.epoch + 1:03d}.fkf")

    params, history = train(corpus, cfg.model, cfg.train, val_corpus=val, synth=cfg.synth, on_epoch=on_epoch)
    save_params(params, out / "weights.fkf")
    last = history[-1]
    print(json.dumps({"weights": str(out / "weights.fkf"), "epochs": len(history), "final": last.to_dict()}, sort_keys=True))
    return EXIT_OK


def _mask_for(rec, shape) -> np.ndarray:
    if rec.landmarks is None:
        return np.ones(shape)
    lms = read_landmarks(rec.landmarks, shape[0], shape[1])
    return syn.convex_hull_mask(lms, shape)


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    params = load_params(args.weights)
    records = read_manifest(args.manifest)
    labels = np.array([1 if r.label == "fake" else 0 for r in records])
    if labels.min() == labels.max():
        raise DataError("evaluation needs both real and fake records")
    images = np.stack([_read_sized(r.image, params.config) for r in records])
    ids = [r.source_id for r in records]
    bs = cfg.eval.batch_size
    scores = predict_scores(params, images, bs)

    frame = ev.build_report(scores, labels, "frame")
    vids, vscores, vlabels = ev.video_level(scores, labels, ids, cfg.eval.aggregation)
    video = None
    if vlabels.min() != vlabels.max():
        video = ev.build_report(vscores, vlabels, "video")

    if args.stratify:
        ms = np.full(len(records), np.nan)
        for i, r in enumerate(records):
            if labels[i] == 1:
                if r.reference is None:
                    raise DataError(f"{r.image}: --stratify needs a 'reference' real image for every fake")
                ref = _read_sized(r.reference, params.config)
                ms[i] = ev.mask_ssim(images[i], ref, _mask_for(r, images[i].shape[1:]))
        frame.bins = ev.stratify_by_ssim(scores, labels, np.nan_to_num(ms, nan=1.0), cfg.eval.bins)

    if args.perturb:
        rows = []
        root = np.random.SeedSequence(cfg.seed)
        kinds = list(cfg.eval.perturbations)
        streams = root.spawn(len(kinds) * len(cfg.eval.severities))
        k = 0
        for kind in kinds:
            for sev in cfg.eval.severities:
                rng = np.random.default_rng(streams[k])
                k += 1
                pimgs = np.stack([ev.perturb(im, kind, int(sev), rng) for im in images])
                ps = predict_scores(params, pimgs, bs)
                rows.append(
                    {"kind": kind, "severity": int(sev), "auc": ev.auc(ps, labels),
                     "ap": ev.average_precision(ps, labels), "count": len(labels)}
                )
        frame.perturbations = rows

    reports = [frame] + ([video] if video else [])
    doc = {"frame": frame.to_dict(), "video": video.to_dict() if video else None, "n_videos": len(vids)}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "report.csv").write_text(ev.report_to_csv(reports))
    (out / "scores.jsonl").write_text(
        "".join(json.dumps({"image": r.image, "score": float(s), "label": r.label}) + "\n" for r, s in zip(records, scores))
    )
    _echo_config(cfg, out)
    print(json.dumps({"frame_auc": frame.auc, "frame_ap": frame.ap, "video_auc": video.auc if video else None}))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import forward

    cfg = _resolve(args)
    out = _out_dir(cfg)
    params = load_params(args.weights)
    img = _read_sized(args.image, params.config)
    if args.landmarks:
        lms = read_landmarks(args.landmarks, img.shape[1], img.shape[2])
        if not lms.in_bounds():
            raise DataError("landmarks fall outside the image")
    res = forward(img, params)
    heat_path = out / (Path(args.image).stem + "_heatmap.png")
    write_gray(heat_path, res.heatmap.data)
    _echo_config(cfg, out)
    print(json.dumps({"score": float(res.score), "heatmap": str(heat_path)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    cfg = _resolve(args)
    _echo_config(cfg, _out_dir(cfg) if args.out is not None else None)
    ok, _ = run_suite(print)
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "verify": cmd_verify}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("fakeformer: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fakeformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, syn.SynthesisError, ev.MetricError, FileNotFoundError) as exc:
        print(f"fakeformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
