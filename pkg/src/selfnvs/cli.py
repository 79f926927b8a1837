"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All commands take
``--seed`` so every run is reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch


class UsageError(ValueError):
    pass


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"bad size '{text}', expected HxW") from exc


def cmd_gen_data(args) -> int:
    from .synthetic import GeneratorConfig, generate_dataset

    h, w = _parse_size(args.size)
    cfg = GeneratorConfig(
        n_clips=args.clips, frames_per_clip=args.frames, height=h, width=w, split=args.split
    )
    manifest = generate_dataset(args.out, cfg, seed=args.seed)
    print(f"wrote {args.clips} clips to {manifest}")
    return 0


def cmd_ingest(args) -> int:
    from .data import ingest_frames

    h, w = _parse_size(args.size)
    manifest = ingest_frames(args.src, args.out, height=h, width=w, clip_length=args.clip_length)
    print(f"wrote manifest {manifest}")
    return 0


def _load_config(args):
    from .data import Config, toy_config, toy_small_config

    if args.config:
        cfg = Config.load(args.config)
    elif getattr(args, "preset", None) == "toy32":
        cfg = toy_small_config()
    else:
        cfg = toy_config()
    if getattr(args, "steps", None):
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    from .data import DatasetManifest, FrameDataset
    from .pipeline import StageOrderError, Trainer

    cfg = _load_config(args)
    cfg.train.stage = args.stage
    if args.stage == 2 and not args.resume and not args.from_scratch:
        raise UsageError("stage 2 needs --resume <stage-1 checkpoint> (or --from-scratch)")
    manifest = DatasetManifest.load(Path(args.data))
    dataset = FrameDataset(manifest)
    try:
        trainer = Trainer(
            cfg, dataset, out_dir=args.out, init_from=args.resume, from_scratch=args.from_scratch
        )
    except StageOrderError as exc:
        raise UsageError(str(exc)) from exc
    history = trainer.run()
    trainer.close()
    final = history[-1]
    print(f"finished {len(history)} steps; final total loss {final.total:.6f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint_final'}")
    return 0


def _clip_frames(manifest, clip_id: str):
    for clip in manifest.clips:
        if clip.clip_id == clip_id:
            return clip
    raise UsageError(f"clip '{clip_id}' not in manifest")


def cmd_render(args) -> int:
    from .data import DatasetManifest, load_image
    from .evaluation import save_comparison_grid
    from .geometry import Extrinsics, average_cameras
    from .pipeline import load_model
    from .splat import rasterize

    model, cfg, stage = load_model(args.ckpt)
    manifest = DatasetManifest.load(Path(args.data))
    clip = _clip_frames(manifest, args.clip)
    frames = torch.stack([load_image(manifest.root / p) for p in clip.frames[:2]])

    with torch.no_grad():
        fs = model.per_frame_features(frames)
        cams = model.predict_cameras(fs)
        fc, raw = model.predict_context(fs)
        if args.target_pose == "interp":
            target = average_cameras(cams[0], cams[1])
        else:
            rec = json.loads(Path(args.target_pose).read_text())
            K = cams[0][0]
            target = (K, Extrinsics(q=torch.tensor(rec["q"]), t=torch.tensor(rec["t"])))
        latent = model.synthesize_view(fc, cams, target)
        splat_img = None
        if stage >= 2:
            from .evaluation import splat_scene_from_context

            scene, _ = splat_scene_from_context(model, raw, cams, [0, 1])
            out = rasterize(scene, target[0], target[1], frames.shape[1], frames.shape[2])
            splat_img = out.color
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_comparison_grid(out_path, frames[0], latent, splat_img)
    print(f"wrote {out_path}")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .evaluation import EvalReport, build_eval_cases, run_target_aligned, run_target_aware
    from .pipeline import load_model

    model, cfg, stage = load_model(args.ckpt)
    manifest = DatasetManifest.load(Path(args.data))
    cases = build_eval_cases(manifest, context_gap=args.gap, max_cases=args.max_cases)
    if not cases:
        raise UsageError("no evaluation cases (dataset lacks ground-truth cameras?)")
    report = EvalReport(protocol=args.protocol)
    for case in cases:
        if args.protocol == "aware":
            report.results.append(run_target_aware(model, case, stage))
        else:
            report.results.append(run_target_aligned(model, case, stage, refine=args.refine))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    report.save_csv(out_dir / "pose_errors.csv")
    summary = report.summary()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_interp(args) -> int:
    from .data import load_image, save_image
    from .pipeline import interpolated_inference, load_model

    model, cfg, stage = load_model(args.ckpt)
    frame_a = load_image(args.frame_a)
    frame_b = load_image(args.frame_b)
    with torch.no_grad():
        result = interpolated_inference(model, frame_a, frame_b, stage=stage)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cams = []
    for K, P in result.cameras:
        cams.append(
            {
                "fx": float(K.fx.detach()),
                "fy": float(K.fy.detach()),
                "width": K.width,
                "height": K.height,
                "q": [float(x) for x in P.q.detach()],
                "t": [float(x) for x in P.t.detach()],
            }
        )
    (out_dir / "cameras.json").write_text(json.dumps(cams, indent=2) + "\n")
    if result.mid_image is not None:
        save_image(result.mid_image, out_dir / "mid_frame.png")
    print(f"wrote {out_dir / 'cameras.json'} (fallback={result.fallback})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfnvs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=5)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", default="64x64")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="normalize a directory of frames into a dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--clip-length", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=("toy", "toy32"), default="toy")
    p.add_argument("--data", required=True, help="path to a dataset manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to initialize from")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a clip at a target pose")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--target-pose", required=True, help="pose JSON file or 'interp'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("aware", "aligned"), required=True)
    p.add_argument("--refine", action="store_true", help="40-step test-pose refinement")
    p.add_argument("--out", required=True)
    p.add_argument("--gap", type=int, default=4)
    p.add_argument("--max-cases", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interp", help="two-frame interpolated inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("frame_a")
    p.add_argument("frame_b")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_interp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage/help; remap its error code to 1
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "seed", None) is not None:
        np.random.seed(args.seed)
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
