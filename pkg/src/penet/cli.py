"""Command-line workflow driver: one subcommand per pipeline stage.

Every command writes files (corpus directories, checkpoints, PNGs, CSV,
JSON) and never opens a display; given identical flags and seed the
outputs are byte-identical, except for the report timestamp, which
``--deterministic`` suppresses.  ``--seed`` falls back to the
``PENET_SEED`` environment variable, then to a per-command default.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np
import torch

from . import posekit
from .checkpoint import load_checkpoint
from .evalkit import (
    ABLATION_ROWS,
    ablation_report,
    assemble_grid,
    estimator_error,
    evaluate_trained,
    pose_eval,
    save_png,
    train_pose_estimator,
)
from .generator import PENetGenerator, compose
from .synthdata import SignerSpec, figure_regions, gen_corpus, read_corpus
from .trainer import TrainConfig, TrainData, Trainer, pose_conditioning, train

JOINT_GROUPS = {
    "head": posekit.HEAD_KEYPOINTS,
    "torso": posekit.TORSO_KEYPOINTS,
    "l_hand": posekit.L_HAND_KEYPOINTS,
    "r_hand": posekit.R_HAND_KEYPOINTS,
    "hands": posekit.L_HAND_KEYPOINTS + posekit.R_HAND_KEYPOINTS,
    "all": tuple(range(posekit.K)),
}


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_seed(args, default):
    """--seed flag, else PENET_SEED, else the command's default."""
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PENET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"PENET_SEED must be an integer, got {env!r}")
    return default


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file ('#' starts a comment)."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', "
                    f"got {raw.strip()!r}")
            out[key.strip()] = val.strip()
    return out


def load_generator(path):
    """Generator-only checkpoint load; no corpus access.

    Enough for sampling and pose editing; `evaluate` restores the full
    trainer instead.
    """
    payload, config = load_checkpoint(path)
    cfg = TrainConfig.from_dict(config)
    gen = PENetGenerator(cfg.generator_config())
    gen.load_state_dict(payload["models"]["generator"])
    gen.eval()
    return gen, cfg, payload


def pose_masks(pose, signer, use_hand_mask=True):
    """Disjoint compositing masks from pose geometry alone.

    Same hand over head over torso precedence as the corpus renderer, so
    sampling needs no ground-truth frame.
    """
    regions = figure_regions(pose, signer)
    hand = regions["hand"]
    head = regions["head"] & ~hand
    torso = regions["torso"] & ~hand & ~head
    if not use_hand_mask:
        torso = torso | hand
        hand = np.zeros_like(hand)
    def t(m):
        return torch.from_numpy(m.astype(np.float32))[None, None]
    return t(head), t(hand), t(torso)


def _load_poses(path, cfg):
    rows = posekit.read_poses_jsonl(path, (cfg.image_size, cfg.image_size))
    if not rows:
        raise ValueError(f"no poses in {path}")
    return [pose for _, pose, _ in rows]


def _attr_inputs(cfg, attr_id):
    """(SignerSpec, attr tensor or None) for one attribute id."""
    signer = SignerSpec.from_attribute_id(attr_id)
    if not cfg.use_attribute:
        if attr_id != 0:
            raise ValueError(
                "checkpoint was trained without attribute conditioning; "
                "--attr has no effect (leave it at 0)")
        return signer, None
    return signer, torch.tensor([attr_id], dtype=torch.long)


def _prior_tile(gen, cfg, pose, z, attr, signer):
    """One composite prior sample as an HWC float array."""
    y = torch.from_numpy(
        pose_conditioning(pose, cfg.pose_format, cfg.pose_tau))[None]
    m_head, m_hand, m_torso = pose_masks(pose, signer, cfg.use_hand_mask)
    with torch.no_grad():
        out = gen(y, z, attr)
        comp = compose(out, m_head, m_hand, m_torso)
    return comp[0].permute(1, 2, 0).numpy()


def _jsonify(obj):
    """Make a report JSON-safe: NaN/inf -> null, numpy scalars -> python."""
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonify(obj.item())
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    return obj


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    seed = resolve_seed(args, 0)
    manifest = gen_corpus(args.out, n_signers=args.signers,
                          frames_per_signer=args.frames,
                          canvas=(args.canvas, args.canvas), seed=seed)
    print(f"wrote {args.out}: {manifest['n_frames']} frames, "
          f"{args.canvas}x{args.canvas}, seed {seed}")


def cmd_train(args):
    cfg_dict = read_config_file(args.config)
    if args.corpus:
        cfg_dict["corpus"] = args.corpus
    if args.steps is not None:
        cfg_dict["steps"] = str(args.steps)
    seed = resolve_seed(args, None)
    if seed is not None:
        cfg_dict["seed"] = str(seed)
    cfg = TrainConfig.from_dict(cfg_dict)
    if not cfg.corpus:
        raise ValueError("config must set 'corpus' (or pass --corpus)")
    state = train(cfg, log_path=args.log, ckpt_path=args.ckpt,
                  resume=args.resume)
    if state.history:
        last = state.history[-1]
        print(f"step {state.step}: total {last['total']:.4f} "
              f"d_loss {last['d_loss']:.4f}")
    print(f"wrote {args.ckpt}")


def cmd_sample(args):
    seed = resolve_seed(args, 0)
    gen, cfg, _ = load_generator(args.ckpt)
    poses = _load_poses(args.poses, cfg)
    signer, attr = _attr_inputs(cfg, args.attr)
    g = torch.Generator().manual_seed(seed)
    tiles = []
    for pose in poses:
        for _ in range(args.n):
            z = torch.randn(1, cfg.latent_dim, generator=g)
            tiles.append(_prior_tile(gen, cfg, pose, z, attr, signer))
    save_png(assemble_grid(tiles, n_cols=args.n), args.out)
    print(f"wrote {args.out}: {len(poses)} poses x {args.n} samples")


def cmd_pose_edit(args):
    seed = resolve_seed(args, 0)
    gen, cfg, _ = load_generator(args.ckpt)
    poses = _load_poses(args.poses, cfg)
    if not (0 <= args.index < len(poses)):
        raise ValueError(f"--index {args.index} out of range "
                         f"(file has {len(poses)} poses)")
    joints = parse_joints(args.joints)
    original = poses[args.index]
    edited = original.copy()
    edited.keypoints[joints, 0] += args.dx
    edited.keypoints[joints, 1] += args.dy
    np.clip(edited.keypoints[:, 0], 0.0, cfg.image_size - 1,
            out=edited.keypoints[:, 0])
    np.clip(edited.keypoints[:, 1], 0.0, cfg.image_size - 1,
            out=edited.keypoints[:, 1])
    edited.validate()
    signer, attr = _attr_inputs(cfg, args.attr)
    z = torch.randn(1, cfg.latent_dim,
                    generator=torch.Generator().manual_seed(seed))
    tiles = [_prior_tile(gen, cfg, p, z, attr, signer)
             for p in (original, edited)]
    save_png(assemble_grid(tiles, n_cols=2), args.out)
    print(f"wrote {args.out}: pose {args.index}, joints {args.joints}, "
          f"dx {args.dx:+g} dy {args.dy:+g}")


def parse_joints(spec) -> list:
    """Comma-separated keypoint names and/or group names -> indices."""
    idx = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token in JOINT_GROUPS:
            idx.extend(JOINT_GROUPS[token])
        elif token in posekit.KP:
            idx.append(posekit.KP[token])
        else:
            raise ValueError(
                f"unknown joint or group {token!r}; groups: "
                f"{', '.join(sorted(JOINT_GROUPS))}")
    if not idx:
        raise ValueError("no joints selected")
    return sorted(set(idx))


def cmd_grid(args):
    seed = resolve_seed(args, 0)
    models = [load_generator(p) for p in args.ckpts]
    cfg0 = models[0][1]
    for path, (_, cfg, _) in zip(args.ckpts, models):
        if cfg.image_size != cfg0.image_size:
            raise ValueError(f"{path}: image_size {cfg.image_size} differs "
                             f"from {args.ckpts[0]} ({cfg0.image_size})")
    poses = _load_poses(args.poses, cfg0)[:args.max_poses]
    tiles = []
    for gen, cfg, _ in models:
        signer, attr = _attr_inputs(cfg, args.attr)
        g = torch.Generator().manual_seed(seed)  # same z draw per row
        for pose in poses:
            z = torch.randn(1, cfg.latent_dim, generator=g)
            tiles.append(_prior_tile(gen, cfg, pose, z, attr, signer))
    save_png(assemble_grid(tiles, n_cols=len(poses)), args.out)
    print(f"wrote {args.out}: {len(models)} checkpoints x {len(poses)} poses")


def cmd_evaluate(args):
    seed = resolve_seed(args, 0)
    payload, config = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(config)
    frames, _ = read_corpus(args.corpus)
    data = TrainData(frames, cfg)
    trainer = Trainer.from_checkpoint(args.ckpt, data=data)

    metrics, edges = evaluate_trained(trainer, data)
    estimator = train_pose_estimator(frames, steps=args.estimator_steps,
                                     seed=seed)
    train_err = estimator_error(estimator, frames)

    index_of = {id(f.pose): i for i, f in enumerate(frames)}
    g = torch.Generator().manual_seed(seed)

    def generate(pose, sample_index):
        batch = data.batch([index_of[id(pose)]])
        z = torch.randn(1, cfg.latent_dim, generator=g)
        attr = batch["attr"] if cfg.use_attribute else None
        with torch.no_grad():
            out = trainer.generator(batch["y"], z, attr)
            comp = compose(out, batch["m_head"], batch["m_hand"],
                           batch["m_torso"])
        return comp[0].permute(1, 2, 0).numpy()

    report = pose_eval(generate, frames, estimator,
                       n_samples=args.pose_samples)

    doc = {
        "checkpoint": str(args.ckpt),
        "corpus": str(args.corpus),
        "step": int(payload["step"]),
        "estimator_training_error_px": train_err,
        "region_metrics": metrics.as_dict(),
        "boundary_edges": edges,
        "pose_eval": report.as_dict(),
    }
    if not args.deterministic:
        doc["generated_at"] = datetime.now(timezone.utc).isoformat()
    with open(args.out, "w") as fh:
        json.dump(_jsonify(doc), fh, indent=2, sort_keys=True,
                  allow_nan=False)
        fh.write("\n")
    if args.csv:
        write_region_csv(metrics, args.csv)
    comp_psnr, _ = metrics.psnr["composite"]
    comp_ssim, _ = metrics.ssim["composite"]
    hits = " ".join(f"{name} {r.hit_pct:.0f}%"
                    for name, r in report.regions.items())
    print(f"wrote {args.out}: PSNR {comp_psnr:.2f} SSIM {comp_ssim:.4f} "
          f"| Hit@ {hits}")


def write_region_csv(metrics, path):
    def cell(v):
        return "" if (v is None or math.isnan(v)) else f"{v:.4f}"

    lines = ["region,psnr_mean,psnr_std,ssim_mean,ssim_std,fid"]
    for region in metrics.psnr:
        pm, ps = metrics.psnr[region]
        sm, ss = metrics.ssim[region]
        lines.append(",".join([region, cell(pm), cell(ps), cell(sm),
                               cell(ss), cell(metrics.fid.get(region))]))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_ablate(args):
    seed = resolve_seed(args, 0)
    _, manifest = read_corpus(args.corpus)
    rows = None
    if args.rows:
        wanted = [t.strip() for t in args.rows.split(",") if t.strip()]
        known = {name for name, _ in ABLATION_ROWS}
        unknown = sorted(set(wanted) - known)
        if unknown:
            raise ValueError(f"unknown ablation rows {unknown}; "
                             f"available: {sorted(known)}")
        rows = [(n, o) for n, o in ABLATION_ROWS if n in set(wanted)]
    results = ablation_report(
        args.corpus, steps=args.steps, seed=seed, out_csv=args.out,
        out_grid=args.grid, rows=rows,
        overrides={"image_size": int(manifest["canvas"][0])},
        progress=lambda name: print(f"[ablate] {name}", flush=True))
    print(f"wrote {args.out}: {len(results)} rows")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $PENET_SEED, then 0; "
                             "for train, the config file's seed)")
    common.add_argument("--json-errors", action="store_true",
                        help="report runtime failures as JSON on stderr")
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps so identical flags give "
                             "byte-identical outputs")

    p = argparse.ArgumentParser(
        prog="penet",
        description="Pose-conditioned signer synthesis: corpus generation, "
                    "training, sampling, evaluation, ablation.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic signer corpus")
    g.add_argument("--out", required=True, help="corpus directory")
    g.add_argument("--signers", type=_positive_int, default=8)
    g.add_argument("--frames", type=_positive_int, default=16,
                   help="frames per signer")
    g.add_argument("--canvas", type=_positive_int, default=64,
                   help="square canvas size in pixels")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common],
                       help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", help="override the config's corpus path")
    t.add_argument("--steps", type=int, help="override the config's steps")
    t.add_argument("--ckpt", default="penet.ckpt", help="checkpoint to write")
    t.add_argument("--log", help="JSONL loss log to write")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common],
                       help="prior samples: rows = poses, columns = draws")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--poses", required=True, help="poses JSONL file")
    s.add_argument("--n", type=_positive_int, default=5,
                   help="samples per pose")
    s.add_argument("--attr", type=int, default=0, help="attribute id")
    s.add_argument("--out", default="samples.png")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", parents=[common],
                       help="region metrics + pose-fidelity report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", default="report.json")
    e.add_argument("--csv", help="also write per-region metrics CSV")
    e.add_argument("--pose-samples", type=_positive_int, default=5,
                   help="prior samples per pose for the fidelity report")
    e.add_argument("--estimator-steps", type=_positive_int, default=400,
                   help="training steps for the toy pose estimator")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common],
                       help="train every ablation row, write the table CSV")
    a.add_argument("--corpus", required=True)
    a.add_argument("--steps", type=_positive_int, default=600,
                   help="training steps per row")
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--grid", help="also write a comparison grid PNG")
    a.add_argument("--rows", help="comma-separated row names (default: all)")
    a.set_defaults(func=cmd_ablate)

    pe = sub.add_parser("pose-edit", parents=[common],
                        help="side-by-side render of a pose and its edit")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--poses", required=True, help="poses JSONL file")
    pe.add_argument("--index", type=int, default=0, help="pose row to edit")
    pe.add_argument("--dx", type=float, default=0.0,
                    help="horizontal shift in pixels")
    pe.add_argument("--dy", type=float, default=0.0,
                    help="vertical shift in pixels")
    pe.add_argument("--joints", default="head",
                    help="comma-separated keypoints or groups "
                         "(head, torso, hands, l_hand, r_hand, all)")
    pe.add_argument("--attr", type=int, default=0, help="attribute id")
    pe.add_argument("--out", default="pose_edit.png")
    pe.set_defaults(func=cmd_pose_edit)

    gr = sub.add_parser("grid", parents=[common],
                        help="comparison sheet: rows = checkpoints, "
                             "columns = poses")
    gr.add_argument("--ckpts", required=True, nargs="+",
                    help="checkpoints, one grid row each")
    gr.add_argument("--poses", required=True, help="poses JSONL file")
    gr.add_argument("--max-poses", type=_positive_int, default=6)
    gr.add_argument("--attr", type=int, default=0, help="attribute id")
    gr.add_argument("--out", default="grid.png")
    gr.set_defaults(func=cmd_grid)

    return p


def run(argv=None) -> int:
    """Parse and execute; returns the process exit code.

    argparse exits 2 on usage errors by itself; runtime failures exit 1,
    as plain text or JSON on stderr per --json-errors.
    """
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single exit path by contract
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__,
                              "message": str(exc)}), file=sys.stderr)
        else:
            print(f"penet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    raise SystemExit(run())
