"""Command-line surface: data generation, preprocessing, training, rollout,
evaluation, and the decode benchmark. Every command takes --config, --seed,
and --out; --seed overrides the config file."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from scalewm import config as cfg_mod
from scalewm.config import ConfigError, FullConfig, desk_config, load_config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=str, default="out", help="output directory")


def _load(args) -> FullConfig:
    if args.config is not None:
        return load_config(args.config, seed=args.seed)
    cfg = desk_config()
    if args.seed is not None:
        import dataclasses

        cfg = FullConfig(
            model=cfg.model,
            schedule=cfg.schedule,
            run=dataclasses.replace(cfg.run, seed=args.seed),
            data=cfg.data,
        )
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalewm",
        description="Scale-wise autoregressive world model toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic sprite episodes")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--length", type=int, default=None, help="frames per episode")
    p.add_argument("--sessions", action="store_true", help="emit raw 30fps sessions instead")

    p = sub.add_parser("preprocess", help="window raw sessions into episode records")
    _add_common(p)
    p.add_argument("--in", dest="indir", type=str, required=True)
    p.add_argument("--fps", type=int, default=15)
    p.add_argument("--tmin", type=int, default=51)
    p.add_argument("--tclip", type=int, default=30)
    p.add_argument("--min-clip", type=int, default=15)
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("train-tokenizer", help="train the multi-scale tokenizer")
    _add_common(p)
    p.add_argument("--data", type=str, default=None, help="episode directory (default: synthetic)")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--epochs", type=int, default=4)

    p = sub.add_parser("train-wm", help="train the world-model transformer")
    _add_common(p)
    p.add_argument("--tokenizer", type=str, required=True, help="tokenizer checkpoint dir")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--prompts", action="store_true", help="train with motion prompts")

    p = sub.add_parser("rollout", help="action-conditioned generation from an episode")
    _add_common(p)
    p.add_argument("--tokenizer", type=str, required=True)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--context", type=str, required=True, help="episode container dir")
    p.add_argument("--steps", type=int, default=4, help="future frames to generate")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--best-of", type=int, default=1)
    p.add_argument("--prompt", action="store_true", help="prepend a motion prompt")
    p.add_argument("--dump-layout", action="store_true")

    p = sub.add_parser("eval", help="PSNR/SSIM between prediction and ground-truth dirs")
    _add_common(p)
    p.add_argument("--pred", type=str, required=True)
    p.add_argument("--gt", type=str, required=True)

    p = sub.add_parser("bench", help="scale-wise vs raster decode benchmark")
    _add_common(p)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dump-layout", action="store_true")
    return parser


def _cmd_gen_data(args) -> int:
    from scalewm.data import SpritesEnv, generate_episode, generate_session, write_episode, write_session

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.run.seed)
    env = SpritesEnv(cfg.data.image_size, cfg.data.num_objects)
    length = args.length or cfg.data.episode_length
    for i in range(args.episodes):
        if args.sessions:
            write_session(generate_session(env, rng), out / f"session_{i:05d}")
        else:
            write_episode(generate_episode(env, length, rng), out / f"ep_{i:05d}")
    print(f"wrote {args.episodes} {'sessions' if args.sessions else 'episodes'} to {out}")
    return 0


def _cmd_preprocess(args) -> int:
    from scalewm.data import preprocess_session, read_session, write_episode

    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sessions = sorted(d for d in indir.iterdir() if (d / "manifest.json").exists())
    if not sessions:
        print(f"no session containers under {indir}", file=sys.stderr)
        return 1
    count = 0
    for sdir in sessions:
        session = read_session(sdir)
        records = preprocess_session(
            session, args.fps, t_min=args.tmin, t_clip=args.tclip,
            min_clip=args.min_clip, stride=args.stride,
        )
        for rec in records:
            write_episode(rec, out / f"{sdir.name}_clip_{count:05d}")
            count += 1
    print(f"emitted {count} episode records to {out}")
    return 0


def _load_episodes(args, cfg: FullConfig, count: int):
    from scalewm.data import SpritesEnv, generate_episode, read_episode

    if args.data is not None:
        dirs = sorted(d for d in Path(args.data).iterdir() if (d / "manifest.json").exists())
        return [read_episode(d) for d in dirs]
    rng = np.random.default_rng(cfg.run.seed)
    env = SpritesEnv(cfg.data.image_size, cfg.data.num_objects)
    return [generate_episode(env, cfg.data.episode_length, rng) for _ in range(count)]


def _cmd_train_tokenizer(args) -> int:
    import torch

    from scalewm.checkpoint import save_checkpoint
    from scalewm.tokenizer import MultiScaleTokenizer
    from scalewm.training import fit_tokenizer

    cfg = _load(args)
    torch.manual_seed(cfg.run.seed)
    episodes = _load_episodes(args, cfg, args.episodes)
    tokenizer = MultiScaleTokenizer(cfg.model, cfg.schedule, cfg.data.image_size)
    fit_tokenizer(tokenizer, episodes, cfg, epochs=args.epochs)
    save_checkpoint(tokenizer, Path(args.out), config=cfg, extra={"kind": "tokenizer"})
    print(f"tokenizer checkpoint written to {args.out}")
    return 0


def _cmd_train_wm(args) -> int:
    import torch

    from scalewm.checkpoint import load_checkpoint, save_checkpoint
    from scalewm.model import WorldModel
    from scalewm.tokenizer import MultiScaleTokenizer
    from scalewm.training import fit_world_model

    cfg = _load(args)
    torch.manual_seed(cfg.run.seed)
    tokenizer = MultiScaleTokenizer(cfg.model, cfg.schedule, cfg.data.image_size)
    load_checkpoint(tokenizer, args.tokenizer)
    episodes = _load_episodes(args, cfg, args.episodes)
    model = WorldModel(cfg.model, max_scale=cfg.schedule.latent_base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit_world_model(
        model, tokenizer, episodes, cfg, steps=args.steps,
        metrics_path=out / "metrics.csv", use_prompts=args.prompts,
    )
    save_checkpoint(model, out / "model", config=cfg, extra={"kind": "world_model"})
    print(f"world-model checkpoint written to {out / 'model'}")
    return 0


def _cmd_rollout(args) -> int:
    import torch
    from PIL import Image

    from scalewm.checkpoint import load_checkpoint
    from scalewm.data import read_episode
    from scalewm.layout import build_layout, layout_table
    from scalewm.model import WorldModel
    from scalewm.motion import filter_trajectories, render_prompt, trajectories_from_episode
    from scalewm.rollout import SamplingConfig, best_of_n, rollout
    from scalewm.tokenizer import MultiScaleTokenizer

    cfg = _load(args)
    torch.manual_seed(cfg.run.seed)
    tokenizer = MultiScaleTokenizer(cfg.model, cfg.schedule, cfg.data.image_size)
    load_checkpoint(tokenizer, args.tokenizer)
    model = WorldModel(cfg.model, max_scale=cfg.schedule.latent_base)
    load_checkpoint(model, args.model)
    episode = read_episode(args.context)
    t0 = cfg.run.context_frames
    steps = args.steps
    if episode.length < t0 + steps:
        print(f"episode too short: {episode.length} < {t0 + steps}", file=sys.stderr)
        return 1
    context = episode.frames[:t0]
    actions = episode.actions[t0 - 1 : t0 - 1 + steps]
    ctx_actions = episode.actions[: t0 - 1]
    sampling = SamplingConfig(
        top_k=cfg.run.top_k, top_p=cfg.run.top_p,
        temperature=cfg.run.temperature, greedy=args.greedy,
    )
    prompt_image = None
    if args.prompt:
        trajs = trajectories_from_episode(episode)
        dyn = filter_trajectories(
            trajs, cfg.data.confidence_threshold,
            window=cfg.data.displacement_window, ratio=cfg.data.displacement_ratio,
        )
        prompt_image = render_prompt(episode.frames[0], dyn)
    if args.dump_layout:
        layout = build_layout(cfg.schedule, t0 + steps, t0, prompt_image is not None, cfg.model.codebook_size)
        print(layout_table(layout))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.best_of > 1:
        gt = episode.frames[t0 : t0 + steps]
        res = best_of_n(
            context, actions, gt, args.best_of, "psnr", model, tokenizer, sampling,
            base_seed=cfg.run.seed, prompt_image=prompt_image, context_actions=ctx_actions,
        )
        result = res.best
        print(f"best-of-{args.best_of}: sample {res.best_index} PSNR {max(res.scores):.2f} dB")
    else:
        result = rollout(
            context, actions, t0 + steps, model, tokenizer, sampling,
            prompt_image=prompt_image, context_actions=ctx_actions, seed=cfg.run.seed,
        )
    for i, frame in enumerate(result.frames):
        Image.fromarray(frame).save(out / f"frame_{t0 + 1 + i:04d}.png")
    with open(out / "rewards.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "predicted_reward"])
        for i, r in enumerate(result.rewards):
            writer.writerow([t0 + 1 + i, f"{r:.6f}"])
    print(f"wrote {len(result.frames)} frames and rewards.csv to {out}")
    return 0


def _cmd_eval(args) -> int:
    from PIL import Image

    from scalewm.metrics import psnr, ssim

    def read_video(d: Path) -> np.ndarray:
        frames = sorted(d.glob("*.png"))
        if not frames:
            raise FileNotFoundError(f"no PNG frames in {d}")
        return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in frames])

    pred_root, gt_root = Path(args.pred), Path(args.gt)
    videos = sorted(d.name for d in pred_root.iterdir() if d.is_dir())
    if not videos:
        print(f"no prediction videos under {pred_root}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in videos:
        pv = read_video(pred_root / name)
        gv = read_video(gt_root / name)
        rows.append((name, psnr(pv, gv), ssim(pv, gv)))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video", "psnr_db", "ssim", "fvd", "lpips"])
        for name, p, s in rows:
            # FVD/LPIPS need pretrained feature networks; reported unavailable.
            writer.writerow([name, f"{p:.4f}", f"{s:.6f}", "n/a", "n/a"])
        writer.writerow(
            [
                "aggregate_mean",
                f"{np.mean([r[1] for r in rows]):.4f}",
                f"{np.mean([r[2] for r in rows]):.6f}",
                "n/a",
                "n/a",
            ]
        )
    print(f"metrics.csv written to {out} ({len(rows)} videos)")
    return 0


def _cmd_bench(args) -> int:
    import torch

    from scalewm.bench import bench_decode, format_bench_table
    from scalewm.layout import build_layout, build_raster_layout, layout_table
    from scalewm.model import WorldModel
    from scalewm.tokenizer import MultiScaleTokenizer

    cfg = _load(args)
    torch.manual_seed(cfg.run.seed)
    tokenizer = MultiScaleTokenizer(cfg.model, cfg.schedule, cfg.data.image_size)
    model = WorldModel(cfg.model, max_scale=cfg.schedule.latent_base)
    if args.dump_layout:
        for layout in (
            build_layout(cfg.schedule, 2, 1, False, cfg.model.codebook_size),
            build_raster_layout(cfg.schedule.latent_base, 2, 1, cfg.model.codebook_size),
        ):
            print(layout_table(layout))
            print()
    rows = [
        bench_decode(model, tokenizer, kind, args.batch, args.frames, greedy=True, repeats=args.repeats)
        for kind in ("scalewise", "raster")
    ]
    print(format_bench_table(rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["layout", "steps_per_frame", "forwards_per_frame", "seconds_per_video",
             "tokens_per_s", "batch", "frames", "step_ratio_vs_scalewise"]
        )
        for r in rows:
            writer.writerow(
                [r.layout_name, r.steps_per_frame, r.forwards_per_frame,
                 f"{r.seconds_per_video:.6f}", f"{r.tokens_per_s:.1f}", r.batch, r.frames,
                 f"{r.steps_per_frame / rows[0].steps_per_frame:.3f}"]
            )
    print(f"bench.csv written to {out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "preprocess": _cmd_preprocess,
    "train-tokenizer": _cmd_train_tokenizer,
    "train-wm": _cmd_train_wm,
    "rollout": _cmd_rollout,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
