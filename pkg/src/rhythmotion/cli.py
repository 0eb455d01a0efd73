"""Command-line entry point: analyze, synth-data, train-reward, train-dancer, dance, eval.

Every option can also come from a TOML file (``--config``), one table per
subcommand; flags given on the command line win. Exit codes: 0 success,
2 input or configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .audio import AudioError, decode_wav, extract_music_features
from .baselines import BpmControlConfig, UnsupportedAgentError, run_bpm_control, train_dancer_no_rm
from .choreo import DatasetConfig, DatasetError, build_dataset, load_dataset
from .containers import FormatError
from .env import ARM, CARTPOLE, EnvFault, Trajectory, render_batch, write_pgm_sequence
from .metrics import MetricsError, evaluate_trajectory
from .nn import NonFiniteError, ParamStore, read_checkpoint, save_checkpoint
from .reward_model import RewardModel, RewardModelConfig, RewardModelError, TrainRewardConfig, train_reward_model
from .rl import Policy, RLError, TrainConfig, generate_dance, rollout_track, train_dancer
from .synth import generate_corpus

log = logging.getLogger("rhythmotion")

EXIT_OK, EXIT_INPUT, EXIT_FAULT = 0, 2, 3
INPUT_ERRORS = (OSError, AudioError, FormatError, DatasetError, RewardModelError, RLError, MetricsError, ValueError, KeyError)
FAULTS = (NonFiniteError, EnvFault, FloatingPointError)


class ConfigError(ValueError):
    pass


# -- commands ------------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    track = extract_music_features(decode_wav(args.audio))
    track.meta["source"] = Path(args.audio).name
    track.save(args.out)
    print(f"{args.out}: {track.n_frames} frames, tempo {track.tempo_bpm:.2f} BPM, "
          f"{track.beats.size} beats, {track.peaks.size} peaks")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if args.generate_tones:
        paths = generate_corpus(out / "audio", args.generate_tones, args.seed, args.duration)
    elif args.audio_dir:
        paths = sorted(Path(args.audio_dir).glob("*.wav"))
    else:
        raise DatasetError("give an audio directory or --generate-tones N")
    if len(paths) < 2:
        raise DatasetError(f"need at least two audio files, found {len(paths)}")
    cfg = DatasetConfig(args.half_width, args.stride, args.val_fraction, args.seed)
    manifest = build_dataset(paths, out, cfg, args.workers)
    s = manifest["splits"]
    print(f"{out}: {len(manifest['tracks'])} tracks (train {len(s['train'])}, val {len(s['val'])}), "
          f"{sum(len(t['frames']) for t in manifest['tracks'])} samples")
    return EXIT_OK


def cmd_train_reward(args) -> int:
    ds = load_dataset(args.dataset)
    mcfg = RewardModelConfig(args.dim, ds.half_width, args.tau, args.patch, seed=args.seed)
    tcfg = TrainRewardConfig(args.epochs, args.batch_size, args.lr, args.candidates, args.shuffle_pairs, seed=args.seed)
    model, tlog = train_reward_model(ds.split("train"), ds.split("val"), mcfg, tcfg)
    model.save(args.out, best_epoch=tlog.best_epoch, seed=args.seed)
    tlog.write_csv(args.log or Path(args.out).with_suffix(".csv"))
    best = tlog.rows[tlog.best_epoch - 1]
    print(f"best epoch {tlog.best_epoch}: val_loss {best['val_loss']:.4f}, "
          f"top-1 retrieval {best['top1_retrieval']:.3f} (chance {1 / args.candidates:.4f})")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        gamma=args.gamma, lam=args.lam, clip=args.clip, epochs=args.ppo_epochs, batch_size=args.batch_size,
        minibatch=args.minibatch, lr=args.lr, total_steps=args.total_steps, ent_coef=args.ent_coef,
        hidden=args.hidden, n_envs=args.n_envs, seed=args.seed,
    )


def cmd_train_dancer(args) -> int:
    modes = [bool(args.reward_ckpt), args.no_rm, args.bpm]
    if sum(modes) != 1:
        raise ConfigError("choose exactly one of --reward-ckpt, --no-rm, --bpm")
    if args.bpm:
        if args.agent != ARM:
            raise UnsupportedAgentError("BPM-based control is only defined for the arm agent")
        save_checkpoint(args.out, ParamStore(), kind="bpm_policy", policy={"agent_kind": ARM, "seed": args.seed})
        print(f"{args.out}: BPM control (no training needed)")
        return EXIT_OK
    cfg = _train_config(args)
    cfg.validate()
    ds = load_dataset(args.dataset, with_flows=False)
    train = ds.split("train")
    if args.no_rm:
        policy, curve = train_dancer_no_rm(args.agent, train, cfg)
        policy.save(args.out, baseline="no_rm", config=vars(cfg))
    else:
        model = RewardModel.load(args.reward_ckpt)
        policy, curve = train_dancer(args.agent, model, [t.music for t in train], cfg)
        policy.save(args.out, baseline="reward_model", reward_digest=model.digest(), config=vars(cfg))
    curve.write_csv(args.curve or Path(args.out).with_suffix(".csv"))
    last = curve.rows[-1]
    print(f"{args.out}: {last['steps']} steps, final mean reward {last['mean_reward']:.4f}")
    return EXIT_OK


def _write_gif(path: Path, frames: np.ndarray, fps: int = 60) -> None:
    from PIL import Image

    imgs = [Image.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8), mode="L") for f in frames]
    # GIF delays are whole centiseconds; spread the rounding so the total stays at len/fps
    cs = np.diff(np.round(np.arange(len(imgs) + 1) * 100.0 / fps)).astype(int)
    imgs[0].save(path, save_all=True, append_images=imgs[1:], duration=[int(c) * 10 for c in cs], loop=0)


def cmd_dance(args) -> int:
    header, _ = read_checkpoint(args.policy)
    music = extract_music_features(decode_wav(args.audio))
    music.meta["track_id"] = Path(args.audio).stem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if header.get("kind") == "bpm_policy":
        traj = run_bpm_control(music, args.seed)
        frames = render_batch(ARM, np.vstack([traj.q[:1], traj.q]), args.size)
    else:
        policy, header = Policy.load(args.policy)
        if policy.obs_source == "raw_music":
            q, qd, acts, pens, _, frames = rollout_track(policy, policy.kind, music, music.features, 0,
                                                         args.deterministic, args.seed, args.size)
            traj = Trajectory(policy.kind, q[1:], qd, acts, pens.copy(), pens, args.seed,
                              {"track_id": music.meta["track_id"], "start": 0}, {"baseline": "no_rm"})
        else:
            if not args.reward_ckpt:
                raise ConfigError("this policy observes reward-model embeddings; pass --reward-ckpt")
            model = RewardModel.load(args.reward_ckpt)
            dance = generate_dance(policy, model, music, args.deterministic, args.seed, args.size)
            traj, frames = dance.trajectory, dance.frames
    traj.save(out / "dance.traj")
    write_pgm_sequence(out / "frames", frames)
    if args.gif:
        _write_gif(out / "dance.gif", frames)
    print(f"{out}: {len(traj)} actions, {frames.shape[0]} frames")
    return EXIT_OK


def cmd_eval(args) -> int:
    traj = Trajectory.load(args.trajectory)
    music = extract_music_features(decode_wav(args.audio))
    report = evaluate_trajectory(traj, music, args.smooth, args.prominence, args.sigma)
    if args.out:
        report.save(args.out)
    print(report.table())
    if report.flags:
        print("flags: " + ", ".join(report.flags))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def _seed_default() -> int:
    raw = os.environ.get("RHYTHMOTION_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"RHYTHMOTION_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="rhythmotion", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML file with a table for this subcommand")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $RHYTHMOTION_SEED, then 0)")
        sp.add_argument("--workers", type=int, default=1, help="parallel workers; 1 is bit-reproducible")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")

    sp = sub.add_parser("analyze", help="extract the 35-column music features", formatter_class=fmt)
    sp.add_argument("audio", type=Path)
    sp.add_argument("-o", "--out", type=Path, required=True, help="output .mft file")
    common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("synth-data", help="build a synthetic paired flow/music dataset", formatter_class=fmt)
    sp.add_argument("audio_dir", nargs="?", type=Path, help="directory of WAV files")
    sp.add_argument("--generate-tones", type=int, default=0, metavar="N", help="synthesize N tone tracks instead")
    sp.add_argument("--duration", type=float, default=30.0, help="seconds per generated track")
    sp.add_argument("--out", type=Path, required=True, help="output path")
    sp.add_argument("--half-width", type=int, default=30, help="music window half-width w_a (frames)")
    sp.add_argument("--stride", type=int, default=4, help="frames between samples")
    sp.add_argument("--val-fraction", type=float, default=0.25, help="share of tracks held out for validation")
    common(sp)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train-reward", help="train the contrastive reward model", formatter_class=fmt)
    sp.add_argument("dataset", type=Path)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")
    sp.add_argument("--log", type=Path, default=None, help="CSV log (default: next to the checkpoint)")
    sp.add_argument("--epochs", type=int, default=30, help="passes over the training pairs")
    sp.add_argument("--batch-size", type=int, default=32, help="pairs per InfoNCE batch")
    sp.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    sp.add_argument("--tau", type=float, default=0.1, help="InfoNCE temperature")
    sp.add_argument("--dim", type=int, default=64, help="embedding width")
    sp.add_argument("--patch", type=int, default=48, help="flow patch side after crop and resize")
    sp.add_argument("--candidates", type=int, default=16, help="retrieval candidates per validation group")
    sp.add_argument("--shuffle-pairs", action="store_true", help="control run with permuted pairings")
    common(sp)
    sp.set_defaults(func=cmd_train_reward)

    sp = sub.add_parser("train-dancer", help="train a dancing policy", formatter_class=fmt)
    sp.add_argument("dataset", type=Path)
    sp.add_argument("--agent", choices=[CARTPOLE, ARM], default=CARTPOLE)
    sp.add_argument("--reward-ckpt", type=Path, default=None)
    sp.add_argument("--no-rm", action="store_true", help="flow-matching baseline")
    sp.add_argument("--bpm", action="store_true", help="BPM-based control baseline (arm only)")
    sp.add_argument("--out", type=Path, required=True, help="output path")
    sp.add_argument("--curve", type=Path, default=None, help="learning-curve CSV (default: next to the checkpoint)")
    d = TrainConfig()
    sp.add_argument("--total-steps", type=int, default=d.total_steps, help="environment steps")
    sp.add_argument("--batch-size", type=int, default=d.batch_size, help="environment steps per PPO iteration")
    sp.add_argument("--minibatch", type=int, default=d.minibatch, help="samples per gradient step")
    sp.add_argument("--ppo-epochs", type=int, default=d.epochs, help="passes over each rollout batch")
    sp.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    sp.add_argument("--gamma", type=float, default=d.gamma, help="discount factor")
    sp.add_argument("--lam", type=float, default=d.lam, help="GAE lambda")
    sp.add_argument("--clip", type=float, default=d.clip, help="PPO ratio clip")
    sp.add_argument("--ent-coef", type=float, default=d.ent_coef, help="entropy bonus weight")
    sp.add_argument("--hidden", type=int, default=d.hidden, help="policy hidden width")
    sp.add_argument("--n-envs", type=int, default=d.n_envs, help="parallel environments")
    common(sp)
    sp.set_defaults(func=cmd_train_dancer)

    sp = sub.add_parser("dance", help="generate a dance for an audio file", formatter_class=fmt)
    sp.add_argument("policy", type=Path)
    sp.add_argument("audio", type=Path)
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--reward-ckpt", type=Path, default=None)
    sp.add_argument("--deterministic", action="store_true", help="take the most likely action")
    sp.add_argument("--gif", action="store_true", help="also write dance.gif at 60 FPS")
    sp.add_argument("--size", type=int, default=48, help="frame size in pixels")
    common(sp)
    sp.set_defaults(func=cmd_dance)

    sp = sub.add_parser("eval", help="motion-music correlation report", formatter_class=fmt)
    sp.add_argument("trajectory", type=Path)
    sp.add_argument("audio", type=Path)
    sp.add_argument("--out", type=Path, default=None, help="write STEM.json and STEM.csv")
    sp.add_argument("--sigma", type=float, default=3.0, help="BeatAlign tolerance (frames)")
    sp.add_argument("--smooth", type=int, default=5, help="moving-average window for kinematic beats")
    sp.add_argument("--prominence", type=float, default=None, help="minimum prominence (default 5%% of range)")
    common(sp)
    sp.set_defaults(func=cmd_eval)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise ConfigError(f"unknown command {name}")


def _apply_config(parser, argv, args):
    """Re-parse with the TOML table as defaults so explicit flags still win."""
    with open(args.config, "rb") as fh:
        table = tomli.load(fh).get(args.command, {})
    sp = _subparser(parser, args.command)
    known = {a.dest for a in sp._actions} - {"help", "config", "func"}
    values = {}
    for key, value in table.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"{args.config}: unknown key {key!r} for {args.command}")
        values[dest] = value
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        if args.seed is None:
            args.seed = _seed_default()
        for name in ("out", "log", "curve"):
            if getattr(args, name, None) is not None:
                Path(getattr(args, name)).parent.mkdir(parents=True, exist_ok=True)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        log.debug("args %s", json.dumps({k: str(v) for k, v in vars(args).items()}))
        return args.func(args)
    except FAULTS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (ConfigError, tomli.TOMLDecodeError) + INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime fault
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
