"""Command-line entry point: ``zoomsense <subcommand> [flags]``.

Subcommands: gen-scenes, eval, train, score, print-config. Exit codes are
0 on success, 1 for usage or config errors, 2 for data errors and 3 when a
run aborts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .codec import DETECTION_COUNT, SEGMENTATION_COUNT, check_response
from .config import Config, ConfigError, load_config
from .dataio import DataError, dumps_scenes, import_coco, load_scenes, save_episodes, select_scenes, to_csv
from .env import (
    REWARD_MODES,
    DetectionEnv,
    SegmentationEnv,
    apply_sensing,
    detect_in_crops,
    evaluate_detection,
    evaluate_segmentation,
    miou_at_budget,
)
from .external import ExternalModelPolicy
from .grpo import TrainingAborted, snapshot_json, train
from .metrics import coco_eval, r_detect
from .policy import AnchorGridPolicy, GridPolicy, OraclePolicy, PolicyConfigError, PolicyOutput, RandomPolicy
from .scenegen import GenerationError, generate_scenes, generate_seg_scenes, initial_masks

POLICIES = ("random", "grid", "oracle", "trained", "external")
TASKS = ("detection", "segmentation")


class UsageError(Exception):
    pass


class RunAborted(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file layered over the built-in defaults")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--budget", type=int, help="zoom-in budget K")
    p.add_argument("--iou-thr", type=float, help="IoU threshold for the detection reward")
    p.add_argument("--reward-mode", choices=sorted(REWARD_MODES))
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--endpoint-url")
    p.add_argument("--out", help="output file (gen-scenes, score) or directory (eval, train)")
    p.add_argument("--n-scenes", type=int, help="number of synthetic scenes to generate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zoomsense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-scenes", help="write a scene file")
    _common(g)
    g.add_argument("--from-coco", help="import a COCO-style annotation file instead of generating")
    g.add_argument("--rule", choices=("small", "dense", "all"), default="all")
    g.add_argument("--cap", type=int, help="max scenes per category (COCO import)")

    e = sub.add_parser("eval", help="run episodes for one policy and write reports")
    _common(e)
    e.add_argument("--scenes", help="scene file (default: generate from config)")
    e.add_argument("--snapshot", help="policy snapshot for --policy trained")
    e.add_argument("--samples", type=int, help="episodes per scene")
    e.add_argument("--plot", action="store_true", help="also write budget.svg (needs matplotlib)")

    t = sub.add_parser("train", help="train the anchor-grid policy with GRPO")
    _common(t)
    t.add_argument("--scenes", help="scene file (default: generate from config)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)

    s = sub.add_parser("score", help="score one raw response against one scene")
    _common(s)
    s.add_argument("--response", required=True, help="file holding the raw response text")
    s.add_argument("--scene", required=True, help="scene file")
    s.add_argument("--scene-id", help="scene to use when the file holds several")

    pc = sub.add_parser("print-config", help="print the effective configuration")
    _common(pc)
    return parser


def resolve_config(args) -> Config:
    """Defaults, then ``--config``, then ``--set`` pairs, then dedicated flags."""
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[(sec.strip(), name.strip())] = value
    flags = {
        ("run", "seed"): args.seed,
        ("run", "task"): args.task,
        ("run", "reward_mode"): args.reward_mode,
        ("run", "policy"): args.policy,
        ("run", "iou_thr"): args.iou_thr,
        ("sensing", "budget_k"): args.budget,
        ("endpoint", "base_url"): args.endpoint_url,
        ("run", "n_scenes"): getattr(args, "n_scenes", None),
        ("run", "eval_samples"): getattr(args, "samples", None),
        ("grpo", "iterations"): getattr(args, "iterations", None),
        ("grpo", "learning_rate"): getattr(args, "lr", None),
    }
    overrides.update({k: str(v) for k, v in flags.items() if v is not None})
    cfg = load_config(args.config, overrides)
    r = cfg.run
    if r.task not in TASKS:
        raise ConfigError(f"run.task must be one of {TASKS}")
    if r.policy not in POLICIES:
        raise ConfigError(f"run.policy must be one of {POLICIES}")
    if r.reward_mode not in REWARD_MODES:
        raise ConfigError(f"run.reward_mode must be one of {sorted(REWARD_MODES)}")
    if r.decode not in ("sample", "greedy"):
        raise ConfigError("run.decode must be 'sample' or 'greedy'")
    if r.n_scenes < 0 or r.eval_samples < 1 or not 0 < r.iou_thr <= 1:
        raise ConfigError("need n_scenes >= 0, eval_samples >= 1, 0 < iou_thr <= 1")
    return cfg


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _scenes(cfg: Config, path: str | None):
    if path:
        return load_scenes(path)
    if cfg.run.task == "segmentation":
        return generate_seg_scenes(cfg.seg_generator, cfg.run.n_scenes, cfg.run.seed)
    return generate_scenes(cfg.generator, cfg.run.n_scenes, cfg.run.seed)


def _env(cfg: Config, scenes):
    if not scenes:
        raise DataError("no scenes to run")
    if cfg.run.task == "segmentation":
        masks = initial_masks(scenes, cfg.corruption, cfg.run.seed)
        return SegmentationEnv(scenes, masks, cfg.sensing.budget_k, cfg.heuristic, cfg.sensing)
    return DetectionEnv(scenes, cfg.sensing, cfg.task_model, cfg.heuristic, cfg.run.iou_thr)


def _policy(cfg: Config, args):
    k = SEGMENTATION_COUNT[1] if cfg.run.task == "segmentation" else min(cfg.sensing.k_parallel, DETECTION_COUNT[1])
    name = cfg.run.policy
    if name == "random":
        return RandomPolicy(k)
    if name == "grid":
        return GridPolicy(k, cfg.run.grid_side)
    if name == "oracle":
        return OraclePolicy(k, cfg.sensing.crop_resolution, cfg.task_model.min_apparent_area)
    if name == "trained":
        if not getattr(args, "snapshot", None):
            raise UsageError("--policy trained needs --snapshot")
        try:
            pol = AnchorGridPolicy.load(args.snapshot, cfg.run.decode)
        except OSError as exc:
            raise DataError(f"cannot read snapshot: {exc}") from None
        except (json.JSONDecodeError, PolicyConfigError) as exc:
            raise DataError(f"bad snapshot: {exc}") from None
        return pol
    if not cfg.endpoint.base_url:
        raise UsageError("--policy external needs --endpoint-url (or endpoint.base_url)")
    return ExternalModelPolicy(cfg.endpoint, cfg.run.task)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scenes(cfg: Config, args) -> int:
    if not args.out:
        raise UsageError("--out FILE is required")
    if args.from_coco and args.n_scenes is not None:
        raise UsageError("--from-coco and --n-scenes are mutually exclusive")
    if args.from_coco:
        scenes = select_scenes(import_coco(args.from_coco), args.rule, args.cap, cfg.run.seed)
    else:
        if args.cap is not None:
            raise UsageError("--cap only applies to --from-coco")
        scenes = select_scenes(_scenes(cfg, None), args.rule, None, cfg.run.seed)
    _write(Path(args.out), dumps_scenes(scenes))
    n_obj = sum(len(s.objects) for s in scenes)
    small = sum(1 for s in scenes for o in s.objects if o.area < 100)
    print(f"wrote {len(scenes)} scenes, {n_obj} objects ({small} small) to {args.out}")
    return 0


def run_eval(cfg: Config, scenes, policy):
    """Episodes for every scene and sample plus the per-budget reward curve."""
    env = _env(cfg, scenes)
    budget = cfg.sensing.budget_k
    records, curve_rows = [], []
    curves = np.zeros((0, budget + 1))
    for i, scene in enumerate(scenes):
        for j in range(cfg.run.eval_samples):
            rec = env.episode(i, policy, cfg.run.seed, j)
            records.append(rec)
            if cfg.run.task == "segmentation":
                row = [miou_at_budget(rec.seg_trajectory, b) for b in range(budget + 1)]
            else:
                row = []
                for b in range(budget + 1):
                    obs = [apply_sensing(scene, a, cfg.sensing) for a in rec.actions[:b]]
                    rng = np.random.default_rng([cfg.run.seed, i, j, b])
                    dets = detect_in_crops(scene, obs, cfg.task_model, rng)
                    row.append(r_detect(dets, scene.ground_truth(), cfg.run.iou_thr))
            curves = np.vstack([curves, row])
    for b in range(budget + 1):
        curve_rows.append({"budget": b, "mean_task_reward": float(curves[:, b].mean())})
    return env, records, curve_rows


def cmd_eval(cfg: Config, args) -> int:
    out = _out_dir(args)
    scenes = _scenes(cfg, args.scenes)
    policy = _policy(cfg, args)
    env, records, curve_rows = run_eval(cfg, scenes, policy)
    if cfg.run.policy == "external" and records and all(r.policy_error for r in records):
        raise RunAborted(f"endpoint unreachable: {records[0].policy_error}")
    rows = []
    for r in records:
        row = {"scene_id": r.scene_id}
        row.update(r.reward.as_dict())
        row["n_actions"] = len(r.actions)
        if r.detections is not None:
            row["n_detections"] = len(r.detections)
        row["format_error"] = r.format_error or ""
        rows.append(row)
    header = cfg.header()
    _write(out / "per_scene.csv", to_csv(rows, header))
    _write(out / "budget.csv", to_csv(curve_rows, header))
    save_episodes(out / "episodes.jsonl", records)
    keys = ("r_format", "r_no_overlap", "r_area", "r_coverage", "heuristic", "r_task", "total")
    report = {
        "config": cfg.as_dict(),
        "policy": cfg.run.policy,
        "task": cfg.run.task,
        "n_scenes": len(scenes),
        "n_episodes": len(records),
        "mean": {k: float(np.mean([getattr(r.reward, k) for r in records])) for k in keys},
        "budget_curve": curve_rows,
    }
    if cfg.run.task == "detection":
        by_id = {s.scene_id: s for s in env.scenes}
        pairs = [(r.detections, by_id[r.scene_id].ground_truth()) for r in records]
        report["coco"] = coco_eval(pairs).as_dict()
    _write(out / "report.json", _json(report))
    if args.plot:
        _plot(curve_rows, out / "budget.svg", cfg.run.task)
    m = report["mean"]
    print(f"{cfg.run.policy}: {len(records)} episodes, mean total {m['total']:.4f} (task {m['r_task']:.4f})")
    return 0


def _plot(rows, path: Path, task: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        warnings.warn("matplotlib not installed; skipping plot", stacklevel=2)
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["budget"] for r in rows], [r["mean_task_reward"] for r in rows], marker="o")
    ax.set_xlabel("zoom-in budget")
    ax.set_ylabel("mean mIoU" if task == "segmentation" else "mean AP@t + AR@t")
    ax.set_xticks([r["budget"] for r in rows])
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_train(cfg: Config, args) -> int:
    out = _out_dir(args)
    scenes = _scenes(cfg, args.scenes)
    env = _env(cfg, scenes)
    w, h = env.frame
    k = SEGMENTATION_COUNT[1] if cfg.run.task == "segmentation" else min(cfg.sensing.k_parallel, DETECTION_COUNT[1])
    policy = AnchorGridPolicy.for_frame(w, h, k, cfg.heuristic.r_min, cfg.heuristic.r_max)
    try:
        report = train(env, policy, cfg.grpo, cfg.run.reward_mode, cfg.run.seed)
    except TrainingAborted as exc:
        _write(out / "abort_dump.json", _json(exc.dump))
        raise RunAborted(f"{exc} (dump in {out / 'abort_dump.json'})") from None
    _write(out / "train_report.csv", report.to_csv(cfg.header()))
    _write(out / "policy.json", snapshot_json(policy))
    print(f"trained {cfg.grpo.iterations} iterations; final mean reward {report.final_mean_reward():.4f}")
    return 0


def cmd_score(cfg: Config, args) -> int:
    try:
        raw = Path(args.response).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read response: {exc}") from None
    scenes = load_scenes(args.scene)
    if args.scene_id is not None:
        scenes = [s for s in scenes if s.scene_id == args.scene_id]
    if len(scenes) != 1:
        raise DataError(f"need exactly one scene, found {len(scenes)} (use --scene-id)")
    scene = scenes[0]
    counts = SEGMENTATION_COUNT if cfg.run.task == "segmentation" else DETECTION_COUNT
    outcome = check_response(raw, scene.width, scene.height, *counts)

    output = PolicyOutput(outcome.boxes, raw_text=raw.decode("utf-8", errors="replace"))
    weights = REWARD_MODES[cfg.run.reward_mode]
    if cfg.run.task == "segmentation":
        if scene.merged_gt_mask is None:
            raise DataError("segmentation scoring needs a scene with a ground-truth mask")
        pred0 = initial_masks([scene], cfg.corruption, cfg.run.seed)[0]
        rec = evaluate_segmentation(scene, output, pred0, cfg.sensing.budget_k, cfg.heuristic, weights, cfg.run.seed)
    else:
        rng = np.random.default_rng(cfg.run.seed)
        rec = evaluate_detection(
            scene, output, cfg.sensing, cfg.task_model, cfg.heuristic, rng, weights, cfg.run.seed, cfg.run.iou_thr
        )
    result = rec.reward.as_dict()
    result["format_error"] = rec.format_error
    text = _json(result)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_print_config(cfg: Config, args) -> int:
    text = cfg.to_ini()
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "eval": cmd_eval,
    "train": cmd_train,
    "score": cmd_score,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, PolicyConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
