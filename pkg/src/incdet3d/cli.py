"""Command line front end: data generation, training, evaluation, ablations.

All outputs are deterministic functions of the config and seed: reports are
written atomically with sorted keys and carry the resolved config plus its
hash, never a timestamp, so rerunning a command reproduces files byte for
byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .errors import ConfigError, FormatError, InputError
from .scenes import Task, load_scenes, make_task_stream, save_scenes
from .training import (VARIANTS, ExperimentConfig, config_hash, load_checkpoint,
                       run_experiment, evaluate_model, GeometryStore, task_report)

LADDER = ("full", "no_pgb", "no_pgb_rdd", "no_pgb_rdd_rfd")

_DATA_FIELDS = ("seed", "class_counts", "train_scenes", "eval_scenes",
                "num_points", "max_objects", "noise_std")


def _verbosity() -> int:
    """INCDET3D_VERBOSE: 0 silences progress lines, 1 (default) prints them,
    anything higher adds per-task summaries. Report files are unaffected."""
    raw = os.environ.get("INCDET3D_VERBOSE", "1")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"INCDET3D_VERBOSE must be an integer, got {raw!r}")


def _say(msg: str, level: int = 1) -> None:
    if _verbosity() >= level:
        print(msg)


def _write_json_atomic(path: str, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid json: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a json object")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        data["variant"] = args.variant
    return ExperimentConfig.from_dict(data)


def _stream_paths(out_dir: str, task_index: int):
    return (os.path.join(out_dir, f"t{task_index}_train.scenes"),
            os.path.join(out_dir, f"t{task_index}_eval.scenes"))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    tasks = make_task_stream(cfg.seed, cfg.class_counts, cfg.train_scenes,
                             cfg.eval_scenes, cfg.num_points, cfg.max_objects,
                             cfg.noise_std)
    os.makedirs(args.out, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "config_hash": config_hash(cfg),
                "tasks": []}
    for task in tasks:
        train_path, eval_path = _stream_paths(args.out, task.index)
        save_scenes(train_path, task.train_scenes)
        save_scenes(eval_path, task.eval_scenes)
        manifest["tasks"].append({
            "index": task.index,
            "new_classes": task.new_classes,
            "seen_classes": task.seen_classes,
            "train_file": os.path.basename(train_path),
            "eval_file": os.path.basename(eval_path),
        })
    _write_json_atomic(os.path.join(args.out, "stream.json"), manifest)
    _say(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def _load_stream(data_dir: str, cfg: ExperimentConfig):
    manifest_path = os.path.join(data_dir, "stream.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read stream manifest: {e}") from e
    stored = manifest["config"]
    current = cfg.to_dict()
    for name in _DATA_FIELDS:
        if stored.get(name) != current.get(name):
            raise ConfigError(
                f"data was generated with {name}={stored.get(name)!r} "
                f"but the config says {current.get(name)!r}")
    tasks = []
    for entry in manifest["tasks"]:
        task = Task(index=int(entry["index"]),
                    new_classes=[int(c) for c in entry["new_classes"]],
                    seen_classes=[int(c) for c in entry["seen_classes"]])
        task.train_scenes = load_scenes(os.path.join(data_dir, entry["train_file"]))
        task.eval_scenes = load_scenes(os.path.join(data_dir, entry["eval_file"]))
        tasks.append(task)
    return tasks


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tasks = _load_stream(args.data, cfg) if args.data else None
    report = run_experiment(cfg, scene_tasks=tasks,
                            checkpoint_path=args.checkpoint)
    _write_json_atomic(args.out, report)
    for t, body in sorted(report["tasks"].items(), key=lambda kv: int(kv[0])):
        _say(f"task {t}: avg mAP {body.get('avg_map')}", level=2)
    _say(f"wrote report to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, task_index = load_checkpoint(args.checkpoint)
    tasks = _load_stream(args.data, cfg)
    upto = args.task if args.task is not None else task_index
    chosen = [t for t in tasks if t.index <= upto]
    if not chosen:
        raise ConfigError(f"no tasks at or below index {upto}")
    scenes = [s for t in chosen for s in t.eval_scenes]
    geo = GeometryStore(cfg.num_seeds, cfg.radius)
    ap, recall = evaluate_model(model, scenes, chosen[-1].seen_classes, cfg, geo,
                                use_prompts=cfg.variant == "full")
    report = {
        "version": 1,
        "seed": int(cfg.seed),
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "variant": cfg.variant,
        "tasks": {str(chosen[-1].index): task_report(ap, recall, chosen[-1]).to_dict()},
    }
    _write_json_atomic(args.out, report)
    _say(f"wrote report to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = args.variants.split(",") if args.variants else list(LADDER)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    tasks = make_task_stream(cfg.seed, cfg.class_counts, cfg.train_scenes,
                             cfg.eval_scenes, cfg.num_points, cfg.max_objects,
                             cfg.noise_std)
    results = {}
    for v in variants:
        vcfg = ExperimentConfig.from_dict({**cfg.to_dict(), "variant": v})
        results[v] = run_experiment(vcfg, scene_tasks=tasks)
        _say(f"finished variant {v}")
    report = {"config": cfg.to_dict(), "config_hash": config_hash(cfg),
              "variants": results}
    _write_json_atomic(args.out, report)
    _say(f"wrote ablation report to {args.out}")
    return 0


def _fmt(v) -> str:
    return f"{v:.1f}" if v is not None else "-"


def _collect_rows(report: dict, label: str):
    """One row per (variant, task): label, variant, task, B/N/Avg mAP, recall."""
    runs = report["variants"] if "variants" in report else {report.get("variant", "run"): report}
    rows = []
    for variant in sorted(runs):
        run = runs[variant]
        for t in sorted(run.get("tasks", {}), key=int):
            body = run["tasks"][t]
            rows.append({
                "source": label,
                "variant": run.get("variant", variant),
                "task": int(t),
                "base_map": body.get("base_map"),
                "novel_map": body.get("novel_map"),
                "avg_map": body.get("avg_map"),
                "avg_recall": body.get("avg_recall"),
            })
    return rows


def cmd_report(args) -> int:
    rows = []
    for path in args.input:
        try:
            with open(path, "r", encoding="utf-8") as f:
                report = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read report: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"report is not valid json: {e}") from e
        rows.extend(_collect_rows(report, os.path.basename(path)))
    if not rows:
        raise InputError("no task entries found in the given reports")

    # order by avg mAP at each run's last task, best first, like a results table
    last_task = {}
    for r in rows:
        key = (r["source"], r["variant"])
        if key not in last_task or r["task"] > last_task[key]["task"]:
            last_task[key] = r
    ranking = sorted(last_task,
                     key=lambda k: -(last_task[k]["avg_map"] if last_task[k]["avg_map"] is not None else -1.0))
    rank_of = {k: i for i, k in enumerate(ranking)}
    rows.sort(key=lambda r: (rank_of[(r["source"], r["variant"])], r["task"]))

    header = ("variant", "task", "B mAP", "N mAP", "Avg mAP", "Avg recall")
    table = [(r["variant"], str(r["task"]), _fmt(r["base_map"]), _fmt(r["novel_map"]),
              _fmt(r["avg_map"]), _fmt(r["avg_recall"])) for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in table)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for row in table:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))

    if args.csv:
        tmp = f"{args.csv}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["source", "variant", "task", "base_map", "novel_map",
                             "avg_map", "avg_recall"])
            for r in rows:
                writer.writerow([r["source"], r["variant"], r["task"], r["base_map"],
                                 r["novel_map"], r["avg_map"], r["avg_recall"]])
        os.replace(tmp, args.csv)
        _say(f"wrote csv to {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incdet3d",
        description="class-incremental 3-d detection on synthetic desk scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a task stream of scenes")
    p.add_argument("--config", help="json config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one incremental training experiment")
    p.add_argument("--config", help="json config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--variant", choices=VARIANTS, help="override the config variant")
    p.add_argument("--data", help="directory from gen-data; omit to generate on the fly")
    p.add_argument("--out", required=True, help="report json path")
    p.add_argument("--checkpoint", help="also save the final model here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--task", type=int, help="evaluate tasks up to this index")
    p.add_argument("--out", required=True, help="report json path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run several variants on one stream")
    p.add_argument("--config", help="json config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--variants", help="comma list; default: the four-variant ladder")
    p.add_argument("--out", required=True, help="report json path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge report files into a comparison table")
    p.add_argument("--input", required=True, nargs="+", help="report json paths")
    p.add_argument("--csv", help="also write the merged table as csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
