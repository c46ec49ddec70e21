"""Command line harness: gen-data, train, eval, sweep, trace, report.

Configuration comes from a JSON file plus ``--set section.key=value``
overrides; the fully resolved tree is echoed into every primary output so a
result file always names the settings that produced it. With a fixed seed the
primary outputs (JSON, JSONL, CSV, SVG, checkpoints) are byte-identical
across reruns and worker counts; wall-clock timings and timestamps live only
in each command's ``meta.json`` sidecar and on stdout.

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 a report
check failed.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import charts as CH
from . import checkpoint as CK
from . import inference as I
from . import metrics as ME
from . import model as M
from . import puzzles as P
from . import training as TR
from .errors import CheckpointError, ConfigError

ENV_OUT_DIR = "GRIDLOOP_OUT_DIR"

DEFAULTS = {
    "out_dir": None,
    "data": {"sudoku4": 120, "sudoku6": 0, "maze": 0, "val_size": 24,
             "golden_size": 24, "augment": 4, "seed": 0,
             "sudoku4_givens": [6, 10], "sudoku6_givens": [14, 22],
             "maze_dims": [9, 9]},
    "model": {"hidden_dim": 64, "latent_steps": 4, "recursion_depth": 3,
              "max_steps": 6, "expansion": 2, "q_head": "linear-token0"},
    "train": {"learning_rate": 7e-4, "beta1": 0.9, "beta2": 0.999,
              "eps_opt": 1e-8, "batch_size": 32, "epochs": 4, "seed": 0,
              "weight_decay": 0.0, "halting_enabled": True,
              "grad_clip_norm": 1.0, "eval_every_steps": 0,
              "checkpoint_every_steps": 0, "stop_at_val_exact": None},
    "infer": {"num_rollouts": 8, "depth": 6, "noise_sigma": 0.25,
              "selector": "best-q"},
    "eval": {"split": "golden", "run_seed": 0, "hourly_rate": 2.5},
    "sweep": {"sigmas": [0.0, 0.1, 0.2, 0.3, 0.5], "seeds": [0, 1, 2],
              "num_rollouts": 8, "depth": 6, "split": "val", "limit": 0,
              "run_seed_base": 0},
    "trace": {"puzzle_id": "", "num_rollouts": 8, "depth": 6, "sigma": 0.25,
              "split": "val", "run_seed": 0},
    "report": {"checks": []},
}


# ---------------------------------------------------------------------------
# Config resolution


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse would exit(2); bad flags are a configuration problem
        raise ConfigError(message)


def _merge_section(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_section(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _apply_set(cfg: dict, expr: str):
    if "=" not in expr:
        raise ConfigError(f"--set wants section.key=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"--set path {path!r} does not exist")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"--set path {path!r} does not exist")
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge_section(cfg, file_cfg, "config")
    for expr in getattr(args, "set", None) or []:
        _apply_set(cfg, expr)
    if getattr(args, "out_dir", None):
        cfg["out_dir"] = args.out_dir
    if not cfg["out_dir"]:
        cfg["out_dir"] = os.environ.get(ENV_OUT_DIR) or "runs"
    return cfg


# ---------------------------------------------------------------------------
# Small IO helpers


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _write_meta(out_dir, command, wall_seconds, extra=None):
    meta = {"command": command,
            "timestamp_utc": datetime.now(timezone.utc).isoformat(),
            "wall_seconds": wall_seconds}
    if extra:
        meta.update(extra)
    _write_json(os.path.join(out_dir, "meta.json"), meta)


def _dataset_spec(d: dict) -> P.DatasetSpec:
    d = dict(d)
    for key in ("sudoku4_givens", "sudoku6_givens", "maze_dims"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return P.DatasetSpec(**d)


def _load_split(data_dir: str, split: str):
    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise ConfigError(f"no {split!r} split at {path}; run gen-data first")
    instances = P.load_instances(path)
    if not instances:
        raise ConfigError(f"split {split!r} at {path} is empty")
    return instances


def _load_data_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no dataset manifest at {path}; run gen-data first")
    return _read_json(path)


def _check_model_matches_data(config: M.ModelConfig, manifest: dict):
    vocab = manifest["vocab"]["size"]
    if config.vocab_size != vocab:
        raise ConfigError(f"checkpoint vocab {config.vocab_size} != dataset "
                          f"vocab {vocab}")
    if config.seq_len != manifest["seq_len"]:
        raise ConfigError(f"checkpoint seq_len {config.seq_len} != dataset "
                          f"seq_len {manifest['seq_len']}")


def _load_params(args, cfg) -> tuple:
    base = getattr(args, "checkpoint", None) or \
        os.path.join(cfg["out_dir"], "train", "model")
    if not os.path.exists(base + ".json"):
        raise ConfigError(f"no checkpoint at {base}; run train first or pass "
                          f"--checkpoint")
    return CK.load_checkpoint(base)


def _echo(cfg: dict, command: str) -> dict:
    # out_dir is where the run lands, not what the run computes; leaving it
    # out keeps reports (and their build ids) identical across directories
    echo = copy.deepcopy(cfg)
    echo.pop("out_dir", None)
    echo["command"] = command
    return echo


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg, args) -> int:
    t0 = time.monotonic()
    spec = _dataset_spec(cfg["data"])
    train, val, golden, manifest = P.build_dataset(spec)
    data_dir = os.path.join(cfg["out_dir"], "data")
    os.makedirs(data_dir, exist_ok=True)
    P.save_instances(os.path.join(data_dir, "train.jsonl"), train)
    P.save_instances(os.path.join(data_dir, "val.jsonl"), val)
    P.save_instances(os.path.join(data_dir, "golden.jsonl"), golden)
    manifest = dict(manifest)
    manifest["effective_config"] = _echo(cfg, "gen-data")
    _write_json(os.path.join(data_dir, "manifest.json"), manifest)
    _write_meta(data_dir, "gen-data", time.monotonic() - t0)
    print(f"wrote {len(train)} train / {len(val)} val / {len(golden)} golden "
          f"instances to {data_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def _model_config_from(cfg, manifest) -> M.ModelConfig:
    section = dict(cfg["model"])
    return M.ModelConfig(vocab_size=manifest["vocab"]["size"],
                         seq_len=manifest["seq_len"], **section)


def _train_config_from(cfg) -> TR.TrainConfig:
    section = dict(cfg["train"])
    if section.get("stop_at_val_exact") is not None:
        section["stop_at_val_exact"] = tuple(section["stop_at_val_exact"])
    return TR.TrainConfig(**section)


def cmd_train(cfg, args) -> int:
    t0 = time.monotonic()
    data_dir = args.data_dir or os.path.join(cfg["out_dir"], "data")
    manifest = _load_data_manifest(data_dir)
    train_set = _load_split(data_dir, "train")
    val_set = _load_split(data_dir, "val")
    model_config = _model_config_from(cfg, manifest)
    train_config = _train_config_from(cfg)

    resume_state = None
    if args.resume:
        resume_state, stored_tc, _ = CK.load_training_checkpoint(
            args.resume, train_set)
        if resume_state.params.config != model_config:
            raise ConfigError("resume checkpoint was trained with a different "
                              "model configuration")
        if stored_tc != train_config:
            raise ConfigError("resume checkpoint was trained with different "
                              "training settings; pass the original config")

    out = os.path.join(cfg["out_dir"], "train")
    ckpt_dir = os.path.join(out, "ckpt")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(out, "log.jsonl")
    log_file = open(log_path, "a" if args.resume else "w")

    def on_log(record):
        log_file.write(json.dumps(record, sort_keys=True) + "\n")

    def on_checkpoint(tag, state):
        CK.save_training_checkpoint(os.path.join(ckpt_dir, tag), state,
                                    train_config)

    try:
        result = TR.fit(train_set, val_set, model_config, train_config,
                        on_log=on_log, on_checkpoint=on_checkpoint,
                        resume=resume_state)
    finally:
        log_file.close()

    CK.save_checkpoint(os.path.join(out, "model"), result.params,
                       step=result.state.global_step,
                       metrics=result.state.metrics)
    last_eval = next((r for r in reversed(result.history) if "val_exact" in r),
                     None)
    summary = {
        "effective_config": _echo(cfg, "train"),
        "build_id": ME.build_id(_echo(cfg, "train")),
        "global_step": result.state.global_step,
        "stopped_in_band": result.stopped_in_band,
        "resumed": bool(args.resume),
        "final_val_exact": last_eval["val_exact"] if last_eval else None,
        "final_val_cell": last_eval["val_cell"] if last_eval else None,
        "history_records": len(result.history),
    }
    _write_json(os.path.join(out, "result.json"), summary)
    wall = time.monotonic() - t0
    _write_meta(out, "train", wall)
    val_txt = (f"val_exact={summary['final_val_exact']:.4f}"
               if summary["final_val_exact"] is not None else "no validation")
    print(f"trained to step {result.state.global_step} ({val_txt}) "
          f"in {wall:.1f}s; model at {os.path.join(out, 'model')}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _per_type_metrics(instances, record_sets, det_sets) -> dict:
    groups: dict = {}
    for i, inst in enumerate(instances):
        groups.setdefault(inst.puzzle_type, []).append(i)
    out = {}
    for name, idx in sorted(groups.items()) + [("overall", list(range(len(instances))))]:
        truths = [np.asarray(instances[i].y_true_tokens) for i in idx]
        matrix = ME.build_correctness_matrix([record_sets[i] for i in idx], truths)
        det = ME.build_correctness_matrix([det_sets[i] for i in idx], truths)
        k = matrix.num_rollouts
        det_answers = [det_sets[i][0].answer for i in idx]
        cell = float(np.mean([ME.cell_accuracy(a, t)
                              for a, t in zip(det_answers, truths)]))
        out[name] = {
            "count": len(idx),
            "deterministic_exact": ME.pass_at_k(det, 1),
            "deterministic_cell": cell,
            "pass_at_k": ME.pass_at_k(matrix, k),
            "best_q_at_k": ME.best_q_at_k(matrix, k),
            "mode_at_k": ME.mode_at_k(matrix, k),
            "oracle_at_k": ME.pass_at_k(matrix, k),
            "num_rollouts": k,
        }
    return out


def _print_eval_table(per_type: dict, cost_per_puzzle: float):
    cols = ["type", "n", "det", "pass@K", "best-q@K", "mode@K", "oracle@K",
            "cell", "$/puzzle"]
    print(f"{cols[0]:<10}{cols[1]:>5} " + " ".join(f"{c:>9}" for c in cols[2:]))
    for name, row in per_type.items():
        print(f"{name:<10}{row['count']:>5} "
              f"{row['deterministic_exact']:>9.4f} {row['pass_at_k']:>9.4f} "
              f"{row['best_q_at_k']:>9.4f} {row['mode_at_k']:>9.4f} "
              f"{row['oracle_at_k']:>9.4f} {row['deterministic_cell']:>9.4f} "
              f"{cost_per_puzzle:>9.6f}")


def cmd_eval(cfg, args) -> int:
    t0 = time.monotonic()
    params, _ = _load_params(args, cfg)
    data_dir = args.data_dir or os.path.join(cfg["out_dir"], "data")
    manifest = _load_data_manifest(data_dir)
    _check_model_matches_data(params.config, manifest)
    split = args.split or cfg["eval"]["split"]
    instances = _load_split(data_dir, split)

    icfg = I.InferenceConfig(num_rollouts=cfg["infer"]["num_rollouts"],
                             depth=cfg["infer"]["depth"],
                             noise_sigma=cfg["infer"]["noise_sigma"],
                             selector=cfg["infer"]["selector"]).validate()
    run_seed = cfg["eval"]["run_seed"]
    record_sets = I.evaluate_instances(params, instances, icfg, run_seed,
                                       workers=args.workers)
    if icfg.num_rollouts == 1 and icfg.noise_sigma == 0.0:
        det_sets = record_sets
    else:
        det_cfg = I.InferenceConfig(num_rollouts=1, depth=icfg.depth)
        det_sets = I.evaluate_instances(params, instances, det_cfg, run_seed,
                                        workers=args.workers)
    per_type = _per_type_metrics(instances, record_sets, det_sets)
    wall = time.monotonic() - t0
    seconds_per_puzzle = wall / len(instances)
    cost = ME.cost_estimate(seconds_per_puzzle, cfg["eval"]["hourly_rate"])

    out = os.path.join(cfg["out_dir"], "eval")
    report = {
        "effective_config": _echo(cfg, "eval"),
        "build_id": ME.build_id(_echo(cfg, "eval")),
        "split": split,
        "num_puzzles": len(instances),
        "per_type": per_type,
    }
    _write_json(os.path.join(out, "report.json"), report)
    _write_meta(out, "eval", wall, {
        "seconds_per_puzzle": seconds_per_puzzle,
        "cost_per_puzzle_usd": cost,
        "hourly_rate": cfg["eval"]["hourly_rate"],
        "workers": args.workers,
    })
    _print_eval_table(per_type, cost)
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg, args) -> int:
    t0 = time.monotonic()
    params, _ = _load_params(args, cfg)
    data_dir = args.data_dir or os.path.join(cfg["out_dir"], "data")
    manifest = _load_data_manifest(data_dir)
    _check_model_matches_data(params.config, manifest)
    section = cfg["sweep"]
    instances = _load_split(data_dir, section["split"])
    if section["limit"]:
        instances = instances[: section["limit"]]

    rows, summary = ME.sigma_sweep(params, instances,
                                   num_rollouts=section["num_rollouts"],
                                   depth=section["depth"],
                                   sigmas=section["sigmas"],
                                   seeds=section["seeds"],
                                   workers=args.workers)
    out = os.path.join(cfg["out_dir"], "sweep")
    os.makedirs(out, exist_ok=True)
    ME.write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
    _write_json(os.path.join(out, "summary.json"), {
        "effective_config": _echo(cfg, "sweep"),
        "build_id": ME.build_id(_echo(cfg, "sweep")),
        "summary": summary,
    })
    series = [{"label": metric,
               "x": [s["sigma"] for s in summary],
               "y": [s[f"{metric}_mean"] for s in summary]}
              for metric in ("pass_at_k", "best_q_at_k", "mode_at_k")]
    CH.write_svg(os.path.join(out, "sweep.svg"),
                 CH.line_chart(series, title="accuracy vs injected noise",
                               x_label="noise sigma", y_label="accuracy"))
    _write_meta(out, "sweep", time.monotonic() - t0, {"workers": args.workers})
    print(f"swept {len(section['sigmas'])} sigmas x {len(section['seeds'])} "
          f"seeds over {len(instances)} puzzles; CSV/SVG in {out}")
    return 0


# ---------------------------------------------------------------------------
# trace


def _pick_trace_instance(params, instances, depth, puzzle_id):
    if puzzle_id:
        for inst in instances:
            if inst.instance_id == puzzle_id:
                return inst
        raise ConfigError(f"puzzle id {puzzle_id!r} not found in split")
    for inst in instances:
        answer, _, _ = I.deterministic_infer(params, inst.x_tokens, depth)
        if not I.exact_match(answer, inst.y_true_tokens):
            return inst
    raise ConfigError("every puzzle in the split solves deterministically; "
                      "pass --puzzle-id to trace one anyway")


def cmd_trace(cfg, args) -> int:
    t0 = time.monotonic()
    params, _ = _load_params(args, cfg)
    data_dir = args.data_dir or os.path.join(cfg["out_dir"], "data")
    manifest = _load_data_manifest(data_dir)
    _check_model_matches_data(params.config, manifest)
    section = cfg["trace"]
    instances = _load_split(data_dir, section["split"])
    inst = _pick_trace_instance(params, instances, section["depth"],
                                args.puzzle_id or section["puzzle_id"])
    y_true = np.asarray(inst.y_true_tokens)
    master = I.instance_master_seed(section["run_seed"], inst.instance_id)

    det_answer, _, _ = I.deterministic_infer(params, inst.x_tokens,
                                             section["depth"])
    det_correct = I.exact_match(det_answer, y_true)
    if det_correct:
        icfg = I.InferenceConfig(num_rollouts=section["num_rollouts"],
                                 depth=section["depth"],
                                 noise_sigma=section["sigma"],
                                 master_seed=master, trace_enabled=True)
        records = I.run_rollouts(params, inst.x_tokens, icfg, y_true=y_true)
        correct = [I.exact_match(r.answer, y_true) for r in records]
        escape_fraction = None
    else:
        basin = I.basin_escape_experiment(params, inst.x_tokens, y_true,
                                          num_rollouts=section["num_rollouts"],
                                          depth=section["depth"],
                                          sigma=section["sigma"],
                                          master_seed=master)
        records = basin["records"]
        correct = basin["correct"]
        escape_fraction = basin["escape_fraction"]

    out = os.path.join(cfg["out_dir"], "trace")
    os.makedirs(out, exist_ok=True)

    with open(os.path.join(out, "trajectories.jsonl"), "w") as f:
        for r, ok in zip(records, correct):
            for step in r.trace:
                f.write(json.dumps({
                    "k": r.k, "step": step.step, "q": step.q,
                    "cell_accuracy": step.cell_accuracy,
                    "correct_final": bool(ok),
                }, sort_keys=True) + "\n")

    latents = np.stack([np.asarray(step.y_latent, np.float64).ravel()
                        for r in records for step in r.trace])
    plane, coords = ME.pca_project(latents)
    with open(os.path.join(out, "pca.csv"), "w") as f:
        f.write("k,step,pc1,pc2,correct\n")
        i = 0
        for r, ok in zip(records, correct):
            for step in r.trace:
                f.write(f"{r.k},{step.step},{coords[i, 0]!r},"
                        f"{coords[i, 1]!r},{int(ok)}\n")
                i += 1

    flags = [bool(ok) for r, ok in zip(records, correct) for _ in r.trace]
    groups = []
    for label, flag, color in (("correct", True, "#2ca02c"),
                               ("incorrect", False, "#d62728")):
        pts = [i for i, f in enumerate(flags) if f == flag]
        if pts:
            groups.append({"label": label, "color": color,
                           "x": [float(coords[i, 0]) for i in pts],
                           "y": [float(coords[i, 1]) for i in pts]})
    CH.write_svg(os.path.join(out, "latents.svg"),
                 CH.scatter_chart(groups, title=f"latent plane: {inst.instance_id}",
                                  x_label="pc1", y_label="pc2"))

    logs = [ME.trajectory_log_from_record(r, y_true) for r in records]
    ME.write_trajectory_csv(ME.aggregate_trajectories(logs),
                            os.path.join(out, "aggregate.csv"))

    chosen = I.select_best_q(records)
    _write_json(os.path.join(out, "report.json"), {
        "effective_config": _echo(cfg, "trace"),
        "build_id": ME.build_id(_echo(cfg, "trace")),
        "puzzle_id": inst.instance_id,
        "puzzle_type": inst.puzzle_type,
        "deterministic_correct": det_correct,
        "escape_fraction": escape_fraction,
        "rollout_correct": [bool(c) for c in correct],
        "selected_k": chosen.k,
        "selected_correct": bool(I.exact_match(chosen.answer, y_true)),
        "explained_variance": [float(v) for v in plane.variances],
        "points": int(coords.shape[0]),
    })
    _write_meta(out, "trace", time.monotonic() - t0)
    frac = float(np.mean(correct))
    print(f"traced {inst.instance_id}: deterministic "
          f"{'correct' if det_correct else 'wrong'}, "
          f"{sum(map(bool, correct))}/{len(correct)} rollouts correct "
          f"({frac:.2f}); outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# report


def _lookup_metric(sources: dict, path: str):
    node = sources
    for part in path.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise ConfigError(f"report check path {path!r} not found")
    if not isinstance(node, (int, float)) or isinstance(node, bool):
        raise ConfigError(f"report check path {path!r} is not a number")
    return float(node)


def cmd_report(cfg, args) -> int:
    t0 = time.monotonic()
    out_dir = cfg["out_dir"]
    sources = {}
    for name, rel in (("train", os.path.join("train", "result.json")),
                      ("eval", os.path.join("eval", "report.json")),
                      ("sweep", os.path.join("sweep", "summary.json")),
                      ("trace", os.path.join("trace", "report.json"))):
        path = os.path.join(out_dir, rel)
        if os.path.exists(path):
            sources[name] = _read_json(path)

    if not sources:
        raise ConfigError(f"nothing to report under {out_dir}; run other "
                          f"commands first")

    checks = []
    failed = 0
    for spec in cfg["report"]["checks"]:
        value = _lookup_metric(sources, spec["metric"])
        ok = True
        if spec.get("min") is not None and value < spec["min"]:
            ok = False
        if spec.get("max") is not None and value > spec["max"]:
            ok = False
        checks.append({"metric": spec["metric"], "value": value,
                       "min": spec.get("min"), "max": spec.get("max"),
                       "passed": ok})
        failed += 0 if ok else 1

    out = os.path.join(out_dir, "report")
    report = {
        "effective_config": _echo(cfg, "report"),
        "build_id": ME.build_id(_echo(cfg, "report")),
        "sections_present": sorted(sources),
        "checks": checks,
        "checks_failed": failed,
    }
    _write_json(os.path.join(out, "report.json"), report)

    lines = ["# run report", ""]
    if "eval" in sources:
        lines += ["## accuracy", "",
                  "| type | n | det | pass@K | best-q@K | mode@K | oracle@K |",
                  "|---|---|---|---|---|---|---|"]
        for name, row in sources["eval"]["per_type"].items():
            lines.append(
                f"| {name} | {row['count']} | {row['deterministic_exact']:.4f} "
                f"| {row['pass_at_k']:.4f} | {row['best_q_at_k']:.4f} "
                f"| {row['mode_at_k']:.4f} | {row['oracle_at_k']:.4f} |")
        lines.append("")
    if "sweep" in sources:
        lines += ["## noise sweep", "",
                  "| sigma | pass@K | best-q@K | mode@K |", "|---|---|---|---|"]
        for row in sources["sweep"]["summary"]:
            lines.append(f"| {row['sigma']} | {row['pass_at_k_mean']:.4f} "
                         f"| {row['best_q_at_k_mean']:.4f} "
                         f"| {row['mode_at_k_mean']:.4f} |")
        lines.append("")
    if checks:
        lines += ["## checks", ""]
        for c in checks:
            bound = []
            if c["min"] is not None:
                bound.append(f">= {c['min']}")
            if c["max"] is not None:
                bound.append(f"<= {c['max']}")
            status = "pass" if c["passed"] else "FAIL"
            lines.append(f"- {status}: {c['metric']} = {c['value']:.6g} "
                         f"({' and '.join(bound) or 'unbounded'})")
        lines.append("")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.md"), "w") as f:
        f.write("\n".join(lines))
    _write_meta(out, "report", time.monotonic() - t0)

    for c in checks:
        status = "pass" if c["passed"] else "FAIL"
        print(f"{status}: {c['metric']} = {c['value']:.6g}")
    print(f"report written to {out} "
          f"({failed} of {len(checks)} checks failed)" if checks
          else f"report written to {out}")
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="gridloop",
                     description="recursive grid-puzzle solver workbench")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out-dir", help=f"run directory (default ${ENV_OUT_DIR} "
                                          f"or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. data.sudoku4=300")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-data", parents=[common],
                   help="generate puzzle splits").set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data-dir", help="dataset directory (default OUT/data)")
    p.add_argument("--resume", help="training checkpoint base to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="per-type accuracy table")
    p.add_argument("--checkpoint", help="model checkpoint base (default OUT/train/model)")
    p.add_argument("--data-dir")
    p.add_argument("--split", help="dataset split to score")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes; never changes results")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="accuracy across noise levels")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", parents=[common],
                       help="rollout trajectories for one puzzle")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--puzzle-id", help="instance to trace (default: first "
                                       "deterministic failure)")
    p.set_defaults(func=cmd_trace)

    sub.add_parser("report", parents=[common],
                   help="consolidate outputs and run checks").set_defaults(
        func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage()
            return 1
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
