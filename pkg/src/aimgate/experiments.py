"""Experiment orchestration: method x env x seed matrices, summaries, studies."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .baselines import (aim_ablation_train, bc_train, ensemble_dagger_train,
                        hgdagger_train, thrifty_train)
from .buffers import EXPERT
from .config import RunConfig, desk_preset
from .envs import CORRIDOR
from .metrics import evaluate, offline_quality_curve
from .proxyq import NO_TD, REWARD_LABEL
from .runlog import read_runlog, steps_of
from .training import RunResult, aim_train

METHODS = ("aim", "bc", "hgdagger", "ensemble", "thrifty", "aim-reward", "aim-notd")


def run_one(method: str, cfg: RunConfig, out_dir) -> RunResult:
    if method == "aim":
        return aim_train(cfg, out_dir)[0]
    if method == "bc":
        return bc_train(cfg, out_dir)
    if method == "hgdagger":
        return hgdagger_train(cfg, out_dir)
    if method == "ensemble":
        return ensemble_dagger_train(cfg, out_dir)
    if method == "thrifty":
        return thrifty_train(cfg, out_dir)
    if method == "aim-reward":
        return aim_ablation_train(cfg, out_dir, REWARD_LABEL)
    if method == "aim-notd":
        return aim_ablation_train(cfg, out_dir, NO_TD)
    raise ValueError(f"unknown method {method!r}")


def run_matrix(methods, env_kind: str, seeds: int, budget: int, out_dir,
               base_cfg: RunConfig | None = None, quiet: bool = False) -> list[RunResult]:
    results = []
    for method in methods:
        for seed in range(seeds):
            cfg = (base_cfg or desk_preset(env_kind)).replace(
                env_kind=env_kind, seed=seed, expert_budget=budget)
            run_dir = os.path.join(str(out_dir), method, f"seed{seed}")
            if not quiet:
                print(f"[aimgate] {method} {env_kind} seed {seed} ...", flush=True)
            results.append(run_one(method, cfg, run_dir))
    return results


def summarize(results: list[RunResult]) -> list[dict]:
    """One row per method: mean and stddev of best-checkpoint metrics across
    seeds, plus budget usage."""
    by_method: dict[str, list[RunResult]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, runs in by_method.items():
        best = [r.best_eval for r in runs]
        final = [r.final_eval for r in runs]

        def agg(records, key):
            vals = [rec[key] for rec in records if rec.get(key) is not None]
            if not vals:
                return None, None
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            return mean, std

        sr_m, sr_s = agg(best, "success_rate")
        er_m, er_s = agg(best, "episodic_return")
        rc_m, rc_s = agg(best, "route_completion")
        fin_m, fin_s = agg(final, "success_rate")
        rows.append({
            "method": method,
            "seeds": len(runs),
            "expert_data_usage": float(np.mean([r.budget.expert_data_usage for r in runs])),
            "total_data_usage": float(np.mean([r.budget.total_data_usage for r in runs])),
            "intervention_rate": float(np.mean(
                [r.budget.overall_intervention_rate for r in runs])),
            "best_success_mean": sr_m, "best_success_std": sr_s,
            "best_return_mean": er_m, "best_return_std": er_s,
            "best_completion_mean": rc_m, "best_completion_std": rc_s,
            "final_success_mean": fin_m, "final_success_std": fin_s,
        })
    return rows


def write_summary(rows: list[dict], out_dir) -> str:
    path = os.path.join(str(out_dir), "summary.csv")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    return path


def summarize_dir(out_dir) -> list[dict]:
    """Rebuild the summary purely from saved result.json files."""
    results = []
    for root, _, files in os.walk(str(out_dir)):
        if "result.json" in files:
            with open(os.path.join(root, "result.json")) as fh:
                doc = json.load(fh)
            from .metrics import BudgetReport
            results.append(RunResult(
                method=doc["method"], env_kind=doc["env"], seed=doc["seed"],
                out_dir=root,
                budget=BudgetReport(doc["budget"]["expert_data_usage"],
                                    doc["budget"]["total_data_usage"]),
                warmup_expert_steps=doc["warmup_expert_steps"],
                final_eval=doc["final_eval"], best_eval=doc["best_eval"],
                checkpoints=[], stopped_early=doc.get("stopped_early", False),
                variant=doc.get("variant")))
    results.sort(key=lambda r: (r.method, r.seed))
    return summarize(results)


# -- study helpers over finished runs ---------------------------------------


def expert_usage_at_success(checkpoints: list[dict], target: float,
                            budget: int) -> int:
    """Expert steps spent when evaluation success first reached ``target``;
    the full budget if it never did."""
    for row in checkpoints:
        if row["success_rate"] >= target:
            return int(row["expert_steps"])
    return budget


def intervention_rate_quarters(runlog_path) -> tuple[float, float]:
    """Expert-controlled step fraction in the first and last quarter of the
    robot-gated phase."""
    records = read_runlog(runlog_path)
    steps = [r for r in steps_of(records) if r["phase"] == "main"]
    if not steps:
        return 0.0, 0.0
    quarter = max(1, len(steps) // 4)
    first = steps[:quarter]
    last = steps[-quarter:]

    def rate(chunk):
        return sum(s["controller"] == EXPERT for s in chunk) / len(chunk)

    return rate(first), rate(last)


def request_locality(runlog_path, radius: float = 8.0,
                     after_step: int = 2000) -> float | None:
    """Fraction of help requests raised within ``radius`` meters of an
    obstacle, counting requests from ``after_step`` on (the phase where
    straight road should already be mastered). None when no requests."""
    from .envs.corridor import Cone, build_layout
    records = read_runlog(runlog_path)
    header = records[0]
    if header["env"] != CORRIDOR:
        raise ValueError("request locality is a corridor study")
    cfg = header["config"]
    layout_by_episode = {r["episode"]: r["layout_seed"] for r in records
                         if r.get("kind") == "episode"}
    near = total = 0
    for r in steps_of(records):
        if not r["request_event"] or r["step"] < after_step:
            continue
        obstacles, _, _ = build_layout(layout_by_episode[r["episode"]],
                                       cfg["lane_halfwidth"], cfg["goal_x"])
        x, y = r["pos"]
        d = min(math.hypot(x - ob.x, y - ob.y) if isinstance(ob, Cone)
                else abs(x - ob.x) for ob in obstacles)
        near += d <= radius
        total += 1
    if total == 0:
        return None
    return near / total


def deviation_at_half_budget(checkpoints: list[dict], total_steps: int) -> float | None:
    """Deviation ratio at the checkpoint closest to half the step budget."""
    target = total_steps // 2
    best_row, best_gap = None, None
    for row in checkpoints:
        if row.get("deviation_ratio") is None:
            continue
        gap = abs(row["step"] - target)
        if best_gap is None or gap < best_gap:
            best_row, best_gap = row, gap
    return None if best_row is None else best_row["deviation_ratio"]
