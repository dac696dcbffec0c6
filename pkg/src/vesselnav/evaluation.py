"""Evaluation protocol: SR / PT / PR aggregation, paired comparisons, reports.

SR is the percentage of successful episodes, PT the simulated procedure
time of successful episodes, PR the remaining pathlength of failed episodes
as a percentage of the initial one. PT is undefined when nothing succeeds
and PR when everything does; reports print those cells as "−".
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .episode import EVAL_TIMEOUT, Episode, EpisodeResult, task_config
from .errors import DegenerateSampleError, PairingError
from .guidesim import ActionCommand, SimConfig
from .hmmarl import ComposedTask, SubtaskPolicy, TsmConfig, run_composed
from .sac import SacAgent
from .stats import paired_ttest
from .tasks import COMPOSED, TreeTasks, stable_seed
from .vasctree import VascTree

DASH = "−"


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    n: int
    sr: float
    sr_sd: float
    pt_mean: Optional[float]
    pt_sd: Optional[float]
    pr_mean: Optional[float]
    pr_sd: Optional[float]


def aggregate(results: Sequence[EpisodeResult], task: Optional[str] = None) -> TaskMetrics:
    """Fold episode results into metrics (population standard deviations)."""
    if not results:
        raise ValueError("no episodes to aggregate")
    ordered = sorted(results, key=lambda r: (r.task, r.seed))
    succ = np.array([100.0 if r.success else 0.0 for r in ordered])
    pts = np.array([r.steps * r.dt for r in ordered if r.success])
    prs = np.array([100.0 * r.final_pathlength / r.initial_pathlength
                    for r in ordered if not r.success and r.initial_pathlength > 0])
    fails = sum(not r.success for r in ordered)
    pt = (float(pts.mean()), float(pts.std())) if pts.size else (None, None)
    pr = (float(prs.mean()), float(prs.std())) if fails else (None, None)
    if fails and not prs.size:
        pr = (0.0, 0.0)
    return TaskMetrics(task or ordered[0].task, len(ordered), float(succ.mean()), float(succ.std()),
                       pt[0], pt[1], pr[0], pr[1])


def fmt_pm(mean: Optional[float], sd: Optional[float], digits: int = 1) -> str:
    if mean is None:
        return DASH
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


# -- controllers ---------------------------------------------------------------------

class Controller:
    """Drives one episode to termination; returns the selected-label trace (may be empty)."""

    def run(self, episode: Episode, task: str) -> List[str]:
        raise NotImplementedError


class AgentController(Controller):
    def __init__(self, agents: Dict[str, SacAgent]):
        self.agents = agents

    def run(self, episode: Episode, task: str) -> List[str]:
        agent = self.agents[task]
        while not episode.finished:
            episode.run_step(ActionCommand.from_unit(agent.act_unit(episode.observation.as_vector(), True)))
        return []


class FamilyController(AgentController):
    """One single-agent policy per task family (both sides)."""

    def run(self, episode: Episode, task: str) -> List[str]:
        return super().run(episode, COMPOSED[task].family if task in COMPOSED else task)


class HierarchicalController(Controller):
    def __init__(self, policies: Dict[str, SubtaskPolicy], tsm: TsmConfig):
        self.policies, self.tsm = policies, tsm

    def run(self, episode: Episode, task: str) -> List[str]:
        if task not in COMPOSED:
            return AgentController({k: p.agent for k, p in self.policies.items()}).run(episode, task)
        return run_composed(ComposedTask.get(task), self.policies, self.tsm, episode).selections


# -- evaluation -------------------------------------------------------------------------

def episode_seeds(root_seed: int, task: str, n: int) -> List[int]:
    return [stable_seed(root_seed, task, k) for k in range(n)]


def evaluate(controller: Controller, trees: Sequence[VascTree], tasks: Sequence[str], n_episodes: int,
             seed: int, sim: Optional[SimConfig] = None, task_seed: int = 0,
             timeout: int = EVAL_TIMEOUT, logs: Optional[list] = None) -> Dict[str, List[EpisodeResult]]:
    """Run ``n_episodes`` per task on eval-half targets; trees are cycled over episodes.

    Episode ``k`` of a task uses its own generator seeded from (seed, task, k),
    so every model sees the same start/target draws and the results pair up.
    """
    sim = sim or SimConfig()
    tt = [TreeTasks(t, task_seed) for t in trees]
    out: Dict[str, List[EpisodeResult]] = {}
    for task in tasks:
        cfgs = [task_config(x, task, "eval", timeout, sim.dt) for x in tt]
        res = []
        for k, s in enumerate(episode_seeds(seed, task, n_episodes)):
            ti = k % len(trees)
            ep = Episode(trees[ti], cfgs[ti], np.random.default_rng(s), sim, k, record=logs is not None)
            if not ep.finished:
                controller.run(ep, task)
            res.append(ep.result(s, ti))
            if logs is not None:
                for row in ep.log:
                    row["task"] = task
                logs.extend(ep.log)
        out[task] = res
    return out


@dataclass
class PairedTest:
    task: str
    model_a: str
    model_b: str
    t: float
    p: float
    significant: bool
    degenerate: bool = False


def paired_success_test(a: Sequence[EpisodeResult], b: Sequence[EpisodeResult],
                        alpha: float = 0.05) -> Tuple[float, float, bool]:
    """Paired t-test on success indicators; returns (t, p, degenerate).

    Zero-variance nonzero differences (e.g. one model always succeeds where the
    other always fails) are reported as t = ±inf, p = 0 and flagged degenerate.
    """
    sa = {r.seed: r for r in a}
    sb = {r.seed: r for r in b}
    if set(sa) != set(sb) or len(sa) != len(a) or len(sb) != len(b):
        raise PairingError("episode seed sets differ; results cannot be paired")
    keys = sorted(sa)
    xa = [float(sa[k].success) for k in keys]
    xb = [float(sb[k].success) for k in keys]
    try:
        t, p = paired_ttest(xa, xb)
        return t, p, False
    except DegenerateSampleError:
        d = xa[0] - xb[0]
        return math.copysign(math.inf, d), 0.0, True


@dataclass
class Comparison:
    models: List[str]
    tasks: List[str]
    results: Dict[str, Dict[str, List[EpisodeResult]]]
    metrics: Dict[str, Dict[str, TaskMetrics]]
    tests: List[PairedTest]
    alpha: float = 0.05


def compare(results: Dict[str, Dict[str, List[EpisodeResult]]], alpha: float = 0.05) -> Comparison:
    """Metrics per (model, task) and pairwise paired tests on success indicators."""
    models = list(results)
    tasks = list(results[models[0]]) if models else []
    for m in models:
        if list(results[m]) != tasks:
            raise PairingError(f"model {m} was evaluated on different tasks")
    metrics = {m: {t: aggregate(results[m][t], t) for t in tasks} for m in models}
    tests = []
    for t in tasks:
        for i, ma in enumerate(models):
            for mb in models[i + 1:]:
                tv, pv, deg = paired_success_test(results[ma][t], results[mb][t], alpha)
                tests.append(PairedTest(t, ma, mb, tv, pv, pv < alpha, deg))
    return Comparison(models, tasks, results, metrics, tests, alpha)


# -- reports ---------------------------------------------------------------------------------

def task_name(task: str) -> str:
    return COMPOSED[task].name if task in COMPOSED else task


def markdown_table(cmp: Comparison) -> str:
    head = ["Task"] + [f"{m} {k}" for m in cmp.models for k in ("SR (%)", "PT (s)", "PR (%)")]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for t in cmp.tasks:
        row = [task_name(t)]
        for m in cmp.models:
            x = cmp.metrics[m][t]
            row += [fmt_pm(x.sr, x.sr_sd), fmt_pm(x.pt_mean, x.pt_sd), fmt_pm(x.pr_mean, x.pr_sd)]
        lines.append("| " + " | ".join(row) + " |")
    if cmp.tests:
        lines += ["", "| Task | Models | t | p | significant |", "|---|---|---|---|---|"]
        for s in cmp.tests:
            tv = ("inf" if s.t > 0 else "-inf") if math.isinf(s.t) else f"{s.t:.4f}"
            flag = "yes" if s.significant else "no"
            if s.degenerate:
                flag += " (zero-variance differences)"
            lines.append(f"| {task_name(s.task)} | {s.model_a} vs {s.model_b} | {tv} | {s.p:.4g} | {flag} |")
    return "\n".join(lines) + "\n"


METRIC_FIELDS = ("model", "task", "n", "sr", "sr_sd", "pt_mean", "pt_sd", "pr_mean", "pr_sd")


def metrics_csv(cmp: Comparison) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in cmp.models:
        for t in cmp.tasks:
            x = cmp.metrics[m][t]
            cell = lambda v: "" if v is None else f"{v:.6f}"
            w.writerow([m, t, x.n, cell(x.sr), cell(x.sr_sd), cell(x.pt_mean), cell(x.pt_sd),
                        cell(x.pr_mean), cell(x.pr_sd)])
    return buf.getvalue()


def episodes_csv(cmp: Comparison) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "task", "seed", "tree", "success", "steps", "sim_seconds",
                "initial_pathlength", "final_pathlength"))
    for m in cmp.models:
        for t in cmp.tasks:
            for r in sorted(cmp.results[m][t], key=lambda r: r.seed):
                w.writerow([m, t, r.seed, r.tree, int(r.success), r.steps, f"{r.steps * r.dt:.6f}",
                            f"{r.initial_pathlength:.6f}", f"{r.final_pathlength:.6f}"])
    return buf.getvalue()


def manifest(config: dict, seeds: dict, checkpoints: Dict[str, str]) -> str:
    body = {"config": config, "config_hash": config_hash(config), "seeds": seeds,
            "checkpoints": checkpoints}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]
