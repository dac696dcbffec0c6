"""End-to-end driver shared by the command line and the acceptance tests.

Output layout under the run directory::

    trees/         tree_000.vtree ..., stats.json, stats.md
    checkpoints/   <variant>/<label>.vnck (+ .json manifest, .state while training)
    logs/          <variant>/<label>_train.csv
    reports/       episodes.csv, metrics.csv, eval.md, compare.md, report.md, manifest.json
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .episode import EpisodeResult, task_config
from .errors import ConfigurationError, LoadError
from .evaluation import (Comparison, FamilyController, HierarchicalController, compare,
                         episodes_csv, evaluate, manifest, markdown_table, metrics_csv)
from .hmmarl import SubtaskPolicy, TsmConfig
from .sac import SacAgent, Trainer
from .tasks import COMPOSED, TreeTasks
from .vasctree import VascTree, chain_tortuosity, generate_synthetic, load_tree, save_tree

log = logging.getLogger(__name__)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- anatomy ----------------------------------------------------------------------------

def gen_vasc(cfg: RunConfig, out: Path) -> List[VascTree]:
    params = cfg.anatomy_params()
    trees = [generate_synthetic(params, cfg.stream("anatomy", i)) for i in range(cfg.anatomy.n_trees)]
    tdir = Path(out) / "trees"
    tdir.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(trees):
        save_tree(t, tdir / f"tree_{i:03d}.vtree")
    stats = tree_stats(trees)
    _write(tdir / "stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _write(tdir / "stats.md", stats_markdown(stats))
    _write(Path(out) / "reports" / "config.yaml", cfg.dump())
    return trees


def tree_stats(trees: Sequence[VascTree]) -> dict:
    right = [chain_tortuosity(t, "R") for t in trees]
    left = [chain_tortuosity(t, "L") for t in trees]
    arch = {"TypeI": sum(t.arch_type == "TypeI" for t in trees),
            "TypeII": sum(t.arch_type == "TypeII" for t in trees)}

    def ms(x):
        return [round(float(np.mean(x)), 6), round(float(np.std(x)), 6)] if x else None
    return {"n": len(trees), "tortuosity_right": ms(right), "tortuosity_left": ms(left),
            "arch_types": arch}


def stats_markdown(stats: dict) -> str:
    def cell(v):
        return "−" if v is None else f"{v[0]:.3f} ± {v[1]:.3f}"
    return ("| anatomies | right tortuosity | left tortuosity | Type I | Type II |\n"
            "|---|---|---|---|---|\n"
            f"| {stats['n']} | {cell(stats['tortuosity_right'])} | {cell(stats['tortuosity_left'])} "
            f"| {stats['arch_types']['TypeI']} | {stats['arch_types']['TypeII']} |\n")


def load_trees(out: Path, n: Optional[int] = None) -> List[VascTree]:
    tdir = Path(out) / "trees"
    files = sorted(tdir.glob("tree_*.vtree"))
    if not files:
        raise ConfigurationError(f"no trees under {tdir}; run gen-vasc first")
    if n is not None:
        if len(files) < n:
            raise ConfigurationError(f"need {n} trees, found {len(files)}")
        files = files[:n]
    return [load_tree(f) for f in files]


# -- training ----------------------------------------------------------------------------

def training_jobs(cfg: RunConfig, variant: str) -> List[Tuple[str, int, List[int]]]:
    """(label, exploration budget, tree indices) for every agent of a variant."""
    per = cfg.train.steps_per_subtask
    if variant == "hm-marl-1":
        return [(s, per, [0]) for s in cfg.train.subtasks]
    if variant == "hm-marl-10":
        trees = list(range(min(cfg.train.multi_trees, cfg.anatomy.n_trees)))
        return [(s, per, trees) for s in cfg.train.subtasks]
    if variant == "sa-rl-1":
        # the single-agent baseline gets the same total number of environment
        # steps as the five hierarchical agents, split over its family agents
        total = per * len(cfg.train.subtasks)
        fams = list(cfg.train.families)
        return [(f, total // len(fams), [0]) for f in fams]
    raise ConfigurationError(f"unknown variant {variant!r}")


def scenarios(trees: Sequence[VascTree], idx: Sequence[int], label: str, split: str,
              timeout: int, task_seed: int, dt: float):
    out = []
    for i in idx:
        out.append((trees[i], task_config(TreeTasks(trees[i], task_seed), label, split, timeout, dt)))
    return out


def train_variant(cfg: RunConfig, out: Path, variant: str, stop_after: Optional[int] = None,
                  labels: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """Train (or resume) every agent of ``variant``; returns checkpoint paths.

    Finished agents whose manifest matches the current configuration are
    skipped. With ``stop_after`` each unfinished agent halts after that many
    total steps, leaving a resumable ``.state`` file.
    """
    out = Path(out)
    jobs = training_jobs(cfg, variant)
    trees = load_trees(out, max(max(j[2]) for j in jobs) + 1)
    sim = cfg.sim_config()
    cdir = out / "checkpoints" / variant
    ldir = out / "logs" / variant
    cdir.mkdir(parents=True, exist_ok=True)
    ldir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for label, budget, tree_idx in jobs:
        if labels is not None and label not in labels:
            continue
        ck = cdir / f"{label}.vnck"
        sac = cfg.sac_config(budget)
        seed = cfg.stream("training", variant, label)
        meta = {"variant": variant, "task": label, "seed": seed, "trees": tree_idx,
                "budget": budget, "training_hash": cfg.training_digest()}
        paths[label] = ck
        if _finished(ck, meta):
            continue
        state = cdir / f"{label}.state"
        if state.exists():
            trainer = Trainer.load_state(state)
            if trainer.cfg.digest() != sac.digest() or trainer.seed != seed:
                raise ConfigurationError(f"{state} was written by a different configuration")
        else:
            sc = scenarios(trees, tree_idx, label, "train", sac.train_timeout,
                           cfg.anatomy.task_seed, sim.dt)
            trainer = Trainer(sc, sc, sac, seed, sim, label)
        log.info("training %s/%s for %d steps (at %d)", variant, label, budget, trainer.step)
        _run_with_checkpoints(trainer, state, stop_after)
        if not trainer.done:
            continue
        agent = trainer.best_agent()
        meta.update(selected_step=trainer.selected_step,
                    snapshot_sr=[[s.step, s.success_rate] for s in trainer.snapshots])
        agent.save(ck, meta)
        trainer.write_logs(ldir / f"{label}_train.csv")
        state.unlink(missing_ok=True)
    return paths


def _run_with_checkpoints(trainer: Trainer, state: Path, stop_after: Optional[int]) -> None:
    every = trainer.cfg.eval_every
    end = trainer.cfg.total_steps if stop_after is None else min(stop_after, trainer.cfg.total_steps)
    while trainer.step < end:
        nxt = min(end, (trainer.step // every + 1) * every)
        trainer.run(stop_after=nxt)
        if not trainer.done:
            trainer.save_state(state)


def _finished(ck: Path, meta: dict) -> bool:
    mf = ck.with_suffix(".json")
    if not (ck.exists() and mf.exists()):
        return False
    try:
        old = json.loads(mf.read_text())
    except ValueError:
        return False
    return all(old.get(k) == v for k, v in meta.items())


def load_policies(out: Path, variant: str, labels: Sequence[str]) -> Dict[str, SacAgent]:
    cdir = Path(out) / "checkpoints" / variant
    agents = {}
    for l in labels:
        ck = cdir / f"{l}.vnck"
        if not ck.exists():
            raise LoadError(f"missing checkpoint {ck}; train variant {variant} first")
        agents[l] = SacAgent.load(ck)
    return agents


# -- evaluation ------------------------------------------------------------------------------

def needed_agents(variant: str, tasks: Sequence[str]) -> List[str]:
    need = []
    for t in tasks:
        if variant == "sa-rl-1":
            labs = [COMPOSED[t].family] if t in COMPOSED else [t]
        else:
            labs = list(COMPOSED[t].chain) if t in COMPOSED else [t]
        need += [l for l in labs if l not in need]
    return need


def controller_for(cfg: RunConfig, out: Path, variant: str, tasks: Sequence[str]):
    agents = load_policies(out, variant, needed_agents(variant, tasks))
    if variant == "sa-rl-1":
        return FamilyController(agents)
    tsm = TsmConfig.load(cfg.tsm)
    return HierarchicalController({k: SubtaskPolicy(k, a) for k, a in agents.items()}, tsm)


MULTI_SUFFIX = " (10 anat.)"


def eval_models(cfg: RunConfig, out: Path, models: Optional[Sequence[str]] = None,
                tasks: Optional[Sequence[str]] = None,
                episodes: Optional[int] = None) -> Dict[str, Dict[str, List[EpisodeResult]]]:
    """Evaluate on the training anatomy; hm-marl-10 is additionally run across all anatomies."""
    out = Path(out)
    models = list(models or cfg.eval.models)
    tasks = list(tasks or cfg.eval.tasks)
    n = cfg.eval.episodes if episodes is None else episodes
    trees = load_trees(out)
    sim = cfg.sim_config()
    seed = cfg.stream("evaluation")
    results = {}
    for m in models:
        ctl = controller_for(cfg, out, m, tasks)
        results[m] = evaluate(ctl, trees[:1], tasks, n, seed, sim, cfg.anatomy.task_seed, cfg.eval.timeout)
        if m == "hm-marl-10" and len(trees) > 1:
            k = min(cfg.train.multi_trees, len(trees))
            results[m + MULTI_SUFFIX] = evaluate(ctl, trees[:k], tasks, n, seed, sim,
                                                 cfg.anatomy.task_seed, cfg.eval.timeout)
    rdir = out / "reports"
    cmp = compare(results, cfg.eval.alpha)
    _write(rdir / "episodes.csv", episodes_csv(cmp))
    _write(rdir / "metrics.csv", metrics_csv(cmp))
    _write(rdir / "eval.md", markdown_table(Comparison(cmp.models, cmp.tasks, results, cmp.metrics, [])))
    _write(rdir / "manifest.json", manifest(cfg.to_dict(), {"root": cfg.seed, "evaluation": seed},
                                            _checkpoint_digests(out, models)))
    _write(rdir / "config.yaml", cfg.dump())
    return results


def _checkpoint_digests(out: Path, models: Sequence[str]) -> Dict[str, str]:
    import hashlib
    d = {}
    for m in models:
        for ck in sorted((Path(out) / "checkpoints" / m).glob("*.vnck")):
            d[f"{m}/{ck.name}"] = hashlib.sha256(ck.read_bytes()).hexdigest()[:16]
    return d


def read_episodes(out: Path) -> Dict[str, Dict[str, List[EpisodeResult]]]:
    path = Path(out) / "reports" / "episodes.csv"
    if not path.exists():
        raise ConfigurationError(f"{path} not found; run eval first")
    res: Dict[str, Dict[str, List[EpisodeResult]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps = int(row["steps"])
            secs = float(row["sim_seconds"])
            r = EpisodeResult(row["task"], row["success"] == "1", steps,
                              float(row["initial_pathlength"]), float(row["final_pathlength"]),
                              int(row["seed"]), secs / steps if steps else 2.0 / 15.0, int(row["tree"]))
            res.setdefault(row["model"], {}).setdefault(row["task"], []).append(r)
    return res


def compare_models(cfg: RunConfig, out: Path) -> Comparison:
    """Paired tests between the models evaluated on the single training anatomy."""
    res = read_episodes(out)
    single = {m: v for m, v in res.items() if not m.endswith(MULTI_SUFFIX)}
    cmp = compare(single, cfg.eval.alpha)
    _write(Path(out) / "reports" / "compare.md", markdown_table(cmp))
    return cmp


def build_report(cfg: RunConfig, out: Path) -> str:
    out = Path(out)
    res = read_episodes(out)
    single = {m: v for m, v in res.items() if not m.endswith(MULTI_SUFFIX)}
    parts = ["# Navigation evaluation report", ""]
    stats = out / "trees" / "stats.md"
    if stats.exists():
        parts += ["## Anatomies", "", stats.read_text(), ""]
    parts += ["## Single training anatomy", "", markdown_table(compare(single, cfg.eval.alpha)), ""]
    multi = {m: v for m, v in res.items() if m.endswith(MULTI_SUFFIX)}
    if multi:
        parts += ["## Across anatomies", "", markdown_table(compare(multi, cfg.eval.alpha)), ""]
    budgets = []
    for v in cfg.train.variants:
        for label, budget, _ in training_jobs(cfg, v):
            mf = out / "checkpoints" / v / f"{label}.json"
            if mf.exists():
                meta = json.loads(mf.read_text())
                budgets.append(f"| {v} | {label} | {budget} | {meta.get('selected_step', '')} |")
    if budgets:
        parts += ["## Exploration steps", "", "| variant | agent | budget | selected snapshot |",
                  "|---|---|---|---|"] + budgets + [""]
    text = "\n".join(parts)
    _write(out / "reports" / "report.md", text)
    return text


def run_all(cfg: RunConfig, out: Path) -> str:
    gen_vasc(cfg, out)
    for v in cfg.train.variants:
        train_variant(cfg, out, v)
    eval_models(cfg, out)
    compare_models(cfg, out)
    return build_report(cfg, out)
