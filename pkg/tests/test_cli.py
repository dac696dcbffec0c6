import json

import pytest
import yaml

from vesselnav.cli import EXIT_CONFIG, EXIT_IO, EXIT_LOAD, EXIT_OK, main
from vesselnav.config import RunConfig
from vesselnav.vasctree import chain_tortuosity, load_tree


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text("preset: tiny\nseed: 11\n")
    return str(p)


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory, tiny_cfg):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"run{k}")
        assert main(["run", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
        outs.append(out)
    return outs


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: tiny\nbogus: 1\n")
    assert main(["gen-vasc", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text("preset: tiny\nanatomy: {params: {max_tortuosity: -1}}\n")
    assert main(["gen-vasc", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text("preset: [unclosed\n")
    assert main(["gen-vasc", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen-vasc", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    assert main(["gen-vasc", "--seed", str(2 ** 64), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_inputs(tmp_path, tiny_cfg):
    out = str(tmp_path / "empty")
    assert main(["train", "--config", tiny_cfg, "--out", out]) == EXIT_CONFIG
    assert main(["gen-vasc", "--config", tiny_cfg, "--out", out, "--n-trees", "1"]) == EXIT_OK
    assert main(["eval", "--config", tiny_cfg, "--out", out]) == EXIT_LOAD
    assert main(["compare", "--config", tiny_cfg, "--out", out]) == EXIT_CONFIG


def test_io_error(tmp_path, tiny_cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-vasc", "--config", tiny_cfg, "--out", str(blocker)]) == EXIT_IO


def test_gen_vasc_counts_and_determinism(tmp_path, tiny_cfg):
    a, b, z = tmp_path / "a", tmp_path / "b", tmp_path / "z"
    assert main(["gen-vasc", "--config", tiny_cfg, "--out", str(z), "--n-trees", "0"]) == EXIT_OK
    assert not list((z / "trees").glob("*.vtree"))
    for d in (a, b):
        assert main(["gen-vasc", "--config", tiny_cfg, "--out", str(d), "--n-trees", "3"]) == EXIT_OK
    fa = sorted((a / "trees").glob("*.vtree"))
    assert len(fa) == 3
    for f in fa:
        assert f.read_bytes() == (b / "trees" / f.name).read_bytes()
    stats = json.loads((a / "trees" / "stats.json").read_text())
    trees = [load_tree(f) for f in fa]
    right = [chain_tortuosity(t, "R") for t in trees]
    assert stats["n"] == 3
    assert stats["tortuosity_right"][0] == pytest.approx(sum(right) / 3, abs=1e-6)
    assert sum(stats["arch_types"].values()) == 3
    cfg = yaml.safe_load((a / "reports" / "config.yaml").read_text())
    assert cfg["anatomy"]["n_trees"] == 3 and cfg["seed"] == 11


def test_different_seed_different_trees(tmp_path, tiny_cfg):
    for s in ("1", "2"):
        main(["gen-vasc", "--config", tiny_cfg, "--out", str(tmp_path / s), "--seed", s, "--n-trees", "1"])
    assert ((tmp_path / "1" / "trees" / "tree_000.vtree").read_bytes()
            != (tmp_path / "2" / "trees" / "tree_000.vtree").read_bytes())


def test_tiny_run_reproducible(tiny_runs):
    a, b = tiny_runs
    for name in ("report.md", "episodes.csv", "metrics.csv", "compare.md", "manifest.json"):
        assert (a / "reports" / name).read_bytes() == (b / "reports" / name).read_bytes(), name
    report = (a / "reports" / "report.md").read_text()
    assert "hm-marl-1" in report and "sa-rl-1" in report and "(10 anat.)" in report


def test_tiny_run_checkpoints(tiny_runs):
    out = tiny_runs[0]
    hm = sorted(p.stem for p in (out / "checkpoints" / "hm-marl-1").glob("*.vnck"))
    sa = sorted(p.stem for p in (out / "checkpoints" / "sa-rl-1").glob("*.vnck"))
    assert hm == ["A1", "A2L", "A2R", "A3L", "A3R"]
    assert sa == ["A12", "A123", "A23"]
    meta = json.loads((out / "checkpoints" / "sa-rl-1" / "A12.json").read_text())
    assert meta["budget"] == 400 * 5 // 3
    assert not list(out.glob("checkpoints/*/*.state"))
    assert (out / "logs" / "hm-marl-1" / "A1_train.csv").exists()


def test_rerun_skips_finished_training(tiny_runs, tiny_cfg):
    out = tiny_runs[0]
    ck = out / "checkpoints" / "hm-marl-1" / "A1.vnck"
    before = ck.stat().st_mtime_ns
    assert main(["train", "--config", tiny_cfg, "--out", str(out), "--variant", "hm-marl-1"]) == EXIT_OK
    assert ck.stat().st_mtime_ns == before


def test_resume_after_interruption(tmp_path, tiny_cfg, tiny_runs):
    out = tmp_path / "r"
    assert main(["gen-vasc", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    args = ["train", "--config", tiny_cfg, "--out", str(out), "--variant", "hm-marl-1"]
    assert main(args + ["--stop-after", "250"]) == EXIT_OK
    assert (out / "checkpoints" / "hm-marl-1" / "A1.state").exists()
    assert not (out / "checkpoints" / "hm-marl-1" / "A1.vnck").exists()
    assert main(args) == EXIT_OK
    ref = tiny_runs[0] / "checkpoints" / "hm-marl-1"
    for label in ("A1", "A2R", "A3L"):
        got = (out / "checkpoints" / "hm-marl-1" / f"{label}.vnck").read_bytes()
        assert got == (ref / f"{label}.vnck").read_bytes(), label


def test_cli_overrides(tiny_cfg):
    from vesselnav.cli import build_parser, resolve_config
    args = build_parser().parse_args(["eval", "--config", tiny_cfg, "--tasks", "A12R,A12L",
                                      "--episodes", "7", "--variant", "sa-rl-1", "--steps", "100"])
    cfg = resolve_config(args)
    assert cfg.eval.tasks == ["A12R", "A12L"] and cfg.eval.episodes == 7
    assert cfg.eval.models == ["sa-rl-1"] and cfg.train.steps_per_subtask == 100
    assert isinstance(cfg, RunConfig)


def test_seed_streams_independent():
    cfg = RunConfig.from_dict({"preset": "tiny", "seed": 5})
    assert cfg.stream("training", "hm-marl-1", "A1") != cfg.stream("training", "hm-marl-1", "A2R")
    assert cfg.stream("evaluation") == RunConfig.from_dict({"preset": "tiny", "seed": 5}).stream("evaluation")
    assert cfg.stream("evaluation") != RunConfig.from_dict({"preset": "tiny", "seed": 6}).stream("evaluation")
