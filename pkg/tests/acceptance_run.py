"""Desk-scale training and evaluation shared by the acceptance gate.

The expensive part (about two CPU hours on one core) is cached on disk under
``VESSELNAV_ACCEPTANCE_DIR`` (default ``.acceptance/`` in the repository),
keyed by the training-configuration hash. Finished checkpoints are reused;
evaluation results are reused when the manifest matches the configuration and
the checkpoint digests. Run this module directly to warm the cache:

    python tests/acceptance_run.py
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

from vesselnav import pipeline
from vesselnav.config import RunConfig
from vesselnav.evaluation import config_hash

ACCEPTANCE_CONFIG = {"preset": "desk", "seed": 0}
ROOT = Path(__file__).resolve().parents[1]


def acceptance_config() -> RunConfig:
    return RunConfig.from_dict(ACCEPTANCE_CONFIG)


def cache_dir(cfg: RunConfig) -> Path:
    base = Path(os.environ.get("VESSELNAV_ACCEPTANCE_DIR", ROOT / ".acceptance"))
    return base / cfg.training_digest()


def _eval_is_current(cfg: RunConfig, out: Path) -> bool:
    mf = out / "reports" / "manifest.json"
    if not (mf.exists() and (out / "reports" / "episodes.csv").exists()):
        return False
    meta = json.loads(mf.read_text())
    return (meta.get("config_hash") == config_hash(cfg.to_dict())
            and meta.get("checkpoints") == pipeline._checkpoint_digests(out, cfg.eval.models))


def ensure_run(cfg: RunConfig = None) -> Path:
    """Train every variant (resuming where possible) and evaluate; returns the run directory."""
    cfg = cfg or acceptance_config()
    out = cache_dir(cfg)
    if not (out / "trees" / "stats.json").exists():
        pipeline.gen_vasc(cfg, out)
    for v in cfg.train.variants:
        pipeline.train_variant(cfg, out, v)
    if not _eval_is_current(cfg, out):
        pipeline.eval_models(cfg, out)
        pipeline.compare_models(cfg, out)
        pipeline.build_report(cfg, out)
    return out


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)
    print(ensure_run())
