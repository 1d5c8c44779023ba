"""Synthetic ablation benchmark: the four FF / FA / CL variants over several training seeds.

One phantom dataset (default 2000/250/500) is generated and prepared once; each
variant is then trained per seed and scored on the test split with the
checkpoint that had the best validation AUC.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .pipeline import cmd_eval, cmd_gen_data, cmd_train, load_manifest, prepare_split

log = logging.getLogger(__name__)

ABLATION_ORDER = ("baseline", "ff", "ff_fa", "full")


@dataclass
class BenchmarkResult:
    variants: tuple
    seeds: tuple
    metrics: dict = field(default_factory=dict)  # (variant, seed) -> metrics dict
    seconds: float = 0.0

    def mean(self, variant: str, key: str) -> float:
        return float(np.mean([self.metrics[(variant, s)][key] for s in self.seeds]))

    def table(self) -> str:
        keys = ("auc", "ap", "recall_fp1", "recall_fp10")
        lines = ["variant\tseed\t" + "\t".join(keys)]
        for v in self.variants:
            for s in self.seeds:
                m = self.metrics[(v, s)]
                lines.append(f"{v}\t{s}\t" + "\t".join(f"{m[k]:.4f}" for k in keys))
            lines.append(f"{v}\tmean\t" + "\t".join(f"{self.mean(v, k):.4f}" for k in keys))
        return "\n".join(lines)

    def trend(self) -> dict:
        """The ordering and margin checks of the ablation."""
        a = {v: self.mean(v, "auc") for v in self.variants}
        r = {v: self.mean(v, "recall_fp1") for v in self.variants}
        return {
            "baseline<ff": a["baseline"] < a["ff"],
            "ff<=ff_fa": a["ff"] <= a["ff_fa"],
            "ff_fa<=full": a["ff_fa"] <= a["full"],
            "full>=baseline+2auc": a["full"] >= a["baseline"] + 0.02,
            "full>=baseline+5recall": r["full"] >= r["baseline"] + 0.05,
        }


def run_benchmark(base: RunConfig, root: str, seeds=(0, 1, 2), variants=ABLATION_ORDER) -> BenchmarkResult:
    t0 = time.perf_counter()
    cfg = base.copy()
    cfg.paths.data_dir = os.path.join(root, "data")
    manifest = os.path.join(cfg.paths.data_dir, "manifest.json")
    if os.path.exists(manifest):
        load_manifest(cfg.paths.data_dir)
    else:
        cmd_gen_data(cfg)
    train, val, test = (prepare_split(cfg, s) for s in ("train", "val", "test"))
    log.info("data ready in %.0f s", time.perf_counter() - t0)
    res = BenchmarkResult(tuple(variants), tuple(seeds))
    for seed in seeds:
        for v in variants:
            run = cfg.copy()
            run.apply_variant(v)
            run.train.seed = seed
            run.paths.run_dir = os.path.join(root, f"{v}_seed{seed}")
            tr = cmd_train(run, train, val)
            metrics, _ = cmd_eval(run, tr.checkpoint, "test", data=test)
            res.metrics[(v, seed)] = metrics
            log.info("%s seed %d: %s (%.0f s)", v, seed, {k: round(x, 4) for k, x in metrics.items()}, tr.seconds)
    res.seconds = time.perf_counter() - t0
    return res
