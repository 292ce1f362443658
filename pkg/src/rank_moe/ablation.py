"""Train-and-evaluate harness for ablation variants and parameter sweeps."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .data import InteractionRecord
from .metrics import EvalReport, evaluate
from .pipeline import ABLATIONS, RankingModel, TrainConfig, train

log = logging.getLogger(__name__)

TABLE_VARIANTS = ("full", "no_jd", "no_jd_no_mtl", "no_jd_no_mtl_no_pmmoe")
EXPERT_SWEEP = (1, 3, 5, 10)
HISTORY_SWEEP = (1, 5, 10, 30, 50)


@dataclass
class RunResult:
    variant: str
    seed: int
    auc_ctr: float
    auc_cvr: float

    @property
    def auc_avg(self) -> float:
        return (self.auc_ctr + self.auc_cvr) / 2.0


def evaluate_model(model: RankingModel, records: Sequence[InteractionRecord]) -> EvalReport:
    rows = model.predict_encoded(model.encode(records))
    return evaluate(
        [r.session_id for r in records],
        [r.talent_id for r in records],
        rows[:, 0],
        rows[:, 1],
        [r.label_click for r in records],
        [r.label_apply for r in records],
    )


def run_variant(
    variant: str,
    train_records: Sequence[InteractionRecord],
    test_records: Sequence[InteractionRecord],
    config: TrainConfig,
    seed: int,
) -> RunResult:
    cfg = replace(config, seed=seed)
    result = train(train_records, cfg)
    report = evaluate_model(result.model, test_records)
    auc_ctr = report.tasks["ctr"]["auc"]
    auc_cvr = report.tasks["cvr"]["auc"]
    log.info("%s seed=%d auc_ctr=%.4f auc_cvr=%.4f", variant, seed, auc_ctr, auc_cvr)
    return RunResult(variant, seed, auc_ctr, auc_cvr)


def variant_configs(base: TrainConfig, groups: Iterable[str] = ("variants", "experts", "history")) -> list[tuple[str, TrainConfig]]:
    """Named configs for the requested groups.

    ``variants`` are the five ablation modes; ``experts`` and ``history`` sweep
    the full model's expert count and history length.
    """
    out: list[tuple[str, TrainConfig]] = []
    groups = list(groups)
    for g in groups:
        if g == "variants":
            out += [(a, replace(base, ablation=a)) for a in ABLATIONS]
        elif g == "experts":
            out += [(f"experts={n}", replace(base, ablation="full", n_experts=n)) for n in EXPERT_SWEEP]
        elif g == "history":
            out += [(f"history={h}", replace(base, ablation="full", max_history=h)) for h in HISTORY_SWEEP]
        else:
            raise ValueError(f"unknown ablation group {g!r}")
    return out


def run_ablation(
    train_records: Sequence[InteractionRecord],
    test_records: Sequence[InteractionRecord],
    configs: Sequence[tuple[str, TrainConfig]],
    seeds: Sequence[int],
) -> list[RunResult]:
    return [
        run_variant(name, train_records, test_records, cfg, seed)
        for name, cfg in configs
        for seed in seeds
    ]


def median_auc(results: Iterable[RunResult], variant: str) -> float:
    vals = [r.auc_avg for r in results if r.variant == variant]
    if not vals:
        raise KeyError(f"no runs for variant {variant!r}")
    return statistics.median(vals)


def write_ablation_csv(path: str | Path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "auc_ctr", "auc_cvr", "auc_avg"])
        for r in results:
            w.writerow([r.variant, r.seed, repr(r.auc_ctr), repr(r.auc_cvr), repr(r.auc_avg)])
