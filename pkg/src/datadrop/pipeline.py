"""Train, drop unfavorable samples, retrain from scratch."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import persist
from .data import Dataset, split
from .ihvp import IhvpConfig
from .influence import InfluenceReport, score_all, select_unfavorable
from .model import ModelSpec
from .trainer import Metrics, TrainConfig, evaluate, objective_spec, train


class PipelineError(RuntimeError):
    def __init__(self, message, report: InfluenceReport | None = None):
        super().__init__(message)
        self.report = report
        self.series: RoundCountSeries | None = None


@dataclass
class TwoRoundResult:
    params_round1: np.ndarray
    report: InfluenceReport
    dropped_ids: set[int]
    params_round2: np.ndarray
    metrics_round1: Metrics
    metrics_round2: Metrics
    reduced_train_size: int
    train_size: int
    val_set: Dataset = field(repr=False)
    round2_config: TrainConfig | None = None


@dataclass
class RoundCountSeries:
    counts: list[int]
    configs_echo: dict
    val_metrics: list[Metrics] = field(default_factory=list)
    dropped_per_round: list[set[int]] = field(default_factory=list)


def carve_validation(train_set: Dataset, spec: ModelSpec, fraction: float, seed: int):
    return split(train_set, fraction, seed, stratified=spec.is_classifier)


def _score_and_select(spec, params, train_set, val_set, train_cfg, ihvp_cfg, workers):
    # influence is taken w.r.t. the objective training minimized (weight decay included)
    report = score_all(objective_spec(spec, train_cfg), params, train_set, val_set,
                       ihvp_cfg, workers=workers)
    dropped = select_unfavorable(report)
    if len(dropped) >= len(train_set):
        raise PipelineError("every training sample was flagged; reduced set is empty", report)
    return report, dropped


def two_round(spec: ModelSpec, train_set: Dataset, val_set: Dataset | None,
              train_cfg: TrainConfig, ihvp_cfg: IhvpConfig, *,
              round2_seed: int | None = None, workers: int = 1,
              val_fraction: float = 0.1) -> TwoRoundResult:
    """Two-round training.

    Round 2 uses the same initialization procedure, batch size and (unless
    ``round2_seed`` is given) seed as round 1; only the training set differs.
    If ``val_set`` is None a stratified validation split is carved first.
    """
    if val_set is None:
        train_set, val_set = carve_validation(train_set, spec, val_fraction, train_cfg.seed)
    params1 = train(spec, train_set, train_cfg)
    report, dropped = _score_and_select(spec, params1, train_set, val_set, train_cfg,
                                        ihvp_cfg, workers)
    reduced = train_set.drop(dropped) if dropped else train_set

    cfg2 = train_cfg if round2_seed is None else train_cfg.replace(seed=round2_seed)
    params2 = train(spec, reduced, cfg2)

    return TwoRoundResult(
        params_round1=params1,
        report=report,
        dropped_ids=dropped,
        params_round2=params2,
        metrics_round1=evaluate(spec, params1, val_set),
        metrics_round2=evaluate(spec, params2, val_set),
        reduced_train_size=len(reduced),
        train_size=len(train_set),
        val_set=val_set,
        round2_config=cfg2,
    )


def multi_round(spec: ModelSpec, train_set: Dataset, val_set: Dataset | None,
                train_cfg: TrainConfig, ihvp_cfg: IhvpConfig, rounds: int, *,
                workers: int = 1, val_fraction: float = 0.1) -> RoundCountSeries:
    """Repeat train -> score -> drop, counting unfavorable samples per round.

    The validation set is held fixed across rounds. Stops early after a round
    that drops nothing. A :class:`PipelineError` carries the rounds completed
    so far in its ``series`` attribute.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if val_set is None:
        train_set, val_set = carve_validation(train_set, spec, val_fraction, train_cfg.seed)
    series = RoundCountSeries([], {"train": train_cfg.to_dict(), "ihvp": ihvp_cfg.to_dict(),
                                   "rounds": rounds})
    current = train_set
    for _ in range(rounds):
        params = train(spec, current, train_cfg)
        series.val_metrics.append(evaluate(spec, params, val_set))
        try:
            _, dropped = _score_and_select(spec, params, current, val_set, train_cfg,
                                           ihvp_cfg, workers)
        except PipelineError as exc:
            series.val_metrics.pop()
            exc.series = series
            raise
        series.counts.append(len(dropped))
        series.dropped_per_round.append(dropped)
        if not dropped:
            break
        current = current.drop(dropped)
    return series


# -- run directory --------------------------------------------------------

def write_two_round(out_dir, spec: ModelSpec, result: TwoRoundResult,
                    train_cfg: TrainConfig, checksum: str) -> dict[str, str]:
    out = Path(out_dir)
    paths = {
        "round1_checkpoint": out / "round1.ckpt",
        "report": out / "influence.jsonl",
        "dropped_ids": out / "dropped_ids.txt",
        "round2_checkpoint": out / "round2.ckpt",
        "metrics": out / "metrics.json",
    }
    meta = {"seed": train_cfg.seed, "config": train_cfg.to_dict(), "dataset_checksum": checksum}
    persist.save_checkpoint(paths["round1_checkpoint"], spec, result.params_round1, meta)
    persist.save_report(paths["report"], result.report)
    persist.save_ids(paths["dropped_ids"], result.dropped_ids)
    meta2 = dict(meta, seed=result.round2_config.seed, config=result.round2_config.to_dict())
    persist.save_checkpoint(paths["round2_checkpoint"], spec, result.params_round2, meta2)
    persist.write_json(paths["metrics"], {
        "train_size": result.train_size,
        "reduced_train_size": result.reduced_train_size,
        "dropped": len(result.dropped_ids),
        "val_size": len(result.val_set),
        "round1": result.metrics_round1.to_dict(),
        "round2": result.metrics_round2.to_dict(),
    })
    return {k: str(v) for k, v in paths.items()}


def write_round_counts(path, series: RoundCountSeries) -> None:
    rows = [["round", "unfavorable", "val_loss", "val_accuracy"]]
    for r, count in enumerate(series.counts, start=1):
        m = series.val_metrics[r - 1]
        rows.append([r, count, repr(m.mean_loss), "" if m.accuracy is None else repr(m.accuracy)])
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
