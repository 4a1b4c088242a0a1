# cli.py - Experiment runner: sweeps over algorithm / T_E / clustering / n/d / alpha, CSV and manifest output
import argparse
import csv
import io
import json
import logging
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from analysis import (
    AccountingMode,
    BoundInputs,
    bit_accounting,
    corollary2_bound,
    estimate_zeta,
    sparsifier_psi,
    theorem1_bound,
    theorem4_bound,
)
from config import (
    ConfigError,
    DownlinkConfig,
    ExperimentConfig,
    PartitionMode,
    configure_logging,
    derive_weights,
    env_workers,
    load_config,
)
from dataio import LabeledDataset, load_idx, make_partition, subsample_dataset
from engine import RoundLog, run_algorithm
from model import DatasetObjective, ModelParams, ModelShape, QuadraticObjective, make_quadratic

logger = logging.getLogger(__name__)

SWEEP_AXES = ("algorithm", "te", "clustering", "n_over_d", "alpha")
# Alternate spellings accepted on the command line.
SWEEP_ALIASES = {"t_e": "te"}
CSV_COLUMNS = (
    "record_type", "algorithm", "seed", "sweep_axis", "sweep_value", "t",
    "train_loss", "test_loss", "train_acc", "test_acc", "grad_l1", "uplink_bits", "downlink_bits",
)
# Tie-break between record types sharing (sweep value, seed, t).
RECORD_ORDER = {"round": 0, "zeta": 1, "bound": 2, "corollary2": 3}


class SweepPointError(RuntimeError):
    """Wraps any failure inside one (sweep value, seed) run."""

    def __init__(self, axis: Optional[str], value: Optional[str], seed: int, cause: BaseException):
        self.axis, self.value, self.seed = axis, value, seed
        super().__init__(f"{axis}={value} seed={seed}: {type(cause).__name__}: {cause}")


def parse_clustering(value: str) -> Tuple[int, int]:
    """'QxM' -> (Q, M)."""
    match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", value)
    if not match:
        raise ConfigError(f"clustering value '{value}' must look like QxM, e.g. 6x8")
    q, m = int(match.group(1)), int(match.group(2))
    if q < 1 or m < 1:
        raise ConfigError(f"clustering value '{value}' needs Q, M >= 1")
    return q, m


# === PLAN ===
@dataclass(frozen=True)
class ExperimentPlan:
    config: ExperimentConfig
    sweep_axis: Optional[str] = None
    sweep_values: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = (0,)
    output_dir: Path = Path("results")
    workers: int = 1
    point_workers: int = 1
    synthetic: bool = False
    subsample: Optional[int] = None
    # Q*M every clustering point must keep.
    device_budget: Optional[int] = None

    def __post_init__(self):
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got '{self.sweep_axis}'")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ConfigError(f"sweep over '{self.sweep_axis}' lists no values")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.workers < 1 or self.point_workers < 1:
            raise ConfigError("worker counts must be >= 1")
        if self.sweep_axis == "clustering":
            for value in self.sweep_values:
                q, m = parse_clustering(value)
                if self.device_budget is not None and q * m != self.device_budget:
                    raise ConfigError(f"clustering {value} uses {q * m} devices, budget is {self.device_budget}")
        for value in self.sweep_values:
            point_config(self.config, self.sweep_axis, value)

    def points(self) -> List[Tuple[Optional[str], int]]:
        values = self.sweep_values if self.sweep_axis else (None,)
        return [(value, seed) for value in values for seed in self.seeds]


def point_config(base: ExperimentConfig, axis: Optional[str], value: Optional[str]) -> ExperimentConfig:
    """The base config with one sweep coordinate applied."""
    if axis is None:
        return base
    try:
        if axis == "algorithm":
            return replace(base, experiment=replace(base.experiment, algorithm=value))
        if axis == "te":
            return replace(base, schedule=replace(base.schedule, edge_rounds=int(value)))
        if axis == "clustering":
            q, m = parse_clustering(value)
            return replace(base, hierarchy=replace(base.hierarchy, devices_per_edge=(m,) * q))
        if axis == "n_over_d":
            ratio = float(value)
            return replace(
                base,
                experiment=replace(base.experiment, algorithm="hier_signsgd_quantized"),
                downlink=DownlinkConfig(enabled=True, ratio=ratio),
            )
        if axis == "alpha":
            return replace(base, partition=replace(base.partition, mode=PartitionMode.DIRICHLET, alpha=float(value)))
    except ValueError as e:
        raise ConfigError(f"bad {axis} sweep value '{value}': {e}") from e
    raise ConfigError(f"unknown sweep axis '{axis}'")


# === RECORDS & CSV ===
@dataclass(frozen=True)
class CsvRecord:
    record_type: str
    algorithm: str
    seed: int
    sweep_axis: str
    sweep_value: str
    t: int
    train_loss: float = math.nan
    test_loss: float = math.nan
    train_acc: float = math.nan
    test_acc: float = math.nan
    grad_l1: float = math.nan
    uplink_bits: Optional[int] = None
    downlink_bits: Optional[int] = None


def round_records(logs: Sequence[RoundLog], algorithm: str, seed: int, axis: Optional[str], value: Optional[str]) -> List[CsvRecord]:
    return [
        CsvRecord("round", algorithm, seed, axis or "", value or "", log.t,
                  log.train_loss, log.test_loss, log.train_accuracy, log.test_accuracy,
                  log.global_grad_l1, log.uplink_bits, log.downlink_bits)
        for log in logs
    ]


def _natural_key(value: str) -> Tuple:
    parts = re.split(r"(\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)", value)
    return tuple((0, float(p), "") if i % 2 else (1, 0.0, p) for i, p in enumerate(parts) if p)


def _sort_key(record: CsvRecord):
    return (_natural_key(record.sweep_value), record.seed, record.t, RECORD_ORDER.get(record.record_type, 9))


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    return str(value)


def format_csv(records: Iterable[CsvRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in sorted(records, key=_sort_key):
        writer.writerow([_format(getattr(record, column)) for column in CSV_COLUMNS])
    return buffer.getvalue()


def emit_csv(records: Iterable[CsvRecord], path) -> Path:
    """Write records sorted by (sweep value, seed, t); an empty list gives a header-only file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_csv(records), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write results to {path}: {e}") from e
    return path


# === RUNNING ===
@dataclass
class PointResult:
    value: Optional[str]
    seed: int
    records: List[CsvRecord]
    files: List[Path] = field(default_factory=list)


@dataclass
class PlanResult:
    status: int
    files: List[Path]
    records: List[CsvRecord]


class DataCache:
    """Loads the train/test sets once per plan; points share them read-only."""

    def __init__(self, config: ExperimentConfig, subsample: Optional[int]):
        self.config = config
        self.subsample = subsample if subsample is not None else config.data.subsample
        self._train: Optional[LabeledDataset] = None
        self._test: Optional[LabeledDataset] = None

    def load(self) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
        if self._train is None:
            data = self.config.data
            train = load_idx(data.resolve("train_images"), data.resolve("train_labels"), data.num_classes)
            self._train = subsample_dataset(train, self.subsample, self.config.partition.rng_seed)
            if data.test_images and data.test_labels:
                self._test = load_idx(data.resolve("test_images"), data.resolve("test_labels"), data.num_classes)
        return self._train, self._test


def build_objective(config: ExperimentConfig, seed: int, synthetic: bool, cache: Optional[DataCache]):
    devices = config.hierarchy.devices_per_edge
    if synthetic:
        hierarchy = derive_weights([[1] * m for m in devices])
        return make_quadratic(config.synthetic, hierarchy, seed), None
    train, test = cache.load()
    partition = make_partition(train, devices, config.partition, seed)
    shape = ModelShape(config.model.input_dim, config.model.hidden_units, config.model.num_classes, config.model.activation)
    evaluation = config.evaluation
    objective = DatasetObjective(
        train, partition, shape, test,
        grad_batch=evaluation.grad_batch,
        max_eval_samples=evaluation.max_eval_samples,
        chunk=evaluation.eval_chunk,
        eval_seed=seed,
    )
    return objective, partition


def _point_stem(axis: Optional[str], value: Optional[str], seed: int) -> str:
    head = f"{axis}={value}" if axis else "base"
    return re.sub(r"[^A-Za-z0-9=._-]", "_", f"{head}__seed={seed}")


def _probe_rounds(global_rounds: int, probes: int) -> List[int]:
    return sorted({int(round(x)) for x in np.linspace(0, global_rounds, probes)})


def _bound_constants(config: ExperimentConfig, objective, logs: Sequence[RoundLog]) -> Optional[Tuple[float, float, float]]:
    """(initial gap, L, sigma) for the bound rows, or None when they are unknown."""
    if isinstance(objective, QuadraticObjective):
        return max(0.0, logs[0].train_loss - objective.optimal_value()), objective.smoothness, objective.noise_std
    analysis = config.analysis
    if analysis.smoothness is None or analysis.noise_bound is None:
        logger.warning("analysis.emit_bounds needs analysis.smoothness and analysis.noise_bound "
                       "for the MLP; skipping bound rows")
        return None
    # Cross-entropy is non-negative, so F(w0) bounds F(w0) - F*.
    return logs[0].train_loss, analysis.smoothness, analysis.noise_bound


def analysis_records(config: ExperimentConfig, objective, logs: Sequence[RoundLog],
                     snapshots: Dict[int, ModelParams], base: CsvRecord,
                     initial: Optional[ModelParams] = None) -> List[CsvRecord]:
    """zeta, bound and corollary2 rows for one finished run."""
    records: List[CsvRecord] = []
    schedule = config.schedule
    zeta = None
    if snapshots:
        estimate = estimate_zeta(objective, [snapshots[t] for t in sorted(snapshots)])
        zeta = estimate.value
        records.append(replace(base, record_type="zeta", t=schedule.global_rounds, grad_l1=estimate.value))

    constants = _bound_constants(config, objective, logs) if config.analysis.emit_bounds else None
    if constants is not None:
        gap, smoothness, noise = constants
        if zeta is None:
            start = initial if initial is not None else objective.init_params(None)
            zeta = estimate_zeta(objective, [start]).value
        algorithm = config.experiment.algorithm
        psi = 0.0
        if algorithm == "hier_signsgd_quantized":
            psi = sparsifier_psi(objective.dimension, config.downlink.resolve(objective.dimension))
        inputs = BoundInputs(
            initial_gap=gap, smoothness=smoothness, noise_bound=noise,
            heterogeneity=zeta, dimension=objective.dimension, batch_size=schedule.batch_size,
            step_size=schedule.step_size, global_rounds=schedule.global_rounds,
            edge_rounds=schedule.edge_rounds, psi=psi,
        )
        _, rhs = theorem4_bound(inputs) if psi > 0 else theorem1_bound(inputs)
        records.append(replace(base, record_type="bound", t=schedule.global_rounds, grad_l1=rhs))
        on_schedule = (
            math.isclose(schedule.step_size, 1.0 / math.sqrt(schedule.global_rounds))
            and schedule.batch_size == schedule.global_rounds
        )
        if on_schedule and zeta == 0.0:
            value = corollary2_bound(gap, noise, objective.dimension, smoothness,
                                     schedule.edge_rounds, schedule.global_rounds)
            records.append(replace(base, record_type="corollary2", t=schedule.global_rounds, grad_l1=value))
    return records


def run_point(plan: ExperimentPlan, value: Optional[str], seed: int, cache: Optional[DataCache]) -> PointResult:
    axis = plan.sweep_axis
    config = point_config(plan.config, axis, value)
    algorithm = config.experiment.algorithm
    schedule = replace(config.schedule, rng_seed=seed)
    if algorithm == "hier_sgd":
        schedule = replace(schedule, step_size=config.baseline.step_size)
    config = replace(config, schedule=schedule)
    logger.info("starting %s (algorithm=%s, seed=%d)", _point_stem(axis, value, seed), algorithm, seed)

    objective, partition = build_objective(config, seed, plan.synthetic, cache)
    stem = _point_stem(axis, value, seed)
    out = Path(plan.output_dir)
    files: List[Path] = []

    probe_rounds = set()
    if config.analysis.zeta_probes > 0:
        probe_rounds = set(_probe_rounds(schedule.global_rounds, config.analysis.zeta_probes))
    snapshots: Dict[int, ModelParams] = {}
    initial: List[ModelParams] = []

    def keep_snapshot(t: int, w: ModelParams) -> None:
        if t == 0:
            initial.append(w)
        if t in probe_rounds:
            snapshots[t] = w

    checkpoint = out / "checkpoints" / f"{stem}.bin" if config.experiment.checkpoint else None
    if checkpoint is not None:
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
        files.append(checkpoint)
    logs = run_algorithm(algorithm, objective, schedule, downlink=config.downlink, workers=plan.workers,
                         on_round=keep_snapshot, checkpoint_path=checkpoint)

    records = round_records(logs, algorithm, seed, axis, value)
    base = CsvRecord("round", algorithm, seed, axis or "", value or "", 0)
    records += analysis_records(config, objective, logs, snapshots, base, initial[0])

    files.append(emit_csv(records, out / "runs" / f"{stem}.csv"))
    if partition is not None:
        provenance = out / "partitions" / f"{stem}.json"
        provenance.parent.mkdir(parents=True, exist_ok=True)
        provenance.write_text(json.dumps(partition.provenance(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files.append(provenance)
    budget = uplink_budget(config, objective)
    logger.info("finished %s: final train_loss=%.4f, uplink %.3f Mbps per device", stem,
                logs[-1].train_loss, budget.uplink_rate_mbps)
    return PointResult(value, seed, records, files)


def uplink_budget(config: ExperimentConfig, objective):
    """Bit budget of one point at the configured reporting interval."""
    algorithm = config.experiment.algorithm
    d = objective.dimension
    mode, n = AccountingMode.SIGN, None
    if algorithm == "hier_sgd":
        mode = AccountingMode.FULL32
    elif algorithm == "hier_signsgd_quantized":
        mode, n = AccountingMode.QUANTIZED_DOWNLINK, config.downlink.resolve(d)
    return bit_accounting(d, config.schedule, objective.hierarchy, mode,
                          config.experiment.reporting_interval_s, n)


def build_manifest(plan: ExperimentPlan) -> Dict[str, Any]:
    """Everything that affects results: resolved configs per point, seeds, data selection."""
    points = []
    for value, seed in plan.points():
        config = point_config(plan.config, plan.sweep_axis, value)
        points.append({"sweep_value": value, "seed": seed, "config": config.to_dict()})
    return {
        "base_config": plan.config.to_dict(),
        "sweep_axis": plan.sweep_axis,
        "sweep_values": list(plan.sweep_values),
        "seeds": list(plan.seeds),
        "synthetic": plan.synthetic,
        "subsample": plan.subsample if plan.subsample is not None else plan.config.data.subsample,
        "device_budget": plan.device_budget,
        "csv_columns": list(CSV_COLUMNS),
        "points": points,
    }


def run_plan(plan: ExperimentPlan) -> PlanResult:
    """Run every (sweep value, seed) point; per-run CSVs, merged summary.csv and manifest.json."""
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(build_manifest(plan), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cache = None if plan.synthetic else DataCache(plan.config, plan.subsample)
    if cache is not None:
        cache.load()

    def guarded(point):
        value, seed = point
        try:
            return run_point(plan, value, seed, cache)
        except Exception as e:
            raise SweepPointError(plan.sweep_axis, value, seed, e) from e

    done: List[PointResult] = []
    try:
        with ThreadPoolExecutor(max_workers=plan.point_workers) as pool:
            futures = [pool.submit(guarded, point) for point in plan.points()]
            for future in futures:
                done.append(future.result())
    finally:
        # Completed points stay in the summary even when a later one fails.
        records = [record for result in done for record in result.records]
        summary = emit_csv(records, out / "summary.csv")

    files = [manifest, summary] + [path for result in done for path in result.files]
    return PlanResult(0, files, records)


# === COMMAND LINE ===
def _parse_sweep(text: Optional[str]) -> Tuple[Optional[str], Tuple[str, ...]]:
    if not text:
        return None, ()
    if "=" not in text:
        raise ConfigError(f"--sweep expects AXIS=v1,v2,..., got '{text}'")
    axis, _, values = text.partition("=")
    axis = axis.strip().lower()
    return SWEEP_ALIASES.get(axis, axis), tuple(v.strip() for v in values.split(",") if v.strip())


def _parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as e:
        raise ConfigError(f"--seeds expects comma-separated integers, got '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiersign",
        description="Simulate hierarchical federated training with one-bit sign uplinks.",
    )
    parser.add_argument("--config", help="YAML experiment file (defaults apply when omitted)")
    parser.add_argument("--sweep", help="AXIS=v1,v2,... with AXIS in " + ", ".join(SWEEP_AXES) + " (T_E for te)")
    parser.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
    parser.add_argument("--out", default="results", help="output directory (default: results)")
    parser.add_argument("--subsample", type=int, help="cap the training set at N samples")
    parser.add_argument("--synthetic", action="store_true", help="train the synthetic quadratic instead of the MLP")
    parser.add_argument("--workers", type=int, help="edge workers per run (default: HIERSIGN_WORKERS or 1)")
    parser.add_argument("--point-workers", type=int, default=1, help="sweep points run concurrently")
    parser.add_argument("--device-budget", type=int, help="required Q*M for clustering sweeps")
    return parser


def plan_from_args(args: argparse.Namespace) -> ExperimentPlan:
    config = load_config(args.config)
    axis, values = _parse_sweep(args.sweep)
    workers = args.workers if args.workers is not None else env_workers(1)
    return ExperimentPlan(
        config=config,
        sweep_axis=axis,
        sweep_values=values,
        seeds=_parse_seeds(args.seeds),
        output_dir=Path(args.out),
        workers=workers,
        point_workers=args.point_workers,
        synthetic=args.synthetic,
        subsample=args.subsample,
        device_budget=args.device_budget,
    )


def error_record(error: BaseException) -> Dict[str, Any]:
    record: Dict[str, Any] = {"error": type(error).__name__, "message": str(error)}
    if isinstance(error, SweepPointError):
        record.update(axis=error.axis, value=error.value, seed=error.seed,
                      cause=type(error.__cause__).__name__ if error.__cause__ else None)
    return record


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        plan = plan_from_args(args)
        configure_logging(plan.config.logging.level)
        result = run_plan(plan)
    except Exception as e:
        logger.error("run failed: %s", e)
        print(json.dumps(error_record(e), sort_keys=True), file=sys.stderr)
        return 1
    logger.info("wrote %d files to %s", len(result.files), args.out)
    return result.status


if __name__ == "__main__":
    sys.exit(main())
