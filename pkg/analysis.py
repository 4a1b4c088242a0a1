# analysis.py - Convergence bounds, heterogeneity (zeta) estimation, vote-error experiments, bit accounting
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binom

from compress import SignVector, majority_vote
from config import Hierarchy, Schedule, StreamLabel, TiePolicy, derive_weights, fork_rng
from dataio import LabeledDataset, partition_iid
from model import DatasetObjective, ModelParams, Objective, QuadraticObjective

logger = logging.getLogger(__name__)

FLOAT_BITS = 32


# === BOUNDS ===
@dataclass(frozen=True)
class BoundInputs:
    initial_gap: float
    smoothness: float
    noise_bound: float
    heterogeneity: float
    dimension: int
    batch_size: int
    step_size: float
    global_rounds: int
    edge_rounds: int
    psi: float = 0.0

    def __post_init__(self):
        for name in ("initial_gap", "smoothness", "noise_bound", "heterogeneity", "step_size", "psi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.global_rounds < 1 or self.edge_rounds < 1 or self.batch_size < 1:
            raise ValueError("global_rounds, edge_rounds and batch_size must be >= 1")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


def theorem1_bound(inputs: BoundInputs) -> Tuple[float, float]:
    """(C, rhs) of the averaged l1 gradient-norm bound for sign-based hierarchical training."""
    c = (
        2.0 * inputs.heterogeneity
        + 2.0 * inputs.noise_bound * inputs.dimension / math.sqrt(inputs.batch_size)
        + (1.5 * inputs.edge_rounds - 1.0) * inputs.smoothness * inputs.step_size
    )
    return c, _rhs(inputs, c)


def _rhs(inputs: BoundInputs, constant: float) -> float:
    return inputs.initial_gap / (inputs.step_size * inputs.global_rounds * inputs.edge_rounds) + constant


def corollary2_bound(initial_gap: float, sigma: float, d: int, smoothness: float, edge_rounds: int, global_rounds: int) -> float:
    """Bound with mu = 1/sqrt(T_G), B = T_G and zero heterogeneity."""
    c_tilde = 2.0 * sigma * d + (1.5 * edge_rounds - 1.0) * smoothness
    return (initial_gap / edge_rounds + c_tilde) / math.sqrt(global_rounds)


def theorem4_bound(inputs: BoundInputs) -> Tuple[float, float]:
    """(C_Z, rhs) when the model broadcast goes through an unbiased quantizer with factor psi."""
    c, _ = theorem1_bound(inputs)
    root = inputs.psi * math.sqrt(inputs.dimension)
    c_z = c + root * (3.0 + root / 2.0) * inputs.smoothness * inputs.step_size * inputs.edge_rounds
    return c_z, _rhs(inputs, c_z)


def sparsifier_psi(dimension: int, active_components: int) -> float:
    return math.sqrt(dimension / active_components - 1.0)


# === HETEROGENEITY ===
@dataclass(frozen=True)
class ZetaEstimate:
    value: float
    num_probe_points: int
    samples_per_gradient: Optional[int]
    standard_error: float


def zeta_at(objective: Objective, values: np.ndarray, hierarchy: Hierarchy) -> float:
    """sum_q (D_q/N) ||grad F_q(w) - grad F(w)||_1 at one point."""
    edge_grads = [objective.edge_gradient(values, q) for q in range(hierarchy.num_edges)]
    weights = hierarchy.edge_weights
    global_grad = sum(w * g for w, g in zip(weights, edge_grads))
    return float(sum(w * np.abs(g - global_grad).sum() for w, g in zip(weights, edge_grads)))


def estimate_zeta(objective: Objective, model_points: Sequence[ModelParams], hierarchy: Optional[Hierarchy] = None) -> ZetaEstimate:
    """Average the heterogeneity measure over probe points, with its standard error."""
    if not model_points:
        raise ValueError("estimate_zeta needs at least one probe point")
    hierarchy = hierarchy or objective.hierarchy
    values = np.array([zeta_at(objective, p.values, hierarchy) for p in model_points])
    stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    samples = None
    if isinstance(objective, DatasetObjective):
        samples = int(min(hierarchy.edge_sizes))
    return ZetaEstimate(float(values.mean()), len(values), samples, stderr)


@dataclass(frozen=True)
class ZetaScaling:
    m_values: Tuple[int, ...]
    mean_zeta: Tuple[float, ...]
    slope: float
    intercept: float

    def as_dict(self) -> Dict[int, float]:
        return dict(zip(self.m_values, self.mean_zeta))


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope), float(intercept)


def _synthetic_cluster(template: QuadraticObjective, num_edges: int, m: int, seed: int) -> QuadraticObjective:
    hierarchy = derive_weights([[1] * m for _ in range(num_edges)])
    rng = fork_rng(seed, StreamLabel("zeta-synthetic", device=m))
    scale = template.noise_std if template.noise_std > 0 else 1.0
    offsets = scale * rng.standard_normal((hierarchy.num_devices, template.dimension))
    return QuadraticObjective(template.curvature, template.optimum, template.noise_std, hierarchy, offsets)


def _dataset_cluster(dataset: LabeledDataset, shape, num_edges: int, m: int, shard_size: int, seed: int) -> DatasetObjective:
    rng = fork_rng(seed, StreamLabel("zeta-partition", device=m))
    partition = partition_iid(dataset, [m] * num_edges, rng, shard_size=shard_size)
    return DatasetObjective(dataset, partition, shape, grad_batch=None)


def zeta_scaling_experiment(
    source: Union[LabeledDataset, QuadraticObjective],
    num_edges: int,
    m_values: Sequence[int],
    probe_points: Sequence[ModelParams],
    seeds: Sequence[int],
    shard_size: Optional[int] = None,
) -> ZetaScaling:
    """Mean zeta per cluster size M over IID clusterings, and the fitted log-log slope."""
    m_values = tuple(int(m) for m in m_values)
    if len(set(m_values)) < 2:
        raise ValueError("need at least two distinct cluster sizes")
    if num_edges < 2:
        raise ValueError("zeta is identically zero with a single edge")
    if not probe_points:
        raise ValueError("need at least one probe point")

    if isinstance(source, LabeledDataset) and shard_size is None:
        # Fixed per-device data so only M changes between clusterings.
        shard_size = len(source) // (num_edges * max(m_values))

    means = []
    for m in m_values:
        per_seed = []
        for seed in seeds:
            if isinstance(source, QuadraticObjective):
                objective = _synthetic_cluster(source, num_edges, m, seed)
            else:
                objective = _dataset_cluster(source, probe_points[0].shape, num_edges, m, shard_size, seed)
            per_seed.append(estimate_zeta(objective, probe_points).value)
        means.append(float(np.mean(per_seed)))
        logger.info("zeta(M=%d) = %.6g over %d seeds", m, means[-1], len(seeds))
    slope, intercept = fit_loglog_slope(m_values, means)
    return ZetaScaling(m_values, tuple(means), slope, intercept)


# === MAJORITY VOTE ===
def vote_error_oracle(p: float, m: int, tie_policy: TiePolicy = TiePolicy.RANDOM) -> float:
    """Exact probability that an M-device vote misses a +1 true sign, each device flipping w.p. p."""
    tail = float(binom.sf(m // 2, m, p))  # P(flips > M/2)
    if m % 2:
        return tail
    tie = float(binom.pmf(m // 2, m, p))
    policy = TiePolicy(tie_policy)
    if policy is TiePolicy.RANDOM:
        return tail + 0.5 * tie
    if policy is TiePolicy.ZERO:
        return tail + tie
    return tail


def vote_error_experiment(p: float, m: int, trials: int, rng: np.random.Generator,
                          tie_policy: TiePolicy = TiePolicy.RANDOM) -> float:
    """Monte Carlo vote error: one coordinate per trial, true sign +1."""
    if not 0 < p < 0.5:
        raise ValueError(f"flip probability must lie in (0, 1/2), got {p}")
    if m < 1 or trials < 1:
        raise ValueError("need M >= 1 and trials >= 1")
    votes = [SignVector(np.where(rng.random(trials) < p, -1, 1).astype(np.int8)) for _ in range(m)]
    decided = majority_vote(votes, tie_policy, rng)
    return float(np.mean(decided.signs != 1))


def monte_carlo_std(p: float, trials: int) -> float:
    return math.sqrt(p * (1.0 - p) / trials)


# === COMMUNICATION ACCOUNTING ===
class AccountingMode(str, Enum):
    SIGN = "sign"
    FULL32 = "full32"
    QUANTIZED_DOWNLINK = "quantized_downlink"


def sparse_broadcast_bits(d: int, active_components: int) -> int:
    """n (index, float32) pairs with ceil(log2 d)-bit indices."""
    index_bits = max(1, math.ceil(math.log2(d))) if d > 1 else 1
    return active_components * (index_bits + FLOAT_BITS)


@dataclass(frozen=True)
class BitBudget:
    mode: AccountingMode
    dimension: int
    device_payload_bits: int
    uplink_bits_per_round: int
    downlink_bits_per_round: int
    initial_broadcast_bits: int
    uplink_rate_bps: float
    model_broadcast_bits: int = field(default=0)

    @property
    def uplink_rate_mbps(self) -> float:
        return self.uplink_rate_bps / 1e6

    def downlink_bits(self, round_index: int) -> int:
        """Downlink spent during global round `round_index`.

        Round 0 reuses the initial full broadcast, which is booked on its own.
        """
        if round_index == 0:
            return self.downlink_bits_per_round - self.model_broadcast_bits
        return self.downlink_bits_per_round


def bit_accounting(
    d: int,
    schedule: Schedule,
    hierarchy: Hierarchy,
    mode: Union[AccountingMode, str],
    reporting_interval_s: float = 0.01,
    active_components: Optional[int] = None,
) -> BitBudget:
    """Exact device-edge bit counts per global round and the per-device uplink bit rate."""
    if reporting_interval_s <= 0:
        raise ValueError("reporting interval must be positive")
    mode = AccountingMode(mode)
    full_model = FLOAT_BITS * d
    if mode is AccountingMode.FULL32:
        payload, step_broadcast, model_broadcast = full_model, full_model, full_model
    else:
        payload, step_broadcast, model_broadcast = d, d, full_model
    if mode is AccountingMode.QUANTIZED_DOWNLINK:
        if active_components is None:
            raise ValueError("quantized downlink accounting needs active_components")
        model_broadcast = sparse_broadcast_bits(d, active_components)

    edges = hierarchy.num_edges
    uplink = hierarchy.num_devices * schedule.edge_rounds * payload
    downlink = edges * (model_broadcast + schedule.edge_rounds * step_broadcast)
    return BitBudget(
        mode=mode,
        dimension=d,
        device_payload_bits=payload,
        uplink_bits_per_round=uplink,
        downlink_bits_per_round=downlink,
        initial_broadcast_bits=edges * full_model,
        uplink_rate_bps=payload / reporting_interval_s,
        model_broadcast_bits=edges * model_broadcast,
    )


def bit_rate_table(dimensions: Dict[str, int], reporting_interval_s: float = 0.01) -> List[Dict[str, object]]:
    """Per-device uplink rates for sign and 32-bit payloads, one row per named model."""
    schedule, hierarchy = Schedule(), derive_weights([[1]])
    rows = []
    for name, d in dimensions.items():
        sign_budget = bit_accounting(d, schedule, hierarchy, AccountingMode.SIGN, reporting_interval_s)
        full_budget = bit_accounting(d, schedule, hierarchy, AccountingMode.FULL32, reporting_interval_s)
        rows.append({"model": name, "d": d,
                     "sign_mbps": sign_budget.uplink_rate_mbps, "full32_mbps": full_budget.uplink_rate_mbps})
    return rows
