# engine.py - Hierarchical training loops: sign majority vote, full-precision baseline, quantized downlink
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from analysis import AccountingMode, BitBudget, bit_accounting
from compress import SignVector, SparsifierSpec, majority_vote, random_sparsify, sign
from config import WEIGHT_TOLERANCE, DownlinkConfig, Schedule, StreamLabel, fork_rng
from model import ModelParams, Objective, params_digest, save_params

logger = logging.getLogger(__name__)

RoundHook = Callable[[int, ModelParams], None]
VoteHook = Callable[[int, int, int, SignVector], None]


class DivergenceError(ArithmeticError):
    """A gradient, model or loss stopped being finite."""

    def __init__(self, t: int, tau: Optional[int] = None, edge: Optional[int] = None, what: str = "gradient"):
        self.t, self.tau, self.edge = t, tau, edge
        where = f"t={t}" + (f", tau={tau}" if tau is not None else "") + (f", edge={edge}" if edge is not None else "")
        super().__init__(f"non-finite {what} at {where}")


class ReplicaMismatchError(RuntimeError):
    """A device's copy of the edge model drifted from the edge's own copy."""


@dataclass
class EdgeState:
    """One edge cluster's model v_q and the v_q^{(t,0)} lineage its devices share."""

    edge_id: int
    model: ModelParams
    device_reference_model: ModelParams
    # Explicit per-device copies, only kept when consistency checks are on.
    device_replicas: Optional[List[np.ndarray]] = field(default=None, repr=False)


@dataclass(frozen=True)
class RoundLog:
    t: int
    model_hash: str
    train_loss: float
    test_loss: float
    train_accuracy: float
    test_accuracy: float
    global_grad_l1: float
    uplink_bits: int
    downlink_bits: int
    wall_time: float

    def as_dict(self) -> Dict:
        return asdict(self)


@dataclass
class _EdgeResult:
    values: np.ndarray
    votes: List[SignVector]


# === AGGREGATION ===
def cloud_aggregate(edge_models: Sequence[ModelParams], edge_weights: Sequence[float]) -> ModelParams:
    """Weighted mean of edge models, written as anchor + weighted differences."""
    if not edge_models:
        raise ValueError("cloud aggregation needs at least one edge model")
    if len(edge_models) != len(edge_weights):
        raise ValueError(f"{len(edge_models)} edge models but {len(edge_weights)} weights")
    if abs(sum(edge_weights) - 1.0) > 1e3 * WEIGHT_TOLERANCE:
        raise ValueError("edge weights must sum to one")
    anchor = edge_models[0]
    for model in edge_models[1:]:
        if model.dimension != anchor.dimension:
            raise ValueError(f"edge model of dimension {model.dimension}, expected {anchor.dimension}")
    # Exact when all inputs are equal or one weight is 1.
    total = anchor.values.copy()
    for model, weight in zip(edge_models[1:], edge_weights[1:]):
        total += weight * (model.values - anchor.values)
    return anchor.replace_values(total)


# === ONE TRAINING RUN ===
class _Run:
    """State shared by the edges of one run; edges only read it during a round."""

    def __init__(self, objective: Objective, schedule: Schedule, mode: AccountingMode,
                 sparsifier: Optional[SparsifierSpec], on_vote: Optional[VoteHook],
                 consistency_checks: bool):
        self.objective = objective
        self.hierarchy = objective.hierarchy
        self.schedule = schedule
        self.mode = mode
        self.sparsifier = sparsifier
        self.record_votes = on_vote is not None
        self.consistency_checks = consistency_checks
        self.seed = schedule.rng_seed

    def _device_gradient(self, values, t, tau, q, k) -> np.ndarray:
        rng = fork_rng(self.seed, StreamLabel("batch", t, tau, q, k))
        grad = self.objective.device_gradient(values, q, k, self.schedule.batch_size, rng).values
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(t, tau, q)
        return grad

    def edge_round(self, state: EdgeState, t: int) -> _EdgeResult:
        """T_E edge steps starting from the state's current model."""
        q = state.edge_id
        mu = self.schedule.step_size
        device_weights = self.hierarchy.device_weights[q]
        v = state.model.values.copy()
        votes: List[SignVector] = []

        for tau in range(self.schedule.edge_rounds):
            if self.mode is AccountingMode.FULL32:
                grads = [self._device_gradient(v, t, tau, q, k) for k in range(len(device_weights))]
                step = mu * sum(w * g for w, g in zip(device_weights, grads))
            else:
                ballots = [sign(self._device_gradient(v, t, tau, q, k)) for k in range(len(device_weights))]
                decided = majority_vote(ballots, self.schedule.tie_policy,
                                        fork_rng(self.seed, StreamLabel("tie", t, tau, q)))
                if self.record_votes:
                    votes.append(decided)
                step = mu * decided.as_float()
            v = v - step
            if not np.all(np.isfinite(v)):
                raise DivergenceError(t, tau, q, what="edge model")
            if state.device_replicas is not None:
                self._advance_replicas(state, step, v, t, tau)
            logger.debug("t=%d tau=%d edge=%d |step|_inf=%.3g", t, tau, q, float(np.max(np.abs(step))))
        return _EdgeResult(v, votes)

    def _advance_replicas(self, state: EdgeState, step, edge_values, t, tau):
        for k, replica in enumerate(state.device_replicas):
            replica -= step
            if not np.array_equal(replica, edge_values):
                raise ReplicaMismatchError(f"device ({state.edge_id}, {k}) diverged from its edge at t={t}, tau={tau}")

    def start_round(self, state: EdgeState, w: ModelParams, t: int) -> None:
        """Set v_q^{(t,0)} from the broadcast global model."""
        if t == 0 or self.sparsifier is None or self.sparsifier.is_identity:
            start = w
        else:
            reference = state.device_reference_model.values
            rng = fork_rng(self.seed, StreamLabel("downlink", t, None, state.edge_id))
            estimate = reference + random_sparsify(w.values - reference, self.sparsifier, rng)
            if not np.all(np.isfinite(estimate)):
                raise DivergenceError(t, 0, state.edge_id, what="downlink model estimate")
            start = w.replace_values(estimate)
        state.model = start
        state.device_reference_model = start
        if self.consistency_checks:
            state.device_replicas = [start.values.copy() for _ in self.hierarchy.device_weights[state.edge_id]]


def _evaluate(objective: Objective, values: np.ndarray, seed: int, t: int) -> Dict[str, float]:
    metrics = objective.evaluate(values)
    if not np.isfinite(metrics["train_loss"]):
        raise DivergenceError(t, what="training loss")
    grad = objective.global_gradient(values, fork_rng(seed, StreamLabel("eval", t)))
    metrics["global_grad_l1"] = float(np.abs(grad).sum())
    return metrics


def _run(
    objective: Objective,
    schedule: Schedule,
    mode: AccountingMode,
    sparsifier: Optional[SparsifierSpec] = None,
    workers: int = 1,
    on_round: Optional[RoundHook] = None,
    on_vote: Optional[VoteHook] = None,
    consistency_checks: bool = False,
    checkpoint_path: Optional[Path] = None,
) -> List[RoundLog]:
    hierarchy = objective.hierarchy
    run = _Run(objective, schedule, mode, sparsifier, on_vote, consistency_checks)
    budget: BitBudget = bit_accounting(
        objective.dimension, schedule, hierarchy, mode,
        active_components=sparsifier.active_components if sparsifier else None,
    )

    w = objective.init_params(fork_rng(schedule.rng_seed, StreamLabel("init")))
    edges = [EdgeState(q, w, w) for q in range(hierarchy.num_edges)]
    clock = time.perf_counter()
    logs = [_round_log(objective, w, schedule.rng_seed, 0, 0, budget.initial_broadcast_bits, clock)]
    if on_round:
        on_round(0, w)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for t in range(schedule.global_rounds):
            clock = time.perf_counter()
            for state in edges:
                run.start_round(state, w, t)
            # Edges are independent within a round; results come back in edge order.
            results = list(pool.map(lambda state: run.edge_round(state, t), edges))
            for state, result in zip(edges, results):
                state.model = state.model.replace_values(result.values)
                if on_vote:
                    for tau, vote in enumerate(result.votes):
                        on_vote(t, tau, state.edge_id, vote)
            w = cloud_aggregate([state.model for state in edges], hierarchy.edge_weights)

            log = _round_log(objective, w, schedule.rng_seed, t + 1,
                             budget.uplink_bits_per_round, budget.downlink_bits(t), clock)
            logs.append(log)
            logger.info("round %d/%d: train_loss=%.4f test_acc=%.4f grad_l1=%.4g up=%d down=%d",
                        t + 1, schedule.global_rounds, log.train_loss, log.test_accuracy,
                        log.global_grad_l1, log.uplink_bits, log.downlink_bits)
            if on_round:
                on_round(t + 1, w)

    if checkpoint_path is not None:
        save_params(w, checkpoint_path)
        logger.info("saved final model to %s", checkpoint_path)
    return logs


def _round_log(objective, w: ModelParams, seed: int, t: int, uplink: int, downlink: int, clock: float) -> RoundLog:
    metrics = _evaluate(objective, w.values, seed, t)
    return RoundLog(
        t=t,
        model_hash=params_digest(w.values),
        train_loss=metrics["train_loss"],
        test_loss=metrics["test_loss"],
        train_accuracy=metrics["train_accuracy"],
        test_accuracy=metrics["test_accuracy"],
        global_grad_l1=metrics["global_grad_l1"],
        uplink_bits=int(uplink),
        downlink_bits=int(downlink),
        wall_time=time.perf_counter() - clock,
    )


# === PUBLIC ENTRY POINTS ===
def run_hier_signsgd(objective: Objective, schedule: Schedule, **kwargs) -> List[RoundLog]:
    """Devices send minibatch gradient signs, edges majority-vote, the cloud averages edge models."""
    return _run(objective, schedule, AccountingMode.SIGN, **kwargs)


def run_hier_sgd(objective: Objective, schedule: Schedule, **kwargs) -> List[RoundLog]:
    """Full-precision baseline: edges step along the shard-weighted mean of device gradients."""
    return _run(objective, schedule, AccountingMode.FULL32, **kwargs)


def run_hier_signsgd_quantized_downlink(objective: Objective, schedule: Schedule,
                                        downlink: DownlinkConfig, **kwargs) -> List[RoundLog]:
    """Sign training where each round's model broadcast is a sparsified difference to the last one."""
    if not downlink.enabled:
        raise ValueError("quantized downlink run requested with downlink.enabled = false")
    sparsifier = SparsifierSpec(objective.dimension, downlink.resolve(objective.dimension))
    logger.info("downlink sparsifier: n=%d of d=%d (psi^2=%.4g)", sparsifier.active_components,
                sparsifier.dimension, sparsifier.variance_factor)
    return _run(objective, schedule, AccountingMode.QUANTIZED_DOWNLINK, sparsifier=sparsifier, **kwargs)


def run_algorithm(algorithm: str, objective: Objective, schedule: Schedule,
                  downlink: Optional[DownlinkConfig] = None, **kwargs) -> List[RoundLog]:
    if algorithm == "hier_signsgd":
        return run_hier_signsgd(objective, schedule, **kwargs)
    if algorithm == "hier_sgd":
        return run_hier_sgd(objective, schedule, **kwargs)
    if algorithm == "hier_signsgd_quantized":
        if downlink is None:
            raise ValueError("hier_signsgd_quantized needs a downlink config")
        return run_hier_signsgd_quantized_downlink(objective, schedule, downlink, **kwargs)
    raise ValueError(f"unknown algorithm '{algorithm}'")
