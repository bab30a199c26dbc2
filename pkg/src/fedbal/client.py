"""Client-side round execution: loss ledger, sample selection, local training
and noised metadata."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from fedbal.core import (
    FB_METHODS,
    PRE_FL_LATENCY_SAMPLES,
    PROX_METHODS,
    ClientProfile,
    ClientReport,
    ExperimentConfig,
    RoundPlan,
    TimedOut,
)
from fedbal.model import WeightVector, forward_losses, run_sgd, train_local

UNBOUNDED = sys.maxsize


class LossLedger:
    """Last-known loss of every local sample.

    ``versions[i]`` counts how many times sample ``i`` has been written, so
    callers can tell which entries a round touched without comparing floats.
    """

    def __init__(self, num_samples: int):
        self.losses = np.full(num_samples, np.nan)
        self.versions = np.zeros(num_samples, dtype=np.int64)
        self.initialized_round: int | None = None

    def __len__(self) -> int:
        return self.losses.size

    @property
    def initialized(self) -> bool:
        return self.initialized_round is not None

    def initialize(self, losses: Mapping[int, float], round_index: int, clamp: float = 50.0) -> None:
        self.update(losses, clamp)
        if np.isnan(self.losses).any():
            raise ValueError("initial forward pass must cover every local sample")
        self.initialized_round = round_index

    def update(self, losses: Mapping[int, float], clamp: float = 50.0, round_index: int | None = None) -> None:
        if not losses:
            return
        idx = np.fromiter(losses.keys(), dtype=np.int64, count=len(losses))
        vals = np.fromiter(losses.values(), dtype=np.float64, count=len(losses))
        if not np.all(np.isfinite(vals)):
            raise ValueError("ledger values must be finite")
        self.losses[idx] = np.clip(vals, 0.0, clamp)
        self.versions[idx] += 1
        # ledgers filled purely by training (no forward pass) count as
        # initialized once every sample has been seen
        if self.initialized_round is None and round_index is not None and not np.isnan(self.losses).any():
            self.initialized_round = round_index


@dataclass(frozen=True)
class SelectionResult:
    selected_indices: np.ndarray
    ot_indices: np.ndarray
    ut_indices: np.ndarray
    L: int
    S: int
    used_full_dataset: bool


class Metadata(NamedTuple):
    llow: float
    lhigh: float
    ot_loss_sq_sum: float
    ot_len: float


def max_trainable_size(
    mean_batch_latency: float,
    deadline: float,
    epochs: int,
    batch_size: int,
    mean_download: float,
    mean_upload: float,
) -> int:
    """Samples a client can train for ``epochs`` epochs within ``deadline``.

    Mean network time is subtracted before dividing the compute budget.
    An infinite deadline yields ``UNBOUNDED``.
    """
    if not math.isfinite(deadline):
        return UNBOUNDED
    budget = deadline - mean_download - mean_upload
    if budget <= 0:
        return 0
    return int(math.floor(budget / (epochs * mean_batch_latency))) * batch_size


def _losses_of(ledger: LossLedger | np.ndarray) -> np.ndarray:
    return ledger.losses if isinstance(ledger, LossLedger) else np.asarray(ledger, dtype=np.float64)


def split_by_threshold(losses: np.ndarray, lt: float) -> tuple[np.ndarray, np.ndarray]:
    over = losses >= lt
    return np.flatnonzero(over), np.flatnonzero(~over)


def select_samples(
    ledger: LossLedger | np.ndarray,
    lt: float,
    S: int,
    p: float,
    rng: np.random.Generator,
    fixed_L: int | None = None,
) -> SelectionResult:
    """Loss-threshold sample selection.

    Samples at or above ``lt`` form OT, the rest UT. ``L = max(S, |OT|)``
    (or ``fixed_L`` for one-batch-per-epoch training); ``round(L*p)`` are
    drawn from OT and the remainder from UT, each side backfilling the
    other's shortfall so ``min(L, |D|)`` samples come back.
    """
    losses = _losses_of(ledger)
    n = losses.size
    if not 0.5 <= p <= 1.0:
        raise ValueError("p outside [0.5,1.0]")
    if np.isnan(losses).any():
        raise ValueError("ledger not initialized")
    ot, ut = split_by_threshold(losses, lt)
    if (fixed_L if fixed_L is not None else S) >= n:
        return SelectionResult(np.arange(n), ot, ut, n, S, True)
    L = fixed_L if fixed_L is not None else max(S, ot.size)
    from_ot = min(int(math.floor(L * p + 0.5)), ot.size)
    from_ut = min(L - from_ot, ut.size)
    from_ot = min(L - from_ut, ot.size)
    picked_ot = rng.choice(ot, size=from_ot, replace=False) if from_ot else ot[:0]
    picked_ut = rng.choice(ut, size=from_ut, replace=False) if from_ut else ut[:0]
    return SelectionResult(np.concatenate([picked_ot, picked_ut]), ot, ut, L, S, False)


def select_top_loss(ledger: LossLedger | np.ndarray, S: int) -> np.ndarray:
    """The ``S`` highest-loss samples, ties broken by lower index."""
    losses = _losses_of(ledger)
    order = np.lexsort((np.arange(losses.size), -losses))
    return np.sort(order[: max(S, 0)])


def build_metadata(
    all_losses: Sequence[float] | np.ndarray,
    ot_losses: Sequence[float] | np.ndarray,
    noise_factor: float,
    rng: np.random.Generator,
) -> Metadata:
    """Min / 80th-percentile loss, OT loss-square sum and OT size, each with
    independent Gaussian(0, NF^2) noise, clamped at zero."""
    all_losses = np.asarray(all_losses, dtype=np.float64)
    ot_losses = np.asarray(ot_losses, dtype=np.float64)
    exact = np.array(
        [
            all_losses.min(),
            np.percentile(all_losses, 80),
            float(np.sum(ot_losses**2)),
            float(ot_losses.size),
        ]
    )
    if noise_factor > 0:
        exact = exact + rng.normal(0.0, noise_factor, size=4)
    return Metadata(*np.maximum(exact, 0.0).tolist())


# ---------------------------------------------------------------- round


@dataclass
class ClientState:
    """Per-client state that persists across rounds; owned by one worker at a time."""

    ledger: LossLedger
    batch_history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, profile: ClientProfile, rng: np.random.Generator, k: int = PRE_FL_LATENCY_SAMPLES) -> ClientState:
        """New state with ``k`` pre-training batch latency samples."""
        prior = rng.choice(np.asarray(profile.batch_latency_samples), size=k, replace=True)
        return cls(LossLedger(len(profile.dataset)), prior.tolist())

    @property
    def mean_batch_latency(self) -> float:
        return float(np.mean(self.batch_history))


def _batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def run_client_round(
    profile: ClientProfile,
    state: ClientState,
    plan: RoundPlan,
    global_weights: WeightVector,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> ClientReport | TimedOut:
    """Execute one cohort member's round and return its report or a timeout.

    Simulated time: download, an optional first-time whole-dataset forward
    pass, as many whole epochs as the active semantics allow, then upload.
    ``state`` is updated in place (ledger and observed batch latency).
    """
    lat_rng, sel_rng, train_rng, noise_rng = rng.spawn(4)
    cid = profile.id
    data = profile.dataset
    n = len(data)
    b = cfg.batch_size
    E = cfg.local_epochs
    method = cfg.method
    deadline = plan.deadline
    fb = method in FB_METHODS
    prox = method in PROX_METHODS

    download = float(lat_rng.choice(profile.download_samples))
    upload = float(lat_rng.choice(profile.upload_samples))
    batch_latency = float(lat_rng.choice(profile.batch_latency_samples))
    mean_b = state.mean_batch_latency
    state.batch_history.append(batch_latency)

    S = max_trainable_size(mean_b, deadline, E, b, profile.mean_download, profile.mean_upload)
    capped_baseline = method == "sample_selection_baseline" and S < n
    elapsed = download
    if (fb or capped_baseline) and not state.ledger.initialized:
        elapsed += _batches(n, b) * batch_latency
        if elapsed > deadline:
            return TimedOut(cid, elapsed + upload, batch_latency, "forward pass")
        state.ledger.initialize(
            forward_losses(global_weights, data, range(n)), plan.round_index, cfg.loss_clamp
        )

    epoch_orders = None
    if method == "fedbalancer":
        sel = select_samples(state.ledger, plan.loss_threshold, S, cfg.fb_params.p, sel_rng)
        selected = sel.selected_indices
    elif method == "oortbalancer":
        picks = [
            select_samples(state.ledger, plan.loss_threshold, S, cfg.fb_params.p, sel_rng, fixed_L=b)
            for _ in range(E)
        ]
        epoch_orders = [sel_rng.permutation(s.selected_indices) for s in picks]
        selected = np.unique(np.concatenate(epoch_orders))
    elif capped_baseline:
        selected = select_top_loss(state.ledger, S)
    else:
        selected = np.arange(n)

    if selected.size == 0:
        return TimedOut(cid, elapsed + upload, batch_latency, "nothing trainable")

    per_epoch = _batches(b if epoch_orders is not None else selected.size, b) * batch_latency
    budget = deadline - elapsed - upload
    if not math.isfinite(deadline):
        epochs = E
    elif prox:
        epochs = min(E, int(math.floor(budget / per_epoch))) if budget > 0 else 0
    else:
        epochs = E if E * per_epoch <= budget else 0
    if epochs < 1:
        return TimedOut(cid, elapsed + E * per_epoch + upload, batch_latency, "training")
    completion = elapsed + epochs * per_epoch + upload

    if state.ledger.initialized:
        selected_loss_sum = float(state.ledger.losses[selected].sum())
    else:
        selected_loss_sum = None

    mu = cfg.prox_mu if prox else 0.0
    if epoch_orders is not None:
        outcome = run_sgd(global_weights, data, epoch_orders[:epochs], b, cfg.learning_rate, mu)
    else:
        outcome = train_local(global_weights, data, selected, epochs, b, cfg.learning_rate, mu, train_rng)
    state.ledger.update(outcome.per_sample_losses, cfg.loss_clamp, plan.round_index)
    if selected_loss_sum is None:
        selected_loss_sum = float(sum(outcome.per_sample_losses.values()))

    if state.ledger.initialized:
        losses = state.ledger.losses
        ot = losses[losses >= plan.loss_threshold]
        meta = build_metadata(losses, ot, cfg.noise_factor, noise_rng)
    else:
        meta = Metadata(0.0, 0.0, 0.0, 0.0)

    return ClientReport(
        client_id=cid,
        weight_delta=outcome.updated_weights.values - global_weights.values,
        epochs_completed=outcome.epochs_completed,
        completion_time=completion,
        meta_llow=meta.llow,
        meta_lhigh=meta.lhigh,
        meta_ot_loss_sq_sum=meta.ot_loss_sq_sum,
        meta_ot_len=meta.ot_len,
        selected_count=int(selected.size),
        selected_loss_sum=selected_loss_sum,
        num_samples=int(selected.size),
        batch_latency=batch_latency,
    )
