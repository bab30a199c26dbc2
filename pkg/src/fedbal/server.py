"""Server-side planning: loss threshold, ratio control, deadline selection,
cohort selection and aggregation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from fedbal.core import ClientProfile, ClientReport, FbParams
from fedbal.model import WeightVector


# ---------------------------------------------------------------- loss threshold & control


def select_loss_threshold(llow_list: Sequence[float], lhigh_list: Sequence[float], ltr: float) -> float:
    """Interpolate between the lowest reported low loss and the mean high loss.

    Falls back to the low end when noise pushes the high end below it.
    Written as ``(1 - ltr)*ll + ltr*lh`` so both endpoints come back exactly.
    """
    if len(llow_list) == 0 or len(lhigh_list) == 0:
        raise ValueError("select_loss_threshold needs non-empty metadata lists")
    ll = float(np.min(llow_list))
    lh = float(np.mean(lhigh_list))
    if lh < ll:
        return ll
    return (1.0 - ltr) * ll + ltr * lh


@dataclass(frozen=True)
class ControllerState:
    ltr: float
    ddlr: float
    params: FbParams
    utility: tuple[float, ...] = ()
    llow_list: tuple[float, ...] = ()
    lhigh_list: tuple[float, ...] = ()

    @classmethod
    def initial(cls, params: FbParams) -> ControllerState:
        return cls(params.ltr_init, params.ddlr_init, params)


def update_controller(state: ControllerState, lsum_R: float, l_R: float, ddl_R: float, round_R: int) -> ControllerState:
    """Append this round's utility and, every ``w`` rounds, step the ratios.

    If the older window of ``w`` utilities sums higher than the newest one,
    training is judged stable: the loss-threshold ratio goes up and the
    deadline ratio down. Otherwise both move the other way. Nothing moves
    until ``2w`` utilities exist.
    """
    if l_R < 0 or not ddl_R > 0:
        raise ValueError("need l_R >= 0 and ddl_R > 0")
    u_R = lsum_R / (l_R * ddl_R) if l_R > 0 else 0.0
    utility = state.utility + (u_R,)
    w = state.params.w
    ltr, ddlr = state.ltr, state.ddlr
    if round_R % w == 0 and round_R >= 2 * w and len(utility) >= 2 * w:
        older = math.fsum(utility[-2 * w : -w])
        newer = math.fsum(utility[-w:])
        if older > newer:
            ltr = min(ltr + state.params.lss, 1.0)
            ddlr = max(ddlr - state.params.dss, 0.0)
        else:
            ltr = max(ltr - state.params.lss, 0.0)
            ddlr = min(ddlr + state.params.dss, 1.0)
    return dataclasses.replace(state, ltr=ltr, ddlr=ddlr, utility=utility)


# ---------------------------------------------------------------- capabilities & deadlines


@dataclass
class CapabilityTable:
    """What the server knows about each client's speed and selected-data size."""

    batch_obs: dict[int, list[float]] = field(default_factory=dict)
    mean_download: dict[int, float] = field(default_factory=dict)
    mean_upload: dict[int, float] = field(default_factory=dict)
    dataset_size: dict[int, int] = field(default_factory=dict)
    ot_len: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_profiles(cls, profiles: Iterable[ClientProfile], batch_history: Mapping[int, Sequence[float]]) -> CapabilityTable:
        table = cls()
        for p in profiles:
            table.batch_obs[p.id] = list(batch_history[p.id])
            table.mean_download[p.id] = p.mean_download
            table.mean_upload[p.id] = p.mean_upload
            table.dataset_size[p.id] = len(p.dataset)
        return table

    def observe_batch(self, cid: int, latency: float) -> None:
        self.batch_obs[cid].append(latency)

    def observe_ot_len(self, cid: int, ot_len: float) -> None:
        self.ot_len[cid] = ot_len

    def mean_batch(self, cid: int) -> float:
        return float(np.mean(self.batch_obs[cid]))

    def network_time(self, cid: int) -> float:
        return self.mean_download[cid] + self.mean_upload[cid]

    def train_len(self, cid: int) -> float:
        """Last reported |OT|, or the full dataset before any report."""
        return self.ot_len.get(cid, float(self.dataset_size[cid]))


def train_time_estimate(
    mean_batch_latency: float, ot_len: float, batch_size: int, num_epochs: int, literal: bool = False
) -> float:
    """Seconds to train ``ot_len`` samples for ``num_epochs`` epochs.

    Counts whole batches, ``floor((ot_len - 1)/batch_size) + 1``; an empty OT
    still costs one batch. ``literal=True`` drops the ``+1`` and the floor.
    """
    n = max(1, int(round(ot_len)))
    if literal:
        return (n - 1) / batch_size * mean_batch_latency * num_epochs
    return ((n - 1) // batch_size + 1) * mean_batch_latency * num_epochs


def completion_estimates(
    capabilities: CapabilityTable,
    cohort: Sequence[int],
    num_epochs: int,
    batch_size: int,
    literal: bool = False,
    len_cap: int | None = None,
) -> np.ndarray:
    out = []
    for cid in cohort:
        n = capabilities.train_len(cid)
        if len_cap is not None:
            n = min(n, len_cap)
        t = train_time_estimate(capabilities.mean_batch(cid), n, batch_size, num_epochs, literal)
        out.append(capabilities.network_time(cid) + t)
    return np.asarray(out)


def ddl_e_curve(completion_times: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """DDL-E(t) = completed(t)/t for t = 1 .. first t covering everyone."""
    times = np.sort(np.asarray(completion_times, dtype=np.float64))
    t_end = max(1, math.ceil(times[-1]))
    ts = np.arange(1, t_end + 1)
    counts = np.searchsorted(times, ts, side="right")
    return ts, counts / ts


def peak_deadline(completion_times: Sequence[float]) -> int:
    """Smallest integer t maximizing completed(t)/t.

    Only the jump points ``max(1, ceil(c_i))`` can be maxima: between jumps
    the count is flat and the ratio decays.
    """
    times = np.sort(np.asarray(completion_times, dtype=np.float64))
    if times.size == 0:
        raise ValueError("empty cohort")
    candidates = np.unique(np.maximum(1.0, np.ceil(times)))
    counts = np.searchsorted(times, candidates, side="right")
    ratios = counts / candidates
    return int(candidates[int(np.argmax(ratios))])


def find_peak_ddl_e(
    capabilities: CapabilityTable,
    cohort: Sequence[int],
    num_epochs: int,
    batch_size: int,
    literal: bool = False,
    len_cap: int | None = None,
) -> int:
    if not cohort:
        raise ValueError("cohort must be non-empty")
    return peak_deadline(completion_estimates(capabilities, cohort, num_epochs, batch_size, literal, len_cap))


def deadline_bounds(
    capabilities: CapabilityTable,
    cohort: Sequence[int],
    E: int,
    batch_size: int,
    literal: bool = False,
    len_cap: int | None = None,
) -> tuple[int, int]:
    """Peak-efficiency deadlines for one epoch and for ``E`` epochs."""
    dl = find_peak_ddl_e(capabilities, cohort, 1, batch_size, literal, len_cap)
    dh = find_peak_ddl_e(capabilities, cohort, E, batch_size, literal, len_cap)
    return dl, dh


def select_deadline(
    capabilities: CapabilityTable,
    cohort: Sequence[int],
    E: int,
    ddlr: float,
    batch_size: int,
    literal: bool = False,
    len_cap: int | None = None,
) -> float:
    dl, dh = deadline_bounds(capabilities, cohort, E, batch_size, literal, len_cap)
    return dl + (dh - dl) * ddlr


def pre_fl_round_times(
    profiles: Sequence[ClientProfile],
    batch_history: Mapping[int, Sequence[float]],
    E: int,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sampled full-data round completion times, one row per client.

    Row ``i`` pairs each pre-training batch latency sample of client ``i``
    with a random download and upload draw.
    """
    rows = []
    for p in profiles:
        b = np.asarray(batch_history[p.id], dtype=np.float64)
        dl = rng.choice(np.asarray(p.download_samples), size=b.size)
        ul = rng.choice(np.asarray(p.upload_samples), size=b.size)
        batches = -(-len(p.dataset) // batch_size)
        rows.append(dl + ul + E * batches * b)
    return np.vstack(rows)


def baseline_deadline(
    policy: str,
    round_times: np.ndarray | None,
    capabilities: CapabilityTable | None,
    cohort: Sequence[int],
    E: int,
    batch_size: int,
) -> float:
    """Deadline under one of the non-adaptive policies.

    ``round_times`` holds the pre-training completion samples (for 1T/2T);
    SmartPC uses the 80th percentile of the cohort's predicted full-data
    completion times.
    """
    if policy == "wait_for_all":
        return math.inf
    if policy in ("fixed_1t", "fixed_2t"):
        if round_times is None or np.size(round_times) == 0:
            raise ValueError("fixed deadlines need pre-training completion samples")
        T = float(np.mean(round_times))
        return T if policy == "fixed_1t" else 2.0 * T
    if policy == "smartpc":
        predicted = [
            capabilities.network_time(cid)
            + E * (-(-capabilities.dataset_size[cid] // batch_size)) * capabilities.mean_batch(cid)
            for cid in cohort
        ]
        return float(np.percentile(predicted, 80))
    raise ValueError(f"no baseline deadline for policy {policy!r}")


# ---------------------------------------------------------------- cohort


def stat_util(ot_loss_sq_sum: float, ot_len: float) -> float:
    """|OT| * sqrt(mean squared OT loss); noised negatives count as zero."""
    sq = max(ot_loss_sq_sum, 0.0)
    n = max(ot_len, 0.0)
    if n == 0:
        return 0.0
    return n * math.sqrt(sq / n)


def select_cohort(
    all_clients: Sequence[int],
    K: int,
    mode: str,
    last_utilities: Mapping[int, float],
    rng: np.random.Generator,
    epsilon: float = 0.1,
) -> list[int]:
    """Pick ``K`` clients, returned in ascending id order.

    ``stat_util`` mode fills ``K - round(epsilon*K)`` slots with the highest
    utilities (clients absent from ``last_utilities`` rank as +inf) and the
    rest uniformly from the remaining clients.
    """
    clients = np.asarray(sorted(all_clients), dtype=np.int64)
    if K > clients.size:
        raise ValueError("K exceeds the number of clients")
    if mode == "random":
        return sorted(rng.choice(clients, size=K, replace=False).tolist())
    if mode != "stat_util":
        raise ValueError(f"unknown cohort selection mode {mode!r}")
    explore = int(math.floor(epsilon * K + 0.5))
    exploit = K - explore
    util = np.array([last_utilities.get(int(c), math.inf) for c in clients])
    order = np.lexsort((clients, -util))
    chosen = clients[order[:exploit]]
    rest = clients[order[exploit:]]
    if explore:
        chosen = np.concatenate([chosen, rng.choice(rest, size=explore, replace=False)])
    return sorted(chosen.tolist())


# ---------------------------------------------------------------- aggregation


def aggregate(reports: Sequence[ClientReport], global_weights: WeightVector) -> WeightVector:
    """Sample-count-weighted average of the reported client models.

    Reports are summed in client-id order so the result does not depend on
    arrival order. An empty report list leaves the model unchanged.
    """
    if not reports:
        return global_weights
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = float(sum(r.num_samples for r in ordered))
    if total <= 0:
        raise ValueError("reports carry no samples")
    acc = np.zeros_like(global_weights.values)
    for r in ordered:
        acc += (r.num_samples / total) * r.weight_delta
    return WeightVector(global_weights.values + acc, global_weights.layout)
