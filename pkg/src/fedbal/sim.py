"""Round engine: plan, run the cohort, enforce the deadline, aggregate,
update the controller, advance the simulated clock."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from fedbal import client as client_mod
from fedbal import server
from fedbal.core import FB_METHODS, ClientProfile, ClientReport, ExperimentConfig, RoundPlan, TimedOut, stream_for
from fedbal.data import DatasetHandle, SampleCountDist, gen_iid, gen_synthetic, gen_traces, load_traces, make_class_means
from fedbal.model import Layout, WeightVector, accuracy, init_model

log = logging.getLogger(__name__)

MAX_ROUNDS = 100_000


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    deadline: float
    loss_threshold: float
    ltr: float
    ddlr: float
    cohort: tuple[int, ...]
    completed: tuple[int, ...]
    timed_out: tuple[int, ...]
    duration: float
    wallclock: float
    test_accuracy: float
    utility: float
    deadline_low: float = math.nan
    deadline_high: float = math.nan


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    final_weights: WeightVector
    events: list[tuple] = field(default_factory=list)


def worker_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("FEDBAL_THREADS")
    if env:
        return max(1, int(env))
    return 1


def build_task(cfg: ExperimentConfig) -> tuple[list[DatasetHandle], DatasetHandle]:
    """Client datasets plus an IID test split holding ``test_frac`` of all samples."""
    rng = stream_for(cfg.seed, "data")
    means = make_class_means(cfg.input_dim, cfg.num_classes, cfg.class_sep, rng)
    dist = SampleCountDist(cfg.samples_lognormal_mu, cfg.samples_lognormal_sigma, cfg.min_samples)
    datasets = gen_synthetic(
        cfg.num_clients, dist, cfg.input_dim, cfg.num_classes, cfg.dirichlet_alpha, cfg.label_noise, rng,
        class_means=means,
    )
    n_clients = sum(len(d) for d in datasets)
    n_test = max(1, int(round(n_clients * cfg.test_frac / (1.0 - cfg.test_frac))))
    test = gen_iid(means, n_test, stream_for(cfg.seed, "test"), id_offset=n_clients)
    return datasets, test


def build_profiles(cfg: ExperimentConfig, datasets: list[DatasetHandle]) -> list[ClientProfile]:
    if cfg.trace_path:
        records = sorted(load_traces(cfg.trace_path).records, key=lambda r: r.id)
        if len(records) < cfg.num_clients:
            raise ValueError(f"trace file has {len(records)} clients, config needs {cfg.num_clients}")
    else:
        trace = gen_traces(
            cfg.num_clients,
            (cfg.batch_latency_base_s, cfg.batch_latency_jitter),
            (cfg.net_latency_median_s, cfg.net_latency_sigma, cfg.net_latency_jitter),
            cfg.latency_spread,
            cfg.trace_samples,
            stream_for(cfg.seed, "traces"),
        )
        records = list(trace.records)
    return [
        ClientProfile(i, rec.download_s, rec.upload_s, rec.batch_latency_s, datasets[i])
        for i, rec in enumerate(records[: cfg.num_clients])
    ]


class Experiment:
    """Mutable state of one simulated run. ``run_round`` advances it by one round."""

    def __init__(self, cfg: ExperimentConfig, threads: int | None = None):
        self.cfg = cfg
        self.threads = worker_count(threads)
        self.datasets, self.test = build_task(cfg)
        self.profiles = build_profiles(cfg, self.datasets)
        self.layout = Layout(cfg.input_dim, cfg.hidden_dim, cfg.num_classes)
        self.weights = init_model(self.layout, stream_for(cfg.seed, "init"))
        self.states = {
            p.id: client_mod.ClientState.fresh(p, stream_for(cfg.seed, "prefl", p.id)) for p in self.profiles
        }
        history = {cid: s.batch_history for cid, s in self.states.items()}
        # the table copies the histories, so server and client logs stay separate
        self.capabilities = server.CapabilityTable.from_profiles(self.profiles, history)
        self.round_times = None
        if cfg.deadline_policy in ("fixed_1t", "fixed_2t"):
            self.round_times = server.pre_fl_round_times(
                self.profiles, history, cfg.local_epochs, cfg.batch_size, stream_for(cfg.seed, "prefl_round")
            )
        self.controller = server.ControllerState.initial(cfg.fb_params)
        self.loss_threshold = 0.0
        self.utilities: dict[int, float] = {}
        self.wallclock = 0.0
        self.records: list[RoundRecord] = []
        self.events: list[tuple] = []

    @property
    def fb(self) -> bool:
        return self.cfg.method in FB_METHODS

    def _deadline(self, cohort: list[int]) -> tuple[float, float, float]:
        cfg = self.cfg
        if cfg.deadline_policy == "adaptive_ddl_e":
            len_cap = cfg.batch_size if cfg.method == "oortbalancer" else None
            dl, dh = server.deadline_bounds(
                self.capabilities, cohort, cfg.local_epochs, cfg.batch_size, cfg.train_time_literal, len_cap
            )
            return dl + (dh - dl) * self.controller.ddlr, float(dl), float(dh)
        ddl = server.baseline_deadline(
            cfg.deadline_policy, self.round_times, self.capabilities, cohort, cfg.local_epochs, cfg.batch_size
        )
        return ddl, math.nan, math.nan

    def _run_clients(self, plan: RoundPlan) -> list[ClientReport | TimedOut]:
        def one(cid: int):
            rng = stream_for(self.cfg.seed, "client", cid, plan.round_index)
            return client_mod.run_client_round(
                self.profiles[cid], self.states[cid], plan, self.weights, self.cfg, rng
            )

        if self.threads == 1 or len(plan.cohort) == 1:
            return [one(cid) for cid in plan.cohort]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            # map() yields in submission order, i.e. ascending client id
            return list(pool.map(one, plan.cohort))

    def run_round(self, round_R: int) -> RoundRecord:
        cfg = self.cfg
        cohort = server.select_cohort(
            range(cfg.num_clients),
            cfg.cohort_size,
            cfg.client_selection,
            self.utilities,
            stream_for(cfg.seed, "cohort", 0, round_R),
            cfg.stat_util_epsilon,
        )
        deadline, dl, dh = self._deadline(cohort)
        ltr, ddlr = self.controller.ltr, self.controller.ddlr
        lt = self.loss_threshold if self.fb else 0.0
        plan = RoundPlan(round_R, lt, deadline, tuple(cohort), self.weights)

        results = self._run_clients(plan)
        reports = [r for r in results if isinstance(r, ClientReport)]
        timed_out = [r for r in results if isinstance(r, TimedOut)]

        for r in results:
            self.capabilities.observe_batch(r.client_id, r.batch_latency)
        for r in reports:
            if self.fb:
                self.capabilities.observe_ot_len(r.client_id, r.meta_ot_len)
            self.utilities[r.client_id] = server.stat_util(r.meta_ot_loss_sq_sum, r.meta_ot_len)
        for r in timed_out:
            self.utilities.setdefault(r.client_id, 0.0)

        self.weights = server.aggregate(reports, self.weights)

        if timed_out and math.isfinite(deadline):
            duration = deadline
        else:
            duration = max(r.completion_time for r in reports)
        self.wallclock += duration

        u_R = math.nan
        if self.fb:
            lsum = math.fsum(r.selected_loss_sum for r in reports)
            l_count = sum(r.selected_count for r in reports)
            self.controller = server.update_controller(self.controller, lsum, l_count, deadline, round_R)
            u_R = self.controller.utility[-1]
            if reports:
                llow = tuple(r.meta_llow for r in reports)
                lhigh = tuple(r.meta_lhigh for r in reports)
                self.controller = dataclasses.replace(self.controller, llow_list=llow, lhigh_list=lhigh)
                self.loss_threshold = server.select_loss_threshold(llow, lhigh, self.controller.ltr)
                self.events.append(("loss_threshold", round_R + 1, self.loss_threshold))

        acc = accuracy(self.weights, self.test.features, self.test.labels)
        record = RoundRecord(
            round_index=round_R,
            deadline=deadline,
            loss_threshold=lt,
            ltr=ltr,
            ddlr=ddlr,
            cohort=tuple(cohort),
            completed=tuple(r.client_id for r in reports),
            timed_out=tuple(r.client_id for r in timed_out),
            duration=duration,
            wallclock=self.wallclock,
            test_accuracy=acc,
            utility=u_R,
            deadline_low=dl,
            deadline_high=dh,
        )
        self.records.append(record)
        log.debug("round %d: ddl=%.2f lt=%.4f done=%d/%d acc=%.4f", round_R, deadline, lt,
                  len(reports), len(cohort), acc)
        return record

    def done(self) -> bool:
        cfg = self.cfg
        if cfg.termination == "wallclock":
            return self.wallclock >= cfg.wallclock_budget_s or len(self.records) >= MAX_ROUNDS
        return len(self.records) >= cfg.rounds


def run_round(state: Experiment, round_R: int) -> RoundRecord:
    return state.run_round(round_R)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> ExperimentResult:
    """Run to the configured round count or wall-clock budget."""
    exp = Experiment(cfg, threads)
    R = 0
    while not exp.done():
        R += 1
        exp.run_round(R)
    return ExperimentResult(cfg, exp.records, exp.weights, exp.events)


def time_to_accuracy(records: list[RoundRecord], target: float) -> float | None:
    """Simulated wall clock at which test accuracy first reaches ``target``."""
    for r in records:
        if r.test_accuracy >= target:
            return r.wallclock
    return None
