"""Shared domain types, experiment configuration and the RNG contract."""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from fedbal.data import DatasetHandle
    from fedbal.model import WeightVector

METHODS = ("fedavg", "prox", "fedbalancer", "oortbalancer", "sample_selection_baseline")
DEADLINE_POLICIES = ("fixed_1t", "fixed_2t", "smartpc", "wait_for_all", "adaptive_ddl_e")
CLIENT_SELECTION = ("random", "stat_util")
TERMINATION = ("rounds", "wallclock")

# Methods that run local training with Prox semantics (partial epochs accepted).
PROX_METHODS = frozenset({"prox", "fedbalancer", "oortbalancer", "sample_selection_baseline"})
# Methods whose clients run the loss-threshold sample selection.
FB_METHODS = frozenset({"fedbalancer", "oortbalancer"})

PRE_FL_LATENCY_SAMPLES = 10


class ConfigError(ValueError):
    """Raised when a configuration document is malformed or violates a constraint.

    ``field`` names the offending key.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------- RNG


def seeded_rng(seed: int, stream_id: int) -> np.random.Generator:
    """Return an independent PCG64 stream keyed by ``(seed, stream_id)``.

    Streams are derived through ``SeedSequence`` spawn keys, so they never
    depend on how many draws any other stream has consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream_id) & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(ss))


def purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream_for(seed: int, purpose: str, client: int = 0, round_index: int = 0) -> np.random.Generator:
    """One stream per (purpose, client, round) triple."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & (2**64 - 1),
        spawn_key=(purpose_id(purpose), int(client), int(round_index)),
    )
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class FbParams:
    w: int = 20
    lss: float = 0.05
    dss: float = 0.05
    p: float = 1.0
    ltr_init: float = 0.0
    ddlr_init: float = 1.0
    llow_percentile: float = 0.0
    lhigh_percentile: float = 80.0

    def __post_init__(self):
        if not isinstance(self.w, int) or self.w < 1:
            raise ConfigError("fb_params.w", "w must be a positive integer")
        if not 0.0 <= self.lss <= 1.0:
            raise ConfigError("fb_params.lss", "lss outside [0,1]")
        if not 0.0 <= self.dss <= 1.0:
            raise ConfigError("fb_params.dss", "dss outside [0,1]")
        if not 0.5 <= self.p <= 1.0:
            raise ConfigError("fb_params.p", "p outside [0.5,1.0]")
        if not 0.0 <= self.ltr_init <= 1.0:
            raise ConfigError("fb_params.ltr_init", "ltr_init outside [0,1]")
        if not 0.0 <= self.ddlr_init <= 1.0:
            raise ConfigError("fb_params.ddlr_init", "ddlr_init outside [0,1]")
        if self.llow_percentile != 0.0:
            raise ConfigError("fb_params.llow_percentile", "llow_percentile is fixed at 0 (min)")
        if self.lhigh_percentile != 80.0:
            raise ConfigError("fb_params.lhigh_percentile", "lhigh_percentile is fixed at 80")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one simulated FL run.

    The first block mirrors the documented required keys; the rest are
    workload knobs with defaults (see ``docs/config.md``).
    """

    num_clients: int
    cohort_size: int
    local_epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.05
    prox_mu: float = 0.0
    rounds: int = 100
    seed: int = 0
    method: str = "fedavg"
    deadline_policy: str = "fixed_1t"
    fb_params: FbParams = field(default_factory=FbParams)
    noise_factor: float = 0.0
    client_selection: str = "random"

    name: str = ""
    termination: str = "rounds"
    wallclock_budget_s: float | None = None
    targets: tuple[float, ...] = ()
    # synthetic task
    input_dim: int = 60
    hidden_dim: int = 0
    num_classes: int = 10
    dirichlet_alpha: float = 0.5
    label_noise: float = 0.0
    class_sep: float = 2.0
    samples_lognormal_mu: float = 4.5
    samples_lognormal_sigma: float = 0.6
    min_samples: int = 10
    test_frac: float = 0.1
    # latency traces
    trace_path: str | None = None
    latency_spread: float = 12.0
    batch_latency_base_s: float = 0.1
    batch_latency_jitter: float = 0.1
    net_latency_median_s: float = 2.0
    net_latency_sigma: float = 0.5
    net_latency_jitter: float = 0.2
    trace_samples: int = 20
    # algorithm details
    loss_clamp: float = 50.0
    train_time_literal: bool = False
    stat_util_epsilon: float = 0.1

    def __post_init__(self):
        _check_int(self, "num_clients", 1)
        _check_int(self, "cohort_size", 1)
        _check_int(self, "local_epochs", 1)
        _check_int(self, "batch_size", 1)
        _check_int(self, "rounds", 0)
        _check_int(self, "input_dim", 1)
        _check_int(self, "hidden_dim", 0)
        _check_int(self, "num_classes", 2)
        _check_int(self, "min_samples", 1)
        _check_int(self, "trace_samples", PRE_FL_LATENCY_SAMPLES)
        if self.cohort_size > self.num_clients:
            raise ConfigError("cohort_size", "cohort_size exceeds num_clients")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "learning_rate must be > 0")
        if not self.prox_mu >= 0:
            raise ConfigError("prox_mu", "prox_mu must be >= 0")
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}")
        if self.deadline_policy not in DEADLINE_POLICIES:
            raise ConfigError("deadline_policy", f"unknown deadline_policy {self.deadline_policy!r}")
        if self.client_selection not in CLIENT_SELECTION:
            raise ConfigError("client_selection", f"unknown client_selection {self.client_selection!r}")
        if self.method == "fedbalancer" and self.deadline_policy != "adaptive_ddl_e":
            raise ConfigError("deadline_policy", "method fedbalancer requires deadline_policy adaptive_ddl_e")
        if not isinstance(self.fb_params, FbParams):
            raise ConfigError("fb_params", "fb_params must be an FbParams")
        if not self.noise_factor >= 0:
            raise ConfigError("noise_factor", "noise_factor must be >= 0")
        if self.termination not in TERMINATION:
            raise ConfigError("termination", f"unknown termination {self.termination!r}")
        if self.termination == "wallclock" and not (self.wallclock_budget_s or 0) > 0:
            raise ConfigError("wallclock_budget_s", "wallclock termination needs a positive wallclock_budget_s")
        if not self.dirichlet_alpha > 0:
            raise ConfigError("dirichlet_alpha", "dirichlet_alpha must be > 0")
        if not 0 <= self.label_noise < 1:
            raise ConfigError("label_noise", "label_noise outside [0,1)")
        if not 0 < self.test_frac < 1:
            raise ConfigError("test_frac", "test_frac outside (0,1)")
        if not self.latency_spread >= 1:
            raise ConfigError("latency_spread", "latency_spread must be >= 1")
        if not self.loss_clamp > 0:
            raise ConfigError("loss_clamp", "loss_clamp must be > 0")
        if not 0 <= self.stat_util_epsilon <= 1:
            raise ConfigError("stat_util_epsilon", "stat_util_epsilon outside [0,1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "seed must be an unsigned 64-bit integer")

    @property
    def label(self) -> str:
        return self.name or f"{self.method}+{self.deadline_policy}"

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _check_int(cfg: ExperimentConfig, name: str, minimum: int) -> None:
    value = getattr(cfg, name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"{name} must be an integer")
    if value < minimum:
        raise ConfigError(name, f"{name} must be >= {minimum}")


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_FB_FIELDS = {f.name for f in dataclasses.fields(FbParams)}


def config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown config key")
    for required in ("num_clients", "cohort_size"):
        if required not in doc:
            raise ConfigError(required, "missing required key")
    kwargs = dict(doc)
    fb = kwargs.pop("fb_params", None) or {}
    if not isinstance(fb, dict):
        raise ConfigError("fb_params", "fb_params must be an object")
    bad = sorted(set(fb) - _FB_FIELDS)
    if bad:
        raise ConfigError(f"fb_params.{bad[0]}", "unknown fb_params key")
    fb = dict(fb)
    if "w" in fb and isinstance(fb["w"], float) and fb["w"].is_integer():
        fb["w"] = int(fb["w"])
    kwargs["fb_params"] = FbParams(**fb)
    if "targets" in kwargs:
        kwargs["targets"] = tuple(float(t) for t in kwargs["targets"])
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    doc = dataclasses.asdict(cfg)
    doc["targets"] = list(cfg.targets)
    return doc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON config file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"parse failure at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


# ---------------------------------------------------------------- domain types


@dataclass(frozen=True)
class ClientProfile:
    """Latency trace of one client plus its local data."""

    id: int
    download_samples: tuple[float, ...]
    upload_samples: tuple[float, ...]
    batch_latency_samples: tuple[float, ...]
    dataset: DatasetHandle

    def __post_init__(self):
        for name in ("download_samples", "upload_samples", "batch_latency_samples"):
            values = getattr(self, name)
            if len(values) == 0 or min(values) <= 0:
                raise ValueError(f"client {self.id}: {name} must be non-empty and positive")
        if len(self.batch_latency_samples) < PRE_FL_LATENCY_SAMPLES:
            raise ValueError(
                f"client {self.id}: needs >= {PRE_FL_LATENCY_SAMPLES} batch latency samples"
            )

    @property
    def mean_download(self) -> float:
        return float(np.mean(self.download_samples))

    @property
    def mean_upload(self) -> float:
        return float(np.mean(self.upload_samples))


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    loss_threshold: float
    deadline: float
    cohort: tuple[int, ...]
    model_version: WeightVector

    def __post_init__(self):
        if self.loss_threshold < 0:
            raise ValueError("loss_threshold must be >= 0")
        if not self.deadline > 0:
            raise ValueError("deadline must be > 0")


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    weight_delta: np.ndarray
    epochs_completed: int
    completion_time: float
    meta_llow: float
    meta_lhigh: float
    meta_ot_loss_sq_sum: float
    meta_ot_len: float
    selected_count: int
    selected_loss_sum: float
    num_samples: int
    batch_latency: float

    def __post_init__(self):
        if not self.completion_time > 0:
            raise ValueError("completion_time must be > 0")
        if self.epochs_completed < 1:
            raise ValueError("a report needs at least one completed epoch")


@dataclass(frozen=True)
class TimedOut:
    """Marker for a cohort member whose update missed the deadline."""

    client_id: int
    completion_time: float
    batch_latency: float
    reason: str = "deadline"


def is_finite_deadline(deadline: float) -> bool:
    return math.isfinite(deadline)
