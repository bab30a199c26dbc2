"""Synthetic non-IID client data and client latency traces."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetHandle:
    """Features and labels owned by one client.

    ``sample_ids`` are positions in the global generated pool, used to check
    that the partition is disjoint. ``clean_labels`` are the generating
    classes before label noise.
    """

    features: np.ndarray
    labels: np.ndarray
    owner: int
    num_classes: int
    sample_ids: np.ndarray
    clean_labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError(f"client {self.owner}: dataset needs at least one sample")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree in length")
        if self.labels.max() >= self.num_classes or self.labels.min() < 0:
            raise ValueError("label outside class range")
        for arr in (self.features, self.labels, self.sample_ids, self.clean_labels):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SampleCountDist:
    """Lognormal sample count per client, floored at ``minimum``."""

    mu: float = 4.5
    sigma: float = 0.6
    minimum: int = 10

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        counts = np.floor(rng.lognormal(self.mu, self.sigma, size=n)).astype(np.int64)
        return np.maximum(counts, self.minimum)


def make_class_means(input_dim: int, num_classes: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Random class centres, each at distance ``separation`` from the origin."""
    means = rng.standard_normal((num_classes, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * separation


def _allocate(n: int, proportions: np.ndarray) -> np.ndarray:
    """Largest-remainder split of n items by proportions."""
    raw = proportions * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _flip_labels(labels: np.ndarray, num_classes: int, noise_frac: float, rng: np.random.Generator) -> np.ndarray:
    noisy = labels.copy()
    if noise_frac <= 0:
        return noisy
    flip = rng.random(len(labels)) < noise_frac
    # shift by 1..c-1 so a flipped label always differs from the original
    shift = rng.integers(1, num_classes, size=int(flip.sum()))
    noisy[flip] = (labels[flip] + shift) % num_classes
    return noisy


def _sample_points(class_means: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return class_means[labels] + rng.standard_normal((len(labels), class_means.shape[1]))


def gen_synthetic(
    num_clients: int,
    samples_per_client_dist: SampleCountDist,
    input_dim: int,
    num_classes: int,
    dirichlet_alpha: float,
    noise_frac: float,
    rng: np.random.Generator,
    class_means: np.ndarray | None = None,
    class_sep: float = 1.0,
) -> list[DatasetHandle]:
    """Label-skewed clients: per-client class mix drawn from Dirichlet(alpha).

    Features come from unit-covariance Gaussians around per-class means;
    a ``noise_frac`` share of labels is flipped to a different class.
    """
    if num_clients < 1 or input_dim < 1 or num_classes < 2:
        raise ValueError("degenerate dataset shape")
    if not dirichlet_alpha > 0:
        raise ValueError("dirichlet_alpha must be > 0")
    if not 0 <= noise_frac < 1:
        raise ValueError("noise_frac must lie in [0, 1)")
    if class_means is None:
        class_means = make_class_means(input_dim, num_classes, class_sep, rng)
    counts = samples_per_client_dist.draw(rng, num_clients)
    clients = []
    next_id = 0
    for owner, n in enumerate(counts.tolist()):
        props = rng.dirichlet(np.full(num_classes, dirichlet_alpha))
        per_class = _allocate(n, props)
        clean = np.repeat(np.arange(num_classes), per_class)
        rng.shuffle(clean)
        X = _sample_points(class_means, clean, rng)
        y = _flip_labels(clean, num_classes, noise_frac, rng)
        ids = np.arange(next_id, next_id + n)
        next_id += n
        clients.append(DatasetHandle(X, y, owner, num_classes, ids, clean))
    return clients


def gen_iid(
    class_means: np.ndarray, n: int, rng: np.random.Generator, owner: int = -1, id_offset: int = 0
) -> DatasetHandle:
    """IID, noise-free sample set; the simulator uses it as the server-held test split."""
    num_classes = class_means.shape[0]
    clean = rng.integers(0, num_classes, size=n)
    X = _sample_points(class_means, clean, rng)
    return DatasetHandle(X, clean.copy(), owner, num_classes, np.arange(id_offset, id_offset + n), clean)


# ---------------------------------------------------------------- traces


@dataclass(frozen=True)
class TraceRecord:
    id: int
    download_s: tuple[float, ...]
    upload_s: tuple[float, ...]
    batch_latency_s: tuple[float, ...]


@dataclass(frozen=True)
class TraceFile:
    records: tuple[TraceRecord, ...]

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise TraceFormatError(f"duplicate client id {rec.id}")
            seen.add(rec.id)
            for name in ("download_s", "upload_s", "batch_latency_s"):
                if len(getattr(rec, name)) == 0:
                    raise TraceFormatError(f"client {rec.id}: empty {name}")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[int, TraceRecord]:
        return {r.id: r for r in self.records}


def gen_traces(
    num_clients: int,
    batch_latency_lognormal_params: tuple[float, float],
    net_latency_lognormal_params: tuple[float, float, float],
    heterogeneity_spread: float,
    samples_per_client: int,
    rng: np.random.Generator,
) -> TraceFile:
    """Synthetic per-client latency traces.

    ``batch_latency_lognormal_params`` is ``(base_seconds, jitter_sigma)``:
    client means are ``base * spread**u`` with ``u ~ U(0, 1)``, so the
    slowest/fastest ratio never exceeds ``spread``. Jitter is lognormal and
    rescaled so each client's sample mean equals its target mean exactly.

    ``net_latency_lognormal_params`` is ``(median_seconds, sigma_across_clients,
    jitter_sigma)`` and applies independently to download and upload.
    """
    if heterogeneity_spread < 1:
        raise ValueError("heterogeneity_spread must be >= 1")
    base, jitter = batch_latency_lognormal_params
    net_median, net_sigma, net_jitter = net_latency_lognormal_params
    k = samples_per_client
    records = []
    for cid in range(num_clients):
        mean_b = base * heterogeneity_spread ** rng.random()
        mean_dl = net_median * np.exp(net_sigma * rng.standard_normal())
        mean_ul = net_median * np.exp(net_sigma * rng.standard_normal())
        records.append(
            TraceRecord(
                cid,
                _jittered(mean_dl, net_jitter, k, rng),
                _jittered(mean_ul, net_jitter, k, rng),
                _jittered(mean_b, jitter, k, rng),
            )
        )
    return TraceFile(tuple(records))


def _jittered(mean: float, sigma: float, k: int, rng: np.random.Generator) -> tuple[float, ...]:
    mult = rng.lognormal(0.0, sigma, size=k)
    return tuple((mean * mult / mult.mean()).tolist())


def _latency_list(rec: dict, name: str, lineno: int) -> tuple[float, ...]:
    if name not in rec:
        raise TraceFormatError(f"line {lineno}: missing field {name}")
    values = rec[name]
    if not isinstance(values, list):
        raise TraceFormatError(f"line {lineno}: {name} must be a list")
    if not values:
        raise TraceFormatError(f"line {lineno}: empty {name} for client {rec.get('id')}")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise TraceFormatError(f"line {lineno}: {name} values must be positive numbers")
        out.append(float(v))
    return tuple(out)


def load_traces(path: str | Path) -> TraceFile:
    """Read a JSON-lines trace file, one client record per line."""
    records = []
    seen: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: parse error: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise TraceFormatError(f"line {lineno}: record must be an object")
            cid = rec.get("id")
            if isinstance(cid, bool) or not isinstance(cid, int):
                raise TraceFormatError(f"line {lineno}: id must be an integer")
            if cid in seen:
                raise TraceFormatError(f"line {lineno}: duplicate id {cid} (first on line {seen[cid]})")
            seen[cid] = lineno
            records.append(
                TraceRecord(
                    cid,
                    _latency_list(rec, "download_s", lineno),
                    _latency_list(rec, "upload_s", lineno),
                    _latency_list(rec, "batch_latency_s", lineno),
                )
            )
    return TraceFile(tuple(records))


def dump_traces(trace: TraceFile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace.records:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "download_s": list(r.download_s),
                        "upload_s": list(r.upload_s),
                        "batch_latency_s": list(r.batch_latency_s),
                    }
                )
                + "\n"
            )


def partition_is_disjoint(datasets: Sequence[DatasetHandle]) -> bool:
    ids = np.concatenate([d.sample_ids for d in datasets])
    return np.unique(ids).size == ids.size
