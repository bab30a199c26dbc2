from __future__ import annotations

import numpy as np
import pytest

from fedbal.core import ClientProfile, ExperimentConfig
from fedbal.data import DatasetHandle, gen_iid, make_class_means

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, name): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    num, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if call.excinfo is None else "FAIL"
    _criteria[f"{num:02d}"] = (status, f"criterion {num} ({name}): {status}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        terminalreporter.write_line(_criteria[key][1])


def toy_dataset(n: int = 20, d: int = 4, c: int = 3, seed: int = 0, owner: int = 0) -> DatasetHandle:
    rng = np.random.default_rng(seed)
    ds = gen_iid(make_class_means(d, c, 2.0, rng), n, rng)
    return DatasetHandle(ds.features, ds.labels, owner, c, ds.sample_ids, ds.clean_labels)


def toy_profile(cid: int = 0, n: int = 20, batch: float = 1.0, net: float = 1.0, d: int = 4, c: int = 3) -> ClientProfile:
    """Constant-latency client: every draw returns exactly the given values."""
    return ClientProfile(cid, (net,) * 10, (net,) * 10, (batch,) * 10, toy_dataset(n, d, c, seed=cid, owner=cid))


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    return ExperimentConfig(num_clients=12, cohort_size=4, rounds=6, input_dim=8, num_classes=4, samples_lognormal_mu=3.5)
