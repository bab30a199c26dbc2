from __future__ import annotations

import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbal.core import (
    ConfigError,
    ExperimentConfig,
    FbParams,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    seeded_rng,
    stream_for,
)


def write_json(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_seeded_rng_is_reproducible():
    a = seeded_rng(1, 0).random(100)
    b = seeded_rng(1, 0).random(100)
    assert np.array_equal(a, b)


def test_seeded_rng_streams_differ():
    assert not np.array_equal(seeded_rng(1, 0).random(100), seeded_rng(1, 1).random(100))


def test_seeded_rng_independent_of_threads():
    serial = seeded_rng(1, 5).random(100)
    out = [None] * 8

    def draw(i):
        out[i] = seeded_rng(1, 5).random(100)

    threads = [threading.Thread(target=draw, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(serial, o) for o in out)


def test_stream_for_separates_purpose_client_round():
    base = stream_for(3, "client", 1, 1).random(5)
    assert np.array_equal(base, stream_for(3, "client", 1, 1).random(5))
    for other in (stream_for(3, "cohort", 1, 1), stream_for(3, "client", 2, 1), stream_for(3, "client", 1, 2)):
        assert not np.array_equal(base, other.random(5))


def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(write_json(tmp_path, {"num_clients": 10, "cohort_size": 5}))
    assert cfg.fb_params.ltr_init == 0.0
    assert cfg.fb_params.ddlr_init == 1.0
    assert cfg.fb_params == FbParams(20, 0.05, 0.05, 1.0)


def test_cohort_larger_than_population(tmp_path):
    with pytest.raises(ConfigError, match="cohort_size exceeds num_clients") as exc:
        load_config(write_json(tmp_path, {"num_clients": 10, "cohort_size": 20}))
    assert exc.value.field == "cohort_size"


def test_p_out_of_range(tmp_path):
    doc = {"num_clients": 10, "cohort_size": 5, "fb_params": {"p": 0.3}}
    with pytest.raises(ConfigError, match=r"p outside \[0.5,1.0\]"):
        load_config(write_json(tmp_path, doc))


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "num_clients": 10,\n  "cohort_size": \n}')
    with pytest.raises(ConfigError, match="line 4"):
        load_config(path)


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"num_clients": 10}, "cohort_size"),
        ({"num_clients": 10, "cohort_size": 5, "bogus": 1}, "bogus"),
        ({"num_clients": 10, "cohort_size": 5, "local_epochs": 0}, "local_epochs"),
        ({"num_clients": 10, "cohort_size": 5, "batch_size": 0}, "batch_size"),
        ({"num_clients": 10, "cohort_size": 5, "prox_mu": -1.0}, "prox_mu"),
        ({"num_clients": 10, "cohort_size": 5, "method": "sgd"}, "method"),
        ({"num_clients": 10, "cohort_size": 5, "method": "fedbalancer"}, "deadline_policy"),
        ({"num_clients": 10, "cohort_size": 5, "noise_factor": -0.1}, "noise_factor"),
        ({"num_clients": 10, "cohort_size": 5, "fb_params": {"lss": 2.0}}, "fb_params.lss"),
        ({"num_clients": 10, "cohort_size": 5, "termination": "wallclock"}, "wallclock_budget_s"),
    ],
)
def test_constraint_violations_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(doc)
    assert exc.value.field == field


def test_fedbalancer_requires_adaptive_deadline():
    cfg = ExperimentConfig(10, 5, method="fedbalancer", deadline_policy="adaptive_ddl_e")
    assert cfg.label == "fedbalancer+adaptive_ddl_e"


configs = st.builds(
    lambda n, k, e, b, mu, method, nf, sel, p, seed: ExperimentConfig(
        num_clients=n,
        cohort_size=min(k, n),
        local_epochs=e,
        batch_size=b,
        prox_mu=mu,
        method=method,
        deadline_policy="adaptive_ddl_e" if method == "fedbalancer" else "fixed_2t",
        noise_factor=nf,
        client_selection=sel,
        fb_params=FbParams(p=p),
        seed=seed,
        targets=(0.5,),
    ),
    st.integers(1, 500),
    st.integers(1, 500),
    st.integers(1, 20),
    st.integers(1, 64),
    st.floats(0, 10),
    st.sampled_from(["fedavg", "prox", "fedbalancer", "oortbalancer", "sample_selection_baseline"]),
    st.floats(0, 10),
    st.sampled_from(["random", "stat_util"]),
    st.floats(0.5, 1.0),
    st.integers(0, 2**64 - 1),
)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    assert config_from_dict(json.loads(dump_config(cfg))) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg
