import json
import math
from pathlib import Path

import numpy as np
import pytest

import pfda

ROOT = Path(__file__).resolve().parents[2]


def l96(filter_block, cycles=20):
    cfg = json.loads((ROOT / "configs" / "l96_netf.json").read_text())
    cfg["filter"] = filter_block
    cfg["run"]["cycles"] = cycles
    return cfg


def test_registry_lists_gated_filters():
    names = pfda.filter_names()
    for n in ["bootstrap", "optimal_proposal", "etpf", "letpf", "poterjoy", "netf", "enkpf", "agm"]:
        assert n in names


def test_run_returns_summary_and_records():
    out = pfda.run(l96({"name": "netf", "n": 20, "localization": {"radius": 4}}))
    assert not out["aborted"]
    assert out["summary"]["cycles"] == 20
    assert len(out["records"]) == 20
    assert out["csv"].startswith("cycle,filter,rmse_a,rmse_f,ess,max_w,spread,crps,degen_flag\r\n")


def test_thread_count_does_not_change_output():
    cfg = l96({"name": "letpf", "n": 20, "localization": {"radius": 4}}, cycles=10)
    assert pfda.run(cfg, threads=1)["csv"] == pfda.run(cfg, threads=3)["csv"]


def test_unknown_key_rejected():
    cfg = l96({"name": "netf", "n": 20, "bogus": 1})
    with pytest.raises(pfda.PfdaError, match="ConfigInvalid"):
        pfda.run(cfg)


def test_ess_and_systematic_resample():
    w = np.array([0.5, 0.25, 0.25])
    assert pfda.ess(w) == pytest.approx(1.0 / 0.375)
    # Positions u + k/N with u = 0.1/3: 0.033, 0.367, 0.7 against cumsum 0.5, 0.75, 1
    assert pfda.systematic_resample(w, 0.1 / 3) == [0, 0, 1]


def test_merging_coefficients():
    a = pfda.merging_coefficients()
    assert a == pytest.approx([0.75, (math.sqrt(13) + 1) / 8, -(math.sqrt(13) - 1) / 8], abs=1e-15)
    assert sum(a) == pytest.approx(1.0, abs=1e-15)
    assert sum(x * x for x in a) == pytest.approx(1.0, abs=1e-15)


def test_netf_transform_reproduces_weighted_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 12))
    w = rng.exponential(size=12)
    w /= w.sum()
    xa = x @ pfda.netf_transform_matrix(w)
    mu = x @ w
    cov = (x - mu[:, None]) @ np.diag(w) @ (x - mu[:, None]).T
    np.testing.assert_allclose(xa.mean(axis=1), mu, atol=1e-12)
    np.testing.assert_allclose(np.cov(xa, bias=True), cov, atol=1e-12)


def test_transport_plan_marginals():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 6))
    w = rng.exponential(size=6)
    w /= w.sum()
    d = pfda.transport_plan(x, w)
    np.testing.assert_allclose(d.sum(axis=0), np.ones(6), atol=1e-12)
    np.testing.assert_allclose(d.sum(axis=1), 6 * w, atol=1e-12)


def test_kalman_update_scalar():
    m, p = pfda.kalman_update(np.zeros(1), np.eye(1), np.eye(1), np.eye(1), np.ones(1))
    assert m[0] == pytest.approx(0.5)
    assert p[0, 0] == pytest.approx(0.5)


def test_crps_two_member():
    # ∫ (F - 1{x >= 1})^2 = 0.25 on [0, 1) plus 0.25 on [1, 2)
    assert pfda.crps(np.array([0.0, 2.0]), np.array([0.5, 0.5]), 1.0) == pytest.approx(0.5)


def test_small_kalman_gate():
    g = pfda.kalman_gate("optimal_proposal", n=2000, seeds=10)
    assert g["pass"]
    assert g["kalman_mean"][0] == pytest.approx(0.9 * 0 + (0.81 + 0.5) / (0.81 + 0.5 + 0.5) * 1.0)


def test_config_hash_depends_on_content():
    a = l96({"name": "netf", "n": 20})
    b = l96({"name": "netf", "n": 21})
    assert pfda.config_hash(a) != pfda.config_hash(b)
    assert pfda.config_hash(a) == pfda.config_hash(json.loads(json.dumps(a)))


def test_config_schema_matches_registry():
    jsonschema = pytest.importorskip("jsonschema")
    schema = json.loads((ROOT / "docs" / "config_schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    assert sorted(schema["properties"]["filter"]["properties"]["name"]["enum"]) == sorted(pfda.filter_names())
    cfg = json.loads((ROOT / "configs" / "l96_netf.json").read_text())
    jsonschema.validate(cfg, schema)
    cfg["filter"]["bogus"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(cfg, schema)
