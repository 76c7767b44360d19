"""Particle filters for data assimilation: twin experiments and oracle checks."""

import json

from ._pfda import (
    PfdaError,
    __version__,
    config_hash as _config_hash,
    crps,
    ess,
    filter_names,
    kalman_update,
    merging_coefficients,
    netf_transform_matrix,
    systematic_resample,
    transport_plan,
)
from . import _pfda


def run(config, threads=1):
    """Run a twin experiment from a config dict. Returns a dict with
    summary, records, aborted, error, warnings and the diagnostics csv text."""
    return json.loads(_pfda.run_json(json.dumps(config), threads))


def kalman_gate(name, seed=1, n=0, seeds=0):
    """Linear-Gaussian Kalman gate; n and seeds of 0 use the documented setting."""
    return json.loads(_pfda.kalman_gate_json(name, seed, n, seeds))


def oracle_check(name, seed=1):
    return json.loads(_pfda.oracle_check_json(name, seed))


def config_hash(config):
    return _config_hash(json.dumps(config))


__all__ = [
    "PfdaError", "__version__", "config_hash", "crps", "ess", "filter_names", "kalman_gate",
    "kalman_update", "merging_coefficients", "netf_transform_matrix", "oracle_check", "run",
    "systematic_resample", "transport_plan",
]
