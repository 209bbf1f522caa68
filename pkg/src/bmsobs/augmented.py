"""Bias-augmented variants of the circuit model.

Sensor biases are constant states appended to ``[v1, v2, z]``:

* voltage bias ``ve``: the sensor reads ``v + ve``;
* current bias ``ie``: the sensor reads ``i_m = i + ie``, so the cell is
  driven by ``i_m - ie``;
* dual bias: both, state ``[v1, v2, z, ve, ie]``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .ecm import ECMParams, ModelSpec, OCVPolynomial, build_original_model

VARIANTS = ("original", "voltage-bias", "current-bias", "dual-bias")


class AugmentedStateV(NamedTuple):
    v1: float
    v2: float
    z: float
    ve: float


class AugmentedStateI(NamedTuple):
    v1: float
    v2: float
    z: float
    ie: float


def build_voltage_bias_model(p: ECMParams, ocv: OCVPolynomial) -> ModelSpec:
    a = np.zeros((4, 4))
    a[0, 0] = -1.0 / p.tau1
    a[1, 1] = -1.0 / p.tau2
    return ModelSpec(
        name="voltage-bias",
        state_labels=("v1", "v2", "z", "ve"),
        drift_matrix=a,
        input_vector=np.array([1.0 / p.c1, 1.0 / p.c2, -1.0 / p.capacity_q, 0.0]),
        output_linear=np.array([-1.0, -1.0, 0.0, 1.0]),
        feedthrough=-p.rs,
        ocv=ocv,
        bias_labels=("ve",),
    )


def _current_coupling(p: ECMParams) -> np.ndarray:
    # d/dt [v1, v2, z] picks up -g*ie because the true current is i_m - ie
    return np.array([-1.0 / p.c1, -1.0 / p.c2, 1.0 / p.capacity_q])


def build_current_bias_model(p: ECMParams, ocv: OCVPolynomial) -> ModelSpec:
    a = np.zeros((4, 4))
    a[0, 0] = -1.0 / p.tau1
    a[1, 1] = -1.0 / p.tau2
    a[:3, 3] = _current_coupling(p)
    return ModelSpec(
        name="current-bias",
        state_labels=("v1", "v2", "z", "ie"),
        drift_matrix=a,
        input_vector=np.array([1.0 / p.c1, 1.0 / p.c2, -1.0 / p.capacity_q, 0.0]),
        output_linear=np.array([-1.0, -1.0, 0.0, p.rs]),
        feedthrough=-p.rs,
        ocv=ocv,
        bias_labels=("ie",),
    )


def build_dual_bias_model(p: ECMParams, ocv: OCVPolynomial) -> ModelSpec:
    """Both biases; meant for conditioning studies, not estimation."""
    a = np.zeros((5, 5))
    a[0, 0] = -1.0 / p.tau1
    a[1, 1] = -1.0 / p.tau2
    a[:3, 4] = _current_coupling(p)
    return ModelSpec(
        name="dual-bias",
        state_labels=("v1", "v2", "z", "ve", "ie"),
        drift_matrix=a,
        input_vector=np.array([1.0 / p.c1, 1.0 / p.c2, -1.0 / p.capacity_q, 0.0, 0.0]),
        output_linear=np.array([-1.0, -1.0, 0.0, 1.0, p.rs]),
        feedthrough=-p.rs,
        ocv=ocv,
        bias_labels=("ve", "ie"),
    )


_BUILDERS = {
    "original": build_original_model,
    "voltage-bias": build_voltage_bias_model,
    "current-bias": build_current_bias_model,
    "dual-bias": build_dual_bias_model,
}


def build_model(variant: str, p: ECMParams, ocv: OCVPolynomial) -> ModelSpec:
    try:
        builder = _BUILDERS[variant]
    except KeyError:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}") from None
    return builder(p, ocv)
