"""First-order EKF, second-order EKF and UKF over a :class:`ModelSpec`.

The state equation of every model is linear, so all three filters share the
same exact time update. They differ only in the measurement update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ecm import ModelSpec

# diagonal tunings for [v1, v2, z, bias]
DEFAULT_P0_DIAG = (0.01, 0.0016, 0.01, 0.0625)
DEFAULT_Q0_DIAG = 1e-8
DEFAULT_SIGMA_V = 6e-3
DEFAULT_KAPPA = 4.0


class FilterDivergence(RuntimeError):
    """Numerical breakdown inside a filter update."""


@dataclass(frozen=True)
class FilterConfig:
    p0: np.ndarray
    q0: np.ndarray
    r: float
    kappa: float = DEFAULT_KAPPA
    dt: float = 1.0

    def __post_init__(self):
        p0 = np.array(self.p0, dtype=float)
        q0 = np.array(self.q0, dtype=float)
        n = p0.shape[0]
        for name, mat in (("p0", p0), ("q0", q0)):
            if mat.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}, got {mat.shape}")
            if not np.allclose(mat, mat.T, rtol=0, atol=1e-12 * max(1.0, np.abs(mat).max())):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat).min() < -1e-10 * max(1.0, np.abs(mat).max()):
                raise ValueError(f"{name} must be positive semidefinite")
        if not self.r > 0:
            raise ValueError("measurement noise variance r must be positive")
        if not n + self.kappa > 0:
            raise ValueError("n + kappa must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "q0", q0)

    @property
    def state_dim(self) -> int:
        return self.p0.shape[0]

    @classmethod
    def reference_tuning(cls, n: int, kappa: float = DEFAULT_KAPPA, dt: float = 1.0) -> "FilterConfig":
        """Reference tuning; bias slots (index 3 onward) share the bias variance."""
        diag = list(DEFAULT_P0_DIAG[:3]) + [DEFAULT_P0_DIAG[3]] * (n - 3)
        return cls(
            p0=np.diag(diag),
            q0=np.eye(n) * DEFAULT_Q0_DIAG,
            r=DEFAULT_SIGMA_V**2,
            kappa=kappa,
            dt=dt,
        )


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def initial(cls, mean, cfg: FilterConfig) -> "FilterState":
        return cls(np.array(mean, dtype=float), cfg.p0.copy())


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def predict(m: ModelSpec, cfg: FilterConfig, s: FilterState, measured_input: float) -> FilterState:
    phi, gamma = m.discrete(cfg.dt)
    mean = phi @ s.mean + gamma * measured_input
    cov = _symmetrize(phi @ s.covariance @ phi.T + cfg.q0)
    return FilterState(mean, cov)


def _scalar_update(s: FilterState, h: np.ndarray, innovation: float, r_eff: float) -> FilterState:
    p = s.covariance
    ph = p @ h
    var = float(h @ ph) + r_eff
    if not var > 0 or not np.isfinite(var):
        raise FilterDivergence(f"innovation variance {var!r} is not positive")
    k = ph / var
    mean = s.mean + k * innovation
    ikh = np.eye(len(h)) - np.outer(k, h)
    cov = ikh @ p @ ikh.T + r_eff * np.outer(k, k)
    return FilterState(mean, _symmetrize(cov))


def update_ekf1(
    m: ModelSpec, cfg: FilterConfig, s: FilterState, measured_output: float, measured_input: float
) -> FilterState:
    """EKF measurement update with a Joseph-form covariance."""
    h = m.output_gradient(s.mean)
    innovation = measured_output - m.measurement(s.mean, measured_input)
    return _scalar_update(s, h, innovation, cfg.r)


def update_ekf2(
    m: ModelSpec,
    cfg: FilterConfig,
    s: FilterState,
    measured_output: float,
    measured_input: float,
    use_hessian: bool = True,
) -> FilterState:
    """Gaussian second-order EKF update.

    The predicted output gains ``tr(Hxx P)/2`` and the innovation variance
    gains ``tr(Hxx P Hxx P)/2``; the latter enters the Joseph form as extra
    measurement noise.
    """
    h = m.output_gradient(s.mean)
    predicted = m.measurement(s.mean, measured_input)
    extra_var = 0.0
    if use_hessian:
        hp = m.output_hessian(s.mean) @ s.covariance
        predicted += 0.5 * np.trace(hp)
        extra_var = 0.5 * np.trace(hp @ hp)
    return _scalar_update(s, h, measured_output - predicted, cfg.r + extra_var)


def sigma_points(mean: np.ndarray, cov: np.ndarray, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric ``2n+1`` sigma set and weights.

    Points are ``mean``, then ``mean + L[:, i]`` for i = 0..n-1, then
    ``mean - L[:, i]``, where ``L`` is the lower Cholesky factor of
    ``(n + kappa) cov``.
    """
    n = len(mean)
    lam = n + kappa
    if lam <= 0:
        raise ValueError("n + kappa must be positive")
    cov = _symmetrize(np.asarray(cov, dtype=float))
    if not cov.any():
        root = np.zeros((n, n))
    else:
        try:
            root = np.linalg.cholesky(lam * cov)
        except np.linalg.LinAlgError:
            jitter = 1e-12 * np.trace(cov) / n
            try:
                root = np.linalg.cholesky(lam * (cov + jitter * np.eye(n)))
            except np.linalg.LinAlgError as exc:
                raise FilterDivergence("covariance has no Cholesky factor") from exc
    points = np.vstack([mean, mean + root.T, mean - root.T])
    weights = np.full(2 * n + 1, 0.5 / lam)
    weights[0] = kappa / lam
    return points, weights


def unscented_transform(points: np.ndarray, weights: np.ndarray, fn) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Propagate sigma points through ``fn``; returns mean, covariance and
    the cross-covariance with the input points."""
    ys = np.array([np.atleast_1d(fn(p)) for p in points], dtype=float)
    y_mean = weights @ ys
    x_mean = weights @ points
    dy = ys - y_mean
    dx = points - x_mean
    cov = (weights[:, None] * dy).T @ dy
    cross = (weights[:, None] * dx).T @ dy
    return y_mean, cov, cross


def update_ukf(
    m: ModelSpec, cfg: FilterConfig, s: FilterState, measured_output: float, measured_input: float
) -> FilterState:
    points, weights = sigma_points(s.mean, s.covariance, cfg.kappa)
    y_mean, y_cov, cross = unscented_transform(
        points, weights, lambda x: m.measurement(x, measured_input)
    )
    var = float(y_cov[0, 0]) + cfg.r
    if not var > 0 or not np.isfinite(var):
        raise FilterDivergence(f"innovation variance {var!r} is not positive")
    k = cross[:, 0] / var
    mean = s.mean + k * (measured_output - float(y_mean[0]))
    cov = s.covariance - var * np.outer(k, k)
    return FilterState(mean, _symmetrize(cov))


UPDATES = {"ekf1": update_ekf1, "ekf2": update_ekf2, "ukf": update_ukf}


def filter_step(
    kind: str,
    m: ModelSpec,
    cfg: FilterConfig,
    s: FilterState,
    measured_output: float,
    measured_input: float,
    previous_input: float | None = None,
) -> FilterState:
    """Predict with ``previous_input`` (skipped when None), then update."""
    if previous_input is not None:
        s = predict(m, cfg, s, previous_input)
    return UPDATES[kind](m, cfg, s, measured_output, measured_input)
