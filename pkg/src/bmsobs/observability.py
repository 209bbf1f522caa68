"""Local observability of the circuit models.

Rows of the observability codistribution are gradients of iterated Lie
derivatives of the output along the drift ``f`` and the input field ``g``.
Three independent routes compute them:

* :func:`lie_gradient_closed_form`: textbook formulas for the original
  and voltage-bias models;
* :func:`lie_gradient`: exact recursion exploiting the model structure
  (linear drift, constant input field, output nonlinear only in the SOC);
* :func:`lie_gradient_numeric`: nested central differences carried out in
  extended precision, used as an oracle.

A word is a sequence over ``{"f", "g"}`` applied left to right: ``("f", "g")``
is ``L_g L_f h``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import gmpy2
import numpy as np

from .augmented import VARIANTS, build_model
from .ecm import ECMParams, ModelSpec, OCVPolynomial

DEFAULT_REL_TOL = 1e-8
DEFAULT_ILL_CONDITIONED = 1e6
ORACLE_PRECISION_BITS = 256


def _check_word(word: Iterable[str]) -> tuple[str, ...]:
    word = tuple(word)
    bad = [w for w in word if w not in ("f", "g")]
    if bad:
        raise ValueError(f"Lie word letters must be 'f' or 'g', got {bad}")
    return word


# -- structured exact recursion ------------------------------------------------


class _LieExpr:
    """``lin.x + const + sum c_ab * s(x)**a * ocv^(b)(z)`` with ``s(x) = A[z].x``."""

    def __init__(self, lin, const, terms):
        self.lin = lin
        self.const = const
        self.terms = terms

    def lie(self, m: ModelSpec, letter: str) -> "_LieExpr":
        a = m.drift_matrix
        g = m.input_vector
        i = m.soc_index
        terms: dict[tuple[int, int], float] = {}
        if letter == "f":
            lin, const = a.T @ self.lin, 0.0
            for (pw, order), c in self.terms.items():
                key = (pw + 1, order + 1)
                terms[key] = terms.get(key, 0.0) + c
        else:
            lin, const = np.zeros_like(self.lin), float(self.lin @ g)
            for (pw, order), c in self.terms.items():
                key = (pw, order + 1)
                terms[key] = terms.get(key, 0.0) + c * g[i]
        return _LieExpr(lin, const, terms)

    def gradient(self, m: ModelSpec, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        i = m.soc_index
        srow = m.drift_matrix[i]
        s = float(srow @ x0)
        z = x0[i]
        grad = np.array(self.lin, dtype=float)
        for (pw, order), c in self.terms.items():
            if pw:
                grad += c * pw * s ** (pw - 1) * m.ocv(z, order) * srow
            grad[i] += c * s**pw * m.ocv(z, order + 1)
        return grad

    def value(self, m: ModelSpec, x0) -> float:
        x0 = np.asarray(x0, dtype=float)
        s = float(m.drift_matrix[m.soc_index] @ x0)
        z = x0[m.soc_index]
        val = float(self.lin @ x0) + self.const
        for (pw, order), c in self.terms.items():
            val += c * s**pw * m.ocv(z, order)
        return val


def _check_structure(m: ModelSpec) -> None:
    srow = m.drift_matrix[m.soc_index]
    if np.any(srow @ m.drift_matrix) or srow @ m.input_vector != 0.0:
        raise ValueError(f"model {m.name!r} lacks the structure the exact Lie recursion relies on")


def _lie_expr(m: ModelSpec, word: Sequence[str]) -> _LieExpr:
    _check_structure(m)
    expr = _LieExpr(np.array(m.output_linear, dtype=float), 0.0, {(0, 0): 1.0})
    for letter in _check_word(word):
        expr = expr.lie(m, letter)
    return expr


def lie_gradient(m: ModelSpec, word: Sequence[str], x0) -> np.ndarray:
    """Exact gradient of the iterated Lie derivative ``word`` at ``x0``."""
    return _lie_expr(m, word).gradient(m, x0)


def lie_derivative(m: ModelSpec, word: Sequence[str], x0) -> float:
    return _lie_expr(m, word).value(m, x0)


# -- textbook closed forms -----------------------------------------------------


def lie_gradient_closed_form(
    variant: str, p: ECMParams, ocv: OCVPolynomial, kind: str, k: int, x0
) -> np.ndarray:
    """Gradient row of ``L_kind^k h`` for a named model variant.

    Original model::

        d L_f^k h = [-1/(-tau1)^k, -1/(-tau2)^k, 0]
        d L_g^k h = [0, 0, ocv^(k+1)(z) / (-q)^k]

    The voltage-bias model appends a zero for ``ve``. The current- and
    dual-bias models have state-dependent rows with no compact formula;
    they are produced by the exact structured recursion.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
    if kind not in ("f", "g"):
        raise ValueError("kind must be 'f' or 'g'")
    if k < 1:
        raise ValueError("k must be >= 1")
    if variant in ("current-bias", "dual-bias"):
        return lie_gradient(build_model(variant, p, ocv), (kind,) * k, x0)
    z = float(np.asarray(x0, dtype=float)[2])
    if kind == "f":
        row = [-1.0 / (-p.tau1) ** k, -1.0 / (-p.tau2) ** k, 0.0]
    else:
        row = [0.0, 0.0, ocv(z, k + 1) / (-p.capacity_q) ** k]
    if variant == "voltage-bias":
        row.append(0.0)
    return np.array(row)


# -- extended-precision finite-difference oracle --------------------------------


def _default_step(depth: int, bits: int) -> float:
    # balances O(h^2) truncation against eps/h^depth round-off of nested differences
    return 2.0 ** (-bits / (depth + 2))


def _nested_fd_gradient(m: ModelSpec, word, x0, step: float, bits: int) -> np.ndarray:
    n = m.state_dim
    with gmpy2.context(gmpy2.get_context(), precision=bits):
        mpf = gmpy2.mpfr
        # plain lists of mpfr: numpy object arrays are several times slower here
        a = [[(j, mpf(float(v))) for j, v in enumerate(row) if v] for row in m.drift_matrix]
        g = [mpf(float(v)) for v in m.input_vector]
        c = [(j, mpf(float(v))) for j, v in enumerate(m.output_linear) if v]
        coeffs = [mpf(v) for v in m.ocv.coefficients[::-1]]
        soc = m.soc_index
        hstep = mpf(step)

        def output(xx):
            acc = coeffs[0]
            for k in coeffs[1:]:
                acc = acc * xx[soc] + k
            for j, cj in c:
                acc = acc + cj * xx[j]
            return acc

        def phi(level, xx):
            if level == 0:
                return output(xx)
            if word[level - 1] == "g":
                # g is constant, so r nested central differences with one step
                # collapse to the binomial stencil on r + 1 points
                r = 1
                while r < level and word[level - 1 - r] == "g":
                    r += 1
                size = max(map(abs, g))
                if size == 0:
                    return mpf(0)
                h = hstep * (1 + max(map(abs, xx))) / size
                acc = mpf(0)
                for i in range(r + 1):
                    shift = (r - 2 * i) * h
                    term = math.comb(r, i) * phi(level - r, [xi + shift * gi for xi, gi in zip(xx, g)])
                    acc = acc - term if i % 2 else acc + term
                return acc / (2 * h) ** r
            vec = [sum((v * xx[j] for j, v in row), mpf(0)) for row in a]
            size = max(map(abs, vec))
            if size == 0:
                return mpf(0)
            h = hstep * (1 + max(map(abs, xx))) / size
            up = [xi + h * vi for xi, vi in zip(xx, vec)]
            dn = [xi - h * vi for xi, vi in zip(xx, vec)]
            return (phi(level - 1, up) - phi(level - 1, dn)) / (2 * h)

        x = [mpf(float(v)) for v in x0]
        depth = len(word)
        grad = np.empty(n)
        for j in range(n):
            h = hstep * (1 + abs(x[j]))
            up, dn = list(x), list(x)
            up[j] += h
            dn[j] -= h
            grad[j] = float((phi(depth, up) - phi(depth, dn)) / (2 * h))
    return grad


def lie_gradient_numeric(
    m: ModelSpec,
    word: Sequence[str],
    x0,
    step: float | None = None,
    precision: int = ORACLE_PRECISION_BITS,
    check: bool = True,
) -> np.ndarray:
    """Gradient of ``L_word h`` at ``x0`` by nested central differences.

    Each Lie derivative is a directional central difference along the vector
    field (runs along the constant input field use the equivalent binomial
    stencil); the final gradient is a coordinate-wise central difference with
    half-width ``step * (1 + |x_i|)``. Arithmetic is done at ``precision``
    bits so that up to five nested differences stay accurate. With ``check``
    the result is compared against a run at twice the step and a
    ``RuntimeWarning`` is issued when the estimated truncation error
    exceeds 1e-4 relative.
    """
    word = _check_word(word)
    if step is None:
        step = _default_step(len(word) + 1, precision)
    if step <= 0:
        raise ValueError("step must be positive")
    grad = _nested_fd_gradient(m, word, x0, step, precision)
    if check:
        coarse = _nested_fd_gradient(m, word, x0, 2 * step, precision)
        scale = np.linalg.norm(grad)
        err = np.linalg.norm(coarse - grad) / 3.0
        if err > 1e-4 * scale:
            warnings.warn(
                f"finite-difference Lie gradient for word {''.join(word) or 'h'} has estimated "
                f"relative error {err / scale if scale else math.inf:.2e}",
                RuntimeWarning,
                stacklevel=2,
            )
    return grad


# -- codistribution and rank test ---------------------------------------------------


def _word_label(word: Sequence[str]) -> str:
    if not word:
        return "dh"
    if len(set(word)) == 1:
        return f"dL_{word[0]}^{len(word)} h"
    return "d" + "".join(f"L_{c}" for c in reversed(word)) + " h"


@dataclass
class Codistribution:
    rows: np.ndarray
    labels: tuple[str, ...]
    evaluation_point: np.ndarray
    notes: tuple[str, ...] = ()

    def row(self, label: str) -> np.ndarray:
        return self.rows[self.labels.index(label)]

    def subset(self, labels: Sequence[str]) -> "Codistribution":
        idx = [self.labels.index(lab) for lab in labels]
        return Codistribution(self.rows[idx], tuple(labels), self.evaluation_point, self.notes)


def assemble_codistribution(m: ModelSpec, x0, max_order: int | None = None) -> Codistribution:
    """Rows ``dh, dL_f h, dL_g h, dL_f^2 h, dL_g^2 h, ...`` up to ``max_order``.

    ``max_order`` defaults to the OCV degree (past which every ``L_g^k`` row
    vanishes) or the state dimension, whichever is larger. Mixed f/g words
    are left out.
    """
    if max_order is None:
        max_order = max(m.ocv.degree, m.state_dim)
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    expr_f = expr_g = _lie_expr(m, ())
    rows = [expr_f.gradient(m, x0)]
    labels = ["dh"]
    for k in range(1, max_order + 1):
        expr_f = expr_f.lie(m, "f")
        expr_g = expr_g.lie(m, "g")
        rows += [expr_f.gradient(m, x0), expr_g.gradient(m, x0)]
        labels += [_word_label("f" * k), _word_label("g" * k)]
    return Codistribution(
        rows=np.array(rows),
        labels=tuple(labels),
        evaluation_point=np.array(x0, dtype=float),
        notes=("mixed f/g Lie words omitted",),
    )


@dataclass
class RankReport:
    numeric_rank: int
    singular_values: np.ndarray
    condition_number: float
    verdict: str  # "observable" | "ill-conditioned" | "rank-deficient"
    normalization: str
    dropped_rows: tuple[str, ...] = ()
    explanation: str = ""
    state_dim: int = 0

    @property
    def full_rank(self) -> bool:
        return self.numeric_rank == self.state_dim


def _rank_report(rows, labels, n, rel_tol, ill_conditioned, zero_tol) -> RankReport:
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    norms = np.linalg.norm(rows, axis=1)
    keep = norms > zero_tol
    dropped = tuple(lab for lab, k in zip(labels, keep) if not k)
    normalization = "rows scaled to unit Euclidean norm; zero rows dropped"
    if keep.sum() == 0:
        return RankReport(0, np.zeros(0), math.inf, "rank-deficient", normalization, dropped,
                          "all rows vanish", n)
    unit = rows[keep] / norms[keep, None]
    sv = np.linalg.svd(unit, compute_uv=False)
    rank = int(np.sum(sv >= rel_tol * sv[0]))
    smallest = sv[n - 1] if len(sv) >= n else 0.0
    cond = sv[0] / smallest if smallest > 0 else math.inf
    if keep.sum() < n:
        verdict = "rank-deficient"
        explanation = f"only {int(keep.sum())} nonzero rows for {n} states"
    elif rank < n:
        verdict = "rank-deficient"
        explanation = f"numeric rank {rank} < {n}"
    elif cond > ill_conditioned:
        verdict = "ill-conditioned"
        explanation = f"full rank but condition number {cond:.3g} > {ill_conditioned:.3g}"
    else:
        verdict = "observable"
        explanation = f"{n} linearly independent rows"
    return RankReport(rank, sv, cond, verdict, normalization, dropped, explanation, n)


def rank_test(
    c: Codistribution,
    n: int | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    ill_conditioned: float = DEFAULT_ILL_CONDITIONED,
    zero_tol: float = 0.0,
) -> RankReport:
    """Numeric rank of the unit-normalised codistribution rows.

    Rank counts singular values at or above ``rel_tol * sigma_max``. The
    condition number is ``sigma_max / sigma_n``. A full-rank set whose
    condition number exceeds ``ill_conditioned`` is reported as such rather
    than folded into rank deficiency.
    """
    if n is None:
        n = c.rows.shape[1]
    return _rank_report(c.rows, c.labels, n, rel_tol, ill_conditioned, zero_tol)


def linearized_observability(
    m: ModelSpec,
    x0,
    rel_tol: float = DEFAULT_REL_TOL,
    ill_conditioned: float = DEFAULT_ILL_CONDITIONED,
) -> tuple[RankReport, np.ndarray]:
    """Kalman observability matrix ``[C; CA; ...; CA^(n-1)]`` of the model
    linearised at ``x0``, with its rank report."""
    a = m.drift_jacobian(x0)
    row = m.output_gradient(x0)
    stack = []
    for _ in range(m.state_dim):
        stack.append(row)
        row = row @ a
    stack = np.array(stack)
    labels = ["C"] + [f"CA^{k}" for k in range(1, m.state_dim)]
    return _rank_report(stack, labels, m.state_dim, rel_tol, ill_conditioned, 0.0), stack


# -- grid sweeps ----------------------------------------------------------------------

SWEEP_COLUMNS = ("z", "nonlinear_rank", "cond_number", "linearized_rank", "verdict")


@dataclass(frozen=True)
class SweepRow:
    z: float
    nonlinear_rank: int
    cond_number: float
    linearized_rank: int
    verdict: str


def grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive grid ``start, start+step, ..., stop`` without float drift."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def condition_sweep(
    variant: str,
    p: ECMParams,
    ocv: OCVPolynomial,
    z_grid: Iterable[float],
    max_order: int | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    ill_conditioned: float = DEFAULT_ILL_CONDITIONED,
    base_state: Sequence[float] | None = None,
) -> list[SweepRow]:
    """Nonlinear and linearised rank at each SOC of ``z_grid``.

    Other state components are taken from ``base_state`` (zeros by default).
    """
    m = build_model(variant, p, ocv)
    base = np.zeros(m.state_dim) if base_state is None else np.array(base_state, dtype=float)
    rows = []
    for z in z_grid:
        if not 0.0 <= z <= 1.0:
            raise ValueError(f"grid point {z} outside [0, 1]")
        x0 = base.copy()
        x0[m.soc_index] = z
        rep = rank_test(assemble_codistribution(m, x0, max_order), m.state_dim, rel_tol, ill_conditioned)
        lin, _ = linearized_observability(m, x0, rel_tol, ill_conditioned)
        rows.append(SweepRow(float(z), rep.numeric_rank, rep.condition_number, lin.numeric_rank, rep.verdict))
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], out) -> None:
    """Write sweep rows to a path or text stream."""
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            write_sweep_csv(rows, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r.z), r.nonlinear_rank, repr(float(r.cond_number)), r.linearized_rank, r.verdict])


def read_sweep_csv(src) -> list[SweepRow]:
    if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__"):
        with open(src, newline="") as fh:
            return read_sweep_csv(fh)
    reader = csv.DictReader(src)
    if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
        raise ValueError(f"unexpected sweep header {reader.fieldnames}")
    return [
        SweepRow(float(r["z"]), int(r["nonlinear_rank"]), float(r["cond_number"]),
                 int(r["linearized_rank"]), r["verdict"])
        for r in reader
    ]


def sweep_to_csv_text(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    write_sweep_csv(rows, buf)
    return buf.getvalue()
