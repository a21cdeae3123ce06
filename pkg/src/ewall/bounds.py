"""Closed-form rates, learning rates and regret/risk bound evaluators.

All logarithms are natural.  Bounds over a finite representation set are
evaluated at Dirac aggregation measures and minimized over the set, so each
report also names the minimizing representation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ewall.core import InputError, TaskDataset


@dataclass
class BoundReport:
    """A bound value together with the additive components it is made of."""

    name: str
    components: dict
    entries: dict = field(default_factory=dict)
    argmin: Optional[int] = None

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    def as_rows(self) -> list[tuple[str, float]]:
        rows = [(f"{self.name}.{k}", float(v)) for k, v in self.components.items()]
        rows.append((f"{self.name}.total", self.total))
        rows += [(k, float(v)) for k, v in self.entries.items()]
        if self.argmin is not None:
            rows.append((f"{self.name}.argmin", float(self.argmin)))
        return rows


def _positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise InputError(f"{name} must be positive, got {v}")


# --------------------------------------------------------------------------
# within-task rates


def beta_oga(B: float, L: float, m: int) -> float:
    """B L sqrt(2/m)."""
    if m < 1:
        raise InputError("m must be >= 1")
    _positive(B=B, L=L)
    return B * L * math.sqrt(2.0 / m)


def beta_ewa(zeta0: float, class_size: int, m: int) -> float:
    """zeta_0 ln|H| / m, the rate as stated for exp-concave EWA.

    See :func:`beta_ewa_expconcave` for the regret guarantee of the
    exp-concave aggregation argument, which scales as ``1/zeta_0``.
    """
    if class_size < 1 or m < 1:
        raise InputError("class_size and m must be >= 1")
    _positive(zeta0=zeta0)
    return zeta0 * math.log(class_size) / m


def beta_ewa_expconcave(zeta0: float, class_size: int, m: int) -> float:
    """ln|H| / (zeta_0 m): normalized regret of EWA run at rate zeta_0 on a
    zeta_0-exp-concave loss."""
    if class_size < 1 or m < 1:
        raise InputError("class_size and m must be >= 1")
    _positive(zeta0=zeta0)
    return math.log(class_size) / (zeta0 * m)


def beta_oga_lambda(B: float, L: float, m: int, K: int, Lambda: float) -> float:
    """2 B L sqrt(2 K Lambda / m)."""
    if m < 1 or K < 1:
        raise InputError("m and K must be >= 1")
    if Lambda < 0:
        raise InputError("Lambda must be nonnegative")
    _positive(B=B, L=L)
    return 2.0 * B * L * math.sqrt(2.0 * K * Lambda / m)


# --------------------------------------------------------------------------
# meta learning rates


def eta_finite(C: float, K: int, T: int) -> float:
    """(2/C) sqrt(2 ln K / T); zero (with a warning) when K = 1."""
    _positive(C=C, T=T)
    if K < 1:
        raise InputError("K must be >= 1")
    if K == 1:
        warnings.warn("K = 1: eta_finite is 0 (log 1 = 0)", RuntimeWarning, stacklevel=2)
        return 0.0
    return (2.0 / C) * math.sqrt(2.0 * math.log(K) / T)


def eta_dictionary(C: float, K: int, d: int, T: int) -> float:
    """(2/C) sqrt(K d / T)."""
    _positive(C=C, K=K, d=d, T=T)
    return (2.0 / C) * math.sqrt(K * d / T)


def mc_hoeffding_term(C: float, T: int, delta: float, N: int) -> float:
    """C sqrt(ln(T/delta) / (2N)), the price of N Monte-Carlo draws."""
    _positive(C=C, T=T, N=N)
    if not 0 < delta < 1:
        raise InputError("delta must lie in (0, 1)")
    return C * math.sqrt(math.log(T / delta) / (2.0 * N))


# --------------------------------------------------------------------------
# largest eigenvalue of the empirical second moment


def second_moment(task_or_X) -> np.ndarray:
    X = task_or_X.X if isinstance(task_or_X, TaskDataset) else np.asarray(task_or_X, float)
    return X.T @ X / X.shape[0]


def _power_from(M, v, tol, max_iter):
    w = M @ v
    rho = float(v @ w)
    for _ in range(max_iter):
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        w = M @ v
        rho = float(v @ w)
        if np.linalg.norm(w - rho * v) <= tol * abs(rho):
            break
    return rho


def power_iteration(M: np.ndarray, tol: float = 1e-10, max_iter: int = 1_000_000
                    ) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Iterates from the all-ones direction and from every coordinate vector and
    keeps the largest Rayleigh quotient, so a start orthogonal to the top
    eigenvector cannot settle on a smaller eigenvalue.  Each run stops once
    the eigen-residual ``||Mv - rho v||`` is below ``tol * rho``, which bounds
    the eigenvalue error by the same amount.
    """
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    scale = np.max(np.abs(M)) if M.size else 0.0
    if scale == 0.0:
        return 0.0
    starts = [np.ones(d) / math.sqrt(d)] + [np.eye(d)[j] for j in range(d)]
    best = 0.0
    for v in starts:
        if np.linalg.norm(M @ v) <= 1e-14 * scale:
            continue
        best = max(best, _power_from(M, v, tol, max_iter))
    return best


def lambda_max_gram(task: TaskDataset) -> float:
    """lambda_max((1/m) sum x x^T) by power iteration."""
    return power_iteration(second_moment(task))


# --------------------------------------------------------------------------
# theorem right-hand sides


def _dirac_terms(prior, K, eta, T, C):
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=float)
    if prior.shape != (K,):
        raise InputError("prior length must equal K")
    with np.errstate(divide="ignore"):
        kl = -np.log(prior)
    if not eta > 0:
        raise InputError("eta must be positive")
    return eta * C * C / 8.0, kl / (eta * T)


def _column_means(matrix, K=None):
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if K is not None and arr.shape[1] != K:
        raise InputError(f"expected {K} columns, got {arr.shape[1]}")
    return arr.mean(axis=0)


def _beta_vector(beta_per_g, K):
    beta = np.asarray(beta_per_g, dtype=float)
    if beta.ndim == 0:
        beta = np.full(K, float(beta))
    if beta.ndim == 2:
        beta = beta.mean(axis=0)
    if beta.shape != (K,):
        raise InputError("beta_per_g must have one entry per representation")
    return beta


def theorem2_rhs(comparator_per_g, beta_per_g, C: float, K: int, T: int,
                 eta: Optional[float] = None) -> BoundReport:
    """min_k [mean_t comparator + beta_k] + C sqrt(ln K / (2T))."""
    comp = _column_means(comparator_per_g, K)
    beta = _beta_vector(beta_per_g, K)
    vals = comp + beta
    k = int(np.argmin(vals))
    entries = {"eta": eta if eta is not None else (eta_finite(C, K, T) if K > 1 else 0.0)}
    return BoundReport(
        "theorem2",
        {"comparator": comp[k], "beta": beta[k],
         "meta_rate": C * math.sqrt(math.log(K) / (2.0 * T))},
        entries, k)


def theorem1_rhs_dirac(comparator_per_g, beta_per_g, C: float, T: int, eta: float,
                       prior=None) -> BoundReport:
    """min_k comparator_k + beta_k + eta C^2/8 + (-ln prior_k)/(eta T)."""
    comp = _column_means(comparator_per_g)
    K = comp.size
    beta = _beta_vector(beta_per_g, K)
    hoeff, kl = _dirac_terms(prior, K, eta, T, C)
    vals = comp + beta + kl
    k = int(np.argmin(vals))
    return BoundReport(
        "theorem1",
        {"comparator": comp[k], "beta": beta[k], "eta_term": hoeff, "kl_term": kl[k]},
        {"eta": eta}, k)


def kl_divergence(rho, prior) -> float:
    rho = np.asarray(rho, dtype=float)
    prior = np.asarray(prior, dtype=float)
    mask = rho > 0
    if np.any(prior[mask] == 0):
        return math.inf
    return float(np.sum(rho[mask] * np.log(rho[mask] / prior[mask])))


def theorem1_objective(comparator_per_g, beta_per_g, C: float, T: int, eta: float,
                       prior, rho) -> BoundReport:
    """The aggregated-bound objective at a discrete aggregation measure rho."""
    comp = _column_means(comparator_per_g)
    K = comp.size
    beta = _beta_vector(beta_per_g, K)
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (K,) or np.any(rho < 0) or abs(rho.sum() - 1) > 1e-12:
        raise InputError("rho must be a probability vector over the K representations")
    return BoundReport(
        "theorem1_rho",
        {"comparator": float(rho @ comp), "beta": float(rho @ beta),
         "eta_term": eta * C * C / 8.0,
         "kl_term": kl_divergence(rho, prior) / (eta * T)},
        {"eta": eta})


def theorem3_rhs(comparator: float, C: float, K: int, d: int, T: int, beta_m: float,
                 B: float, Phi: float, lambda_bar: float) -> BoundReport:
    """comparator + (C/4) sqrt(Kd/T)(ln T + 7) + beta(m) + B Phi sqrt(lambda_bar / T)."""
    _positive(C=C, K=K, d=d, T=T)
    if lambda_bar < 0:
        raise InputError("lambda_bar must be nonnegative")
    return BoundReport(
        "theorem3",
        {"comparator": float(comparator),
         "meta_rate": (C / 4.0) * math.sqrt(K * d / T) * (math.log(T) + 7.0),
         "beta": float(beta_m),
         "lambda_term": B * Phi * math.sqrt(lambda_bar) / math.sqrt(T)},
        {"eta": eta_dictionary(C, K, d, T)})


def theorem6_rhs(comparator_per_g, delta_per_g_t, C: float, T: int, eta: float,
                 prior=None) -> BoundReport:
    """min_k comparator_k + (4/T) sum_t delta_{t,k} + eta C^2/8 + (-ln prior_k)/(eta T)."""
    comp = _column_means(comparator_per_g)
    K = comp.size
    delta = np.asarray(delta_per_g_t, dtype=float)
    if delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape[1] != K:
        raise InputError("delta matrix must have one column per representation")
    width = 4.0 * delta.sum(axis=0) / T
    hoeff, kl = _dirac_terms(prior, K, eta, T, C)
    vals = comp + width + kl
    k = int(np.argmin(vals))
    return BoundReport(
        "theorem6",
        {"comparator": comp[k], "delta_term": width[k], "eta_term": hoeff,
         "kl_term": kl[k]},
        {"eta": eta}, k)


def configuration_report(*, C: float, K: int, d: int, T: int, m: int, B: float,
                         L: float, Phi: float, zeta0: Optional[float] = None,
                         class_size: Optional[int] = None,
                         Lambda: Optional[float] = None, n_mc: Optional[int] = None,
                         delta_conf: float = 0.05, vc_dim: Optional[int] = None
                         ) -> BoundReport:
    """All closed-form quantities for one configuration, for display."""
    from ewall.batch import vc_delta

    entries = {
        "eta_finite": eta_finite(C, K, T) if K > 1 else 0.0,
        "eta_dictionary": eta_dictionary(C, K, d, T),
        "beta_oga": beta_oga(B, L, m),
        "oga_default_step": B / (L * math.sqrt(2 * m)),
    }
    if zeta0 is not None and class_size is not None:
        entries["beta_ewa"] = beta_ewa(zeta0, class_size, m)
        entries["beta_ewa_expconcave"] = beta_ewa_expconcave(zeta0, class_size, m)
    if Lambda is not None:
        entries["beta_oga_lambda"] = beta_oga_lambda(B, L, m, K, Lambda)
    if n_mc is not None:
        entries["mc_hoeffding_term"] = mc_hoeffding_term(C, T, delta_conf, n_mc)
    if vc_dim is not None:
        entries["vc_delta"] = vc_delta(vc_dim, m, delta_conf / T)
    rate = theorem3_rhs(0.0, C, K, d, T, Phi * B * math.sqrt(2 * K / m), B, Phi, 1.0)
    return BoundReport("theorem3_rate", rate.components, entries)
