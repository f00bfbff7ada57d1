"""Spectral diagnostics for generated instances: condition number,
incoherence of the singular factors, and Monte-Carlo estimates of the
restricted eigenvalue lower bounds that the completion oracle leans on."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .env import Instance


class ZeroMatrixError(ValueError):
    pass


@dataclass
class AssumptionReport:
    kappa: float
    mu_row: float
    mu_col: float
    alpha_hat: float
    beta_hat: float | None
    beta_warning: bool
    gamma_used: float
    subsets_sampled: int
    tau: float
    rank: int

    def to_text(self) -> str:
        lines = ["[assumption_report]"]
        for name in (
            "kappa",
            "mu_row",
            "mu_col",
            "alpha_hat",
            "beta_hat",
            "gamma_used",
            "tau",
        ):
            value = getattr(self, name)
            lines.append(f"{name} = {'' if value is None else format(value, '.17g')}")
        lines.append(f"beta_warning = {str(self.beta_warning).lower()}")
        lines.append(f"subsets_sampled = {self.subsets_sampled}")
        lines.append(f"rank = {self.rank}")
        return "\n".join(lines) + "\n"


def incoherence_and_condition(
    matrix: np.ndarray, rank_tol: float = 1e-9
) -> tuple[float, float, float]:
    """Condition number and row/column incoherence of the rank-truncated SVD.

    Incoherence is normalized so that mu >= 1, with mu = dim * max_row_norm^2
    of the corresponding singular factor divided by the truncated rank.
    """
    A = np.asarray(matrix, dtype=float)
    if not np.any(A):
        raise ZeroMatrixError("matrix is identically zero")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > rank_tol * s[0]))
    r = max(r, 1)
    kappa = float(s[0] / s[r - 1])
    n, m = A.shape
    mu_row = float(n * np.max(np.sum(U[:, :r] ** 2, axis=1)) / r)
    mu_col = float(m * np.max(np.sum(Vt[:r, :] ** 2, axis=0)) / r)
    return kappa, mu_row, mu_col


def subset_smoothness_estimate(
    V: np.ndarray,
    gamma: float,
    C: int,
    num_subsets: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo upper bound on the restricted eigenvalue constant of the
    column factor: the minimum over sampled size-ceil(gamma*C) row subsets S
    of lambda_min(V_S^T V_S) * M / (gamma * C)."""
    V = np.asarray(V, dtype=float)
    M = V.shape[0]
    size = math.ceil(gamma * C)
    if size > M:
        raise ValueError("gamma * C exceeds the number of rows of V")
    worst = math.inf
    for _ in range(num_subsets):
        S = rng.choice(M, size=size, replace=False)
        gram = V[S].T @ V[S]
        lam_min = float(np.linalg.eigvalsh(gram)[0])
        worst = min(worst, lam_min * M / (gamma * C))
    return max(worst, 0.0)


def cluster_factor_smoothness(
    U: np.ndarray, cluster_of: np.ndarray, tau: float
) -> tuple[float, bool]:
    """Exact minimum over clusters of lambda_min(U_S^T U_S) * C / tau for the
    left factor restricted to each cluster's rows.  Returns (beta_hat,
    rank_deficient_flag); a singular cluster block is expected when the
    within-cluster separation is zero."""
    U = np.asarray(U, dtype=float)
    cluster_of = np.asarray(cluster_of, dtype=int)
    C = U.shape[1]
    beta = math.inf
    deficient = False
    for c in np.unique(cluster_of):
        block = U[cluster_of == c]
        vals = np.linalg.eigvalsh(block.T @ block)
        lam_min, lam_max = float(vals[0]), float(vals[-1])
        if lam_max <= 0 or lam_min < 1e-12 * lam_max:
            deficient = True
        beta = min(beta, max(lam_min, 0.0) * C / tau)
    if deficient:
        warnings.warn("rank-deficient cluster block in the left factor", stacklevel=2)
    return beta, deficient


def cluster_size_ratio(cluster_of: np.ndarray) -> float:
    sizes = np.bincount(np.asarray(cluster_of, dtype=int))
    sizes = sizes[sizes > 0]
    return float(sizes.max() / sizes.min())


def assumption_report(
    instance: Instance,
    gamma: float | None = None,
    num_subsets: int = 200,
    seed: int = 0,
    rank_tol: float = 1e-9,
) -> AssumptionReport:
    """Measure all assumption-related quantities on one instance."""
    X = instance.X
    M = instance.num_arms
    C = instance.num_clusters
    if gamma is None:
        gamma = min(16.0 * math.log(max(M, 2)), float(M)) / C
    kappa, mu_row, mu_col = incoherence_and_condition(X, rank_tol)
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    r = max(1, int(np.sum(s > rank_tol * s[0])))
    V = Vt[:r, :].T
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    alpha_hat = subset_smoothness_estimate(V, gamma, C, num_subsets, rng)
    tau = cluster_size_ratio(instance.cluster_of)
    Up, sp, _ = np.linalg.svd(instance.P, full_matrices=False)
    rp = max(1, int(np.sum(sp > rank_tol * sp[0])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        beta_hat, deficient = cluster_factor_smoothness(
            Up[:, :rp], instance.cluster_of, tau
        )
    return AssumptionReport(
        kappa=kappa,
        mu_row=mu_row,
        mu_col=mu_col,
        alpha_hat=alpha_hat,
        beta_hat=beta_hat,
        beta_warning=deficient,
        gamma_used=gamma,
        subsets_sampled=num_subsets,
        tau=tau,
        rank=r,
    )
