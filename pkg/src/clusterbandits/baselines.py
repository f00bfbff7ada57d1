"""Comparison policies: independent per-user UCB, explore-then-commit on one
matrix-completion estimate, and a simplified phased policy that pulls
uniformly inside active arm sets and clusters users with k-means at phase
boundaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .completion import OracleParams, low_rank_matrix_estimate, solve_nuclear_norm
from .env import Environment, Instance, NoiseModel, RunHistory
from .lattice import PhaseRecord, PhaseTrace, UcbArmState


def run_per_user_ucb(
    instance: Instance,
    horizon: int,
    sigma: float,
    seed,
    noise: NoiseModel | None = None,
) -> RunHistory:
    """Every user runs an independent UCB over the full arm set."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_ss, _ = root.spawn(2)
    env = Environment(instance, noise, env_ss, horizon)
    arms = np.arange(instance.num_arms)
    states = [UcbArmState(arms, sigma, max(2, horizon)) for _ in range(instance.num_users)]
    while not env.done:
        u = env.peek_user()
        state = states[u]
        arm = state.select()
        _, _, reward = env.play(arm)
        state.update(arm, reward)
    return env.history.trimmed()


@dataclass
class EtcConfig:
    """Oracle knobs for the explore phase of explore-then-commit."""

    num_clusters: int
    sigma: float
    mu: float = 1.0
    c_p: float = 1.0
    c_lambda: float = 2.5
    b: int = 1
    f: int = 1
    solver_tol: float = 1e-6
    solver_max_iters: int = 500


def run_explore_then_commit(
    instance: Instance,
    horizon: int,
    explore_fraction: float,
    config: EtcConfig,
    seed,
    noise: NoiseModel | None = None,
) -> RunHistory:
    """Spend a fixed budget collecting one full-matrix estimate, then play
    each user's estimated best arm forever."""
    if not 0 < explore_fraction < 1:
        raise ValueError("explore_fraction must lie in (0, 1)")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_ss, algo_ss = root.spawn(2)
    env = Environment(instance, noise, env_ss, horizon)
    explore_rounds = int(explore_fraction * horizon)
    d2 = min(instance.num_users, instance.num_arms)
    logd = math.log(max(d2, 2))
    p = min(1.0, config.c_p * config.mu**2 * logd**3 / d2)
    lam = config.c_lambda * (config.sigma / math.sqrt(config.b)) * math.sqrt(d2 * p)
    params = OracleParams(
        p=p,
        b=config.b,
        f=config.f,
        lam=max(lam, 1e-3),
        r=config.num_clusters,
        mu=config.mu,
        sigma=config.sigma,
        zeta=1.0,
    )
    est = low_rank_matrix_estimate(
        env,
        np.arange(instance.num_users),
        np.arange(instance.num_arms),
        params,
        budget=explore_rounds,
        seed=algo_ss.spawn(1)[0],
    )
    # leftover exploration budget (estimate finished early) stays exploration:
    # uniform arms, independent of the estimate
    filler_rng = np.random.default_rng(algo_ss.spawn(1)[0])
    while env.t < explore_rounds and not env.done:
        env.play(int(filler_rng.integers(instance.num_arms)))
    commit_arm = np.argmax(est.values, axis=1)
    while not env.done:
        env.play(int(commit_arm[env.peek_user()]))
    return env.history.trimmed()


def _kmeans_once(rows: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> tuple[np.ndarray, float]:
    n = len(rows)
    # k-means++ seeding
    centers = np.empty((k, rows.shape[1]))
    centers[0] = rows[rng.integers(n)]
    d2 = np.sum((rows - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = rows[rng.integers(n)]
        else:
            centers[j] = rows[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((rows - centers[j]) ** 2, axis=1))
    labels = None
    for _ in range(iters):
        dists = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dists, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = rows[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    dists = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    objective = float(dists[np.arange(n), labels].sum())
    return labels, objective


def kmeans_elbow(
    rows: np.ndarray,
    max_k: int,
    elbow_ratio: float,
    objective_floor: float,
    seed,
    restarts: int = 10,
    iters: int = 100,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, choosing k by the elbow rule:
    grow k while the objective keeps dropping by at least `elbow_ratio` and
    stays above `objective_floor`."""
    rows = np.asarray(rows, dtype=float)
    if len(rows) == 0 or max_k < 1:
        raise ValueError("rows must be nonempty and max_k >= 1")
    rng = np.random.default_rng(
        seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    )
    max_k = min(max_k, len(rows))

    def best_of(k: int) -> tuple[np.ndarray, float]:
        best = None
        for _ in range(restarts):
            labels, obj = _kmeans_once(rows, k, rng, iters)
            if best is None or obj < best[1]:
                best = (labels, obj)
        return best

    labels, obj = best_of(1)
    k = 1
    while k < max_k and obj > objective_floor:
        nxt_labels, nxt_obj = best_of(k + 1)
        if nxt_obj >= elbow_ratio * obj:
            break
        k += 1
        labels, obj = nxt_labels, nxt_obj
    return labels


@dataclass
class SimplifiedConfig:
    """Schedule and elimination knobs for the simplified phased policy.

    Phase lengths grow linearly (or come from an explicit list); the
    per-phase reward-gap slack is p_inf * nu_scale / nu_base**phase, and the
    nuclear-norm regularizer is lam_coeff * sqrt(phase_length / lam_denom).
    """

    num_clusters: int
    sigma: float
    L: int = 5
    rho: float = 0.5
    phase_base: int = 1500
    phase_step: int = 500
    phase_lengths: list[int] | None = None
    nu_scale: float = 1.0 / 6.0
    nu_base: float = 8.0
    lam_coeff: float = 5.0
    lam_denom: float = 200.0
    elbow_ratio: float = 0.6
    objective_floor: float = 100.0
    kmeans_restarts: int = 10
    kmeans_iters: int = 100
    p_inf_mode: str = "ground_truth"  # or "observed"
    solver_tol: float = 1e-5
    solver_max_iters: int = 300

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.p_inf_mode not in ("ground_truth", "observed"):
            raise ValueError("p_inf_mode must be 'ground_truth' or 'observed'")

    def schedule(self, horizon: int) -> list[int]:
        if self.phase_lengths is not None:
            out, total = [], 0
            for length in self.phase_lengths:
                if total >= horizon:
                    break
                out.append(min(length, horizon - total))
                total += out[-1]
            return out
        out, total, ell = [], 0, 0
        while total < horizon:
            length = min(self.phase_base + self.phase_step * ell, horizon - total)
            out.append(length)
            total += length
            ell += 1
        return out

    def nu(self, ell: int, p_inf: float) -> float:
        return p_inf * self.nu_scale / self.nu_base**ell

    def lam(self, phase_length: int) -> float:
        return self.lam_coeff * math.sqrt(phase_length / self.lam_denom)


def run_simplified_lattice(
    instance: Instance,
    config: SimplifiedConfig,
    horizon: int,
    seed,
    noise: NoiseModel | None = None,
) -> tuple[RunHistory, PhaseTrace]:
    """Fixed-schedule variant: uniform pulls inside active sets, one
    nuclear-norm solve per set at each phase end, k-means splits during the
    first L phases and fraction-approved arm shrinking afterwards."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_ss, algo_ss = root.spawn(2)
    env = Environment(instance, noise, env_ss, horizon)
    rng = np.random.default_rng(algo_ss.spawn(1)[0])
    kmeans_ss = algo_ss.spawn(1)[0]
    num_users, num_arms = instance.num_users, instance.num_arms

    user_sets: list[list[int]] = [list(range(num_users))]
    arm_sets: list[np.ndarray] = [np.arange(num_arms)]
    trace = PhaseTrace(has_mode=False)
    observed_max = 0.0
    # observation means accumulate across phases; per-phase-only fills leave
    # the spectrum below the scheduled regularizer and the solves collapse
    sums = np.zeros((num_users, num_arms))
    counts = np.zeros((num_users, num_arms), dtype=np.int64)

    for ell, length in enumerate(config.schedule(horizon), start=1):
        set_of = np.zeros(num_users, dtype=int)
        for i, us in enumerate(user_sets):
            set_of[us] = i
        for _ in range(length):
            u = env.peek_user()
            arms = arm_sets[set_of[u]]
            arm = int(arms[rng.integers(len(arms))])
            _, _, reward = env.play(arm)
            sums[u, arm] += reward
            counts[u, arm] += 1
            if abs(reward) > observed_max:
                observed_max = abs(reward)

        p_inf = (
            float(np.max(np.abs(instance.P)))
            if config.p_inf_mode == "ground_truth"
            else max(observed_max, 1e-12)
        )
        nu_ell = config.nu(ell, p_inf)
        lam_ell = config.lam(length)
        new_users: list[list[int]] = []
        new_arms: list[np.ndarray] = []
        for i, (us, arms) in enumerate(zip(user_sets, arm_sets)):
            us_arr = np.asarray(us, dtype=int)
            sub_counts = counts[np.ix_(us_arr, arms)]
            obs_rows, obs_cols = np.nonzero(sub_counts)
            if len(obs_rows) == 0:
                new_users.append(list(us))
                new_arms.append(arms)
                continue
            obs_vals = sums[np.ix_(us_arr, arms)][obs_rows, obs_cols] / sub_counts[obs_rows, obs_cols]
            estimate, _ = solve_nuclear_norm(
                obs_vals,
                (obs_rows, obs_cols),
                (len(us_arr), len(arms)),
                lam_ell,
                tol=config.solver_tol,
                max_iters=config.solver_max_iters,
            )
            if ell <= config.L:
                labels = kmeans_elbow(
                    estimate,
                    max_k=config.num_clusters,
                    elbow_ratio=config.elbow_ratio,
                    objective_floor=config.objective_floor,
                    seed=kmeans_ss.spawn(1)[0],
                    restarts=config.kmeans_restarts,
                    iters=config.kmeans_iters,
                )
                for lab in np.unique(labels):
                    members = np.flatnonzero(labels == lab)
                    row_max = estimate[members].max(axis=1)
                    near = np.abs(estimate[members] - row_max[:, None]) <= nu_ell
                    keep = np.flatnonzero(near.any(axis=0))
                    new_users.append([int(us_arr[m]) for m in members])
                    new_arms.append(arms[keep])
            else:
                row_max = estimate.max(axis=1)
                near = np.abs(estimate - row_max[:, None]) <= nu_ell
                approvals = near.sum(axis=0)
                keep = np.flatnonzero(approvals >= config.rho * len(us_arr))
                if len(keep) == 0:
                    keep = np.flatnonzero(approvals == approvals.max())
                new_users.append(list(us))
                new_arms.append(arms[keep])
        user_sets, arm_sets = new_users, new_arms
        trace.append(
            PhaseRecord(
                phase=ell,
                delta=nu_ell,
                mode="kmeans" if ell <= config.L else "shrink",
                user_sets=[list(s) for s in user_sets],
                arm_sets=[list(map(int, a)) for a in arm_sets],
                rounds_used=length,
                num_ucb_users=0,
            )
        )

    # any rounds past the configured schedule keep pulling in the final sets
    set_of = np.zeros(num_users, dtype=int)
    for i, us in enumerate(user_sets):
        set_of[us] = i
    while not env.done:
        u = env.peek_user()
        arms = arm_sets[set_of[u]]
        env.play(int(arms[rng.integers(len(arms))]))
    return env.history.trimmed(), trace
