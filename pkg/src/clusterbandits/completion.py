"""Offline low-rank matrix completion driven by bandit rounds.

The estimator observes a Bernoulli-sampled subset of (user, arm) cells, each
averaged over `b` repeated pulls to reduce variance, completes the matrix by
nuclear-norm regularized least squares (soft-impute), and boosts the success
probability by taking an entrywise median over `f` independent estimates.
Because users arrive randomly one per round, collection is a stateful pass
over the mask: whenever a masked user arrives we pull one of their pending
masked arms, otherwise a throwaway arm outside the mask.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class InsufficientBudgetError(RuntimeError):
    """Not even one repetition of the estimator finished within the budget."""


@dataclass(frozen=True)
class OracleParams:
    p: float
    b: int
    f: int
    lam: float
    r: int
    mu: float
    sigma: float
    zeta: float

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("sampling probability must lie in (0, 1]")
        if self.b < 1 or self.f < 1 or self.lam < 0:
            raise ValueError("b, f must be >= 1 and lam >= 0")


NOISELESS_LAMBDA = 1e-3  # lam formula degenerates to 0 at sigma=0; keep solves coupled


def derive_oracle_params(
    U_size: int,
    V_size: int,
    C: int,
    mu: float,
    sigma: float,
    zeta: float,
    T: int,
    c_p: float = 1.0,
    c_b: float = 1.0,
    c_lambda: float = 2.5,
    f_cap: int = 15,
) -> OracleParams:
    """Sampling probability, repetition counts, and regularizer for a target
    entrywise error `zeta` on a |U| x |V| submatrix of rank <= C."""
    if min(U_size, V_size, C, T) <= 0 or mu <= 0 or sigma < 0 or zeta <= 0:
        raise ValueError("all size inputs must be positive, sigma nonnegative, zeta positive")
    d2 = min(U_size, V_size)
    logd = math.log(max(d2, 2))
    p = min(1.0, c_p * mu**2 * logd**3 / d2)
    if sigma == 0:
        b = 1
    else:
        b = max(1, math.ceil((c_b * sigma * C * math.sqrt(mu) / (zeta * logd)) ** 2))
    f = min(f_cap, max(1, math.ceil(math.log(U_size * V_size * T))))
    sigma_eff = sigma / math.sqrt(b)
    lam = c_lambda * sigma_eff * math.sqrt(d2 * p)
    if lam == 0.0:
        lam = NOISELESS_LAMBDA
    return OracleParams(p=p, b=b, f=f, lam=lam, r=C, mu=mu, sigma=sigma, zeta=zeta)


@dataclass
class Mask:
    """Bernoulli sample of cells from rows x cols; indices are local."""

    rows: np.ndarray  # global user ids
    cols: np.ndarray  # global arm ids
    entry_row: np.ndarray  # local row index per masked cell
    entry_col: np.ndarray  # local col index per masked cell

    def __len__(self) -> int:
        return len(self.entry_row)

    @property
    def omega(self) -> set[tuple[int, int]]:
        """Masked cells as global (user, arm) pairs."""
        return {
            (int(self.rows[i]), int(self.cols[j]))
            for i, j in zip(self.entry_row, self.entry_col)
        }


def sample_mask(users, arms, p: float, rng: np.random.Generator) -> Mask:
    """Include each (user, arm) cell independently with probability p."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    users = np.asarray(users, dtype=int)
    arms = np.asarray(arms, dtype=int)
    grid = rng.random((len(users), len(arms))) < p
    entry_row, entry_col = np.nonzero(grid)
    return Mask(users, arms, entry_row, entry_col)


class ObservationBuffer:
    """Running sums and counts for every masked cell, target count b."""

    def __init__(self, mask: Mask, b: int):
        self.mask = mask
        self.b = b
        self.sums = np.zeros(len(mask))
        self.counts = np.zeros(len(mask), dtype=int)

    @property
    def complete(self) -> bool:
        return bool(np.all(self.counts >= self.b))

    def count_of(self, user: int, arm: int) -> int:
        idx = self._entry_index(user, arm)
        return int(self.counts[idx])

    def averaged_of(self, user: int, arm: int) -> float:
        idx = self._entry_index(user, arm)
        if self.counts[idx] == 0:
            raise KeyError("no observations for this cell")
        return float(self.sums[idx] / self.counts[idx])

    def _entry_index(self, user: int, arm: int) -> int:
        m = self.mask
        i = int(np.flatnonzero(m.rows == user)[0])
        j = int(np.flatnonzero(m.cols == arm)[0])
        hits = np.flatnonzero((m.entry_row == i) & (m.entry_col == j))
        if len(hits) == 0:
            raise KeyError(f"cell ({user}, {arm}) not in mask")
        return int(hits[0])

    def averaged_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(local rows, local cols, averaged values) for fully observed cells."""
        done = self.counts >= self.b
        m = self.mask
        return m.entry_row[done], m.entry_col[done], self.sums[done] / self.counts[done]


class MaskCollection:
    """One mask observed over b sequential passes, one arriving user at a time."""

    def __init__(self, mask: Mask, b: int, rng: np.random.Generator):
        self.mask = mask
        self.b = b
        self.rng = rng
        self.buffer = ObservationBuffer(mask, b)
        n_rows = len(mask.rows)
        self._entries_of_row: list[np.ndarray] = [
            np.flatnonzero(mask.entry_row == i) for i in range(n_rows)
        ]
        self._row_of_user = {int(u): i for i, u in enumerate(mask.rows)}
        all_cols = np.arange(len(mask.cols))
        self._filler_cols: list[np.ndarray] = []
        for i in range(n_rows):
            used = np.unique(mask.entry_col[self._entries_of_row[i]])
            free = np.setdiff1d(all_cols, used)
            self._filler_cols.append(free if len(free) else all_cols)
        self._pass_idx = 0
        self._pending: list[list[int]] = []
        self._outstanding = 0
        if len(mask) == 0:
            self._pass_idx = b  # nothing to collect
        else:
            self._start_pass()

    def _start_pass(self) -> None:
        self._pending = []
        for entries in self._entries_of_row:
            stack = entries.copy()
            self.rng.shuffle(stack)
            self._pending.append(list(stack))
        self._outstanding = len(self.mask)

    @property
    def done(self) -> bool:
        return self._pass_idx >= self.b

    def choose(self, user: int) -> tuple[int, bool]:
        """Arm (global id) for an arriving masked user; flag marks a mask pull."""
        i = self._row_of_user[user]
        if not self.done and self._pending[i]:
            entry = self._pending[i][-1]
            return int(self.mask.cols[self.mask.entry_col[entry]]), True
        free = self._filler_cols[i]
        return int(self.mask.cols[free[self.rng.integers(len(free))]]), False

    def record(self, user: int, arm: int, reward: float) -> None:
        """Credit the reward of the mask pull issued by the last `choose`."""
        i = self._row_of_user[user]
        entry = self._pending[i].pop()
        self.buffer.sums[entry] += reward
        self.buffer.counts[entry] += 1
        self._outstanding -= 1
        if self._outstanding == 0:
            self._pass_idx += 1
            if self._pass_idx < self.b:
                self._start_pass()


@dataclass
class CollectInfo:
    rounds_used: int
    complete: bool


def collect_observations(env, mask: Mask, b: int, budget: int, seed: int = 0):
    """Drive the environment until every masked cell has b observations.

    Returns (ObservationBuffer, CollectInfo); an exhausted budget leaves the
    partial buffer with `complete=False`.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    coll = MaskCollection(mask, b, rng)
    members = set(int(u) for u in mask.rows)
    cols = np.asarray(mask.cols, dtype=int)
    rounds = 0
    while not coll.done and rounds < budget and not env.done:
        u = env.peek_user()
        if u in members:
            arm, masked = coll.choose(u)
            env.step(lambda _u: arm)
            if masked:
                coll.record(u, arm, env.history.rewards[len(env.history) - 1])
        else:
            arm = int(cols[rng.integers(len(cols))])
            env.step(lambda _u: arm)
        rounds += 1
    return coll.buffer, CollectInfo(rounds_used=rounds, complete=coll.done)


@dataclass
class SolveInfo:
    iterations: int
    converged: bool
    no_convergence: bool
    objectives: list[float] = field(default_factory=list)


def nuclear_objective(Q: np.ndarray, row_idx, col_idx, values, lam: float) -> float:
    fit = 0.5 * float(np.sum((Q[row_idx, col_idx] - values) ** 2))
    nuc = float(np.linalg.svd(Q, compute_uv=False).sum())
    return fit + lam * nuc


def solve_nuclear_norm(
    values: np.ndarray,
    omega: tuple[np.ndarray, np.ndarray],
    shape: tuple[int, int],
    lam: float,
    tol: float = 1e-6,
    max_iters: int = 500,
    continuation_decay: float = 0.25,
) -> tuple[np.ndarray, SolveInfo]:
    """Soft-impute: alternate a unit gradient step on the observed-entry
    squared loss with singular-value soft-thresholding.

    Small regularizers make the plain iteration crawl, so the threshold is
    annealed geometrically from the data's top singular value down to `lam`
    (warm starts); iterations at the target `lam` are the ones reported and
    their objective 0.5 * sum_omega (Q - Z)^2 + lam * ||Q||_* is asserted
    nonincreasing.  `max_iters` caps the total across all stages.
    """
    row_idx, col_idx = omega
    if len(row_idx) == 0:
        raise ValueError("omega must be nonempty")
    if lam < 0 or tol <= 0:
        raise ValueError("lam must be >= 0 and tol > 0")
    values = np.asarray(values, dtype=float)
    Q = np.zeros(shape)
    filled = Q.copy()
    filled[row_idx, col_idx] = values
    top = float(np.linalg.svd(filled, compute_uv=False)[0])
    lam_path = []
    cur = top * continuation_decay
    floor = max(lam, 1e-12 * max(top, 1.0))
    while cur > floor / continuation_decay:
        lam_path.append(cur)
        cur *= continuation_decay
    lam_path.append(lam)

    objectives: list[float] = []
    total_iters = 0
    rel_change = np.inf
    for lam_k in lam_path:
        final_stage = lam_k == lam_path[-1]
        stage_tol = tol if final_stage else max(tol, 1e-4)
        if final_stage:
            fit0 = 0.5 * float(np.sum((Q[row_idx, col_idx] - values) ** 2))
            prev_obj = fit0 + lam * float(np.linalg.svd(Q, compute_uv=False).sum())
            objectives.append(prev_obj)
        while total_iters < max_iters:
            G = Q.copy()
            G[row_idx, col_idx] = values
            U, s, Vt = np.linalg.svd(G, full_matrices=False)
            s_thr = np.maximum(s - lam_k, 0.0)
            Q_new = (U * s_thr) @ Vt
            total_iters += 1
            if final_stage:
                # Q_new's singular values are exactly s_thr
                fit = 0.5 * float(np.sum((Q_new[row_idx, col_idx] - values) ** 2))
                obj = fit + lam * float(s_thr.sum())
                assert obj <= prev_obj + 1e-9 * (1.0 + abs(prev_obj)), "objective increased"
                objectives.append(obj)
                prev_obj = obj
            denom = max(float(np.linalg.norm(Q)), 1e-30)
            rel_change = float(np.linalg.norm(Q_new - Q)) / denom
            Q = Q_new
            if rel_change < stage_tol:
                break
    converged = rel_change < tol
    info = SolveInfo(
        iterations=total_iters,
        converged=converged,
        no_convergence=(not converged) and rel_change > 100 * tol,
        objectives=objectives,
    )
    return Q, info


@dataclass
class SubmatrixEstimate:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    claimed_error: float
    info: "EstimateInfo | None" = None


@dataclass
class EstimateInfo:
    rounds_used: int
    reps_completed: int
    spawn_keys: list[tuple]
    diagnostics: list[dict]
    rep_estimates: list[np.ndarray]


def _partitioned_solve(
    row_idx: np.ndarray,
    col_idx: np.ndarray,
    values: np.ndarray,
    n_rows: int,
    n_cols: int,
    lam: float,
    rng: np.random.Generator,
    tol: float,
    max_iters: int,
) -> tuple[np.ndarray, list[dict]]:
    """Split the larger dimension into ~square blocks and solve each one."""
    if n_rows > n_cols:
        est, diags = _partitioned_solve(
            col_idx, row_idx, values, n_cols, n_rows, lam, rng, tol, max_iters
        )
        return est.T, diags
    k = math.ceil(n_cols / n_rows)
    assignment = rng.integers(0, k, size=n_cols)
    groups = [np.flatnonzero(assignment == q) for q in range(k)]
    groups = [g for g in groups if len(g)]
    # a block whose columns carry no observations cannot be solved; hand its
    # columns to the smallest block that has observations
    obs_count = np.bincount(col_idx, minlength=n_cols)
    has_obs = [int(obs_count[g].sum()) > 0 for g in groups]
    if not any(has_obs):
        raise ValueError("no observations in any block")
    keep = [g for g, ok in zip(groups, has_obs) if ok]
    orphans = [g for g, ok in zip(groups, has_obs) if not ok]
    if orphans:
        smallest = min(range(len(keep)), key=lambda i: len(keep[i]))
        keep[smallest] = np.concatenate([keep[smallest]] + orphans)
    estimate = np.zeros((n_rows, n_cols))
    diags = []
    for block_no, g in enumerate(keep):
        local_of = {int(c): j for j, c in enumerate(g)}
        sel = np.isin(col_idx, g)
        b_rows = row_idx[sel]
        b_cols = np.array([local_of[int(c)] for c in col_idx[sel]], dtype=int)
        b_vals = values[sel]
        block, info = solve_nuclear_norm(
            b_vals, (b_rows, b_cols), (n_rows, len(g)), lam, tol=tol, max_iters=max_iters
        )
        estimate[:, g] = block
        diags.append(
            {
                "block": block_no,
                "iterations": info.iterations,
                "final_objective": info.objectives[-1],
            }
        )
    return estimate, diags


class OracleInstance:
    """Stateful estimator for one (users, arms) submatrix.

    Collects f independent Bernoulli masks (each over b passes) one arriving
    user at a time, solves the per-block convex programs as each repetition's
    data completes, and returns the entrywise median of the repetitions.
    """

    def __init__(
        self,
        users,
        arms,
        params: OracleParams,
        seed_seq: np.random.SeedSequence,
        solver_tol: float = 1e-6,
        solver_max_iters: int = 500,
    ):
        self.users = np.asarray(users, dtype=int)
        self.arms = np.asarray(arms, dtype=int)
        self.params = params
        self._seed_seq = seed_seq
        self.solver_tol = solver_tol
        self.solver_max_iters = solver_max_iters
        self.rep_estimates: list[np.ndarray] = []
        self.spawn_keys: list[tuple] = []
        self.diagnostics: list[dict] = []
        self.max_abs_observed = 0.0
        self.rounds_used = 0
        self._collection: MaskCollection | None = None
        self._rep_rng: np.random.Generator | None = None
        self._start_repetition()

    def _start_repetition(self) -> None:
        if len(self.rep_estimates) >= self.params.f:
            self._collection = None
            return
        rep_ss = self._seed_seq.spawn(1)[0]
        self.spawn_keys.append(tuple(rep_ss.spawn_key))
        self._rep_rng = np.random.default_rng(rep_ss)
        mask = sample_mask(self.users, self.arms, self.params.p, self._rep_rng)
        if len(mask) == 0:
            # resample once with a fresh stream; tiny masks happen only for
            # tiny p * |U| * |V|
            mask = sample_mask(self.users, self.arms, self.params.p, self._rep_rng)
        self._collection = MaskCollection(mask, self.params.b, self._rep_rng)

    @property
    def collecting(self) -> bool:
        return self._collection is not None and not self._collection.done

    @property
    def finished(self) -> bool:
        return self._collection is None

    def choose(self, user: int) -> tuple[int, bool]:
        self.rounds_used += 1
        return self._collection.choose(user)

    def record(self, user: int, arm: int, reward: float) -> None:
        coll = self._collection
        coll.record(user, arm, reward)
        if abs(reward) > self.max_abs_observed:
            self.max_abs_observed = abs(reward)
        if coll.done:
            self._finish_repetition()

    def _finish_repetition(self) -> None:
        coll = self._collection
        rows, cols, vals = coll.buffer.averaged_entries()
        est, diags = _partitioned_solve(
            rows,
            cols,
            vals,
            len(self.users),
            len(self.arms),
            self.params.lam,
            self._rep_rng,
            self.solver_tol,
            self.solver_max_iters,
        )
        rep_no = len(self.rep_estimates)
        for d in diags:
            d["repetition"] = rep_no
        self.diagnostics.extend(diags)
        self.rep_estimates.append(est)
        self._start_repetition()

    def estimate(self) -> SubmatrixEstimate | None:
        """Entrywise median of completed repetitions; None if none completed."""
        if not self.rep_estimates:
            return None
        values = np.median(np.stack(self.rep_estimates), axis=0)
        info = EstimateInfo(
            rounds_used=self.rounds_used,
            reps_completed=len(self.rep_estimates),
            spawn_keys=list(self.spawn_keys),
            diagnostics=list(self.diagnostics),
            rep_estimates=list(self.rep_estimates),
        )
        return SubmatrixEstimate(self.users, self.arms, values, self.params.zeta, info)


def low_rank_matrix_estimate(
    env,
    users,
    arms,
    params: OracleParams,
    budget: int | None = None,
    seed: int = 0,
    ground_truth: np.ndarray | None = None,
) -> SubmatrixEstimate:
    """Run the full estimator against a live environment.

    Consumes environment rounds until all f repetitions finish or the budget
    runs out; at least one repetition must complete.  Users outside the target
    set pull throwaway arms from the target arm set.
    """
    users = np.asarray(users, dtype=int)
    arms = np.asarray(arms, dtype=int)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    inst = OracleInstance(users, arms, params, ss)
    member = np.zeros(env.instance.num_users, dtype=bool)
    member[users] = True
    outsider_rng = np.random.default_rng(ss.spawn(1)[0])
    remaining = env.horizon - env.t if budget is None else min(budget, env.horizon - env.t)
    while inst.collecting and remaining > 0:
        u = env.peek_user()
        if member[u]:
            arm, masked = inst.choose(u)
            env.step(lambda _u: arm)
            if masked:
                inst.record(u, arm, float(env.history.rewards[len(env.history) - 1]))
        else:
            arm = int(arms[outsider_rng.integers(len(arms))])
            env.step(lambda _u: arm)
        remaining -= 1
    est = inst.estimate()
    if est is None:
        raise InsufficientBudgetError(
            f"budget exhausted before any of the {params.f} repetitions finished"
        )
    if ground_truth is not None:
        err = float(np.max(np.abs(est.values - ground_truth)))
        for d in est.info.diagnostics:
            rep = est.info.rep_estimates[d["repetition"]]
            d["entrywise_error"] = float(np.max(np.abs(rep - ground_truth)))
        est.info.diagnostics.append(
            {"repetition": "median", "block": "", "iterations": "", "final_objective": "", "entrywise_error": err}
        )
    return est


def write_oracle_diagnostics(estimate: SubmatrixEstimate, path) -> None:
    """Dump per-repetition, per-block solver diagnostics as CSV."""
    fields = ["repetition", "block", "iterations", "final_objective", "entrywise_error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        if estimate.info is None:
            return
        for d in estimate.info.diagnostics:
            writer.writerow({k: d.get(k, "") for k in fields})


def mask_to_matrix(mask: Mask) -> np.ndarray:
    """0/1 indicator matrix of the masked cells, for dumping alongside
    estimates."""
    out = np.zeros((len(mask.rows), len(mask.cols)))
    out[mask.entry_row, mask.entry_col] = 1.0
    return out


def save_matrix(matrix: np.ndarray, path) -> None:
    """Matrix dump in the same 17-significant-digit text format as instances."""
    with open(path, "w") as fh:
        fh.write(f"# matrix {matrix.shape[0]} {matrix.shape[1]}\n")
        for row in np.atleast_2d(matrix):
            fh.write(" ".join(format(float(v), ".17g") for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split()])
    return np.array(rows)
