"""Phased arm elimination with matrix-completion-driven user clustering.

The run proceeds in phases with a halving accuracy target.  Each phase
collects Bernoulli-masked observations for every user set that still has a
large active arm set, completes the corresponding reward submatrix, keeps
each user's near-best arms, connects users whose estimated rows agree
entrywise and whose near-best arms overlap, and refines the partition into
the connected components.  Sets whose active arms fall below a threshold stop
clustering and run an independent UCB per user until the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .completion import OracleInstance, derive_oracle_params
from .env import Environment, Instance, NoiseModel, RunHistory

ENDGAME_FRACTION = 0.01  # do not start an oracle this close to the horizon


class UcbArmState:
    """Upper-confidence-bound state for one user over a fixed arm subset."""

    def __init__(self, arms, sigma: float, horizon: float):
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        self.arms = np.sort(np.asarray(arms, dtype=int))
        self.sigma = float(sigma)
        self.horizon = float(horizon)
        self.counts = np.zeros(len(self.arms), dtype=np.int64)
        self.sums = np.zeros(len(self.arms))
        self._log_horizon = math.log(self.horizon)

    def _position(self, arm: int) -> int:
        pos = int(np.searchsorted(self.arms, arm))
        if pos >= len(self.arms) or self.arms[pos] != arm:
            raise KeyError(f"arm {arm} not tracked")
        return pos

    def index_of(self, arm: int) -> float:
        pos = self._position(arm)
        if self.counts[pos] == 0:
            return math.inf
        mean = self.sums[pos] / self.counts[pos]
        return float(mean + self.sigma * math.sqrt(6.0 * self._log_horizon / self.counts[pos]))

    def select(self) -> int:
        unplayed = np.flatnonzero(self.counts == 0)
        if len(unplayed):
            return int(self.arms[unplayed[0]])
        means = self.sums / self.counts
        bonus = self.sigma * np.sqrt(6.0 * self._log_horizon / self.counts)
        return int(self.arms[np.argmax(means + bonus)])

    def update(self, arm: int, reward: float) -> None:
        pos = self._position(arm)
        self.counts[pos] += 1
        self.sums[pos] += reward


def ucb_index(state: UcbArmState, arm: int) -> float:
    """Optimism index of an arm: empirical mean plus exploration bonus,
    +inf while the arm is unplayed."""
    return state.index_of(arm)


@dataclass
class GoodArmSet:
    user: int
    arms: set[int]


def good_arm_set(estimate_row: np.ndarray, delta: float) -> np.ndarray:
    """Positions whose estimated reward is within 2*delta of the row maximum."""
    row = np.asarray(estimate_row, dtype=float)
    if row.size == 0:
        raise ValueError("estimate row must be nonempty")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return np.flatnonzero(row.max() - row <= 2.0 * delta)


@dataclass
class UserGraph:
    nodes: list[int]
    edges: set[tuple[int, int]]

    def neighbors(self, u: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == u:
                out.append(b)
            elif b == u:
                out.append(a)
        return out


def build_user_graph(
    user_set,
    active_arms,
    estimates: np.ndarray,
    good_sets: list[np.ndarray],
    delta: float,
    slack_multiplier: float = 2.0,
) -> UserGraph:
    """Connect two users when their estimated rows agree entrywise within
    slack_multiplier*delta across all active arms and their near-best arm
    sets share at least one arm."""
    users = list(int(u) for u in user_set)
    est = np.asarray(estimates, dtype=float)
    n = len(users)
    if est.shape[0] != n or est.shape[1] != len(active_arms):
        raise ValueError("estimates must cover every user over all active arms")
    good = np.zeros((n, len(active_arms)), dtype=bool)
    for i, g in enumerate(good_sets):
        good[i, np.asarray(g, dtype=int)] = True
    overlap = good @ good.T
    # pairwise max abs difference; chunk the broadcast to bound memory
    close = np.zeros((n, n), dtype=bool)
    chunk = max(1, int(2**22 // max(1, n * est.shape[1])))
    thresh = slack_multiplier * delta
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        diff = np.abs(est[start:stop, None, :] - est[None, :, :]).max(axis=2)
        close[start:stop] = diff <= thresh
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if close[i, j] and overlap[i, j]:
                edges.add((users[i], users[j]))
    return UserGraph(nodes=users, edges=edges)


def refine_partition(
    graph: UserGraph, good_sets: dict[int, set[int]]
) -> list[tuple[list[int], set[int]]]:
    """Connected components paired with the union of member near-best arms."""
    adjacency: dict[int, set[int]] = {u: set() for u in graph.nodes}
    for a, b in graph.edges:
        adjacency[a].add(b)
        adjacency[b].add(a)
    seen: set[int] = set()
    components: list[tuple[list[int], set[int]]] = []
    for start in sorted(graph.nodes):
        if start in seen:
            continue
        stack = [start]
        comp = []
        seen.add(start)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        comp.sort()
        arm_union: set[int] = set()
        for u in comp:
            arm_union |= set(int(a) for a in good_sets[u])
        components.append((comp, arm_union))
    return components


@dataclass
class LatticeConfig:
    """Knobs for the phased-elimination run.

    `c_prime` scales the estimated accuracy schedule; `c_prime_override`
    fixes the schedule constant directly (the per-phase target is then
    override * 2^-phase).  Oracle constants are passed through to the
    completion parameter derivation.
    """

    num_clusters: int
    sigma: float
    gamma: float | None = None
    c_prime: float = 1.0
    c_prime_override: float | None = None
    mu: float = 1.0
    c_p: float = 1.0
    c_b: float = 1.0
    c_lambda: float = 2.5
    f_cap: int = 15
    solver_tol: float = 1e-6
    solver_max_iters: int = 500

    def resolved_gamma(self, num_arms: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return max(1.0, math.ceil(math.log(max(num_arms, 2)) / self.num_clusters))


@dataclass
class PhaseRecord:
    phase: int
    delta: float
    mode: str
    user_sets: list[list[int]]
    arm_sets: list[list[int]]
    rounds_used: int
    num_ucb_users: int
    oracle_error: float | None = None


@dataclass
class PhaseTrace:
    records: list[PhaseRecord] = field(default_factory=list)
    has_mode: bool = False
    intersection_fallbacks: int = 0

    def append(self, record: PhaseRecord) -> None:
        self.records.append(record)

    def csv_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {
                "phase": r.phase,
                "delta": "" if r.delta is None else format(r.delta, ".17g"),
                "num_sets": len(r.user_sets),
                "set_sizes": ";".join(str(len(s)) for s in r.user_sets),
                "arm_set_sizes": ";".join(str(len(a)) for a in r.arm_sets),
                "rounds_used": r.rounds_used,
                "oracle_error": "" if r.oracle_error is None else format(r.oracle_error, ".17g"),
            }
            if self.has_mode:
                row["mode"] = r.mode
            rows.append(row)
        return rows


class _PhasedRun:
    """Shared round-scheduling engine for the exact and relaxed variants."""

    def __init__(
        self,
        instance: Instance,
        config: LatticeConfig,
        horizon: int,
        seed,
        noise: NoiseModel | None,
        rcs: bool = False,
        nu: float = 0.0,
        edge_slack: float = 2.0,
    ):
        self.instance = instance
        self.config = config
        self.horizon = int(horizon)
        self.rcs = rcs
        self.nu = nu
        self.edge_slack = edge_slack
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        env_ss, algo_ss = root.spawn(2)
        self.env = Environment(instance, noise, env_ss, self.horizon)
        self.algo_ss = algo_ss
        self.rng = np.random.default_rng(algo_ss.spawn(1)[0])
        self.trace = PhaseTrace(has_mode=rcs)
        self.ucb: dict[int, UcbArmState] = {}
        self.greedy_arm: dict[int, int] = {}
        self.latest_row: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.c_prime = config.c_prime_override
        self.clusterwise = False

    def run(self) -> tuple[RunHistory, PhaseTrace]:
        cfg = self.config
        inst = self.instance
        env = self.env
        num_users, num_arms = inst.num_users, inst.num_arms
        gamma_c = cfg.resolved_gamma(num_arms) * cfg.num_clusters
        user_sets: list[list[int]] = [list(range(num_users))]
        arm_sets: list[np.ndarray] = [np.arange(num_arms)]
        ell = 0
        while env.t < self.horizon:
            ell += 1
            delta_next = None if self.c_prime is None else self.c_prime * 2.0 ** (-ell)
            set_of = np.zeros(num_users, dtype=int)
            for i, us in enumerate(user_sets):
                set_of[us] = i
            for i, (us, arms) in enumerate(zip(user_sets, arm_sets)):
                # a set with fewer users than clusters has no low-rank
                # structure to exploit; completion parameters degenerate there
                if len(arms) < gamma_c or len(us) < cfg.num_clusters:
                    for u in us:
                        if u not in self.ucb:
                            self.ucb[u] = UcbArmState(arms, cfg.sigma, max(2, self.horizon))
            endgame = (self.horizon - env.t) < ENDGAME_FRACTION * self.horizon
            instances: dict[int, OracleInstance] = {}
            for i, (us, arms) in enumerate(zip(user_sets, arm_sets)):
                if len(arms) < gamma_c or len(us) < cfg.num_clusters:
                    continue
                if endgame and all(u in self.latest_row for u in us):
                    for u in us:
                        cur_arms, row = self.latest_row[u]
                        live = np.isin(cur_arms, arms)
                        pick = cur_arms[live][np.argmax(row[live])] if live.any() else arms[0]
                        self.greedy_arm[u] = int(pick)
                    continue
                instances[i] = self._make_instance(us, arms, delta_next)
            rounds_before = env.t
            if not instances:
                self._tail_loop(set_of, arm_sets)
                self.trace.append(
                    PhaseRecord(
                        phase=ell,
                        delta=delta_next,
                        mode="ucb",
                        user_sets=[list(s) for s in user_sets],
                        arm_sets=[list(map(int, a)) for a in arm_sets],
                        rounds_used=env.t - rounds_before,
                        num_ucb_users=len(self.ucb),
                    )
                )
                break
            self._collection_loop(instances, set_of, arm_sets)
            if self.c_prime is None:
                self._estimate_scale(instances)
                delta_next = self.c_prime * 2.0 ** (-ell)
            incomplete = any(i.collecting for i in instances.values())
            if env.t == rounds_before and all(not i.rep_estimates for i in instances.values()):
                # degenerate phase (e.g. an empty mask): fall back to playing
                # out the horizon rather than spinning
                self._tail_loop(set_of, arm_sets)
                self.trace.append(
                    PhaseRecord(
                        phase=ell,
                        delta=delta_next,
                        mode="ucb",
                        user_sets=[list(s) for s in user_sets],
                        arm_sets=[list(map(int, a)) for a in arm_sets],
                        rounds_used=env.t - rounds_before,
                        num_ucb_users=len(self.ucb),
                    )
                )
                break
            oracle_err = None
            mode = "joint"
            if not incomplete:
                joint = True
                if self.rcs:
                    if self.clusterwise or not (
                        delta_next >= 2.0 * self.nu and len(user_sets) < cfg.num_clusters
                    ):
                        self.clusterwise = True
                        joint = False
                        mode = "clusterwise"
                user_sets, arm_sets, oracle_err = self._refine(
                    user_sets, arm_sets, instances, delta_next, joint
                )
                ordered = sorted(u for s in user_sets for u in s)
                assert ordered == list(range(num_users)), "user sets must partition the users"
            self.trace.append(
                PhaseRecord(
                    phase=ell,
                    delta=delta_next,
                    mode=mode,
                    user_sets=[list(s) for s in user_sets],
                    arm_sets=[list(map(int, a)) for a in arm_sets],
                    rounds_used=env.t - rounds_before,
                    num_ucb_users=len(self.ucb),
                    oracle_error=oracle_err,
                )
            )
            if incomplete:
                break
        return env.history.trimmed(), self.trace

    def _make_instance(self, users, arms, delta_next) -> OracleInstance:
        cfg = self.config
        bootstrap = delta_next is None
        zeta = 1.0 if bootstrap else delta_next
        params = derive_oracle_params(
            len(users),
            len(arms),
            cfg.num_clusters,
            mu=cfg.mu,
            sigma=cfg.sigma,
            zeta=zeta,
            T=self.horizon,
            c_p=cfg.c_p,
            c_b=cfg.c_b,
            c_lambda=cfg.c_lambda,
            f_cap=cfg.f_cap,
        )
        if bootstrap:
            # reward scale unknown before any data: collect a single pass and
            # fix the accuracy schedule from what it sees
            d2 = min(len(users), len(arms))
            lam = cfg.c_lambda * cfg.sigma * math.sqrt(d2 * params.p)
            params = replace(params, b=1, lam=max(lam, 1e-3))
        return OracleInstance(
            np.asarray(users, dtype=int),
            np.asarray(arms, dtype=int),
            params,
            self.algo_ss.spawn(1)[0],
            solver_tol=cfg.solver_tol,
            solver_max_iters=cfg.solver_max_iters,
        )

    def _estimate_scale(self, instances: dict[int, OracleInstance]) -> None:
        cfg = self.config
        observed = [i.max_abs_observed for i in instances.values() if i.max_abs_observed > 0]
        p_inf = max(observed) if observed else 1.0
        num_arms = self.instance.num_arms
        if cfg.sigma > 0:
            sigma_term = cfg.sigma * math.sqrt(cfg.mu) / math.log(max(num_arms, 3))
            scale = min(p_inf, sigma_term)
        else:
            scale = p_inf
        self.c_prime = cfg.c_prime * scale / cfg.num_clusters

    def _collection_loop(self, instances, set_of, arm_sets) -> None:
        env = self.env
        active = sum(1 for i in instances.values() if i.collecting)
        while active > 0 and env.t < self.horizon:
            u = env.peek_user()
            i = int(set_of[u])
            inst = instances.get(i)
            if inst is not None and inst.collecting:
                arm, masked = inst.choose(u)
                _, _, reward = env.play(arm)
                if masked:
                    inst.record(u, arm, reward)
                    if not inst.collecting:
                        active -= 1
            elif u in self.ucb:
                self._ucb_round(u)
            else:
                arms = arm_sets[i]
                env.play(int(arms[self.rng.integers(len(arms))]))

    def _tail_loop(self, set_of, arm_sets) -> None:
        env = self.env
        while env.t < self.horizon:
            u = env.peek_user()
            if u in self.ucb:
                self._ucb_round(u)
            elif u in self.greedy_arm:
                env.play(self.greedy_arm[u])
            else:
                arms = arm_sets[int(set_of[u])]
                env.play(int(arms[self.rng.integers(len(arms))]))

    def _ucb_round(self, u: int) -> None:
        state = self.ucb[u]
        arm = state.select()
        _, _, reward = self.env.play(arm)
        state.update(arm, reward)

    def _refine(self, user_sets, arm_sets, instances, delta, joint: bool):
        new_users: list[list[int]] = []
        new_arms: list[np.ndarray] = []
        worst_err = None
        for i, (us, arms) in enumerate(zip(user_sets, arm_sets)):
            inst = instances.get(i)
            est = inst.estimate() if inst is not None else None
            if est is None:
                new_users.append(list(us))
                new_arms.append(np.asarray(arms, dtype=int))
                continue
            values = est.values
            err = float(
                np.max(np.abs(values - self.instance.P[np.ix_(us, np.asarray(arms, dtype=int))]))
            )
            worst_err = err if worst_err is None else max(worst_err, err)
            for r, u in enumerate(us):
                self.latest_row[u] = (np.asarray(arms, dtype=int), values[r].copy())
            good_local = [good_arm_set(values[r], delta) for r in range(len(us))]
            arms_arr = np.asarray(arms, dtype=int)
            if joint:
                graph = build_user_graph(
                    us, arms_arr, values, good_local, delta, slack_multiplier=self.edge_slack
                )
                good_global = {
                    int(u): set(int(a) for a in arms_arr[g]) for u, g in zip(us, good_local)
                }
                for comp, union in refine_partition(graph, good_global):
                    new_users.append(comp)
                    new_arms.append(np.array(sorted(union), dtype=int))
            else:
                sets = [set(int(a) for a in arms_arr[g]) for g in good_local]
                inter, fell_back = intersect_with_union_fallback(sets)
                if fell_back:
                    self.trace.intersection_fallbacks += 1
                new_users.append(list(us))
                new_arms.append(np.array(sorted(inter), dtype=int))
        return new_users, new_arms, worst_err


def intersect_with_union_fallback(arm_sets: list[set[int]]) -> tuple[set[int], bool]:
    """Common arms across all users; union if the intersection is empty."""
    if not arm_sets:
        raise ValueError("need at least one arm set")
    inter = set(arm_sets[0])
    for s in arm_sets[1:]:
        inter &= s
    if inter:
        return inter, False
    union: set[int] = set()
    for s in arm_sets:
        union |= s
    return union, True


def run_lattice(
    instance: Instance,
    config: LatticeConfig,
    horizon: int,
    seed,
    noise: NoiseModel | None = None,
) -> tuple[RunHistory, PhaseTrace]:
    """Run the phased-elimination policy for exact cluster structure."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    run = _PhasedRun(instance, config, horizon, seed, noise)
    return run.run()
