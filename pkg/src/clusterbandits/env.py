"""Problem instances and the round-by-round bandit simulation.

A problem instance is a ground-truth reward matrix over (user, arm) pairs in
which users sharing a latent cluster have identical rows (cluster structure)
or entrywise-close rows with a common best arm (relaxed cluster structure).
Each simulation round samples a user uniformly at random, asks a policy for
an arm, and returns the matrix entry plus additive noise.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

RCS_SEPARATION_FACTOR = 20.0


class InvalidDimensionsError(ValueError):
    """Instance dimensions are inconsistent (e.g. more clusters than users)."""


class SeparationUnsatisfiableError(RuntimeError):
    """Rejection sampling could not produce sufficiently separated cluster rows."""


class InvalidEpsilonError(ValueError):
    """Bernoulli gap parameter outside (0, 1)."""


class ArmOutOfRangeError(IndexError):
    """A policy returned an arm index outside the instance's arm set."""


@dataclass(frozen=True)
class RowDistribution:
    """Entry distribution for cluster reward rows: gaussian(mean, std) or uniform(lo, hi)."""

    kind: str
    a: float
    b: float

    @staticmethod
    def gaussian(mean: float = 0.0, std: float = 1.0) -> "RowDistribution":
        return RowDistribution("gaussian", mean, std)

    @staticmethod
    def uniform(lo: float = 0.0, hi: float = 1.0) -> "RowDistribution":
        return RowDistribution("uniform", lo, hi)

    @staticmethod
    def parse(text: str) -> "RowDistribution":
        m = re.fullmatch(r"\s*(gaussian|uniform)\(([^,]+),([^)]+)\)\s*", text)
        if m is None:
            raise ValueError(f"cannot parse row distribution: {text!r}")
        return RowDistribution(m.group(1), float(m.group(2)), float(m.group(3)))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(self.a, self.b, size=size)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=size)
        raise ValueError(f"unknown row distribution kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind}({self.a:g},{self.b:g})"


@dataclass(frozen=True)
class NoiseModel:
    """Additive observation noise; `bernoulli-reward` replaces the whole draw.

    For gaussian and uniform kinds the samples are zero-mean with variance
    sigma^2 (uniform support is scaled accordingly).  `bernoulli-reward`
    draws the reward as Bernoulli(mean entry) and requires entries in [0, 1];
    `none` returns the matrix entry exactly.
    """

    kind: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "bernoulli-reward", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def draw_block(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Pre-draw the per-round randomness consumed by `reward`."""
        if self.kind == "gaussian":
            return rng.normal(0.0, self.sigma, size=n)
        if self.kind == "uniform":
            half_width = self.sigma * math.sqrt(3.0)
            return rng.uniform(-half_width, half_width, size=n)
        if self.kind == "bernoulli-reward":
            return rng.uniform(0.0, 1.0, size=n)
        return np.zeros(n)

    def reward(self, mean: float, draw: float) -> float:
        if self.kind == "bernoulli-reward":
            return 1.0 if draw < mean else 0.0
        return mean + draw


@dataclass
class Instance:
    """Ground-truth multi-user bandit instance with latent cluster structure."""

    num_users: int
    num_arms: int
    num_clusters: int
    P: np.ndarray
    cluster_of: np.ndarray
    X: np.ndarray
    nu: float = 0.0
    default_noise: NoiseModel | None = None
    best_arm: np.ndarray = field(init=False)
    gaps: np.ndarray = field(init=False)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        self.cluster_of = np.asarray(self.cluster_of, dtype=int)
        # np.argmax breaks ties by lowest index, keeping best_arm deterministic.
        self.best_arm = np.argmax(self.P, axis=1)
        best_of_row = self.X.max(axis=1)
        self.gaps = best_of_row[:, None] - self.X

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max(initial=0.0))

    def cluster_members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == c)


def _check_dimensions(num_users: int, num_arms: int, num_clusters: int) -> None:
    if num_users <= 0 or num_arms <= 0 or num_clusters <= 0:
        raise InvalidDimensionsError("all dimensions must be positive")
    if num_clusters > min(num_users, num_arms):
        raise InvalidDimensionsError(
            f"num_clusters={num_clusters} exceeds min(num_users, num_arms)="
            f"{min(num_users, num_arms)}"
        )


def generate_cs_instance(
    num_users: int,
    num_arms: int,
    num_clusters: int,
    row_distribution: RowDistribution,
    seed: int,
) -> Instance:
    """Exact cluster structure: user u inherits row (u mod C) of a random X."""
    _check_dimensions(num_users, num_arms, num_clusters)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X = row_distribution.sample(rng, (num_clusters, num_arms))
    cluster_of = np.arange(num_users) % num_clusters
    P = X[cluster_of]
    return Instance(num_users, num_arms, num_clusters, P, cluster_of, X, nu=0.0)


def generate_rcs_instance(
    num_users: int,
    num_arms: int,
    num_clusters: int,
    nu: float,
    row_distribution: RowDistribution,
    seed: int,
    max_attempts: int = 1000,
) -> Instance:
    """Relaxed cluster structure via rejection sampling.

    Cluster rows are resampled until (a) every cross-cluster pair is separated
    by more than 20*nu at one of the two best arms, with margin nu/2 so the
    per-user perturbation cannot break it, and (b) each row's best arm leads
    its runner-up by more than nu/2 so perturbing non-best arms preserves the
    argmax.  Users then get the cluster row plus i.i.d. uniform noise in
    [-nu/2, nu/2] on their non-best arms.
    """
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    _check_dimensions(num_users, num_arms, num_clusters)
    if nu == 0:
        return generate_cs_instance(num_users, num_arms, num_clusters, row_distribution, seed)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sep = RCS_SEPARATION_FACTOR * nu + nu / 2.0
    X = None
    for _ in range(max_attempts):
        cand = row_distribution.sample(rng, (num_clusters, num_arms))
        best = np.argmax(cand, axis=1)
        top = cand[np.arange(num_clusters), best]
        runner_up = np.partition(cand, -2, axis=1)[:, -2] if num_arms > 1 else top - np.inf
        if num_arms > 1 and not np.all(top - runner_up > nu / 2.0):
            continue
        ok = True
        for c in range(num_clusters):
            for d in range(c + 1, num_clusters):
                at_c = abs(cand[c, best[c]] - cand[d, best[c]])
                at_d = abs(cand[c, best[d]] - cand[d, best[d]])
                margin_c = sep if best[c] != best[d] else RCS_SEPARATION_FACTOR * nu
                if not (at_c > margin_c or at_d > sep):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            X = cand
            break
    if X is None:
        raise SeparationUnsatisfiableError(
            f"could not satisfy {RCS_SEPARATION_FACTOR:g}*nu separation in {max_attempts} attempts"
        )

    cluster_of = np.arange(num_users) % num_clusters
    best = np.argmax(X, axis=1)
    P = X[cluster_of].copy()
    perturb = rng.uniform(-nu / 2.0, nu / 2.0, size=(num_users, num_arms))
    perturb[np.arange(num_users), best[cluster_of]] = 0.0
    P += perturb
    return Instance(num_users, num_arms, num_clusters, P, cluster_of, X, nu=nu)


def generate_hard_instance(
    num_users: int,
    num_arms: int,
    num_clusters: int,
    epsilon: float,
    optimal_arms: list[int],
    seed: int = 0,
) -> Instance:
    """Bernoulli hard instance: every arm pays (1-eps)/2 except each cluster's
    optimal arm, which pays (1+eps)/2."""
    _check_dimensions(num_users, num_arms, num_clusters)
    if not 0 < epsilon < 1:
        raise InvalidEpsilonError(f"epsilon must lie in (0, 1), got {epsilon}")
    optimal_arms = list(optimal_arms)
    if len(optimal_arms) != num_clusters:
        raise InvalidDimensionsError("optimal_arms must have one entry per cluster")
    if any(a < 0 or a >= num_arms for a in optimal_arms):
        raise ArmOutOfRangeError("optimal arm index outside the arm set")
    X = np.full((num_clusters, num_arms), (1.0 - epsilon) / 2.0)
    X[np.arange(num_clusters), optimal_arms] = (1.0 + epsilon) / 2.0
    cluster_of = np.arange(num_users) % num_clusters
    P = X[cluster_of]
    return Instance(
        num_users, num_arms, num_clusters, P, cluster_of, X, nu=0.0,
        default_noise=NoiseModel("bernoulli-reward", sigma=0.5),
    )


def validate_instance(instance: Instance, atol: float = 1e-12) -> None:
    """Check the structural invariants; raises AssertionError on violation."""
    inst = instance
    assert inst.P.shape == (inst.num_users, inst.num_arms)
    assert inst.X.shape == (inst.num_clusters, inst.num_arms)
    assert np.all((inst.cluster_of >= 0) & (inst.cluster_of < inst.num_clusters))
    assert np.array_equal(inst.best_arm, np.argmax(inst.P, axis=1))
    assert np.all(inst.gaps >= -atol)
    if inst.nu == 0:
        assert np.allclose(inst.P, inst.X[inst.cluster_of], atol=atol)
        return
    # relaxed structure: same best arm and entrywise closeness within clusters,
    # best-arm separation across clusters
    thresh = RCS_SEPARATION_FACTOR * inst.nu
    for u in range(inst.num_users):
        for v in range(u + 1, inst.num_users):
            if inst.cluster_of[u] == inst.cluster_of[v]:
                assert inst.best_arm[u] == inst.best_arm[v]
                assert np.max(np.abs(inst.P[u] - inst.P[v])) <= inst.nu + atol
            else:
                bu, bv = inst.best_arm[u], inst.best_arm[v]
                sep_u = abs(inst.P[u, bu] - inst.P[v, bu])
                sep_v = abs(inst.P[u, bv] - inst.P[v, bv])
                assert sep_u > thresh or sep_v > thresh


class RunHistory:
    """Per-round ledger of (user, arm, reward, instantaneous regret).

    `cumulative_regret[t]` is the prefix sum of instantaneous regrets up to
    and including round t.
    """

    def __init__(self, capacity: int = 1024):
        self._n = 0
        self.users = np.empty(capacity, dtype=np.int32)
        self.arms = np.empty(capacity, dtype=np.int32)
        self.rewards = np.empty(capacity, dtype=float)
        self.inst_regret = np.empty(capacity, dtype=float)
        self.cumulative_regret = np.empty(capacity, dtype=float)
        self._total = 0.0

    def __len__(self) -> int:
        return self._n

    def _grow(self) -> None:
        cap = max(2 * self.users.size, 1024)
        for name in ("users", "arms", "rewards", "inst_regret", "cumulative_regret"):
            arr = getattr(self, name)
            new = np.empty(cap, dtype=arr.dtype)
            new[: self._n] = arr[: self._n]
            setattr(self, name, new)

    def append(self, user: int, arm: int, reward: float, inst_regret: float) -> None:
        if self._n >= self.users.size:
            self._grow()
        n = self._n
        self.users[n] = user
        self.arms[n] = arm
        self.rewards[n] = reward
        self.inst_regret[n] = inst_regret
        self._total += inst_regret
        self.cumulative_regret[n] = self._total
        self._n = n + 1

    @property
    def final_regret(self) -> float:
        return self._total

    def regret_at(self, t: int) -> float:
        """Cumulative regret after round t (1-based round count)."""
        if t <= 0:
            return 0.0
        return float(self.cumulative_regret[min(t, self._n) - 1])

    def trimmed(self) -> "RunHistory":
        for name in ("users", "arms", "rewards", "inst_regret", "cumulative_regret"):
            setattr(self, name, getattr(self, name)[: self._n])
        return self


def env_step(
    instance: Instance,
    noise: NoiseModel,
    policy_choice,
    state: RunHistory,
    rng_user: np.random.Generator,
    rng_noise: np.random.Generator,
) -> RunHistory:
    """Run one interaction round and append it to `state`."""
    u = int(rng_user.integers(0, instance.num_users))
    arm = int(policy_choice(u))
    if not 0 <= arm < instance.num_arms:
        raise ArmOutOfRangeError(f"policy returned arm {arm} for {instance.num_arms} arms")
    mean = instance.P[u, arm]
    draw = float(noise.draw_block(rng_noise, 1)[0])
    reward = noise.reward(mean, draw)
    inst_regret = float(instance.P[u, instance.best_arm[u]] - mean)
    state.append(u, arm, reward, inst_regret)
    return state


class Environment:
    """Round-driven simulator over one instance.

    The run seed splits into independent streams for user sampling and noise,
    pre-drawn for the whole horizon so a run is bit-reproducible.
    """

    def __init__(
        self,
        instance: Instance,
        noise: NoiseModel | None,
        seed,
        horizon: int,
    ):
        self.instance = instance
        self.noise = noise if noise is not None else (instance.default_noise or NoiseModel("none"))
        if self.noise.kind == "bernoulli-reward":
            if instance.P.min() < 0.0 or instance.P.max() > 1.0:
                raise ValueError("bernoulli-reward noise requires entries in [0, 1]")
        self.horizon = int(horizon)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        user_ss, noise_ss = ss.spawn(2)
        self._users = np.random.default_rng(user_ss).integers(
            0, instance.num_users, size=self.horizon
        )
        self._noise_draws = self.noise.draw_block(np.random.default_rng(noise_ss), self.horizon)
        self.history = RunHistory(capacity=self.horizon)
        self.t = 0
        self._P = instance.P
        self._best_reward = instance.P[np.arange(instance.num_users), instance.best_arm]

    @property
    def done(self) -> bool:
        return self.t >= self.horizon

    def peek_user(self) -> int:
        return int(self._users[self.t])

    def step(self, policy_choice) -> tuple[int, int, float]:
        """Advance one round; returns (user, arm, reward)."""
        t = self.t
        if t >= self.horizon:
            raise RuntimeError("environment horizon exhausted")
        u = int(self._users[t])
        return self._advance(t, u, int(policy_choice(u)))

    def play(self, arm: int) -> tuple[int, int, float]:
        """Advance one round with the arm already chosen for the pending user."""
        t = self.t
        if t >= self.horizon:
            raise RuntimeError("environment horizon exhausted")
        return self._advance(t, int(self._users[t]), int(arm))

    def _advance(self, t: int, u: int, arm: int) -> tuple[int, int, float]:
        if not 0 <= arm < self.instance.num_arms:
            raise ArmOutOfRangeError(f"policy returned arm {arm}")
        mean = self._P[u, arm]
        reward = self.noise.reward(mean, self._noise_draws[t])
        self.history.append(u, arm, reward, float(self._best_reward[u] - mean))
        self.t = t + 1
        return u, arm, reward


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_instance(instance: Instance, path) -> None:
    """Write the instance as structured text with 17-significant-digit floats."""
    inst = instance
    noise = inst.default_noise
    lines = ["# clusterbandits instance v1", "[meta]"]
    lines.append(f"num_users = {inst.num_users}")
    lines.append(f"num_arms = {inst.num_arms}")
    lines.append(f"num_clusters = {inst.num_clusters}")
    lines.append(f"nu = {_fmt(inst.nu)}")
    lines.append(f"noise_kind = {noise.kind if noise else 'none'}")
    lines.append(f"noise_sigma = {_fmt(noise.sigma if noise else 0.0)}")
    lines.append("[cluster_of]")
    lines.append(" ".join(str(int(c)) for c in inst.cluster_of))
    lines.append("[X]")
    for row in inst.X:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append("[P]")
    for row in inst.P:
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_instance(path) -> Instance:
    meta: dict[str, str] = {}
    sections: dict[str, list[str]] = {"cluster_of": [], "X": [], "P": []}
    current = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                continue
            if current == "meta":
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
            elif current in sections:
                sections[current].append(line)
    num_users = int(meta["num_users"])
    num_arms = int(meta["num_arms"])
    num_clusters = int(meta["num_clusters"])
    cluster_of = np.array(" ".join(sections["cluster_of"]).split(), dtype=int)
    X = np.array([[float(v) for v in row.split()] for row in sections["X"]])
    P = np.array([[float(v) for v in row.split()] for row in sections["P"]])
    noise_kind = meta.get("noise_kind", "none")
    noise = NoiseModel(noise_kind, float(meta.get("noise_sigma", "0"))) if noise_kind != "none" else None
    return Instance(
        num_users, num_arms, num_clusters, P, cluster_of, X,
        nu=float(meta.get("nu", "0")), default_noise=noise,
    )
