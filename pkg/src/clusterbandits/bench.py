"""Experiment harness: config parsing, seeded multi-run execution, CSV and
SVG emission, and regret-scaling studies.

Config files are flat key = value text with [section] headers.  The
[instance] section describes the problem (or points at a saved instance
file), [experiment] holds horizon/seeds/output options, and each
[algorithm <name>] section selects a policy with its parameters.  Every run
of an experiment shares the instance; the interaction randomness varies with
the per-run seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, checker, env, lattice, rcs

ALGORITHM_NAMES = ("lattice", "lattice-rcs", "ucb", "etc", "simplified-lattice")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class ExperimentConfig:
    instance: dict[str, str]
    experiment: dict[str, str]
    algorithms: list[tuple[str, dict[str, str]]]

    @property
    def horizon(self) -> int:
        return int(self.experiment.get("horizon", "0"))

    @property
    def horizons(self) -> list[int]:
        raw = self.experiment.get("horizons", "")
        if raw:
            return [int(x) for x in raw.split(",") if x.strip()]
        return [self.horizon]

    @property
    def seeds(self) -> list[int]:
        return [int(x) for x in self.experiment.get("seeds", "").split(",") if x.strip()]

    @property
    def check(self) -> bool:
        return self.experiment.get("check", "false").lower() == "true"

    @property
    def full_history(self) -> bool:
        return self.experiment.get("full_history", "false").lower() == "true"


def parse_config(text: str) -> ExperimentConfig:
    sections: list[tuple[str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {}
            sections.append((line[1:-1].strip(), current))
            continue
        if current is None or "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value' inside a section")
        key, _, value = line.partition("=")
        current[key.strip()] = value.strip()
    instance: dict[str, str] = {}
    experiment: dict[str, str] = {}
    algorithms: list[tuple[str, dict[str, str]]] = []
    for name, body in sections:
        if name == "instance":
            instance = body
        elif name == "experiment":
            experiment = body
        elif name.startswith("algorithm"):
            algo = name[len("algorithm"):].strip()
            if algo not in ALGORITHM_NAMES:
                raise ConfigError(
                    f"unknown algorithm {algo!r}; expected one of {', '.join(ALGORITHM_NAMES)}"
                )
            algorithms.append((algo, body))
        else:
            raise ConfigError(f"unknown section [{name}]")
    config = ExperimentConfig(instance, experiment, algorithms)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    if not config.algorithms:
        raise ConfigError("experiment: at least one [algorithm <name>] section is required")
    if not config.seeds:
        raise ConfigError("experiment.seeds: at least one seed is required")
    if min(config.horizons) < 1:
        raise ConfigError("experiment.horizon: must be >= 1")
    kind = config.instance.get("kind", "")
    if kind not in ("cs", "rcs", "hard", "file"):
        raise ConfigError("instance.kind: must be one of cs, rcs, hard, file")
    if kind == "file" and not config.instance.get("path"):
        raise ConfigError("instance.path: required when kind = file")


def serialize_config(config: ExperimentConfig) -> str:
    lines: list[str] = []
    for name, body in (("instance", config.instance), ("experiment", config.experiment)):
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {value}")
    for algo, body in config.algorithms:
        lines.append(f"[algorithm {algo}]")
        for key, value in body.items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def build_instance(spec: dict[str, str]) -> env.Instance:
    kind = spec.get("kind", "cs")
    if kind == "file":
        return env.load_instance(spec["path"])
    seed = int(spec.get("seed", "0"))
    num_users = int(spec.get("num_users", "0"))
    num_arms = int(spec.get("num_arms", "0"))
    num_clusters = int(spec.get("num_clusters", "1"))
    if kind == "hard":
        optimal = [int(x) for x in spec.get("optimal_arms", "").split(",") if x.strip()]
        return env.generate_hard_instance(
            num_users, num_arms, num_clusters, float(spec.get("epsilon", "0.5")), optimal, seed
        )
    dist = env.RowDistribution.parse(spec.get("row_distribution", "gaussian(0,1)"))
    if kind == "cs":
        return env.generate_cs_instance(num_users, num_arms, num_clusters, dist, seed)
    return env.generate_rcs_instance(
        num_users, num_arms, num_clusters, float(spec.get("nu", "0")), dist, seed
    )


def build_noise(spec: dict[str, str], instance: env.Instance) -> env.NoiseModel:
    kind = spec.get("noise", "")
    if not kind:
        return instance.default_noise or env.NoiseModel("none")
    return env.NoiseModel(kind, float(spec.get("sigma", "0")))


def _float_or(params: dict[str, str], key: str, default: float | None) -> float | None:
    if key in params:
        return float(params[key])
    return default


def _run_algorithm(
    name: str,
    params: dict[str, str],
    instance: env.Instance,
    noise: env.NoiseModel,
    horizon: int,
    seed: int,
):
    """Dispatch one (algorithm, seed) cell; returns (history, trace_or_none)."""
    sigma = float(params.get("sigma", noise.sigma))
    C = int(params.get("num_clusters", instance.num_clusters))
    if name == "ucb":
        return baselines.run_per_user_ucb(instance, horizon, sigma, seed, noise), None
    if name == "etc":
        etc_cfg = baselines.EtcConfig(
            num_clusters=C,
            sigma=sigma,
            mu=float(params.get("mu", "1.0")),
            c_p=float(params.get("c_p", "1.0")),
            c_lambda=float(params.get("c_lambda", "2.5")),
            b=int(params.get("b", "1")),
            f=int(params.get("f", "1")),
        )
        history = baselines.run_explore_then_commit(
            instance, horizon, float(params.get("explore_fraction", "0.1")), etc_cfg, seed, noise
        )
        return history, None
    if name == "simplified-lattice":
        cfg = baselines.SimplifiedConfig(
            num_clusters=C,
            sigma=sigma,
            L=int(params.get("L", "5")),
            rho=float(params.get("rho", "0.5")),
            phase_base=int(params.get("phase_base", "1500")),
            phase_step=int(params.get("phase_step", "500")),
            nu_scale=float(params.get("nu_scale", str(1.0 / 6.0))),
            nu_base=float(params.get("nu_base", "8.0")),
            lam_coeff=float(params.get("lam_coeff", "5.0")),
            lam_denom=float(params.get("lam_denom", "200.0")),
            elbow_ratio=float(params.get("elbow_ratio", "0.6")),
            objective_floor=float(params.get("objective_floor", "100.0")),
            p_inf_mode=params.get("p_inf_mode", "ground_truth"),
        )
        return baselines.run_simplified_lattice(instance, cfg, horizon, seed, noise)
    base = lattice.LatticeConfig(
        num_clusters=C,
        sigma=sigma,
        gamma=_float_or(params, "gamma", None),
        c_prime=float(params.get("c_prime", "1.0")),
        c_prime_override=_float_or(params, "c_prime_override", None),
        mu=float(params.get("mu", "1.0")),
        c_p=float(params.get("c_p", "1.0")),
        c_b=float(params.get("c_b", "1.0")),
        c_lambda=float(params.get("c_lambda", "2.5")),
        f_cap=int(params.get("f_cap", "15")),
    )
    if name == "lattice":
        return lattice.run_lattice(instance, base, horizon, seed, noise)
    rcs_cfg = rcs.RcsConfig(
        base=base,
        nu=float(params.get("nu", str(instance.nu))),
        edge_slack_multiplier=float(params.get("edge_slack_multiplier", "3.0")),
    )
    return rcs.run_lattice_rcs(instance, rcs_cfg, horizon, seed, noise)


def checkpoint_grid(horizon: int, count: int = 100) -> np.ndarray:
    pts = np.unique(
        np.round(np.logspace(0, math.log10(max(horizon, 1)), count)).astype(int)
    )
    pts = pts[(pts >= 1) & (pts <= horizon)]
    if len(pts) == 0 or pts[-1] != horizon:
        pts = np.append(pts, horizon)
    return pts


@dataclass
class RunResult:
    run_id: int
    algorithm: str
    seed: int
    horizon: int
    history: env.RunHistory
    trace: lattice.PhaseTrace | None


@dataclass
class Report:
    config: ExperimentConfig
    checkpoints: np.ndarray
    runs: list[RunResult] = field(default_factory=list)
    assumption: checker.AssumptionReport | None = None

    def regret_rows(self, full: bool = False) -> list[dict]:
        rows = []
        for run in self.runs:
            hist = run.history
            ts = range(1, len(hist) + 1) if full else checkpoint_grid(run.horizon)
            for t in ts:
                rows.append(
                    {
                        "run_id": run.run_id,
                        "algorithm": run.algorithm,
                        "seed": run.seed,
                        "t": int(t),
                        "instant_regret": format(float(hist.inst_regret[t - 1]), ".17g"),
                        "cum_regret": format(hist.regret_at(int(t)), ".17g"),
                    }
                )
        return rows

    def final_regrets(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for run in self.runs:
            out.setdefault(run.algorithm, []).append(run.history.final_regret)
        return out

    def loglog_slope(self, algorithm: str, lower_frac: float = 0.5) -> float:
        """Log-log slope of the mean cumulative regret over the last part of
        the horizon."""
        curves = []
        for run in self.runs:
            if run.algorithm != algorithm:
                continue
            ts = checkpoint_grid(run.horizon)
            curves.append([run.history.regret_at(int(t)) for t in ts])
        if not curves:
            raise KeyError(algorithm)
        ts = checkpoint_grid(self.runs[0].horizon)
        mean = np.mean(curves, axis=0)
        keep = (ts >= lower_frac * ts[-1]) & (mean > 0)
        if keep.sum() < 2:
            return math.nan
        return float(np.polyfit(np.log(ts[keep]), np.log(mean[keep]), 1)[0])


def summarize(regret_rows: list[dict]) -> list[dict]:
    """Mean and standard error of cumulative regret per (algorithm, t)."""
    groups: dict[tuple[str, int], list[float]] = {}
    order: list[tuple[str, int]] = []
    for row in regret_rows:
        key = (row["algorithm"], int(row["t"]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(float(row["cum_regret"]))
    out = []
    for algo, t in order:
        vals = np.array(groups[(algo, t)])
        mean = float(vals.mean())
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(
            {
                "algorithm": algo,
                "checkpoint_t": t,
                "mean": format(mean, ".17g"),
                "stderr": format(stderr, ".17g"),
            }
        )
    return out


def run_experiment(config: ExperimentConfig, progress=None) -> Report:
    """Execute every (algorithm, horizon, seed) cell sequentially.

    The instance is built once from its own seed; each cell's interaction
    randomness comes from the cell seed, so reruns are bit-identical.
    """
    validate_config(config)
    instance = build_instance(config.instance)
    noise = build_noise(config.instance, instance)
    horizons = config.horizons
    report = Report(config=config, checkpoints=checkpoint_grid(max(horizons)))
    if config.check:
        report.assumption = checker.assumption_report(instance)
    run_id = 0
    for horizon in horizons:
        for algo, params in config.algorithms:
            for seed in config.seeds:
                history, trace = _run_algorithm(algo, params, instance, noise, horizon, seed)
                report.runs.append(RunResult(run_id, algo, seed, horizon, history, trace))
                run_id += 1
                if progress is not None:
                    progress(algo, horizon, seed, history.final_regret)
    return report


def _csv_line(values) -> str:
    out = []
    for v in values:
        s = str(v)
        if "," in s or '"' in s:
            s = '"' + s.replace('"', '""') + '"'
        out.append(s)
    return ",".join(out)


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(_csv_line(fieldnames) + "\n")
        for row in rows:
            fh.write(_csv_line([row.get(k, "") for k in fieldnames]) + "\n")


def read_csv(path: Path) -> list[dict]:
    import csv as _csv

    with open(path) as fh:
        return list(_csv.DictReader(fh))


REGRET_FIELDS = ["run_id", "algorithm", "seed", "t", "instant_regret", "cum_regret"]
SUMMARY_FIELDS = ["algorithm", "checkpoint_t", "mean", "stderr"]
TRACE_FIELDS = [
    "run_id",
    "algorithm",
    "seed",
    "phase",
    "delta",
    "mode",
    "num_sets",
    "set_sizes",
    "arm_set_sizes",
    "rounds_used",
    "oracle_error",
]


def emit_report(report: Report, out_dir) -> dict[str, Path]:
    """Write regret.csv, summary.csv, phase_trace.csv and regret.svg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    regret_rows = report.regret_rows(full=report.config.full_history)
    paths["regret"] = out / "regret.csv"
    write_csv(paths["regret"], REGRET_FIELDS, regret_rows)
    summary_rows = summarize(regret_rows)
    paths["summary"] = out / "summary.csv"
    write_csv(paths["summary"], SUMMARY_FIELDS, summary_rows)
    trace_rows = []
    for run in report.runs:
        if run.trace is None:
            continue
        for row in run.trace.csv_rows():
            row = dict(row)
            row.setdefault("mode", "")
            row.update(run_id=run.run_id, algorithm=run.algorithm, seed=run.seed)
            trace_rows.append(row)
    paths["phase_trace"] = out / "phase_trace.csv"
    write_csv(paths["phase_trace"], TRACE_FIELDS, trace_rows)
    if report.runs:
        paths["svg"] = out / "regret.svg"
        write_regret_svg(summary_rows, paths["svg"])
    if report.assumption is not None:
        paths["assumptions"] = out / "assumptions.txt"
        paths["assumptions"].write_text(report.assumption.to_text())
    return paths


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def write_regret_svg(summary_rows: list[dict], path) -> None:
    """Cumulative-regret chart: one mean line per algorithm with a shaded
    standard-error band."""
    series: dict[str, list[tuple[int, float, float]]] = {}
    for row in summary_rows:
        series.setdefault(row["algorithm"], []).append(
            (int(row["checkpoint_t"]), float(row["mean"]), float(row["stderr"]))
        )
    width, height, margin = 720, 480, 60
    t_max = max((pt[0] for pts in series.values() for pt in pts), default=1)
    y_max = max((pt[1] + pt[2] for pts in series.values() for pt in pts), default=1.0)
    y_max = y_max if y_max > 0 else 1.0

    def sx(t: float) -> float:
        return margin + (width - 2 * margin) * t / t_max

    def sy(y: float) -> float:
        return height - margin - (height - 2 * margin) * y / y_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 16}" text-anchor="middle" '
        f'font-size="14">round</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height / 2:.1f})">cumulative regret</text>',
    ]
    for i, (algo, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts)
        upper = [(t, m + s) for t, m, s in pts]
        lower = [(t, max(m - s, 0.0)) for t, m, s in reversed(pts)]
        band = " ".join(f"{sx(t):.2f},{sy(y):.2f}" for t, y in upper + lower)
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.15"/>')
        line = " ".join(f"{sx(t):.2f},{sy(m):.2f}" for t, m, _ in pts)
        parts.append(
            f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = margin + 18 * i
        parts.append(
            f'<line x1="{width - margin - 150}" y1="{ly}" x2="{width - margin - 120}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - margin - 112}" y="{ly + 4}" font-size="13">{algo}</text>'
        )
    parts.append(f'<text x="{margin}" y="{height - margin + 18}" font-size="11">0</text>')
    parts.append(
        f'<text x="{width - margin}" y="{height - margin + 18}" text-anchor="end" '
        f'font-size="11">{t_max}</text>'
    )
    parts.append(
        f'<text x="{margin - 6}" y="{margin + 4}" text-anchor="end" '
        f'font-size="11">{y_max:.0f}</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def scaling_rows(report: Report) -> list[dict]:
    """Final regret per (algorithm, horizon, seed) for scaling studies."""
    rows = []
    for run in report.runs:
        rows.append(
            {
                "algorithm": run.algorithm,
                "horizon": run.horizon,
                "seed": run.seed,
                "final_regret": format(run.history.final_regret, ".17g"),
            }
        )
    return rows


def scaling_slope(rows: list[dict], algorithm: str) -> float:
    """Log-log slope of mean final regret against the horizon."""
    by_T: dict[int, list[float]] = {}
    for row in rows:
        if row["algorithm"] != algorithm:
            continue
        by_T.setdefault(int(row["horizon"]), []).append(float(row["final_regret"]))
    if len(by_T) < 2:
        raise ValueError("need at least two horizons for a slope fit")
    Ts = sorted(by_T)
    means = [np.mean(by_T[t]) for t in Ts]
    return float(np.polyfit(np.log(Ts), np.log(means), 1)[0])
