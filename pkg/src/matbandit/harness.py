"""Episode driver and regret accounting.

An episode pairs a reward model with a policy for exactly ``T`` rounds. Regret
is charged against the expected rewards (the hidden matrix), not the realized
noisy ones, so a recommendation of item ``j`` to user ``u`` contributes
``max_t P[u, t] - P[u, j]`` regardless of the drawn noise; the realized
variant is kept as an optional diagnostic. Everything is deterministic given
the run seed, and sweeps reuse the same seed list at every grid point so
policies are compared on identical environments.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import env as env_mod
from . import policies as pol
from .streams import substream


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "synthetic"  # or "csv"
    num_users: int = 100
    num_items: int = 150
    gap: float = 1.0
    noise_variance: float = 0.1
    noise_kind: str = "gaussian"
    csv_path: str | None = None


@dataclass(frozen=True)
class RunSpec:
    env: EnvSpec = EnvSpec()
    policy: str = "octal"
    policy_params: dict = field(default_factory=dict)
    horizon: int = 1000
    seed: int = 0
    repetitions: int = 10

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")


@dataclass
class RegretTrace:
    """Per-round and cumulative expected regret for one episode."""

    per_round: np.ndarray
    cumulative: np.ndarray
    total: float
    policy: str
    seed: int
    realized_per_round: np.ndarray | None = None
    phase_starts: list[int] | None = None
    policy_info: dict = field(default_factory=dict)


def build_env(spec: EnvSpec, seed: int) -> env_mod.RewardModel:
    if spec.kind == "csv":
        if not spec.csv_path:
            raise ValueError("csv environments need csv_path")
        return env_mod.load_matrix_csv(
            spec.csv_path, spec.noise_variance, noise_kind=spec.noise_kind
        )
    return env_mod.build_rank1_gap_env(
        spec.num_users,
        spec.num_items,
        spec.gap,
        noise_variance_proxy=spec.noise_variance,
        seed=seed,
        noise_kind=spec.noise_kind,
    )


def _known_from_model(model: env_mod.RewardModel) -> pol.KnownQuantities:
    m, n, r = model.num_users, model.num_items, model.rank
    mu_left = m / r * float(np.max(np.sum(model.left_singular**2, axis=1)))
    mu_right = n / r * float(np.max(np.sum(model.right_singular**2, axis=1)))
    return pol.KnownQuantities(
        sigma=float(np.sqrt(model.noise_variance_proxy)),
        rank=r,
        mu=max(mu_left, mu_right),
        max_abs_reward=model.max_abs_reward,
    )


def _build_etc(model, horizon, params, rng):
    params = dict(params)
    mode = params.pop("mode", "fixed_exploration")
    known = params.pop("known", None)
    if mode == "theory" and known is None:
        known = _known_from_model(model)
    # The noise level is part of the experimental protocol, not the hidden
    # matrix; practical runs use it to scale the completion regularizer.
    params.setdefault("noise_scale", float(np.sqrt(model.noise_variance_proxy)))
    config = pol.EtcConfig(mode=mode, known=known, **params)
    return pol.EtcPolicy(model.num_users, model.num_items, horizon, config, rng)


def _build_octal(model, horizon, params, rng, small_m=False):
    params = dict(params)
    known = params.pop("known", None)
    needs_known = "theory" in (
        params.get("delta_schedule", "practical"),
        params.get("round_schedule", "practical"),
    )
    if needs_known and known is None:
        known = _known_from_model(model)
    config = pol.OctalConfig(known=known, small_m_variant=small_m, **params)
    cls = pol.OctalSmallMPolicy if small_m else pol.OctalPolicy
    return cls(model.num_users, model.num_items, horizon, config, rng)


def _build_ucb(model, horizon, params, rng):
    coef = dict(params).pop("exploration_coefficient", 1.0)
    return pol.UcbPolicy(model.num_users, model.num_items, horizon, coef)


POLICY_BUILDERS: dict[str, Callable] = {
    "etc": _build_etc,
    "octal": _build_octal,
    "octal_small_m": lambda m, h, p, r: _build_octal(m, h, p, r, small_m=True),
    "ucb": _build_ucb,
}


def run_episode(spec: RunSpec) -> RegretTrace:
    """Run one policy for exactly ``horizon`` rounds and account its regret."""
    model = build_env(spec.env, spec.seed)
    if spec.policy not in POLICY_BUILDERS:
        raise ValueError(f"unknown policy {spec.policy!r}")
    policy_rng = substream(spec.seed, "policy", spec.policy)
    noise_rng = substream(spec.seed, "noise", spec.policy)
    policy = POLICY_BUILDERS[spec.policy](model, spec.horizon, spec.policy_params, policy_rng)

    m = model.num_users
    users = np.arange(m)
    row_max = model.expected_rewards.max(axis=1)
    best_mean = float(row_max.mean())
    per_round = np.empty(spec.horizon)
    realized = np.empty(spec.horizon)
    for t in range(1, spec.horizon + 1):
        items = np.asarray(policy.next_recommendations(t))
        if items.shape != (m,):
            raise RuntimeError(
                f"policy {spec.policy!r} returned {items.shape} recommendations at round {t}"
            )
        rewards = env_mod.sample_rewards(model, users, items, noise_rng)
        policy.observe(t, rewards)
        per_round[t - 1] = best_mean - float(model.expected_rewards[users, items].mean())
        realized[t - 1] = best_mean - float(rewards.mean())

    cumulative = np.cumsum(per_round)
    return RegretTrace(
        per_round=per_round,
        cumulative=cumulative,
        total=float(cumulative[-1]),
        policy=spec.policy,
        seed=spec.seed,
        realized_per_round=realized,
        phase_starts=list(getattr(policy, "phase_starts", [])) or None,
        policy_info=policy.info(),
    )


@dataclass
class AverageResult:
    mean_per_round: np.ndarray
    std_per_round: np.ndarray | None
    mean_total: float
    std_total: float | None
    num_runs: int
    traces: list[RegretTrace]


def average_runs(specs: Iterable[RunSpec]) -> AverageResult:
    """Pointwise mean/std of traces that differ only in seed."""
    traces = [run_episode(s) for s in specs]
    if not traces:
        raise ValueError("need at least one run")
    horizons = {t.per_round.size for t in traces}
    if len(horizons) != 1:
        raise ValueError(f"mismatched horizons across runs: {sorted(horizons)}")
    stacked = np.stack([t.per_round for t in traces])
    totals = np.asarray([t.total for t in traces])
    many = len(traces) > 1
    return AverageResult(
        mean_per_round=stacked.mean(axis=0),
        std_per_round=stacked.std(axis=0, ddof=1) if many else None,
        mean_total=float(totals.mean()),
        std_total=float(totals.std(ddof=1)) if many else None,
        num_runs=len(traces),
        traces=traces,
    )


def seeds_for(base: RunSpec) -> list[int]:
    return [base.seed + i for i in range(base.repetitions)]


@dataclass
class SweepPoint:
    x: float
    per_policy_mean: dict[str, float]
    per_policy_std: dict[str, float | None]
    num_runs: int


@dataclass
class SweepResult:
    axis: str  # "gap", "exploration_m", or "round_index"
    points: list[SweepPoint]


def _spec_at(base: RunSpec, axis: str, x) -> RunSpec:
    if axis == "gap":
        return replace(base, env=replace(base.env, gap=float(x)))
    if axis == "exploration_m":
        params = dict(base.policy_params)
        params["fixed_m"] = int(x)
        return replace(base, policy_params=params)
    if axis == "round_index":
        return base
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(
    axis: str,
    grid: Iterable,
    base: RunSpec,
    policies: list[tuple[str, dict]] | None = None,
) -> SweepResult:
    """Averaged runs per grid point, on identical seed sets for every policy."""
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must be nonempty")
    if policies is None:
        policies = [(base.policy, base.policy_params)]
    seeds = seeds_for(base)

    if axis == "round_index":
        points = []
        results = {}
        for name, params in policies:
            spec = replace(base, policy=name, policy_params=params)
            results[name] = average_runs([replace(spec, seed=s) for s in seeds])
        for x in grid:
            t = int(x) - 1
            points.append(
                SweepPoint(
                    x=float(x),
                    per_policy_mean={
                        n: float(r.mean_per_round[t]) for n, r in results.items()
                    },
                    per_policy_std={
                        n: (float(r.std_per_round[t]) if r.std_per_round is not None else None)
                        for n, r in results.items()
                    },
                    num_runs=len(seeds),
                )
            )
        return SweepResult(axis, points)

    points = []
    for x in grid:
        means: dict[str, float] = {}
        stds: dict[str, float | None] = {}
        for name, params in policies:
            spec = _spec_at(replace(base, policy=name, policy_params=params), axis, x)
            result = average_runs([replace(spec, seed=s) for s in seeds])
            means[name] = result.mean_total
            stds[name] = result.std_total
        points.append(SweepPoint(float(x), means, stds, len(seeds)))
    return SweepResult(axis, points)
