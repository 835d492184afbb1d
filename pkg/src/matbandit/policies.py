"""Online decision policies over a hidden low-rank reward matrix.

All policies speak the same round protocol: ``next_recommendations(t)``
returns one item per managed user, ``observe(t, rewards)`` feeds back the
noisy rewards, and the two must strictly alternate. Policies never touch the
reward model itself; whatever side information a schedule assumes known
(noise scale, rank, incoherence, reward magnitude) arrives explicitly through
their configuration.

Implemented policies:

* explore-then-commit (``etc``): estimate the full matrix from uniform
  exploration, then commit each user to the estimated best item;
* phased elimination (``octal``): iteratively label users into the two sign
  clusters of a rank-1 matrix while shrinking each cluster's candidate items;
* a variant of phased elimination for small user counts (``octal_small_m``)
  that keeps unlabelled users inside both cluster sub-problems;
* per-user UCB (``ucb``), the structure-blind baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generator

import numpy as np

from . import matcomp


# ---------------------------------------------------------------------------
# round protocol
# ---------------------------------------------------------------------------


class RoundPolicy:
    """Base class enforcing the recommend/observe alternation."""

    def __init__(self, num_users: int):
        self.num_users = num_users
        self._awaiting_observe = False
        self.finished = False

    def _recommend(self, t: int) -> np.ndarray:
        raise NotImplementedError

    def _update(self, t: int, rewards: np.ndarray) -> None:
        raise NotImplementedError

    def next_recommendations(self, t: int) -> np.ndarray:
        if self._awaiting_observe:
            raise RuntimeError("observe() must be called before the next recommendations")
        items = self._recommend(t)
        self._awaiting_observe = True
        return items

    def observe(self, t: int, rewards: np.ndarray) -> None:
        if not self._awaiting_observe:
            raise RuntimeError("observe() called without pending recommendations")
        self._awaiting_observe = False
        self._update(t, np.asarray(rewards, dtype=float))

    def info(self) -> dict:
        """Derived parameters and flags for run summaries."""
        return {}


class _GeneratorPolicy(RoundPolicy):
    """Policy driven by an infinite generator of recommendation vectors."""

    def __init__(self, num_users: int):
        super().__init__(num_users)
        self.rounds_seen = 0
        self._gen = self._plan()
        self._pending = next(self._gen)

    def _plan(self) -> Generator[np.ndarray, np.ndarray, None]:
        raise NotImplementedError

    def _recommend(self, t: int) -> np.ndarray:
        return self._pending

    def _update(self, t: int, rewards: np.ndarray) -> None:
        self.rounds_seen += 1
        self._pending = self._gen.send(rewards)


@dataclass(frozen=True)
class KnownQuantities:
    """Side information the theory-mode schedules treat as given."""

    sigma: float
    rank: int = 1
    mu: float = 1.0
    max_abs_reward: float = 1.0


# ---------------------------------------------------------------------------
# explore-then-commit
# ---------------------------------------------------------------------------


@dataclass
class EtcConfig:
    repetitions: int = 1
    mode: str = "fixed_exploration"  # or "theory"
    fixed_m: int | None = 25
    C: float = 1.0
    C_lambda: float = 1.0
    known: KnownQuantities | None = None
    # Fixed-exploration solves: an explicit value wins; otherwise the
    # regularizer follows C_lambda * noise_scale * sqrt(d2 * m_pass / N),
    # the usual rule at the realized sampling rate. Theory mode derives its own.
    regularizer: float | None = None
    noise_scale: float | None = None
    solver_tolerance: float = 1e-5  # policy solves feed an argmax, not a norm bound

    def __post_init__(self) -> None:
        if self.repetitions < 1 or self.repetitions % 2 == 0:
            raise ValueError("repetitions must be odd and positive")
        if self.mode not in ("theory", "fixed_exploration"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "theory" and self.known is None:
            raise ValueError("theory mode requires the known quantities")
        if self.mode == "fixed_exploration":
            if self.fixed_m is None or self.fixed_m < 1:
                raise ValueError("fixed_exploration mode needs fixed_m >= 1")
            if self.fixed_m < self.repetitions:
                raise ValueError("fixed_m must be at least the number of repetitions")


@dataclass(frozen=True)
class EtcDerivedParams:
    v: float
    p: float
    s: int
    regularizer: float
    d2: int


def etc_derive_params(config: EtcConfig, num_users: int, num_items: int, horizon: int) -> EtcDerivedParams:
    """Exploration parameters from the horizon and the known quantities.

    ``v`` is the target observation mass per cell; ``p`` is clamped to (0, 1]
    and ``s = ceil(v / p)`` absorbs the rest, which also covers the edge case
    where the target mass falls below the sampling floor (then s = 1).
    """
    kn = config.known
    if kn is None:
        raise ValueError("theory parameters need the known quantities")
    d2 = min(num_users, num_items)
    if d2 < 2:
        raise ValueError("need min(num_users, num_items) >= 2")
    log_d2 = np.log(d2)
    v = (num_items * kn.max_abs_reward) ** (-2.0 / 3.0) * (
        horizon * kn.sigma * kn.rank / np.sqrt(d2) * np.sqrt(kn.mu**3 * log_d2)
    ) ** (2.0 / 3.0)
    p = min(1.0, config.C * kn.mu**2 * log_d2**3 / d2)
    s = max(1, matcomp.ceil_exact(v / p))
    lam = config.C_lambda * kn.sigma * float(np.sqrt(d2 * p))
    return EtcDerivedParams(float(v), float(p), s, lam, d2)


class EtcPolicy(_GeneratorPolicy):
    """Explore uniformly, estimate the reward matrix, then commit to argmax."""

    def __init__(
        self,
        num_users: int,
        num_items: int,
        horizon: int,
        config: EtcConfig,
        rng: np.random.Generator,
    ):
        self.num_items = num_items
        self.horizon = horizon
        self.config = config
        self.rng = rng
        self.derived: EtcDerivedParams | None = None
        self.committed_items: np.ndarray | None = None
        self.estimate_matrix: np.ndarray | None = None
        self.exploration_rounds = 0
        self.exploration_exceeds_horizon = False
        self._corrupt_pass: Callable[[int, np.ndarray], np.ndarray] | None = None
        super().__init__(num_users)

    def _plan(self):
        m, n = self.num_users, self.num_items
        cfg = self.config
        users = np.arange(m)
        items = np.arange(n)
        estimates = []

        if cfg.mode == "theory":
            params = etc_derive_params(cfg, m, n, self.horizon)
            self.derived = params
            nominal = cfg.repetitions * params.s * n * params.p
            self.exploration_exceeds_horizon = nominal > self.horizon
            solver = matcomp.CompletionConfig(
                regularizer=params.regularizer, rel_tolerance=cfg.solver_tolerance
            )
            for k in range(cfg.repetitions):
                mask = matcomp.sample_mask(users, items, params.p, self.rng)
                if mask.row_max_count == 0:
                    mask = matcomp.sample_mask(users, items, params.p, self.rng)
                if mask.row_max_count == 0:
                    estimates.append(
                        matcomp.CompletionEstimate(np.zeros((m, n)), users, items, degenerate=True)
                    )
                    continue
                b = mask.row_max_count
                acc, _ = yield from matcomp.estimation_rounds(mask, b * params.s, b, self.rng)
                self.exploration_rounds += b * params.s
                estimates.append(matcomp.assemble_estimate(acc, (m, n), solver, self.rng))
        else:
            splits = _even_split(cfg.fixed_m, cfg.repetitions)
            for k, m_k in enumerate(splits):
                lam = self._fixed_mode_regularizer(m_k)
                solver = matcomp.CompletionConfig(
                    regularizer=lam, rel_tolerance=cfg.solver_tolerance
                )
                mask = matcomp.full_mask(users, items)
                acc, _ = yield from matcomp.estimation_rounds(mask, m_k, n, self.rng)
                self.exploration_rounds += m_k
                estimates.append(matcomp.assemble_estimate(acc, (m, n), solver, self.rng))

        if self._corrupt_pass is not None:
            for k, est in enumerate(estimates):
                est.estimate = self._corrupt_pass(k, est.estimate)
        merged = matcomp.median_of_estimates(estimates)
        self.estimate_matrix = merged.estimate
        self.committed_items = merged.estimate.argmax(axis=1)
        while True:
            yield self.committed_items

    def _fixed_mode_regularizer(self, m_pass: int) -> float:
        cfg = self.config
        if cfg.regularizer is not None:
            return cfg.regularizer
        if cfg.noise_scale is None:
            return 5.0  # flat practical fallback when the noise scale is unknown
        p_eff = min(1.0, m_pass / self.num_items)
        d2 = min(self.num_users, self.num_items)
        return matcomp.default_regularizer(cfg.noise_scale, d2, p_eff, cfg.C_lambda)

    def info(self) -> dict:
        out = {
            "policy": "etc",
            "mode": self.config.mode,
            "repetitions": self.config.repetitions,
            "exploration_rounds": self.exploration_rounds,
            "exploration_exceeds_horizon": self.exploration_exceeds_horizon,
        }
        if self.config.mode == "fixed_exploration":
            out["fixed_m"] = self.config.fixed_m
            out["regularizer"] = self._fixed_mode_regularizer(
                _even_split(self.config.fixed_m, self.config.repetitions)[0]
            )
        if self.derived is not None:
            out.update(
                v=self.derived.v,
                p=self.derived.p,
                s=self.derived.s,
                regularizer=self.derived.regularizer,
                d2=self.derived.d2,
            )
        return out


def _even_split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# ---------------------------------------------------------------------------
# phased elimination
# ---------------------------------------------------------------------------


@dataclass
class OctalConfig:
    a: float = 7.0
    c: float = 1.0
    C: float = 1.0
    C_prime: float = 1.0
    C_lambda: float = 1.0
    repetitions: int = 1
    delta_schedule: str = "practical"  # or "theory"
    round_schedule: str = "practical"
    small_m_variant: bool = False
    min_cluster_threshold: Callable[[int, int], float] | None = None
    robust_fraction: float = 2.0 / 3.0
    step16_additive: bool = False
    known: KnownQuantities | None = None
    regularizer: float = 5.0  # practical solves; theory derives per sub-problem
    solver_tolerance: float = 1e-5

    def __post_init__(self) -> None:
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.repetitions < 1 or self.repetitions % 2 == 0:
            raise ValueError("repetitions must be odd and positive")
        if self.delta_schedule not in ("theory", "practical"):
            raise ValueError(f"unknown delta_schedule {self.delta_schedule!r}")
        if self.round_schedule not in ("theory", "practical"):
            raise ValueError(f"unknown round_schedule {self.round_schedule!r}")
        if not 0.0 < self.robust_fraction <= 1.0:
            raise ValueError("robust_fraction must lie in (0, 1]")
        if "theory" in (self.delta_schedule, self.round_schedule) and self.known is None:
            raise ValueError("theory schedules require the known quantities")

    def cluster_floor(self, num_users: int, horizon: int) -> float:
        if self.min_cluster_threshold is not None:
            return self.min_cluster_threshold(num_users, horizon)
        return num_users / np.sqrt(horizon)


@dataclass
class PhaseState:
    """Per-phase bookkeeping: unlabelled users, clusters, and good items."""

    phase: int
    delta: float
    unlabelled: np.ndarray
    cluster1: np.ndarray
    cluster2: np.ndarray
    items1: np.ndarray
    items2: np.ndarray
    per_user_good: dict[int, np.ndarray] = field(default_factory=dict)
    rounds_this_phase: int = 0

    @staticmethod
    def initial(num_users: int, num_items: int, small_m: bool = False) -> "PhaseState":
        empty = np.empty(0, dtype=np.int64)
        items1 = np.arange(num_items) if small_m else empty
        return PhaseState(
            phase=1,
            delta=0.0,
            unlabelled=np.arange(num_users),
            cluster1=empty,
            cluster2=empty.copy(),
            items1=items1,
            items2=empty.copy(),
        )


def octal_delta(
    phase: int,
    config: OctalConfig,
    num_items: int,
    scale_estimate: float | None = None,
) -> float:
    """Phase threshold: geometric in theory mode, estimate-anchored otherwise.

    The theory schedule returns 0 when the noise scale is 0 (degenerate; the
    policy then falls back to the practical schedule). The practical schedule
    divides the phase-1 estimate's magnitude by ``8 ** (phase + 1)``.
    """
    if phase < 1:
        raise ValueError("phase index starts at 1")
    if config.delta_schedule == "theory":
        kn = config.known
        return float(
            config.C_prime
            * 2.0**-phase
            * min(kn.max_abs_reward, kn.sigma * np.sqrt(kn.mu) / np.log(num_items))
        )
    if scale_estimate is None:
        raise ValueError("practical schedule needs the phase-1 estimate scale")
    return float(scale_estimate / 8.0 ** (phase + 1))


def octal_phase_rounds(
    phase: int,
    delta: float,
    n_users: int,
    n_items: int,
    config: OctalConfig,
) -> tuple[float, int, int]:
    """Per-sub-problem sampling plan ``(p, s, nominal_rounds)`` for one phase.

    The practical schedule observes the full grid for ``10 + 2**phase``
    rounds. The theory schedule applies the accuracy rule at the sub-problem's
    short dimension; a short dimension below 2 degenerates to exhaustive
    direct averaging (full grid, repetitions set to meet the threshold).
    """
    if config.round_schedule == "practical":
        m = 10 + 2**phase
        return 1.0, 1, m
    kn = config.known
    d2 = min(n_users, n_items)
    if d2 < 2:
        s = max(1, matcomp.ceil_exact((2.0 * kn.sigma / delta) ** 2)) if delta > 0 else 1
        return 1.0, s, s * n_items
    log_d2 = np.log(d2)
    p = min(1.0, config.C * kn.mu**2 * log_d2**3 / d2)
    if delta <= 0:
        raise ValueError("theory round schedule needs a positive phase threshold")
    s = max(1, matcomp.ceil_exact((config.c * kn.sigma * np.sqrt(kn.mu) / (delta * log_d2)) ** 2))
    return p, s, int(np.ceil(s * p * n_items))


def _good_items(row: np.ndarray, item_ids: np.ndarray, delta: float) -> np.ndarray:
    return item_ids[row + delta > row.max()]


def _robust_intersection(
    members: np.ndarray,
    good: dict[int, np.ndarray],
    fraction: float,
    num_items: int,
) -> np.ndarray:
    """Items present in at least ``fraction`` of the members' good sets.

    Falls back to the single most frequent item (lowest index on ties) when
    the intersection comes up empty.
    """
    if members.size == 0:
        return np.empty(0, dtype=np.int64)
    counts = np.zeros(num_items, dtype=np.int64)
    for u in members:
        counts[good[int(u)]] += 1
    keep = np.flatnonzero(counts >= fraction * members.size - 1e-9)
    if keep.size == 0:
        keep = np.asarray([int(np.argmax(counts))], dtype=np.int64)
    return keep


def octal_label_and_split(
    state: PhaseState,
    q_matrix: np.ndarray | None,
    p1_matrix: np.ndarray | None,
    p2_matrix: np.ndarray | None,
    delta: float,
    config: OctalConfig,
    num_users: int,
    num_items: int,
    horizon: int,
) -> PhaseState:
    """One phase transition: label users, split by pivot, intersect good items.

    Unlabelled users whose estimated reward spread exceeds the labelling
    threshold leave the unlabelled pool; every labelled user's good-item set is
    recomputed, all labelled users are re-partitioned around the lowest-index
    labelled pivot, each side's item set is the robust intersection of its
    members' good sets, and a side at or below the cluster floor is merged
    back into the unlabelled pool.
    """
    factor = 2.0 * config.a + 1.0 if config.step16_additive else 2.0 * config.a
    thresh = factor * delta
    all_items = np.arange(num_items)

    good: dict[int, np.ndarray] = {}
    b_cur = state.unlabelled
    if b_cur.size and q_matrix is not None:
        rows = q_matrix[b_cur]
        spread = rows.max(axis=1) - rows.min(axis=1)
        stay = spread <= thresh
        b_next = b_cur[stay]
        for u, row in zip(b_cur[~stay], rows[~stay]):
            good[int(u)] = _good_items(row, all_items, delta)
    else:
        b_next = b_cur.copy()

    for members, items, mat in (
        (state.cluster1, state.items1, p1_matrix),
        (state.cluster2, state.items2, p2_matrix),
    ):
        if members.size == 0:
            continue
        if mat is None or items.size == 0:
            for u in members:  # nothing measured; keep the previous good set
                good[int(u)] = state.per_user_good.get(int(u), items.copy())
            continue
        sub = mat[np.ix_(members, items)]
        for u, row in zip(members, sub):
            good[int(u)] = _good_items(row, items, delta)

    labelled = np.setdiff1d(np.arange(num_users), b_next)
    empty = np.empty(0, dtype=np.int64)
    if labelled.size == 0:
        return PhaseState(
            phase=state.phase + 1,
            delta=delta,
            unlabelled=b_next,
            cluster1=empty,
            cluster2=empty.copy(),
            items1=empty.copy(),
            items2=empty.copy(),
        )

    pivot_good = good[int(labelled[0])]
    side1, side2 = [], []
    pivot_set = set(pivot_good.tolist())
    for u in labelled:
        if pivot_set.intersection(good[int(u)].tolist()):
            side1.append(int(u))
        else:
            side2.append(int(u))
    m1 = np.asarray(side1, dtype=np.int64)
    m2 = np.asarray(side2, dtype=np.int64)

    n1 = _robust_intersection(m1, good, config.robust_fraction, num_items)
    n2 = _robust_intersection(m2, good, config.robust_fraction, num_items)

    floor = config.cluster_floor(num_users, horizon)
    if 0 < m1.size <= floor:
        b_next = np.union1d(b_next, m1)
        m1, n1 = empty, empty.copy()
    if 0 < m2.size <= floor:
        b_next = np.union1d(b_next, m2)
        m2, n2 = empty, empty.copy()

    kept = set(m1.tolist()) | set(m2.tolist())
    return PhaseState(
        phase=state.phase + 1,
        delta=delta,
        unlabelled=b_next,
        cluster1=m1,
        cluster2=m2,
        items1=n1,
        items2=n2,
        per_user_good={u: g for u, g in good.items() if u in kept},
    )


def octal_small_m_label_and_split(
    state: PhaseState,
    p1_matrix: np.ndarray | None,
    p2_matrix: np.ndarray | None,
    delta: float,
    config: OctalConfig,
    num_users: int,
    num_items: int,
) -> PhaseState:
    """Phase transition for the small-user-count variant.

    Unlabelled users are measured on both item sets jointly; the spread and
    the good sets combine the two estimates. No cluster is ever merged back.
    """
    factor = 2.0 * config.a + 1.0 if config.step16_additive else 2.0 * config.a
    thresh = factor * delta

    good: dict[int, np.ndarray] = {}
    b_cur = state.unlabelled
    sides = [
        (state.items1, p1_matrix),
        (state.items2, p2_matrix),
    ]
    if b_cur.size:
        his, los = [], []
        for items, mat in sides:
            if items.size and mat is not None:
                sub = mat[np.ix_(b_cur, items)]
                his.append(sub.max(axis=1))
                los.append(sub.min(axis=1))
        hi = np.max(np.column_stack(his), axis=1)
        lo = np.min(np.column_stack(los), axis=1)
        stay = hi - lo <= thresh
        b_next = b_cur[stay]
        for idx, u in enumerate(b_cur):
            if stay[idx]:
                continue
            pieces = []
            for items, mat in sides:
                if items.size and mat is not None:
                    row = mat[u, items]
                    pieces.append(items[row + delta > hi[idx]])
            good[int(u)] = (
                np.unique(np.concatenate(pieces)) if pieces else np.empty(0, dtype=np.int64)
            )
    else:
        b_next = b_cur.copy()

    for members, (items, mat) in zip((state.cluster1, state.cluster2), sides):
        if members.size == 0:
            continue
        if mat is None or items.size == 0:
            for u in members:
                good[int(u)] = state.per_user_good.get(int(u), items.copy())
            continue
        sub = mat[np.ix_(members, items)]
        for u, row in zip(members, sub):
            good[int(u)] = _good_items(row, items, delta)

    labelled = np.setdiff1d(np.arange(num_users), b_next)
    empty = np.empty(0, dtype=np.int64)
    if labelled.size == 0:
        return PhaseState(
            phase=state.phase + 1,
            delta=delta,
            unlabelled=b_next,
            cluster1=empty,
            cluster2=empty.copy(),
            items1=state.items1.copy(),
            items2=state.items2.copy(),
            per_user_good=dict(state.per_user_good),
        )

    pivot_set = set(good[int(labelled[0])].tolist())
    side1 = [int(u) for u in labelled if pivot_set.intersection(good[int(u)].tolist())]
    side2 = [int(u) for u in labelled if int(u) not in side1]
    m1 = np.asarray(side1, dtype=np.int64)
    m2 = np.asarray(side2, dtype=np.int64)
    n1 = _robust_intersection(m1, good, config.robust_fraction, num_items)
    n2 = _robust_intersection(m2, good, config.robust_fraction, num_items)
    return PhaseState(
        phase=state.phase + 1,
        delta=delta,
        unlabelled=b_next,
        cluster1=m1,
        cluster2=m2,
        items1=n1,
        items2=n2,
        per_user_good=good,
    )


class _PairRunner:
    """Round-by-round schedule for one (user set, item set) sub-problem.

    Runs its estimation generator for its own round budget and pads any extra
    synchronized rounds with uniform recommendations from its item set.
    """

    def __init__(
        self,
        key: int,
        user_set: np.ndarray,
        item_set: np.ndarray,
        mask: matcomp.ObservationMask | None,
        rounds: int,
        per_pass: int,
        rng: np.random.Generator,
    ):
        self.key = key
        self.user_set = user_set
        self.item_set = item_set
        self.rng = rng
        self.result: tuple[matcomp.ObservationAccumulator, np.ndarray] | None = None
        self._current: np.ndarray | None = None
        self._gen = None
        if mask is not None and rounds > 0:
            self._gen = matcomp.estimation_rounds(mask, rounds, per_pass, rng)
            self._current = next(self._gen)

    def items_for_round(self) -> np.ndarray:
        if self._current is not None:
            return self._current
        picks = self.rng.integers(0, self.item_set.size, size=self.user_set.size)
        return self.item_set[picks]

    def feed(self, rewards: np.ndarray) -> None:
        if self._gen is None or self._current is None:
            return
        try:
            self._current = self._gen.send(rewards)
        except StopIteration as stop:
            self.result = stop.value
            self._current = None

    def accumulator(self) -> matcomp.ObservationAccumulator | None:
        if self.result is not None:
            return self.result[0]
        return None


class _OctalBase(_GeneratorPolicy):
    def __init__(
        self,
        num_users: int,
        num_items: int,
        horizon: int,
        config: OctalConfig,
        rng: np.random.Generator,
    ):
        self.num_items = num_items
        self.horizon = horizon
        self.config = config
        self.rng = rng
        self.phase_starts: list[int] = []
        self.phase_log: list[dict] = []
        self.state = PhaseState.initial(num_users, num_items, small_m=config.small_m_variant)
        self._scale: float | None = None
        self._scale_phase: int | None = None
        self._delta_schedule = config.delta_schedule
        if self._delta_schedule == "theory":
            probe = octal_delta(1, config, num_items)
            if probe <= 0:  # zero noise scale makes the geometric schedule vanish
                self._delta_schedule = "practical"
        super().__init__(num_users)

    def _phase_delta(self, phase: int) -> float | None:
        if self._delta_schedule == "theory":
            return octal_delta(phase, self.config, self.num_items)
        if self._scale is None:
            return None
        # Re-anchored so the first phase with a usable estimate plays the
        # role of phase 1 in the geometric schedule.
        effective = phase - self._scale_phase + 1
        return octal_delta(effective, self.config, self.num_items, scale_estimate=self._scale)

    def _maybe_anchor(self, phase: int, estimate: np.ndarray | None) -> None:
        if self._delta_schedule != "practical" or self._scale is not None:
            return
        if estimate is None:
            return
        magnitude = float(np.abs(estimate).max())
        if magnitude > 0:
            self._scale = magnitude
            self._scale_phase = phase

    def _pair_plan(
        self, phase: int, delta: float | None, users: np.ndarray, items: np.ndarray
    ) -> tuple[matcomp.ObservationMask | None, int, int, float]:
        """Mask, rounds, pass length, and regularizer for one sub-problem pass."""
        cfg = self.config
        if cfg.round_schedule == "practical":
            mask = matcomp.full_mask(users, items)
            rounds = 10 + 2**phase
            return mask, rounds, items.size, cfg.regularizer
        kn = cfg.known
        d2 = min(users.size, items.size)
        sched_delta = delta if delta and delta > 0 else octal_delta(phase, cfg, self.num_items)
        p, s, _ = octal_phase_rounds(phase, sched_delta, users.size, items.size, cfg)
        if d2 < 2:
            mask = matcomp.full_mask(users, items)
            return mask, s * items.size, items.size, cfg.C_lambda * kn.sigma
        mask = matcomp.sample_mask(users, items, p, self.rng)
        if mask.row_max_count == 0:
            mask = matcomp.sample_mask(users, items, p, self.rng)
        if mask.row_max_count == 0:
            return None, 0, 1, 0.0
        lam = matcomp.default_regularizer(kn.sigma, d2, p, cfg.C_lambda)
        return mask, mask.row_max_count * s, mask.row_max_count, lam

    def info(self) -> dict:
        return {
            "policy": "octal_small_m" if self.config.small_m_variant else "octal",
            "delta_schedule": self._delta_schedule,
            "round_schedule": self.config.round_schedule,
            "repetitions": self.config.repetitions,
            "a": self.config.a,
            "robust_fraction": self.config.robust_fraction,
            "phase_starts": list(self.phase_starts),
            "phases": [dict(entry) for entry in self.phase_log],
        }


class OctalPolicy(_OctalBase):
    """Phased elimination with three concurrent sub-problems per phase."""

    def _plan(self):
        m, n = self.num_users, self.num_items
        cfg = self.config
        solver_cache: dict[float, matcomp.CompletionConfig] = {}

        while True:
            phase = self.state.phase
            self.phase_starts.append(self.rounds_seen)
            delta = self._phase_delta(phase)

            pairs = []
            if self.state.unlabelled.size:
                pairs.append((0, self.state.unlabelled, np.arange(n)))
            if self.state.cluster1.size and self.state.items1.size:
                pairs.append((1, self.state.cluster1, self.state.items1))
            if self.state.cluster2.size and self.state.items2.size:
                pairs.append((2, self.state.cluster2, self.state.items2))

            if not pairs:  # defensive: recommend current best guesses forever
                fallback = np.zeros(m, dtype=np.int64)
                while True:
                    yield fallback

            per_pair: dict[int, list[matcomp.CompletionEstimate]] = {k: [] for k, _, _ in pairs}
            rounds_used = 0
            for _ in range(cfg.repetitions):
                runners = []
                m_pass = 1
                for key, users, items in pairs:
                    mask, rounds, per_pass, lam = self._pair_plan(phase, delta, users, items)
                    runners.append((_PairRunner(key, users, items, mask, rounds, per_pass, self.rng), lam))
                    m_pass = max(m_pass, rounds)
                for _ in range(m_pass):
                    recs = np.empty(m, dtype=np.int64)
                    for runner, _ in runners:
                        recs[runner.user_set] = runner.items_for_round()
                    rewards = yield recs
                    rounds_used += 1
                    for runner, _ in runners:
                        runner.feed(rewards[runner.user_set])
                for runner, lam in runners:
                    acc = runner.accumulator()
                    if acc is None:
                        est = matcomp.CompletionEstimate(
                            np.zeros((m, n)), runner.user_set, runner.item_set, degenerate=True
                        )
                    else:
                        solver = solver_cache.setdefault(
                            lam,
                            matcomp.CompletionConfig(
                                regularizer=lam, rel_tolerance=cfg.solver_tolerance
                            ),
                        )
                        est = matcomp.assemble_estimate(acc, (m, n), solver, self.rng)
                    per_pair[runner.key].append(est)

            medians = {
                key: matcomp.median_of_estimates(ests) for key, ests in per_pair.items()
            }
            q_est = medians.get(0)
            self._maybe_anchor(phase, q_est.estimate if q_est is not None else None)
            if delta is None:
                delta = self._phase_delta(phase)

            self.phase_log.append(
                {
                    "phase": phase,
                    "delta": delta,
                    "rounds": rounds_used,
                    "unlabelled": int(self.state.unlabelled.size),
                    "cluster1": int(self.state.cluster1.size),
                    "cluster2": int(self.state.cluster2.size),
                    "items1": int(self.state.items1.size),
                    "items2": int(self.state.items2.size),
                }
            )

            if delta is not None and delta > 0:
                self.state = octal_label_and_split(
                    self.state,
                    q_est.estimate if q_est is not None else None,
                    medians[1].estimate if 1 in medians else None,
                    medians[2].estimate if 2 in medians else None,
                    delta,
                    cfg,
                    m,
                    n,
                    self.horizon,
                )
            else:
                self.state.phase += 1


class OctalSmallMPolicy(_OctalBase):
    """Phased elimination keeping unlabelled users in both cluster sub-problems.

    The two sub-problems run sequentially inside a pass; while one runs, the
    other side's already-labelled users receive arbitrary items from their own
    candidate set. No cluster is ever merged back into the unlabelled pool.
    """

    def __init__(self, num_users, num_items, horizon, config, rng):
        config.small_m_variant = True
        super().__init__(num_users, num_items, horizon, config, rng)

    def _plan(self):
        m, n = self.num_users, self.num_items
        cfg = self.config
        solver_cache: dict[float, matcomp.CompletionConfig] = {}

        while True:
            phase = self.state.phase
            self.phase_starts.append(self.rounds_seen)
            delta = self._phase_delta(phase)

            subproblems = []
            for key, cluster, items in (
                (1, self.state.cluster1, self.state.items1),
                (2, self.state.cluster2, self.state.items2),
            ):
                users = np.union1d(cluster, self.state.unlabelled)
                if users.size and items.size:
                    subproblems.append((key, users, items))

            if not subproblems:
                fallback = np.zeros(m, dtype=np.int64)
                while True:
                    yield fallback

            per_pair: dict[int, list[matcomp.CompletionEstimate]] = {
                k: [] for k, _, _ in subproblems
            }
            rounds_used = 0
            for _ in range(cfg.repetitions):
                for key, users, items in subproblems:
                    mask, rounds, per_pass, lam = self._pair_plan(phase, delta, users, items)
                    runner = _PairRunner(key, users, items, mask, rounds, per_pass, self.rng)
                    other_key = 3 - key
                    other = next(
                        (
                            (c, it)
                            for k2, c, it in (
                                (1, self.state.cluster1, self.state.items1),
                                (2, self.state.cluster2, self.state.items2),
                            )
                            if k2 == other_key and c.size and it.size
                        ),
                        None,
                    )
                    for _ in range(max(rounds, 1) if mask is not None else 1):
                        recs = np.empty(m, dtype=np.int64)
                        recs[runner.user_set] = runner.items_for_round()
                        if other is not None:
                            c_other, it_other = other
                            picks = self.rng.integers(0, it_other.size, size=c_other.size)
                            recs[c_other] = it_other[picks]
                        rewards = yield recs
                        rounds_used += 1
                        runner.feed(rewards[runner.user_set])
                    acc = runner.accumulator()
                    if acc is None:
                        est = matcomp.CompletionEstimate(
                            np.zeros((m, n)), users, items, degenerate=True
                        )
                    else:
                        solver = solver_cache.setdefault(
                            lam,
                            matcomp.CompletionConfig(
                                regularizer=lam, rel_tolerance=cfg.solver_tolerance
                            ),
                        )
                        est = matcomp.assemble_estimate(acc, (m, n), solver, self.rng)
                    per_pair[key].append(est)

            medians = {key: matcomp.median_of_estimates(e) for key, e in per_pair.items()}
            self._maybe_anchor(phase, medians[1].estimate if 1 in medians else None)
            if delta is None:
                delta = self._phase_delta(phase)

            self.phase_log.append(
                {
                    "phase": phase,
                    "delta": delta,
                    "rounds": rounds_used,
                    "unlabelled": int(self.state.unlabelled.size),
                    "cluster1": int(self.state.cluster1.size),
                    "cluster2": int(self.state.cluster2.size),
                    "items1": int(self.state.items1.size),
                    "items2": int(self.state.items2.size),
                }
            )

            if delta is not None and delta > 0:
                self.state = octal_small_m_label_and_split(
                    self.state,
                    medians[1].estimate if 1 in medians else None,
                    medians[2].estimate if 2 in medians else None,
                    delta,
                    cfg,
                    m,
                    n,
                )
            else:
                self.state.phase += 1


# ---------------------------------------------------------------------------
# UCB baseline
# ---------------------------------------------------------------------------


class UcbPolicy(RoundPolicy):
    """Independent UCB per user: round-robin once, then mean + bonus argmax."""

    def __init__(
        self,
        num_users: int,
        num_items: int,
        horizon: int,
        exploration_coefficient: float = 1.0,
    ):
        super().__init__(num_users)
        if exploration_coefficient <= 0:
            raise ValueError("exploration_coefficient must be positive")
        self.num_items = num_items
        self.horizon = horizon
        self.exploration_coefficient = exploration_coefficient
        self.counts = np.zeros((num_users, num_items), dtype=np.int64)
        self.sums = np.zeros((num_users, num_items))
        self._last: np.ndarray | None = None

    @property
    def means(self) -> np.ndarray:
        out = np.zeros_like(self.sums)
        np.divide(self.sums, self.counts, out=out, where=self.counts > 0)
        return out

    def _recommend(self, t: int) -> np.ndarray:
        if t <= self.num_items:
            items = np.full(self.num_users, t - 1, dtype=np.int64)
        else:
            bonus = self.exploration_coefficient * np.sqrt(np.log(t) / self.counts)
            items = np.argmax(self.means + bonus, axis=1)
        self._last = items
        return items

    def _update(self, t: int, rewards: np.ndarray) -> None:
        rows = np.arange(self.num_users)
        self.counts[rows, self._last] += 1
        self.sums[rows, self._last] += rewards

    def info(self) -> dict:
        return {"policy": "ucb", "exploration_coefficient": self.exploration_coefficient}
