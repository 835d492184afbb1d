"""Round-based matrix completion from bandit feedback.

This module implements the estimation subroutine used by every policy:
Bernoulli index sampling, pass-structured observation with repetition
averaging, near-square block partitioning, per-block nuclear-norm-regularized
least squares solved by proximal gradient with singular-value
soft-thresholding, assembly of the full estimate, and the entrywise-median
booster over independent estimates.

The per-block program for observed averages ``Z`` on index set ``W`` is::

    minimize_Q  1/2 * sum_{(i,j) in W} (Q_ij - Z_ij)^2  +  lam * ||Q||_*

The masked quadratic has Lipschitz constant 1, so the default proximal
gradient step is 1 and the objective is nonincreasing per iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Generator, Iterable

import numpy as np

from . import env as env_mod


# ---------------------------------------------------------------------------
# observation masks and accumulators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationMask:
    """A sampled index set over ``user_set x item_set``.

    ``selected[i, j]`` refers to the pair ``(user_set[i], item_set[j])``.
    """

    user_set: np.ndarray
    item_set: np.ndarray
    selected: np.ndarray
    sampling_probability: float

    @property
    def row_max_count(self) -> int:
        counts = self.selected.sum(axis=1)
        return int(counts.max()) if counts.size else 0

    @property
    def num_entries(self) -> int:
        return int(self.selected.sum())

    def entries(self) -> set[tuple[int, int]]:
        """Global (user, item) pairs; intended for small masks and tests."""
        rows, cols = np.nonzero(self.selected)
        return {
            (int(self.user_set[r]), int(self.item_set[c])) for r, c in zip(rows, cols)
        }


def sample_mask(
    user_set: Iterable[int],
    item_set: Iterable[int],
    p: float,
    rng: np.random.Generator,
) -> ObservationMask:
    """Include each (user, item) pair independently with probability ``p``."""
    user_set = np.asarray(list(user_set), dtype=np.int64)
    item_set = np.asarray(list(item_set), dtype=np.int64)
    if user_set.size == 0 or item_set.size == 0:
        raise ValueError("user_set and item_set must be nonempty")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"sampling probability must lie in (0, 1], got {p}")
    selected = rng.random((user_set.size, item_set.size)) < p
    return ObservationMask(user_set, item_set, selected, float(p))


def full_mask(user_set: Iterable[int], item_set: Iterable[int]) -> ObservationMask:
    """The complete grid; every pair observed when scheduled."""
    user_set = np.asarray(list(user_set), dtype=np.int64)
    item_set = np.asarray(list(item_set), dtype=np.int64)
    if user_set.size == 0 or item_set.size == 0:
        raise ValueError("user_set and item_set must be nonempty")
    selected = np.ones((user_set.size, item_set.size), dtype=bool)
    return ObservationMask(user_set, item_set, selected, 1.0)


class ObservationAccumulator:
    """Running sums and counts of rewards per (user, item) cell.

    Indices are local to the governing mask's user/item sets; ``averaged``
    exposes the global sparse view used by tests and diagnostics.
    """

    def __init__(self, user_set: np.ndarray, item_set: np.ndarray):
        self.user_set = np.asarray(user_set, dtype=np.int64)
        self.item_set = np.asarray(item_set, dtype=np.int64)
        self.sums = np.zeros((self.user_set.size, self.item_set.size))
        self.counts = np.zeros((self.user_set.size, self.item_set.size), dtype=np.int64)

    def add(self, user_rows: np.ndarray, item_cols: np.ndarray, values: np.ndarray) -> None:
        # One observation per user per round, so rows are unique per call.
        self.sums[user_rows, item_cols] += values
        self.counts[user_rows, item_cols] += 1

    def dense_averaged(self) -> tuple[np.ndarray, np.ndarray]:
        """(Z, observed) where Z holds per-cell averages and observed marks counts > 0."""
        observed = self.counts > 0
        z = np.zeros_like(self.sums)
        np.divide(self.sums, self.counts, out=z, where=observed)
        return z, observed

    @property
    def averaged(self) -> dict[tuple[int, int], float]:
        z, observed = self.dense_averaged()
        rows, cols = np.nonzero(observed)
        return {
            (int(self.user_set[r]), int(self.item_set[c])): float(z[r, c])
            for r, c in zip(rows, cols)
        }


# ---------------------------------------------------------------------------
# the round protocol
# ---------------------------------------------------------------------------


def estimation_rounds(
    mask: ObservationMask,
    total_rounds: int,
    rounds_per_pass: int,
    rng: np.random.Generator,
    include_fillers: bool = False,
) -> Generator[np.ndarray, np.ndarray, tuple[ObservationAccumulator, np.ndarray]]:
    """Generator form of the observation loop.

    Yields one global item id per masked user each round and expects the
    corresponding reward vector in return (via ``send``). Rounds are grouped
    into passes of ``rounds_per_pass``; within a pass every user sees each of
    its masked items exactly once, in a fresh random order, padded with
    uniformly random filler items once its masked row is exhausted. A trailing
    remainder of rounds runs as a truncated pass.

    Returns ``(accumulator, log)`` where ``log`` is a ``(total_rounds, |U|)``
    array of recommended global item ids. Only masked cells are accumulated
    unless ``include_fillers`` is set.
    """
    n_users, n_items = mask.selected.shape
    if total_rounds < 0:
        raise ValueError("total_rounds must be nonnegative")
    if rounds_per_pass < max(1, mask.row_max_count):
        raise ValueError(
            f"rounds_per_pass={rounds_per_pass} cannot cover the busiest row "
            f"(row_max_count={mask.row_max_count})"
        )
    acc = ObservationAccumulator(mask.user_set, mask.item_set)
    log = np.empty((total_rounds, n_users), dtype=np.int64)
    masked_items = [np.flatnonzero(mask.selected[u]) for u in range(n_users)]

    done = 0
    while done < total_rounds:
        pass_len = min(rounds_per_pass, total_rounds - done)
        plan = np.empty((n_users, pass_len), dtype=np.int64)
        in_mask = np.zeros((n_users, pass_len), dtype=bool)
        for u in range(n_users):
            items_u = masked_items[u]
            k = min(items_u.size, pass_len)
            if items_u.size:
                plan[u, :k] = rng.permutation(items_u)[:k]
                in_mask[u, :k] = True
            if pass_len > k:
                plan[u, k:] = rng.integers(0, n_items, size=pass_len - k)
        for j in range(pass_len):
            local_items = plan[:, j]
            global_items = mask.item_set[local_items]
            rewards = yield global_items
            rewards = np.asarray(rewards, dtype=float)
            if rewards.shape != (n_users,):
                raise ValueError(
                    f"expected rewards of shape ({n_users},), got {rewards.shape}"
                )
            take = slice(None) if include_fillers else in_mask[:, j]
            rows = np.arange(n_users)[take]
            acc.add(rows, local_items[take], rewards[take])
            log[done] = global_items
            done += 1
    return acc, log


def collect_rounds(
    model: env_mod.RewardModel,
    mask: ObservationMask,
    total_rounds: int,
    rounds_per_pass: int,
    rng: np.random.Generator,
    include_fillers: bool = False,
) -> tuple[ObservationAccumulator, np.ndarray]:
    """Drive :func:`estimation_rounds` against a reward model directly."""
    gen = estimation_rounds(mask, total_rounds, rounds_per_pass, rng, include_fillers)
    try:
        items = next(gen)
        while True:
            rewards = env_mod.sample_rewards(model, mask.user_set, items, rng)
            items = gen.send(rewards)
    except StopIteration as stop:
        return stop.value


# ---------------------------------------------------------------------------
# near-square partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockPartition:
    """Random split of the longer axis into near-square groups."""

    num_blocks: int
    assignment: np.ndarray  # block id per index of the partitioned axis
    axis: str  # "items" or "users"

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == q) for q in range(self.num_blocks)]


def partition_near_square(
    user_set: Iterable[int],
    item_set: Iterable[int],
    rng: np.random.Generator,
) -> BlockPartition:
    """Uniformly assign the longer axis into ``ceil(long/short)`` groups."""
    n_users = len(list(user_set))
    n_items = len(list(item_set))
    if n_users == 0 or n_items == 0:
        raise ValueError("user_set and item_set must be nonempty")
    if n_users <= n_items:
        k = -(-n_items // n_users)  # ceil
        axis, length = "items", n_items
    else:
        k = -(-n_users // n_items)
        axis, length = "users", n_users
    assignment = rng.integers(0, k, size=length) if k > 1 else np.zeros(length, dtype=np.int64)
    return BlockPartition(int(k), assignment.astype(np.int64), axis)


# ---------------------------------------------------------------------------
# singular-value thresholding and the block solver
# ---------------------------------------------------------------------------


def svt(matrix: np.ndarray, threshold: float) -> np.ndarray:
    """Singular-value soft-thresholding operator.

    Returns ``U max(S - threshold, 0) V^T`` for the SVD of ``matrix``; this is
    the proximal operator of ``threshold * ||.||_*``.

    Parameters
    ----------
    matrix : ndarray
        Input with finite entries.
    threshold : float
        Nonnegative shrinkage applied to every singular value.
    """
    matrix = np.asarray(matrix, dtype=float)
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("svt requires finite entries")
    try:
        u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"SVD failed on {matrix.shape} matrix during soft-thresholding: {exc}"
        ) from exc
    shrunk = np.maximum(s - threshold, 0.0)
    return (u * shrunk) @ vt


@dataclass
class CompletionConfig:
    """Solver settings for the per-block convex program."""

    regularizer: float = 0.0
    max_iterations: int = 5000
    rel_tolerance: float = 1e-7
    step_size: float = 1.0
    target_accuracy: float | None = None
    failure_budget: float = 0.1
    # Warm-start path of geometrically decreasing thresholds; the final,
    # monotone proximal-gradient loop always runs at `regularizer` itself.
    continuation: bool = True

    def __post_init__(self) -> None:
        if self.regularizer < 0:
            raise ValueError("regularizer must be nonnegative")
        if not 0.0 < self.step_size < 2.0:
            raise ValueError("step_size must lie in (0, 2) for the unit-Lipschitz data term")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if not 0.0 < self.failure_budget < 1.0:
            raise ValueError("failure_budget must lie in (0, 1)")


@dataclass
class BlockDiagnostics:
    objective: float
    iterations: int
    converged: bool
    objective_trace: np.ndarray


def _objective(q, z, observed, lam):
    resid = q - z
    data = 0.5 * float(np.sum(resid[observed] ** 2))
    nuclear = float(np.linalg.svd(q, compute_uv=False).sum()) if lam > 0 else 0.0
    return data + lam * nuclear


def _prox_step(q, z, observed, lam, step):
    """One proximal-gradient update; returns the iterate and its objective.

    The nuclear norm of the new iterate falls out of the prox SVD, so the
    objective costs no extra factorization.
    """
    grad = np.where(observed, q - z, 0.0)
    u, s, vt = np.linalg.svd(q - step * grad, full_matrices=False)
    shrunk = np.maximum(s - step * lam, 0.0)
    q_next = (u * shrunk) @ vt
    resid = q_next - z
    obj = 0.5 * float(np.sum(resid[observed] ** 2)) + lam * float(shrunk.sum())
    return q_next, obj


def solve_block(
    z: np.ndarray,
    observed: np.ndarray | None,
    config: CompletionConfig,
) -> tuple[np.ndarray, BlockDiagnostics]:
    """Approximately minimize the nuclear-norm-regularized masked fit.

    Proximal gradient iterations (gradient step on the masked squared loss,
    then singular-value soft-thresholding at ``step * regularizer``) run until
    the relative objective decrease falls below ``rel_tolerance`` or
    ``max_iterations`` is hit. With ``continuation`` enabled, a warm-start
    path of geometrically decreasing thresholds precedes the main loop; small
    regularizers are otherwise unreachable in practice because unobserved
    entries move only O(regularizer) per iteration. The reported objective
    trace covers the main loop, which is monotone nonincreasing.

    A block with no observations has minimizer 0 for any positive
    regularizer; it returns the zero block immediately, flagged converged.
    """
    z = np.asarray(z, dtype=float)
    if observed is None:
        observed = np.ones(z.shape, dtype=bool)
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != z.shape:
        raise ValueError("observation mask shape must match the data block")
    lam = config.regularizer
    step = config.step_size

    if not observed.any():
        return np.zeros_like(z), BlockDiagnostics(0.0, 0, True, np.zeros(0))

    q = np.zeros_like(z)
    iterations = 0

    data_norm = _spectral_norm(np.where(observed, z, 0.0))
    if config.continuation and lam < 0.25 * data_norm:
        # Stages stop on iterate movement; objective decrease is too flat a
        # signal in the weakly observed directions that continuation exists for.
        # Per-iteration movement in the weakly observed directions is of order
        # lam_stage, so a movement cutoff proportional to lam_stage keeps the
        # tracking error proportional to the stage threshold at constant
        # iterations per stage.
        lam_stage = 0.25 * data_norm
        floor = max(lam, 1e-10 * lam_stage)
        while lam_stage > floor and iterations < config.max_iterations:
            for _ in range(300):
                if iterations >= config.max_iterations:
                    break
                q_prev = q
                q, _ = _prox_step(q, z, observed, lam_stage, step)
                iterations += 1
                if np.abs(q - q_prev).max() <= 0.02 * lam_stage:
                    break
            lam_stage *= 0.5

    trace = []
    converged = False
    prev = _objective(q, z, observed, lam)
    # The stop threshold is anchored to the data's own objective scale so the
    # whole solve is exactly equivariant under rescaling (z, lam) together.
    anchor = 1e-3 * _objective(np.zeros_like(z), z, observed, lam)
    trace.append(prev)
    while iterations < config.max_iterations:
        q, obj = _prox_step(q, z, observed, lam, step)
        iterations += 1
        trace.append(obj)
        if step <= 1.0:
            assert obj <= prev + 1e-9 * max(anchor, abs(prev)), "objective increased"
        if abs(prev - obj) <= config.rel_tolerance * max(abs(prev), anchor):
            converged = True
            break
        prev = obj
    return q, BlockDiagnostics(trace[-1], iterations, converged, np.asarray(trace))


def _spectral_norm(a: np.ndarray) -> float:
    if min(a.shape) == 0:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[0])


# ---------------------------------------------------------------------------
# full estimates
# ---------------------------------------------------------------------------


@dataclass
class CompletionEstimate:
    """Assembled estimate on the full matrix, zero outside the active sets."""

    estimate: np.ndarray
    user_set: np.ndarray
    item_set: np.ndarray
    per_block_objective: list[float] = field(default_factory=list)
    iterations_used: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    degenerate: bool = False


def assemble_estimate(
    acc: ObservationAccumulator,
    shape: tuple[int, int],
    config: CompletionConfig,
    rng: np.random.Generator,
) -> CompletionEstimate:
    """Partition near-square, solve each block, and zero-pad to ``shape``.

    Degenerate blocks narrower than 2 on their short side skip the nuclear
    solve and use the observed averages directly.
    """
    z, observed = acc.dense_averaged()
    users, items = acc.user_set, acc.item_set
    partition = partition_near_square(users, items, rng)
    out = np.zeros(shape)
    result = CompletionEstimate(out, users, items)
    for block in partition.blocks():
        if block.size == 0:
            continue
        if partition.axis == "items":
            zb, wb = z[:, block], observed[:, block]
            rows, cols = users, items[block]
        else:
            zb, wb = z[block, :], observed[block, :]
            rows, cols = users[block], items
        if min(zb.shape) < 2:
            qb = np.where(wb, zb, 0.0)
            diag = BlockDiagnostics(0.0, 0, True, np.zeros(0))
        else:
            qb, diag = solve_block(zb, wb, config)
        out[np.ix_(rows, cols)] = qb
        result.per_block_objective.append(diag.objective)
        result.iterations_used.append(diag.iterations)
        result.converged.append(diag.converged)
    return result


def estimate(
    model: env_mod.RewardModel,
    user_set: Iterable[int],
    item_set: Iterable[int],
    p: float,
    repeats: int,
    regularizer: float,
    rng: np.random.Generator,
    config: CompletionConfig | None = None,
) -> tuple[CompletionEstimate, np.ndarray, int]:
    """Sample a mask at probability ``p``, observe it ``repeats`` times, complete.

    Sets the per-pass length ``b`` to the busiest sampled row, runs ``b *
    repeats`` rounds of observation, and solves the per-block programs on the
    averaged values. Returns the assembled estimate, the full recommendation
    log, and the number of rounds used (``b * repeats``; the nominal round
    count ``p * |item_set| * repeats`` is what the schedule targets).

    An empty mask is resampled once; if still empty the result is the zero
    estimate with ``degenerate`` set.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    user_set = np.asarray(list(user_set), dtype=np.int64)
    item_set = np.asarray(list(item_set), dtype=np.int64)
    mask = sample_mask(user_set, item_set, p, rng)
    if mask.row_max_count == 0:
        mask = sample_mask(user_set, item_set, p, rng)
    if mask.row_max_count == 0:
        est = CompletionEstimate(
            np.zeros((model.num_users, model.num_items)),
            user_set,
            item_set,
            degenerate=True,
        )
        return est, np.empty((0, user_set.size), dtype=np.int64), 0

    b = mask.row_max_count
    rounds = b * repeats
    acc, log = collect_rounds(model, mask, rounds, b, rng)
    cfg = config or CompletionConfig(regularizer=regularizer)
    cfg.regularizer = regularizer
    est = assemble_estimate(acc, (model.num_users, model.num_items), cfg, rng)
    return est, log, rounds


def median_of_estimates(estimates: list[CompletionEstimate]) -> CompletionEstimate:
    """Entrywise median of an odd number of same-shape estimates."""
    f = len(estimates)
    if f < 1 or f % 2 == 0:
        raise ValueError(f"need an odd number of estimates, got {f}")
    shapes = {e.estimate.shape for e in estimates}
    if len(shapes) != 1:
        raise ValueError(f"estimate shapes differ: {sorted(shapes)}")
    stacked = np.stack([e.estimate for e in estimates])
    merged = CompletionEstimate(
        np.median(stacked, axis=0),
        estimates[0].user_set,
        estimates[0].item_set,
        degenerate=any(e.degenerate for e in estimates),
    )
    for e in estimates:
        merged.per_block_objective.extend(e.per_block_objective)
        merged.iterations_used.extend(e.iterations_used)
        merged.converged.extend(e.converged)
    return merged


# ---------------------------------------------------------------------------
# parameter rules
# ---------------------------------------------------------------------------


def theory_params(
    target_accuracy: float,
    sigma: float,
    rank: int,
    mu: float,
    d2: int,
    C: float = 1.0,
    c: float = 1.0,
    max_abs_reward: float | None = None,
) -> tuple[float, int]:
    """Sampling probability and repetition count for a target accuracy.

    Returns ``p = C mu^2 log^3(d2) / d2`` clamped to (0, 1] and
    ``s = ceil((c sigma r sqrt(mu) / (eta log d2))^2)``. A target accuracy
    above the largest reward magnitude is permitted but flagged, since the
    accuracy rule is calibrated for targets below that scale.
    """
    if target_accuracy <= 0:
        raise ValueError("target_accuracy must be positive")
    if d2 < 2:
        raise ValueError("d2 must be at least 2")
    if max_abs_reward is not None and target_accuracy > max_abs_reward:
        import warnings

        warnings.warn(
            "target_accuracy exceeds the reward scale; the (p, s) rule assumes "
            "accuracy targets at or below it",
            stacklevel=2,
        )
    log_d2 = np.log(d2)
    p = min(1.0, C * mu**2 * log_d2**3 / d2)
    s = ceil_exact((c * sigma * rank * np.sqrt(mu) / (target_accuracy * log_d2)) ** 2)
    return p, max(1, s)


def ceil_exact(x: float) -> int:
    """Ceiling with a relative guard against float fuzz at integer boundaries."""
    return int(np.ceil(x * (1.0 - 1e-12)))


def default_regularizer(sigma: float, d2: int, p: float, C_lambda: float = 1.0) -> float:
    """Regularizer rule ``C_lambda * sigma * sqrt(d2 * p)``.

    ``sigma`` is the noise scale of the values entering the solve; with
    ``s``-fold repetition averaging that is the raw scale divided by
    ``sqrt(s)``.
    """
    return C_lambda * sigma * float(np.sqrt(d2 * p))


def repetitions_for(num_users: int, num_items: int, failure_budget: float) -> int:
    """Median-trick repetition count ``ceil(log(MN/delta))``, rounded up to odd."""
    if not 0.0 < failure_budget < 1.0:
        raise ValueError("failure_budget must lie in (0, 1)")
    f = int(np.ceil(np.log(num_users * num_items / failure_budget)))
    f = max(1, f)
    return f if f % 2 == 1 else f + 1
