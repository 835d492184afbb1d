"""Ground-truth reward models and the noisy observation channel.

A :class:`RewardModel` holds a hidden expected-reward matrix ``P = U V^T``
together with its noise specification. Rank-1 models additionally expose the
two sign clusters of users and the extreme items (the best item for each
cluster), which is the structure the phased-elimination policy exploits.

Models are immutable after construction and safe to share across concurrent
simulation workers; all randomness flows through explicit generators.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NOISE_KINDS = ("gaussian", "bounded-uniform", "none")

# Relative singular-value cutoff used for numerical-rank decisions.
RANK_TOLERANCE = 1e-8


class MatrixCsvError(ValueError):
    """Malformed reward-matrix CSV; the message names the offending cell."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RewardModel:
    """Hidden expected-reward matrix plus the channel that serves it.

    ``expected_rewards`` equals ``user_factors @ item_factors.T``. The cluster
    and extreme-item fields are populated for rank-1 models only; for higher
    ranks they are ``None``.
    """

    num_users: int
    num_items: int
    expected_rewards: np.ndarray
    rank: int
    user_factors: np.ndarray
    item_factors: np.ndarray
    singular_values: np.ndarray
    condition_number: float
    noise_variance_proxy: float
    noise_kind: str
    left_singular: np.ndarray
    right_singular: np.ndarray
    cluster_pos: np.ndarray | None = None
    cluster_neg: np.ndarray | None = None
    best_item_pos: int | None = None
    best_item_neg: int | None = None
    item_extreme_ratio: float | None = None
    rank_deficient: bool = False

    @property
    def max_abs_reward(self) -> float:
        return float(np.abs(self.expected_rewards).max())

    def row_maxima(self) -> np.ndarray:
        return self.expected_rewards.max(axis=1)


@dataclass(frozen=True)
class IncoherenceReport:
    """Incoherence diagnostics for a model's singular factors.

    ``local_mu`` is the tightest constant found over the examined user
    subsets; the subset search is one-sided (it can only find violations),
    so ``local_holds`` may be optimistic for models where the search is
    randomized rather than exhaustive.
    """

    mu_left: float
    mu_right: float
    local_mu: float
    alpha: float
    local_holds: bool
    exhaustive: bool


def _rank1_extras(u: np.ndarray, v: np.ndarray):
    """Cluster and extreme-item fields derived from rank-1 factors."""
    cluster_pos = np.flatnonzero(u >= 0)
    cluster_neg = np.flatnonzero(u < 0)
    best_pos = int(np.argmax(v))
    best_neg = int(np.argmin(v))
    v_hi, v_lo = float(v[best_pos]), float(v[best_neg])
    if v_hi == 0.0 or v_lo == 0.0:
        ratio = float("inf") if (v_hi != 0.0 or v_lo != 0.0) else 1.0
    else:
        ratio = max(abs(v_hi / v_lo), abs(v_lo / v_hi))
    return (
        _readonly(cluster_pos),
        _readonly(cluster_neg),
        best_pos,
        best_neg,
        ratio,
    )


def _svd_summary(p: np.ndarray, rank: int):
    """Top-``rank`` SVD triplet of ``p`` plus a numerical-rank deficiency flag."""
    left, sing, right_t = np.linalg.svd(p, full_matrices=False)
    top = sing[:rank]
    deficient = bool(rank > 0 and top[-1] <= RANK_TOLERANCE * max(sing[0], 1e-300))
    smallest = top[-1] if top[-1] > 0 else np.finfo(float).tiny
    cond = float(top[0] / smallest) if rank > 0 else 1.0
    return (
        _readonly(left[:, :rank]),
        _readonly(top.copy()),
        _readonly(right_t[:rank].T),
        cond,
        deficient,
    )


def build_rank1_gap_env(
    num_users: int,
    num_items: int,
    gap: float,
    noise_variance_proxy: float = 0.0,
    seed: int = 0,
    noise_kind: str = "gaussian",
) -> RewardModel:
    """Random rank-1 environment with a tunable best/worst item gap.

    User factors are drawn uniformly from ``{+1, -1}`` and item factors
    uniformly from ``[-gap/2, +gap/2]``. The underlying unit draws depend only
    on ``seed``, so rebuilding with a different ``gap`` rescales the item
    factors without resampling them.
    """
    if num_users < 1:
        raise ValueError("num_users must be at least 1")
    if num_items < 2:
        raise ValueError("num_items must be at least 2 (extreme items undefined otherwise)")
    if gap <= 0:
        raise ValueError("gap must be positive")
    if noise_variance_proxy < 0:
        raise ValueError("noise_variance_proxy must be nonnegative")
    _check_noise_kind(noise_kind)

    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    u = rng.integers(0, 2, size=num_users) * 2.0 - 1.0
    v = gap * rng.uniform(-0.5, 0.5, size=num_items)
    return build_rank_r_env(
        u[:, None],
        v[:, None],
        noise_variance_proxy=noise_variance_proxy,
        noise_kind=noise_kind,
    )


def build_rank_r_env(
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    noise_variance_proxy: float = 0.0,
    noise_kind: str = "gaussian",
) -> RewardModel:
    """Environment from explicit factor matrices (``P = U V^T``).

    A factor pair whose product has numerical rank below the declared rank is
    accepted but flagged via ``rank_deficient``.
    """
    u = np.atleast_2d(np.asarray(user_factors, dtype=float))
    v = np.atleast_2d(np.asarray(item_factors, dtype=float))
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ValueError(
            f"factor shapes disagree: user_factors {u.shape}, item_factors {v.shape}"
        )
    rank = u.shape[1]
    num_users, num_items = u.shape[0], v.shape[0]
    if rank > min(num_users, num_items):
        raise ValueError("rank exceeds min(num_users, num_items)")
    if noise_variance_proxy < 0:
        raise ValueError("noise_variance_proxy must be nonnegative")
    _check_noise_kind(noise_kind)

    p = u @ v.T
    left, sing, right, cond, deficient = _svd_summary(p, rank)

    extras = {}
    if rank == 1:
        cpos, cneg, bpos, bneg, ratio = _rank1_extras(u[:, 0], v[:, 0])
        extras = dict(
            cluster_pos=cpos,
            cluster_neg=cneg,
            best_item_pos=bpos,
            best_item_neg=bneg,
            item_extreme_ratio=ratio,
        )
    return RewardModel(
        num_users=num_users,
        num_items=num_items,
        expected_rewards=_readonly(p),
        rank=rank,
        user_factors=_readonly(u),
        item_factors=_readonly(v),
        singular_values=sing,
        condition_number=cond,
        noise_variance_proxy=float(noise_variance_proxy),
        noise_kind=noise_kind,
        left_singular=left,
        right_singular=right,
        rank_deficient=deficient,
        **extras,
    )


def _check_noise_kind(kind: str) -> None:
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise_kind {kind!r}; expected one of {NOISE_KINDS}")


def _noise(kind: str, variance: float, size, rng: np.random.Generator) -> np.ndarray:
    # Draws are sigma * (unit-scale draw) so that scaling sigma rescales the
    # same underlying sample path.
    if kind == "none" or variance == 0.0:
        return np.zeros(size if size is not None else ())
    sigma = np.sqrt(variance)
    if kind == "gaussian":
        return sigma * rng.standard_normal(size)
    # bounded-uniform: uniform on [-sqrt(3) sigma, +sqrt(3) sigma], variance sigma^2
    return sigma * np.sqrt(3.0) * rng.uniform(-1.0, 1.0, size)


def sample_reward(
    model: RewardModel, user: int, item: int, rng: np.random.Generator
) -> float:
    """One noisy reward draw for a (user, item) pair."""
    if not 0 <= user < model.num_users:
        raise IndexError(f"user index {user} out of range [0, {model.num_users})")
    if not 0 <= item < model.num_items:
        raise IndexError(f"item index {item} out of range [0, {model.num_items})")
    noise = _noise(model.noise_kind, model.noise_variance_proxy, None, rng)
    return float(model.expected_rewards[user, item] + noise)


def sample_rewards(
    model: RewardModel,
    users: np.ndarray,
    items: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized noisy rewards for aligned user/item index arrays."""
    users = np.asarray(users)
    items = np.asarray(items)
    if users.size and (users.min() < 0 or users.max() >= model.num_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= model.num_items):
        raise IndexError("item index out of range")
    base = model.expected_rewards[users, items]
    return base + _noise(model.noise_kind, model.noise_variance_proxy, base.shape, rng)


def _subset_mu(vec: np.ndarray, subset: np.ndarray) -> float:
    sub = vec[subset]
    denom = float(sub @ sub)
    if denom == 0.0:
        return 0.0
    return len(subset) * float(np.max(np.abs(sub))) ** 2 / denom


def incoherence_report(
    model: RewardModel,
    alpha: float,
    rng: np.random.Generator | None = None,
    num_samples: int = 10_000,
    exhaustive_limit: int = 20,
) -> IncoherenceReport:
    """Incoherence of the singular factors plus a local check on the left one.

    The local check enumerates every user subset of size >= ``alpha * M`` when
    ``M <= exhaustive_limit`` and otherwise samples ``num_samples`` random
    subsets; it is a violation-finding test, not a certificate.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    m, n, r = model.num_users, model.num_items, model.rank
    mu_left = m / r * float(np.max(np.sum(model.left_singular**2, axis=1)))
    mu_right = n / r * float(np.max(np.sum(model.right_singular**2, axis=1)))

    vec = model.left_singular[:, 0]
    min_size = max(1, int(np.ceil(alpha * m)))
    local_mu = 0.0
    exhaustive = m <= exhaustive_limit
    if exhaustive:
        for size in range(min_size, m + 1):
            for subset in itertools.combinations(range(m), size):
                local_mu = max(local_mu, _subset_mu(vec, np.asarray(subset)))
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(num_samples):
            size = int(rng.integers(min_size, m + 1))
            subset = rng.choice(m, size=size, replace=False)
            local_mu = max(local_mu, _subset_mu(vec, subset))
    return IncoherenceReport(
        mu_left=mu_left,
        mu_right=mu_right,
        local_mu=local_mu,
        alpha=alpha,
        local_holds=bool(local_mu <= mu_left * (1 + 1e-12)),
        exhaustive=exhaustive,
    )


def load_matrix_csv(
    path: str | Path,
    noise_variance_proxy: float = 0.0,
    noise_kind: str = "gaussian",
) -> RewardModel:
    """Reward model read verbatim from a dense, headerless CSV.

    Rank is the numerical rank at relative tolerance ``RANK_TOLERANCE``; the
    cluster fields are populated only when that rank is 1.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MatrixCsvError(f"cannot read {path}: {exc}") from exc
    rows: list[list[float]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.strip() == "":
            continue
        cells = line.split(",")
        parsed = []
        for col_no, cell in enumerate(cells, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise MatrixCsvError(
                    f"{path}: non-numeric value {cell.strip()!r} at row {line_no}, column {col_no}"
                ) from None
        if rows and len(parsed) != len(rows[0]):
            raise MatrixCsvError(
                f"{path}: ragged input at row {line_no} "
                f"(expected {len(rows[0])} columns, got {len(parsed)})"
            )
        rows.append(parsed)
    if not rows:
        raise MatrixCsvError(f"{path}: empty file")
    if len(rows[0]) < 1:
        raise MatrixCsvError(f"{path}: no columns in row 1")

    p = np.asarray(rows, dtype=float)
    _check_noise_kind(noise_kind)
    if noise_variance_proxy < 0:
        raise ValueError("noise_variance_proxy must be nonnegative")

    left_full, sing_full, right_full_t = np.linalg.svd(p, full_matrices=False)
    cutoff = RANK_TOLERANCE * max(float(sing_full[0]), 1e-300)
    rank = max(1, int(np.sum(sing_full > cutoff)))
    u = left_full[:, :rank] * sing_full[:rank]
    v = right_full_t[:rank].T
    if rank == 1:
        # Deterministic sign: first nonzero coordinate of the user factor positive.
        nz = np.flatnonzero(u[:, 0])
        if nz.size and u[nz[0], 0] < 0:
            u = -u
            v = -v

    extras = {}
    if rank == 1:
        cpos, cneg, bpos, bneg, ratio = _rank1_extras(u[:, 0], v[:, 0])
        extras = dict(
            cluster_pos=cpos,
            cluster_neg=cneg,
            best_item_pos=bpos,
            best_item_neg=bneg,
            item_extreme_ratio=ratio,
        )
    smallest = sing_full[rank - 1] if sing_full[rank - 1] > 0 else np.finfo(float).tiny
    return RewardModel(
        num_users=p.shape[0],
        num_items=p.shape[1],
        expected_rewards=_readonly(p),
        rank=rank,
        user_factors=_readonly(u),
        item_factors=_readonly(v),
        singular_values=_readonly(sing_full[:rank].copy()),
        condition_number=float(sing_full[0] / smallest),
        noise_variance_proxy=float(noise_variance_proxy),
        noise_kind=noise_kind,
        left_singular=_readonly(left_full[:, :rank]),
        right_singular=_readonly(right_full_t[:rank].T),
        **extras,
    )
