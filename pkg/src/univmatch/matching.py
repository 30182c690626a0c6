"""Hard matchings, pairwise composition and consistency metrics."""

from __future__ import annotations

from itertools import combinations, permutations
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class MatchingError(ValueError):
    pass


class InfeasibleMatchingError(MatchingError):
    pass


def is_partial_permutation(X: np.ndarray) -> bool:
    X = np.asarray(X)
    return bool(
        X.ndim == 2
        and np.all((X == 0) | (X == 1))
        and np.all(X.sum(axis=1) == 1)
        and np.all(X.sum(axis=0) <= 1)
    )


def _to_matrix(assign: Sequence[int], d: int) -> np.ndarray:
    X = np.zeros((len(assign), d))
    X[np.arange(len(assign)), np.asarray(assign, dtype=np.intp)] = 1.0
    return X


def _best_total(scores: np.ndarray) -> float:
    if scores.shape[0] == 0:
        return 0.0
    r, c = linear_sum_assignment(scores, maximize=True)
    return float(scores[r, c].sum())


def extract_matching(x_soft) -> np.ndarray:
    """Injective keypoint-to-universe assignment maximising the summed scores.

    Among optimal assignments the one that is lexicographically smallest in
    universe indices (row by row) is returned.
    """
    S = np.asarray(x_soft, dtype=np.float64)
    m, d = S.shape
    if m > d:
        raise InfeasibleMatchingError(f"cannot match {m} keypoints into {d} universe points")
    best = _best_total(S)
    tol = 1e-12 * max(1.0, abs(best))
    rows_left = list(range(m))
    cols_left = list(range(d))
    assign = [0] * m
    fixed = 0.0
    for i in range(m):
        rows_left.remove(i)
        for k in list(cols_left):
            rest = [c for c in cols_left if c != k]
            total = fixed + S[i, k] + _best_total(S[np.ix_(rows_left, rest)])
            if total >= best - tol:
                assign[i] = k
                fixed += S[i, k]
                cols_left.remove(k)
                break
        else:  # pragma: no cover - LAP optimum always admits a completion
            raise MatchingError("failed to reconstruct optimal assignment")
    return _to_matrix(assign, d)


def brute_force_matching(x_soft) -> tuple[np.ndarray, float]:
    """Exhaustive maximum over injective maps; for tests on tiny inputs."""
    S = np.asarray(x_soft, dtype=np.float64)
    m, d = S.shape
    best, best_assign = -np.inf, None
    for cols in permutations(range(d), m):
        total = float(S[np.arange(m), cols].sum())
        if total > best:
            best, best_assign = total, cols
    return _to_matrix(best_assign, d), best


def compose_pairwise(Xj, Xk) -> np.ndarray:
    Xj, Xk = np.asarray(Xj), np.asarray(Xk)
    if Xj.shape[1] != Xk.shape[1]:
        raise MatchingError(f"universe size mismatch: {Xj.shape[1]} vs {Xk.shape[1]}")
    return Xj @ Xk.T


def all_pairwise(multi: Mapping) -> dict:
    """Compose every ordered pair of a ``{instance: X}`` multi-matching."""
    return {(j, k): compose_pairwise(multi[j], multi[k]) for j in multi for k in multi}


def verify_cycle_consistency(pairwise: Mapping) -> tuple[bool, tuple | None]:
    """Check identity, symmetry and transitivity on a complete pairwise set.

    Returns ``(ok, violation)`` where ``violation`` is ``None`` or a tuple
    ``(property, j, k, l)`` naming the first failure found (``property`` is
    1, 2 or 3; unused indices are ``None``).
    """
    ids = sorted({j for j, _ in pairwise} | {k for _, k in pairwise}, key=repr)
    for j in ids:
        X = np.asarray(pairwise[(j, j)])
        if X.shape[0] != X.shape[1] or not np.array_equal(X, np.eye(X.shape[0])):
            return False, (1, j, None, None)
    for j, k in combinations(ids, 2):
        if not np.array_equal(np.asarray(pairwise[(j, k)]), np.asarray(pairwise[(k, j)]).T):
            return False, (2, j, k, None)
    for j in ids:
        for k in ids:
            Xjk = np.asarray(pairwise[(j, k)])
            for l in ids:
                if np.any(Xjk @ np.asarray(pairwise[(k, l)]) > np.asarray(pairwise[(j, l)])):
                    return False, (3, j, k, l)
    return True, None


def cycle_consistency_score(Xjk, Xjl, Xkl) -> float:
    """Percentage of points of ``X_kl`` on which ``X_jk^T X_jl`` agrees with it.

    Agreement is counted per row (point) of ``X_kl``.
    """
    Xjk, Xjl, Xkl = (np.asarray(a) for a in (Xjk, Xjl, Xkl))
    m_kl = Xkl.shape[0]
    if m_kl == 0:
        raise MatchingError("cycle consistency score is undefined without common points")
    composed = Xjk.T @ Xjl
    if composed.shape != Xkl.shape:
        raise MatchingError(f"composed shape {composed.shape} != {Xkl.shape}")
    agree = int(np.sum(np.all(composed == Xkl, axis=1)))
    return 100.0 * agree / m_kl


def triple_cycle_score(Xj, Xk, Xl) -> float:
    """Cycle score of three instance-to-universe matchings on their common points.

    Common points are the universe points to which every one of the three
    instances assigns a keypoint; each matrix is restricted to the rows
    assigned to those points before composing.
    """
    Xj, Xk, Xl = (np.asarray(a) for a in (Xj, Xk, Xl))
    common = (Xj.sum(axis=0) > 0) & (Xk.sum(axis=0) > 0) & (Xl.sum(axis=0) > 0)

    def restrict(X):
        return X[(X[:, common].sum(axis=1) > 0)]

    rj, rk, rl = restrict(Xj), restrict(Xk), restrict(Xl)
    return cycle_consistency_score(
        compose_pairwise(rj, rk), compose_pairwise(rj, rl), compose_pairwise(rk, rl)
    )


def matching_accuracy(predicted, gt) -> float:
    P, G = np.asarray(predicted), np.asarray(gt)
    if P.shape != G.shape:
        raise MatchingError(f"shape mismatch: {P.shape} vs {G.shape}")
    if P.shape[0] == 0:
        raise MatchingError("accuracy of an empty matching is undefined")
    return 100.0 * float(np.sum(np.all(P == G, axis=1))) / P.shape[0]
