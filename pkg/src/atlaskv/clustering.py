"""Capacity-constrained clustering used to build balanced key hierarchies.

Both backends produce clusters whose sizes are an exact, caller-supplied
capacity vector (a permutation of it, matched to the natural cluster sizes),
so every cluster is non-empty and no cluster exceeds its budget.
"""
from __future__ import annotations

import warnings
from typing import Callable

import numpy as np

CostFn = Callable[[np.ndarray], np.ndarray]

_CHUNK_CELLS = 1 << 22
_INIT_SAMPLE = 50_000


def random_projection(x: np.ndarray, target: int, seed: int) -> np.ndarray:
    """Seeded Gaussian random projection to ``target`` dims (identity if already narrow).

    Output is float32: clustering only needs ranking-grade precision.
    """
    if x.shape[1] <= target:
        return np.ascontiguousarray(x, dtype=np.float32)
    rng = np.random.default_rng([seed, 0x5EED])
    proj = rng.standard_normal((x.shape[1], target)) / np.sqrt(target)
    return (np.asarray(x, dtype=np.float64) @ proj).astype(np.float32)


def sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(axis=1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (a few D^2-sampled trials per step)."""
    n = x.shape[0]
    if n > _INIT_SAMPLE:
        x = x[np.sort(rng.choice(n, _INIT_SAMPLE, replace=False))]
        n = _INIT_SAMPLE
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    closest = sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a center: take the lowest unused index
            used = set(chosen)
            nxt = next((i for i in range(n) if i not in used), chosen[-1])
            chosen.append(nxt)
            continue
        cand = rng.choice(n, size=trials, p=closest / total)
        cand_d = sq_dists(x, x[cand])
        pot = np.minimum(closest[:, None], cand_d).sum(axis=0)
        best = int(np.argmin(pot))
        chosen.append(int(cand[best]))
        closest = np.minimum(closest, cand_d[:, best])
    return x[chosen].copy()


def _candidates(x: np.ndarray, cost: CostFn, k: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Per point, the ``t`` cheapest clusters sorted by (cost, cluster id)."""
    n = x.shape[0]
    cand = np.empty((n, t), dtype=np.int64)
    cval = np.empty((n, t), dtype=x.dtype)
    step = max(1, _CHUNK_CELLS // max(k, 1))
    for lo in range(0, n, step):
        c = cost(x[lo : lo + step])
        cand[lo : lo + step], cval[lo : lo + step] = _top_t(c, t)
    return cand, cval


def _top_t(c: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    k = c.shape[1]
    if t < k:
        part = np.argpartition(c, t - 1, axis=1)[:, :t]
        part.sort(axis=1)
    else:
        part = np.broadcast_to(np.arange(k), c.shape).copy()
    vals = np.take_along_axis(c, part, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1), np.take_along_axis(vals, order, axis=1)


def match_capacities(natural: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` so cluster ``j`` gets ``capacities[perm[j]]``.

    Larger capacities go to clusters with more nearest-center points; ties
    break by ascending index on both sides.
    """
    k = len(capacities)
    by_natural = np.lexsort((np.arange(k), -np.asarray(natural)))
    by_capacity = np.lexsort((np.arange(k), -np.asarray(capacities)))
    perm = np.empty(k, dtype=np.int64)
    perm[by_natural] = by_capacity
    return perm


def capacity_assign(
    x: np.ndarray,
    cost: CostFn,
    capacities: np.ndarray,
    t: int = 8,
    candidates: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Greedy assignment to the cheapest non-full cluster.

    Points are served in order of decreasing margin (second-best minus best
    cost, ties by ascending point id). Work proceeds in rounds: each
    unassigned point proposes its cheapest non-full cluster and each cluster
    accepts proposals in priority order up to its remaining capacity.
    """
    capacities = np.asarray(capacities, dtype=np.int64)
    n, k = x.shape[0], len(capacities)
    if capacities.sum() != n:
        raise ValueError(f"capacities sum to {capacities.sum()}, expected {n}")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if candidates is None:
        # at least two candidates so every point has a margin
        cand, cval = _candidates(x, cost, k, min(max(t, 2), k))
    else:
        cand, cval = candidates[0].copy(), candidates[1].copy()
    t = cand.shape[1]
    margin = cval[:, 1] - cval[:, 0]
    active = np.lexsort((np.arange(n), -margin))
    labels = np.full(n, -1, dtype=np.int64)
    remaining = capacities.copy()
    ptr = np.zeros(n, dtype=np.int64)
    while active.size:
        full = remaining <= 0
        p = ptr[active]
        choice = cand[active, p]
        blocked = full[choice]
        while blocked.any():
            p[blocked] += 1
            exhausted = p >= t
            if exhausted.any():
                pts = active[exhausted]
                c = cost(x[pts])
                c[:, full] = np.inf
                cand[pts], cval[pts] = _top_t(c, t)
                p[exhausted] = 0
            choice = cand[active, p]
            blocked = full[choice]
        ptr[active] = p
        idx = np.argsort(choice, kind="stable")
        sc = choice[idx]
        pos = np.arange(sc.size) - np.searchsorted(sc, sc, side="left")
        ok = pos < remaining[sc]
        labels[active[idx[ok]]] = sc[ok]
        remaining -= np.bincount(sc[ok], minlength=k)
        keep = np.ones(active.size, dtype=bool)
        keep[idx[ok]] = False
        active = active[keep]
    return labels


def _cluster_means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=k)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sums = np.add.reduceat(x[order].astype(np.float64), starts, axis=0)
    return (sums / counts[:, None]).astype(x.dtype)


def balanced_kmeans(
    x: np.ndarray, capacities, rng: np.random.Generator, n_iter: int = 6
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with exact capacities.

    Returns ``(labels, perm)``: cluster ``j`` holds exactly
    ``capacities[perm[j]]`` points.
    """
    capacities = np.asarray(capacities, dtype=np.int64)
    k = len(capacities)
    if k == 1:
        return np.zeros(x.shape[0], dtype=np.int64), np.zeros(1, dtype=np.int64)
    centers = kmeans_pp(x, k, rng)
    labels = perm = None
    for _ in range(max(1, n_iter)):
        def cost(y, c=centers, c2=(centers * centers).sum(axis=1)):
            # squared distance minus the per-row constant |y|^2
            return c2[None, :] - 2.0 * (y @ c.T)

        cand = _candidates(x, cost, k, min(8, k))
        natural = np.bincount(cand[0][:, 0], minlength=k)
        new_perm = match_capacities(natural, capacities)
        new = capacity_assign(x, cost, capacities[new_perm], candidates=cand)
        if labels is not None and np.array_equal(new, labels):
            break
        labels, perm = new, new_perm
        centers = _cluster_means(x, labels, k)
    return labels, perm


def gmm_balanced(
    x: np.ndarray, capacities, rng: np.random.Generator, n_iter: int = 60
) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal GMM fit, then capacity assignment on negative log joint density."""
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.mixture import GaussianMixture

    capacities = np.asarray(capacities, dtype=np.int64)
    k = len(capacities)
    if k == 1:
        return np.zeros(x.shape[0], dtype=np.int64), np.zeros(1, dtype=np.int64)
    gmm = GaussianMixture(
        n_components=k,
        covariance_type="diag",
        max_iter=n_iter,
        reg_covar=1e-6,
        random_state=int(rng.integers(2**31 - 1)),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gmm.fit(x)
    means, var = gmm.means_, gmm.covariances_
    log_norm = np.log(gmm.weights_) - 0.5 * np.sum(np.log(2 * np.pi * var), axis=1)
    inv = 1.0 / var

    def cost(y):
        maha = (y * y) @ inv.T - 2.0 * y @ (means * inv).T + np.sum(means * means * inv, axis=1)
        return 0.5 * maha - log_norm

    cand = _candidates(x, cost, k, min(8, k))
    perm = match_capacities(np.bincount(cand[0][:, 0], minlength=k), capacities)
    return capacity_assign(x, cost, capacities[perm], candidates=cand), perm
