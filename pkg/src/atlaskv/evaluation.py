"""Synthetic data, grounding accuracy and memory/complexity sweeps.

Eval mode uses identity heads, so grounding depends only on embedding
geometry and on what the pruning keeps. The engine models a single
attention layer, so the scores reported here are that layer's KG scores.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import KgHeads
from .encoder import EmbeddingStore
from .errors import MissingTruth
from .hierarchy import HierarchyIndex, build_hierarchy, layer_sizes, planned_layout
from .hikvp import PruneConfig, TieredStore, prune_query, token_embedding

BENCH_COLUMNS = (
    "m", "k_root", "k_inter", "k_leaf", "peak_hot_bytes", "dot_products",
    "rows_root", "rows_inter", "rows_leaf", "acc1", "acc5",
)


@dataclass(frozen=True)
class SyntheticSpec:
    m: int
    d_e: int = 32
    noise_sigma: float = 0.1
    blob_sep: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.d_e < 1:
            raise ValueError(f"d_e must be >= 1, got {self.d_e}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.blob_sep > 0:
            raise ValueError(f"blob_sep must be > 0, got {self.blob_sep}")


@dataclass
class SyntheticData:
    store: EmbeddingStore
    queries: list[tuple[np.ndarray, int]]
    root_labels: np.ndarray
    inter_labels: np.ndarray


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Keys as nested Gaussian blobs shaped like the planned hierarchy.

    Each key is ``b^2 g_root + b g_inter + g_leaf`` (``b = blob_sep``, all
    ``g`` standard normal), rescaled onto a sphere of radius
    ``sqrt(d_e * (b^4 + b^2 + 1))``. Equal norms make inner-product ranking
    agree with Euclidean nearest neighbour. Leaf ids are shuffled so they
    carry no cluster information.
    """
    rng = np.random.default_rng(spec.seed)
    sizes = layer_sizes(spec.m)
    d, b = spec.d_e, spec.blob_sep
    plan = planned_layout(sizes)
    inter_sizes = np.concatenate(plan)
    inter_root = np.repeat(np.arange(sizes.m_root), [len(p) for p in plan])
    inter_of = np.repeat(np.arange(sizes.m_inter), inter_sizes)[rng.permutation(spec.m)]
    root_of = inter_root[inter_of]

    g_root = rng.standard_normal((sizes.m_root, d))
    g_inter = rng.standard_normal((sizes.m_inter, d))
    g_leaf = rng.standard_normal((spec.m, d))
    raw = b * b * g_root[root_of] + b * g_inter[inter_of] + g_leaf
    radius = np.sqrt(d * (b**4 + b**2 + 1.0))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    keys = (raw * (radius / np.maximum(norms, 1e-300))).astype(np.float32)

    noise = rng.standard_normal((spec.m, d)) * spec.noise_sigma
    qvecs = keys.astype(np.float64) + noise
    queries = [(qvecs[i], i) for i in range(spec.m)]
    store = EmbeddingStore(keys=keys, values=keys.copy(), ids=[f"syn{i}" for i in range(spec.m)])
    return SyntheticData(store=store, queries=queries, root_labels=root_of, inter_labels=inter_of)


@dataclass
class GroundingReport:
    acc_at_1: float
    acc_at_5: float
    ranks: np.ndarray
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "acc_at_1": self.acc_at_1,
            "acc_at_5": self.acc_at_5,
            "ranks": [None if not np.isfinite(r) else int(r) for r in self.ranks],
            "config": self.config,
        }


def rank_of(logits: np.ndarray, ids: np.ndarray, true_id: int) -> float:
    """1-based rank of ``true_id`` (ties by ascending id); ``inf`` if absent."""
    hit = np.flatnonzero(ids == true_id)
    if hit.size == 0:
        return np.inf
    t = logits[hit[0]]
    return float(1 + np.sum(logits > t) + np.sum((logits == t) & (ids < true_id)))


def _check_truth(queries, m: int) -> None:
    for i, (_, truth) in enumerate(queries):
        if truth is None or not 0 <= int(truth) < m:
            raise MissingTruth(f"query {i} has no valid true leaf id (got {truth!r}, M={m})")


def _report(ranks: list[float], config: dict) -> GroundingReport:
    r = np.asarray(ranks, dtype=np.float64)
    n = max(len(r), 1)
    return GroundingReport(
        acc_at_1=float(np.sum(r <= 1) / n),
        acc_at_5=float(np.sum(r <= 5) / n),
        ranks=r,
        config=config,
    )


def grounding_accuracy(
    store: EmbeddingStore,
    index: HierarchyIndex,
    heads: KgHeads,
    cfg: PruneConfig | str,
    queries,
    tiered: TieredStore | None = None,
) -> GroundingReport:
    """Rank of each query's true leaf under exact scoring or HiKVP pruning.

    ``cfg="exact"`` scores all M keys; a :class:`PruneConfig` ranks within
    the pruned survivors, and a true leaf that was pruned away counts as a
    miss. Softmax is monotone, so ranking logits equals ranking scores.
    """
    m = store.count
    _check_truth(queries, m)
    d = heads.d
    exact = isinstance(cfg, str)
    if exact and cfg != "exact":
        raise ValueError(f"cfg must be a PruneConfig or 'exact', got {cfg!r}")
    ranks = []
    if exact:
        keys_proj = heads.project_keys(store.keys)
        all_ids = np.arange(m)
        for vec, truth in queries:
            q = heads.project_query(token_embedding(vec, d))
            ranks.append(rank_of(keys_proj @ q / np.sqrt(d), all_ids, int(truth)))
        config = {"mode": "exact", "m": m}
    else:
        tiered = tiered or TieredStore(store, index)
        for vec, truth in queries:
            q = heads.project_query(token_embedding(vec, d))
            pruned = prune_query(q, index, tiered, heads, cfg)
            ranks.append(rank_of(pruned.logits, pruned.leaf_ids, int(truth)))
        config = {"mode": "hikvp", "m": m, **asdict(cfg)}
    return _report(ranks, config)


@dataclass
class BenchRecord:
    m: int
    k_root: int
    k_inter: int
    k_leaf: int
    peak_hot_bytes: int
    dot_products: int
    rows_root: int
    rows_inter: int
    rows_leaf: int
    acc1: float
    acc5: float

    @property
    def rows_scored(self) -> list[int]:
        return [self.rows_root, self.rows_inter, self.rows_leaf]


def bench_sweep(
    m_list,
    cfg: PruneConfig = PruneConfig(),
    row_bytes: int | None = None,
    d_e: int = 32,
    seed: int = 0,
    n_queries: int = 32,
    noise_sigma: float = 0.1,
    blob_sep: float = 10.0,
    backend: str = "balanced_kmeans",
) -> list[BenchRecord]:
    """One record per M from real queries against a freshly built synthetic index.

    Counters come from the first query; ``acc1``/``acc5`` are HiKVP grounding
    accuracies over the first ``n_queries`` queries.
    """
    m_list = [int(m) for m in m_list]
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ValueError(f"m_list must be strictly ascending, got {m_list}")
    heads = KgHeads.identity(d_e, d_e)
    out = []
    for m in m_list:
        data = gen_synthetic(SyntheticSpec(m=m, d_e=d_e, noise_sigma=noise_sigma, blob_sep=blob_sep, seed=seed))
        index = build_hierarchy(data.store, seed=seed, backend=backend)
        tiered = TieredStore(data.store, index, row_bytes=row_bytes)
        queries = data.queries[: max(1, min(n_queries, m))]
        first = prune_query(heads.project_query(token_embedding(queries[0][0], d_e)), index, tiered, heads, cfg)
        st = first.stats
        rep = grounding_accuracy(data.store, index, heads, cfg, queries, tiered=tiered)
        out.append(BenchRecord(
            m=m, k_root=cfg.k_root, k_inter=cfg.k_inter, k_leaf=cfg.k_leaf,
            peak_hot_bytes=st.peak_hot_bytes, dot_products=st.dot_products,
            rows_root=st.rows_scored_root, rows_inter=st.rows_scored_inter, rows_leaf=st.rows_scored_leaf,
            acc1=rep.acc_at_1, acc5=rep.acc_at_5,
        ))
    return out


def records_to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in records:
        w.writerow([getattr(r, c) for c in BENCH_COLUMNS])
    return buf.getvalue()


def records_to_json(records: list[BenchRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=2) + "\n"
