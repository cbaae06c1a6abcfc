"""Hierarchical key-value pruning over a simulated hot/cold memory tier.

A query descends the index in three steps (root -> inter -> leaf), keeping
the top-k children at each layer. Only the rows a step needs are uploaded
to the bounded hot buffer, projected on arrival, and offloaded before the
next step starts.

Step blocks have a fixed shape: Step 2 scores ``min(k_R, M_R) * S`` slots
and Step 3 scores ``min(k_I, M_I) * S`` slots. Parents with fewer than S
children leave padding slots (id -1, zero key, logit -inf) that are uploaded
and scored like real rows, the way a dense device kernel would.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttnOut, KgHeads, SeqState, _row_softmax, mixing_weights, seq_logits
from .encoder import EmbeddingStore, Encoder, encode
from .errors import (
    CorruptIndex,
    DimMismatch,
    HotCapacityExceeded,
    NonFiniteInput,
    ShapeMismatch,
)
from .hierarchy import HierarchyIndex, LayerSizes


@dataclass(frozen=True)
class PruneConfig:
    k_root: int = 128
    k_inter: int = 64
    k_leaf: int = 16

    def __post_init__(self):
        for name in ("k_root", "k_inter", "k_leaf"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    def clamped(self, sizes: LayerSizes) -> tuple[int, int, int]:
        return (
            min(self.k_root, sizes.m_root),
            min(self.k_inter, sizes.m_inter),
            min(self.k_leaf, sizes.m_leaf),
        )

    @classmethod
    def no_prune(cls, sizes: LayerSizes) -> "PruneConfig":
        return cls(sizes.m_root, sizes.m_inter, sizes.m_leaf)


@dataclass
class OpStats:
    dot_products: int = 0
    rows_scored_root: int = 0
    rows_scored_inter: int = 0
    rows_scored_leaf: int = 0
    bytes_uploaded: int = 0
    bytes_offloaded: int = 0
    peak_hot_bytes: int = 0

    @property
    def rows_scored(self) -> list[int]:
        return [self.rows_scored_root, self.rows_scored_inter, self.rows_scored_leaf]

    @property
    def rows_scored_total(self) -> int:
        return sum(self.rows_scored)

    def to_json(self) -> dict:
        return {
            "dot_products": self.dot_products,
            "rows_scored": self.rows_scored,
            "bytes_uploaded": self.bytes_uploaded,
            "bytes_offloaded": self.bytes_offloaded,
            "peak_hot_bytes": self.peak_hot_bytes,
        }


@dataclass(frozen=True, eq=False)
class StepTrace:
    """What one descent step touched; byte fields are the step's own deltas."""

    step: int
    layer: str
    rows_scored: int
    survivors: np.ndarray
    bytes_uploaded: int
    bytes_offloaded: int
    hot_bytes_peak: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["survivors"] = [int(i) for i in self.survivors]
        return d


class HotTier:
    """Bounded byte-accounted scratch buffer owned by a single query session."""

    def __init__(self, capacity: int | None, row_bytes: int):
        self.capacity = capacity
        self.row_bytes = row_bytes
        self.stats = OpStats()
        self._held: dict[str, int] = {}
        self.used = 0

    def _reserve(self, name: str, nbytes: int) -> None:
        if self.capacity is not None and self.used + nbytes > self.capacity:
            raise HotCapacityExceeded(
                f"{name!r} needs {nbytes} bytes with {self.used} in use; hot capacity is {self.capacity}"
            )
        self._held[name] = self._held.get(name, 0) + nbytes
        self.used += nbytes
        self.stats.peak_hot_bytes = max(self.stats.peak_hot_bytes, self.used)

    def pin(self, name: str, nbytes: int) -> None:
        """Reserve fixed overhead (not a metered transfer)."""
        self._reserve(name, nbytes)

    def upload(self, name: str, rows: int) -> None:
        nbytes = rows * self.row_bytes
        self._reserve(name, nbytes)
        self.stats.bytes_uploaded += nbytes

    def offload(self, name: str) -> None:
        nbytes = self._held.pop(name)
        self.used -= nbytes
        self.stats.bytes_offloaded += nbytes


class TieredStore:
    """Cold key/value store plus index, and a factory for hot-tier sessions.

    ``row_bytes`` is the hot cost of one slot; the default ``(D + 1) * 8``
    holds a projected float64 row plus its int64 id. The query vector is
    pinned as fixed overhead of ``8 * D`` bytes.
    """

    def __init__(
        self,
        store: EmbeddingStore,
        index: HierarchyIndex,
        hot_capacity_bytes: int | None = None,
        row_bytes: int | None = None,
    ):
        if store.count != index.sizes.m:
            raise CorruptIndex(f"index covers M={index.sizes.m} leaves but the store holds {store.count}")
        if store.dim != index.dim:
            raise DimMismatch(f"index keys are {index.dim}-wide, store keys {store.dim}-wide")
        self.store = store
        self.index = index
        self.hot_capacity_bytes = hot_capacity_bytes
        self.row_bytes = row_bytes

    def slot_bytes(self, d: int) -> int:
        return self.row_bytes if self.row_bytes is not None else (d + 1) * 8

    def session(self, d: int) -> HotTier:
        return HotTier(self.hot_capacity_bytes, self.slot_bytes(d))


@dataclass
class PrunedSet:
    """Leaf survivors of one descent, ordered by descending logit (ties by id).

    ``keys`` and ``values`` are the projected rows; ``heads`` is kept so the
    set can be re-scored against other tokens of the same sequence.
    """

    leaf_ids: np.ndarray
    logits: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    heads: KgHeads
    stats: OpStats = field(default_factory=OpStats)
    trace: list[StepTrace] = field(default_factory=list)

    @property
    def log_lambda_numerator(self) -> float:
        top = self.logits.max()
        return float(top + np.log(np.exp(self.logits - top).sum()))

    @property
    def lambda_numerator(self) -> float:
        """Sum of exp over the surviving logits."""
        return float(np.exp(self.logits).sum())

    @property
    def scores(self) -> np.ndarray:
        """Softmax over the surviving logits."""
        return _row_softmax(self.logits[None, :])[0]


def top_k(logits: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest logits, ties broken by ascending id."""
    if k < logits.size:
        # keep everything tied with the k-th value so the id tie-break stays exact
        kth = -np.partition(-logits, k - 1)[k - 1]
        cand = np.flatnonzero(logits >= kth)
    else:
        cand = np.arange(logits.size)
    order = np.lexsort((ids[cand], -logits[cand]))
    return cand[order[:k]]


def _score(keys_proj: np.ndarray, q: np.ndarray, d: int) -> np.ndarray:
    return keys_proj @ q / np.sqrt(d)


def _block(table: np.ndarray, parents: np.ndarray, n_rows: int) -> np.ndarray:
    """Child slots of ``parents`` padded with -1 to ``n_rows`` parent rows."""
    out = np.full((n_rows, table.shape[1]), -1, dtype=np.int64)
    out[: len(parents)] = table[parents]
    return out.ravel()


def _slot_keys(ids: np.ndarray, source: np.ndarray, heads: KgHeads) -> np.ndarray:
    pad = ids < 0
    out = heads.project_keys(source[np.where(pad, 0, ids)])
    out[pad] = 0.0
    return out


def prune_query(
    q_vec: np.ndarray,
    index: HierarchyIndex,
    store: TieredStore,
    heads: KgHeads,
    cfg: PruneConfig = PruneConfig(),
) -> PrunedSet:
    """Three-step top-k descent for one projected query ``q_vec`` (width D)."""
    q = np.asarray(q_vec, dtype=np.float64)
    d = heads.d
    if q.shape != (d,):
        raise ShapeMismatch(f"projected query must have shape ({d},), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise NonFiniteInput("query vector has non-finite entries")
    if store.index is not index and store.index.sizes != index.sizes:
        raise CorruptIndex("tiered store was opened over a different index")
    if heads.d_e != index.dim:
        raise DimMismatch(f"heads expect {heads.d_e}-wide keys, index holds {index.dim}-wide keys")
    sizes = index.sizes
    k_r, k_i, k_l = cfg.clamped(sizes)
    hot = store.session(d)
    st = hot.stats
    hot.pin("query", 8 * d)
    trace: list[StepTrace] = []

    def record(step, layer, rows, survivors, up0, off0):
        trace.append(StepTrace(step, layer, rows, survivors.copy(),
                               st.bytes_uploaded - up0, st.bytes_offloaded - off0, hot.used))

    # Step 1: every root key
    up0, off0 = st.bytes_uploaded, st.bytes_offloaded
    hot.upload("root_keys", sizes.m_root)
    root_ids = np.arange(sizes.m_root)
    root_logits = _score(heads.project_keys(index.root_keys), q, d)
    st.rows_scored_root = sizes.m_root
    roots = root_ids[top_k(root_logits, root_ids, k_r)]
    hot.offload("root_keys")
    record(1, "root", sizes.m_root, roots, up0, off0)

    # Step 2: inter children of the surviving roots
    up0, off0 = st.bytes_uploaded, st.bytes_offloaded
    inter_slots = _block(index.root_block, roots, k_r)
    hot.upload("inter_keys", inter_slots.size)
    inter_logits = _score(_slot_keys(inter_slots, index.inter_keys, heads), q, d)
    inter_logits[inter_slots < 0] = -np.inf
    st.rows_scored_inter = inter_slots.size
    n_real = int((inter_slots >= 0).sum())
    inters = inter_slots[top_k(inter_logits, inter_slots, min(k_i, n_real))]
    hot.offload("inter_keys")
    record(2, "inter", inter_slots.size, inters, up0, off0)

    # Step 3: leaf children of the surviving inters, then the winners' values
    up0, off0 = st.bytes_uploaded, st.bytes_offloaded
    leaf_slots = _block(index.inter_block, inters, k_i)
    hot.upload("leaf_keys", leaf_slots.size)
    leaf_keys = _slot_keys(leaf_slots, store.store.keys, heads)
    leaf_logits = _score(leaf_keys, q, d)
    leaf_logits[leaf_slots < 0] = -np.inf
    st.rows_scored_leaf = leaf_slots.size
    n_real = int((leaf_slots >= 0).sum())
    pos = top_k(leaf_logits, leaf_slots, min(k_l, n_real))
    leaf_ids = leaf_slots[pos]
    hot.upload("leaf_values", leaf_ids.size)
    values = heads.project_values(store.store.values[leaf_ids])
    hot.offload("leaf_keys")
    record(3, "leaf", leaf_slots.size, leaf_ids, up0, off0)

    st.dot_products = st.rows_scored_total
    return PrunedSet(
        leaf_ids=leaf_ids,
        logits=leaf_logits[pos],
        keys=leaf_keys[pos],
        values=values,
        heads=heads,
        stats=st,
        trace=trace,
    )


def expected_rows(sizes: LayerSizes, cfg: PruneConfig) -> int:
    """Closed-form number of rows (and dot products) one descent scores."""
    return sizes.m_root + min(cfg.k_root, sizes.m_root) * sizes.s + min(cfg.k_inter, sizes.m_inter) * sizes.s


def peak_rows(sizes: LayerSizes, cfg: PruneConfig) -> int:
    """Largest number of hot slots any step holds at once."""
    k_r, k_i, k_l = cfg.clamped(sizes)
    return max(sizes.m_root, k_r * sizes.s, k_i * sizes.s + k_l)


def pruned_attention(pruned: PrunedSet, seq: SeqState) -> AttnOut:
    """Attention output with the KG part restricted to the pruned leaves.

    Every token is re-scored against the surviving projected keys, and the
    KG mixing weight uses the survivors' partition sum only.
    """
    heads = pruned.heads
    if heads.d != seq.d or pruned.values.shape[1] != seq.d or pruned.keys.shape != pruned.values.shape:
        raise ShapeMismatch(
            f"pruned rows are {pruned.values.shape[1]}-wide, heads {heads.d}, sequence {seq.d}"
        )
    l_kg = heads.project_query(seq.x) @ pruned.keys.T / np.sqrt(seq.d)
    l_seq = seq_logits(seq)
    lam_kg, lam_seq = mixing_weights(l_kg, l_seq)
    p_kg = _row_softmax(l_kg)
    y = lam_seq[:, None] * (_row_softmax(l_seq) @ seq.v)
    if l_kg.shape[1]:
        y = y + lam_kg[:, None] * (p_kg @ pruned.values)
    return AttnOut(y=y, lambda_kg=lam_kg, lambda_seq=lam_seq, kg_scores=p_kg)


def token_embedding(vec: np.ndarray, d: int) -> np.ndarray:
    """Zero-pad or truncate a base embedding to token width ``d``."""
    vec = np.asarray(vec, dtype=np.float64)
    out = np.zeros(d)
    n = min(d, vec.size)
    out[:n] = vec[:n]
    return out


def query_once(
    question_text: str,
    encoder: Encoder,
    index: HierarchyIndex,
    store: TieredStore,
    heads: KgHeads,
    cfg: PruneConfig = PruneConfig(),
) -> dict:
    """Encode a question, prune, and attend from a one-token sequence.

    Returns ``{"answer_scores": PrunedSet, "stats": OpStats, "attention": AttnOut}``.
    """
    if encoder.dim != heads.d_e:
        raise DimMismatch(f"encoder emits {encoder.dim}-wide vectors, heads expect {heads.d_e}")
    emb = encode(question_text, "key", encoder)
    x = token_embedding(emb, heads.d)[None, :]
    eye = np.eye(heads.d)
    seq = SeqState(x=x, Wq=eye, Wk=eye, Wv=eye)
    pruned = prune_query(heads.project_query(x)[0], index, store, heads, cfg)
    return {"answer_scores": pruned, "stats": pruned.stats, "attention": pruned_attention(pruned, seq)}
