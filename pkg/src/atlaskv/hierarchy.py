"""Three-layer balanced key hierarchy (root -> inter -> leaf).

Index file layout (little endian)::

    magic "AKVH" | u32 version=1 | u32 dim
    u64 M, M_L, M_I, M_R, S
    f32 root_keys[M_R * dim] | f32 inter_keys[M_I * dim]
    u32 root_offsets[M_R + 1] | u32 root_child_ids[M_I]
    u32 inter_offsets[M_I + 1] | u32 inter_child_ids[M]
    u32 crc32 of everything above
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .clustering import balanced_kmeans, gmm_balanced, random_projection
from .errors import CorruptIndex, DegenerateData, DimMismatch, IoError, ZeroSize

AKVH_MAGIC = b"AKVH"
AKVH_VERSION = 1
_HEAD = struct.Struct("<4sII5Q")
BACKENDS = ("balanced_kmeans", "gmm_balanced")


def _icbrt_ceil(x: int) -> int:
    """Smallest integer s with s**3 >= x (exact, no float rounding)."""
    if x <= 1:
        return max(x, 0)
    s = int(round(x ** (1.0 / 3.0)))
    while s**3 < x:
        s += 1
    while s > 1 and (s - 1) ** 3 >= x:
        s -= 1
    return s


@dataclass(frozen=True)
class LayerSizes:
    m_leaf: int
    m_inter: int
    m_root: int
    s: int

    @property
    def m(self) -> int:
        return self.m_leaf


def layer_sizes(m: int) -> LayerSizes:
    """Ceilings of M^(1/3), M^(2/3) and ceil(M^(2/3)) * M^(-1/3), computed exactly in integers."""
    if m < 1:
        raise ZeroSize(f"layer sizes need M >= 1, got {m}")
    s = _icbrt_ceil(m)
    m_inter = _icbrt_ceil(m * m)
    # smallest r with r >= m_inter / m^(1/3)  <=>  r^3 * m >= m_inter^3
    m_root = _icbrt_ceil(-(-(m_inter**3) // m))
    return LayerSizes(m_leaf=m, m_inter=m_inter, m_root=m_root, s=s)


def split_evenly(total: int, parts: int) -> np.ndarray:
    """``parts`` sizes summing to ``total``; the first ``total % parts`` get one extra."""
    base, extra = divmod(total, parts)
    sizes = np.full(parts, base, dtype=np.int64)
    sizes[:extra] += 1
    return sizes


def planned_layout(sizes: LayerSizes) -> list[np.ndarray]:
    """Per root, the planned leaf counts of its inter nodes."""
    inter = split_evenly(sizes.m_leaf, sizes.m_inter)
    per_root = split_evenly(sizes.m_inter, sizes.m_root)
    bounds = np.concatenate([[0], np.cumsum(per_root)])
    return [inter[bounds[r] : bounds[r + 1]] for r in range(sizes.m_root)]


def _csr(lists: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(c) for c in lists])
    ids = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, dtype=np.int64)
    return offsets, ids


def _padded(offsets: np.ndarray, ids: np.ndarray, width: int) -> np.ndarray:
    n = len(offsets) - 1
    out = np.full((n, width), -1, dtype=np.int64)
    counts = np.diff(offsets)
    rows = np.repeat(np.arange(n), counts)
    cols = np.arange(ids.size) - np.repeat(offsets[:-1], counts)
    out[rows, cols] = ids
    return out


@dataclass(eq=False)
class HierarchyIndex:
    """Pooled root/inter keys plus parent -> child maps in CSR form.

    Leaves are store row ids; inter and root nodes are numbered densely in
    root order. Key matrices are float32 (the on-disk precision).
    """

    sizes: LayerSizes
    root_keys: np.ndarray
    inter_keys: np.ndarray
    root_offsets: np.ndarray
    root_child_ids: np.ndarray
    inter_offsets: np.ndarray
    inter_child_ids: np.ndarray

    @property
    def dim(self) -> int:
        return self.root_keys.shape[1]

    @property
    def leaf_ids(self) -> np.ndarray:
        return self.inter_child_ids

    @property
    def root_children(self) -> list[np.ndarray]:
        return [self.root_child_ids[a:b] for a, b in zip(self.root_offsets[:-1], self.root_offsets[1:])]

    @property
    def inter_children(self) -> list[np.ndarray]:
        return [self.inter_child_ids[a:b] for a, b in zip(self.inter_offsets[:-1], self.inter_offsets[1:])]

    @cached_property
    def root_block(self) -> np.ndarray:
        """M_R x S child table padded with -1."""
        return _padded(self.root_offsets, self.root_child_ids, self.sizes.s)

    @cached_property
    def inter_block(self) -> np.ndarray:
        """M_I x S child table padded with -1."""
        return _padded(self.inter_offsets, self.inter_child_ids, self.sizes.s)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HierarchyIndex):
            return NotImplemented
        return self.sizes == other.sizes and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("root_keys", "inter_keys", "root_offsets", "root_child_ids", "inter_offsets", "inter_child_ids")
        )

    def validate(self, leaf_keys: np.ndarray | None = None, rtol: float = 1e-6) -> None:
        """Raise ``CorruptIndex`` if any structural or pooling invariant fails."""
        sz = self.sizes
        if self.root_keys.shape[0] != sz.m_root or self.inter_keys.shape[0] != sz.m_inter:
            raise CorruptIndex("key matrix row counts disagree with layer sizes")
        for name, offsets, ids, n_parent, n_child in (
            ("root", self.root_offsets, self.root_child_ids, sz.m_root, sz.m_inter),
            ("inter", self.inter_offsets, self.inter_child_ids, sz.m_inter, sz.m_leaf),
        ):
            counts = np.diff(offsets)
            if len(offsets) != n_parent + 1 or offsets[0] != 0 or offsets[-1] != n_child:
                raise CorruptIndex(f"{name} offsets do not span {n_child} children")
            if counts.min() < 1 or counts.max() > sz.s:
                raise CorruptIndex(f"{name} child counts outside [1, {sz.s}]")
            if not np.array_equal(np.sort(ids), np.arange(n_child)):
                raise CorruptIndex(f"{name} children are not a partition of 0..{n_child - 1}")
        inter64 = self.inter_keys.astype(np.float64)
        pooled_roots = np.add.reduceat(inter64[self.root_child_ids], self.root_offsets[:-1], axis=0)
        pooled_roots /= np.diff(self.root_offsets)[:, None]
        _check_pool("root", self.root_keys, pooled_roots, rtol)
        if leaf_keys is not None:
            leaf64 = np.asarray(leaf_keys, dtype=np.float64)
            pooled = np.add.reduceat(leaf64[self.inter_child_ids], self.inter_offsets[:-1], axis=0)
            pooled /= np.diff(self.inter_offsets)[:, None]
            _check_pool("inter", self.inter_keys, pooled, rtol)


def _check_pool(name: str, stored: np.ndarray, pooled: np.ndarray, rtol: float) -> None:
    err = np.abs(stored.astype(np.float64) - pooled)
    tol = rtol * np.maximum(1.0, np.abs(pooled))
    if np.any(err > tol):
        raise CorruptIndex(f"{name} keys are not the mean of their children (max err {err.max():.3g})")


def build_hierarchy(
    store,
    seed: int = 0,
    backend: str = "balanced_kmeans",
    n_iter: int | None = None,
    reduce_dim: int = 32,
) -> HierarchyIndex:
    """Cluster the store's keys into a balanced root/inter/leaf hierarchy.

    ``store`` is an :class:`~atlaskv.encoder.EmbeddingStore` or a bare
    ``M x D_E`` key matrix. Clustering runs top-down on a random projection
    of the keys: leaves are first split into M_R root groups, then each group
    into its inter clusters, every split using exact planned capacities.
    Pooled keys are means of the full-width children.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    keys = np.asarray(getattr(store, "keys", store))
    if keys.ndim != 2:
        raise DimMismatch(f"keys must be a 2-D matrix, got shape {keys.shape}")
    m = keys.shape[0]
    if m < 1:
        raise ZeroSize("cannot build a hierarchy over an empty store")
    if not np.all(np.isfinite(keys)):
        raise DegenerateData("keys contain non-finite values")
    sizes = layer_sizes(m)
    plan = planned_layout(sizes)
    x = random_projection(keys, reduce_dim, seed)
    if backend == "balanced_kmeans":
        def cluster(pts, caps, rng):
            return balanced_kmeans(pts, caps, rng, n_iter=6 if n_iter is None else n_iter)
    else:
        def cluster(pts, caps, rng):
            return gmm_balanced(pts, caps, rng, n_iter=100 if n_iter is None else n_iter)

    root_caps = np.array([p.sum() for p in plan])
    group_labels, group_perm = cluster(x, root_caps, np.random.default_rng([seed, 0]))
    order = np.argsort(group_labels, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(group_labels, minlength=sizes.m_root))])

    inter_lists: list[np.ndarray] = []
    root_lists: list[np.ndarray] = []
    for g in range(sizes.m_root):
        members = order[bounds[g] : bounds[g + 1]]
        caps = plan[group_perm[g]]
        sub_labels, _ = cluster(x[members], caps, np.random.default_rng([seed, g + 1]))
        first = len(inter_lists)
        for c in range(len(caps)):
            inter_lists.append(members[sub_labels == c])
        root_lists.append(np.arange(first, len(inter_lists)))

    inter_offsets, inter_ids = _csr(inter_lists)
    root_offsets, root_ids = _csr(root_lists)
    keys64 = keys.astype(np.float64)
    inter_keys = (np.add.reduceat(keys64[inter_ids], inter_offsets[:-1], axis=0)
                  / np.diff(inter_offsets)[:, None]).astype(np.float32)
    root_keys = (np.add.reduceat(inter_keys.astype(np.float64)[root_ids], root_offsets[:-1], axis=0)
                 / np.diff(root_offsets)[:, None]).astype(np.float32)
    return HierarchyIndex(
        sizes=sizes,
        root_keys=root_keys,
        inter_keys=inter_keys,
        root_offsets=root_offsets,
        root_child_ids=root_ids,
        inter_offsets=inter_offsets,
        inter_child_ids=inter_ids,
    )


def index_bytes(index: HierarchyIndex) -> bytes:
    sz = index.sizes
    parts = [
        _HEAD.pack(AKVH_MAGIC, AKVH_VERSION, index.dim, sz.m, sz.m_leaf, sz.m_inter, sz.m_root, sz.s),
        np.ascontiguousarray(index.root_keys, dtype="<f4").tobytes(),
        np.ascontiguousarray(index.inter_keys, dtype="<f4").tobytes(),
        index.root_offsets.astype("<u4").tobytes(),
        index.root_child_ids.astype("<u4").tobytes(),
        index.inter_offsets.astype("<u4").tobytes(),
        index.inter_child_ids.astype("<u4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_index(index: HierarchyIndex, path: str | Path) -> None:
    try:
        Path(path).write_bytes(index_bytes(index))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def load_index(path: str | Path) -> HierarchyIndex:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_index(raw, str(path))


def parse_index(raw: bytes, name: str = "<bytes>") -> HierarchyIndex:
    if len(raw) < _HEAD.size + 4:
        raise CorruptIndex(f"{name}: truncated header ({len(raw)} bytes)")
    magic, version, dim, m, m_leaf, m_inter, m_root, s = _HEAD.unpack_from(raw)
    if magic != AKVH_MAGIC:
        raise CorruptIndex(f"{name}: bad magic {magic!r}")
    if version != AKVH_VERSION:
        raise CorruptIndex(f"{name}: unsupported index version {version} (expected {AKVH_VERSION})")
    expected = (
        _HEAD.size
        + 4 * dim * (m_root + m_inter)
        + 4 * ((m_root + 1) + m_inter + (m_inter + 1) + m_leaf)
        + 4
    )
    if len(raw) != expected:
        raise CorruptIndex(f"{name}: size {len(raw)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptIndex(f"{name}: checksum mismatch")
    sizes = LayerSizes(m_leaf=m_leaf, m_inter=m_inter, m_root=m_root, s=s)
    if m != m_leaf or layer_sizes(m) != sizes:
        raise CorruptIndex(f"{name}: layer sizes {sizes} inconsistent with M={m}")

    pos = _HEAD.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    root_keys = take("<f4", m_root * dim).reshape(m_root, dim).astype(np.float32)
    inter_keys = take("<f4", m_inter * dim).reshape(m_inter, dim).astype(np.float32)
    index = HierarchyIndex(
        sizes=sizes,
        root_keys=root_keys,
        inter_keys=inter_keys,
        root_offsets=take("<u4", m_root + 1).astype(np.int64),
        root_child_ids=take("<u4", m_inter).astype(np.int64),
        inter_offsets=take("<u4", m_inter + 1).astype(np.int64),
        inter_child_ids=take("<u4", m_leaf).astype(np.int64),
    )
    index.validate()
    return index
