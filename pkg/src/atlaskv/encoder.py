"""Sentence-encoder backends and the on-disk embedding store.

Store layout (one directory)::

    keys.akve    magic "AKVE", u32 version=1, u32 dim, u64 count, count*dim f32 LE
    values.akve  same layout as keys.akve
    ids.txt      row -> record id, newline delimited
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ApiError, DimMismatch, EmptyCorpus, IoError, NonFiniteInput
from .kgkv import read_qkv

AKVE_MAGIC = b"AKVE"
AKVE_VERSION = 1
_AKVE_HEADER = struct.Struct("<4sIIQ")

ENCODER_URL_ENV = "ATLASKV_ENCODER_URL"
ENCODER_KEY_ENV = "ATLASKV_ENCODER_KEY"

KEYS_FILE = "keys.akve"
VALUES_FILE = "values.akve"
IDS_FILE = "ids.txt"


class Encoder(Protocol):
    dim: int

    def __call__(self, text: str, which: str = "key") -> np.ndarray: ...


class StubEncoder:
    """Deterministic hash encoder producing unit vectors.

    The text is hashed to 64 bits (BLAKE2b keyed by ``seed``) and the hash
    keys a Philox counter-based generator that supplies ``dim`` Gaussian
    draws. Key and value strings get identical treatment.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._hash_key = seed.to_bytes(8, "little", signed=True)
        self.calls = 0

    def hash64(self, text: str) -> int:
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=self._hash_key).digest()
        return int.from_bytes(digest, "little")

    def __call__(self, text: str, which: str = "key") -> np.ndarray:
        self.calls += 1
        gen = np.random.Generator(np.random.Philox(key=self.hash64(text)))
        v = gen.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class HttpEncoder:
    """Remote sentence encoder reached over one JSON-over-HTTP adapter.

    Request: ``{"input": text, "kind": "key"|"value"}``. The response may be
    ``{"embedding": [...]}`` or OpenAI-style ``{"data": [{"embedding": [...]}]}``.
    """

    def __init__(self, dim: int, url: str | None = None, api_key: str | None = None, timeout: float = 30.0):
        self.dim = dim
        self.url = url or os.environ.get(ENCODER_URL_ENV)
        self.api_key = api_key if api_key is not None else os.environ.get(ENCODER_KEY_ENV)
        self.timeout = timeout
        if not self.url:
            raise ApiError(f"no encoder endpoint configured (set {ENCODER_URL_ENV})")

    def __call__(self, text: str, which: str = "key") -> np.ndarray:
        body = json.dumps({"input": text, "kind": which}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ApiError(f"encoder request failed: {exc}") from exc
        try:
            emb = payload["embedding"] if "embedding" in payload else payload["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ApiError(f"unexpected encoder response shape: {exc}") from exc
        return np.asarray(emb, dtype=np.float64)


def encode(text: str, which: str, backend: Encoder) -> np.ndarray:
    if not text:
        raise ValueError("cannot encode empty text")
    if which not in ("key", "value"):
        raise ValueError(f"which must be 'key' or 'value', got {which!r}")
    vec = np.asarray(backend(text, which), dtype=np.float64)
    if vec.shape != (backend.dim,):
        raise DimMismatch(f"encoder returned shape {vec.shape}, expected ({backend.dim},)")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteInput(f"encoder returned non-finite values for {text[:40]!r}")
    return vec


@dataclass
class EmbeddingStore:
    """Row-aligned key/value base embeddings (float32, count x dim)."""

    keys: np.ndarray
    values: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.keys.ndim != 2 or self.keys.shape != self.values.shape:
            raise DimMismatch(f"keys {self.keys.shape} and values {self.values.shape} must be equal 2-D shapes")
        if not self.ids:
            self.ids = [str(i) for i in range(self.keys.shape[0])]
        if len(self.ids) != self.keys.shape[0]:
            raise DimMismatch(f"{len(self.ids)} ids for {self.keys.shape[0]} rows")

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def count(self) -> int:
        return self.keys.shape[0]


def write_akve(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise DimMismatch("AKVE payload must be a 2-D matrix")
    try:
        with open(path, "wb") as fh:
            fh.write(_AKVE_HEADER.pack(AKVE_MAGIC, AKVE_VERSION, m.shape[1], m.shape[0]))
            fh.write(m.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def read_akve(path: str | Path, mmap: bool = False) -> np.ndarray:
    """Read an AKVE matrix; ``mmap=True`` returns a read-only memory map."""
    try:
        with open(path, "rb") as fh:
            header = fh.read(_AKVE_HEADER.size)
            size = os.fstat(fh.fileno()).st_size
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    if len(header) < _AKVE_HEADER.size:
        raise IoError(f"{path}: truncated AKVE header")
    magic, version, dim, count = _AKVE_HEADER.unpack(header)
    if magic != AKVE_MAGIC:
        raise IoError(f"{path}: bad magic {magic!r}")
    if version != AKVE_VERSION:
        raise IoError(f"{path}: unsupported AKVE version {version}")
    expected = _AKVE_HEADER.size + 4 * dim * count
    if size != expected:
        raise IoError(f"{path}: size {size} does not match header ({expected} bytes expected)")
    if count == 0:
        return np.zeros((0, dim), dtype=np.float32)
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=_AKVE_HEADER.size, shape=(count, dim))
    with open(path, "rb") as fh:
        fh.seek(_AKVE_HEADER.size)
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(count, dim).astype(np.float32)


def _store_dir(path: str | Path) -> Path:
    p = Path(path)
    return p.parent if p.suffix == ".akve" else p


def save_store(store: EmbeddingStore, path: str | Path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {d}: {exc.strerror}") from exc
    write_akve(d / KEYS_FILE, store.keys)
    write_akve(d / VALUES_FILE, store.values)
    try:
        (d / IDS_FILE).write_text("".join(f"{i}\n" for i in store.ids), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write ids: {exc.strerror}") from exc
    return d


def load_store(path: str | Path, mmap: bool = False) -> EmbeddingStore:
    """Load a store directory (or the path of its ``keys.akve``)."""
    d = _store_dir(path)
    keys = read_akve(d / KEYS_FILE, mmap=mmap)
    values = read_akve(d / VALUES_FILE, mmap=mmap)
    ids_path = d / IDS_FILE
    ids = ids_path.read_text(encoding="utf-8").splitlines() if ids_path.exists() else []
    return EmbeddingStore(keys=keys, values=values, ids=ids)


def encode_texts(texts: Sequence[str], which: str, backend: Encoder, workers: int = 1) -> np.ndarray:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda t: encode(t, which, backend), texts))
    else:
        rows = [encode(t, which, backend) for t in texts]
    return np.vstack(rows).astype(np.float32)


def encode_corpus(
    records_path: str | Path, backend: Encoder, out: str | Path | None = None, workers: int = 1
) -> EmbeddingStore:
    """Encode every key/value string of a qkv.jsonl file, in file order.

    Row ids are ``"<source_id>/<masked>"`` so both orientations of a triple
    stay distinct.
    """
    records = read_qkv(records_path)
    if not records:
        raise EmptyCorpus(f"{records_path} holds no records")
    store = EmbeddingStore(
        keys=encode_texts([r.key for r in records], "key", backend, workers),
        values=encode_texts([r.value for r in records], "value", backend, workers),
        ids=[f"{r.source_id}/{r.masked}" for r in records],
    )
    if out is not None:
        save_store(store, out)
    return store
