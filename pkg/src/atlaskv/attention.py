"""Single-layer knowledge-augmented attention.

Row-vector convention throughout: token embeddings ``x`` are ``N x D`` and
projections are applied as ``x @ W.T``, so ``Wk_kg`` (``D x D_E``) maps a
``D_E``-wide base key to a ``D``-wide projected key.

The KG part is visible to every token; the sequence part is causal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch


@dataclass
class SeqState:
    x: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    q: np.ndarray = field(init=False, repr=False)
    k: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise ShapeMismatch(f"x must be N x D with N, D >= 1, got {self.x.shape}")
        d = self.x.shape[1]
        for name in ("Wq", "Wk", "Wv"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.shape != (d, d):
                raise ShapeMismatch(f"{name} must be {d}x{d}, got {w.shape}")
            setattr(self, name, w)
        for name in ("x", "Wq", "Wk", "Wv"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteInput(f"{name} has non-finite entries")
        self.q = self.x @ self.Wq.T
        self.k = self.x @ self.Wk.T
        self.v = self.x @ self.Wv.T

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class KgHeads:
    """KG-specific projection heads: Wq_kg (D x D), Wk_kg and Wv_kg (D x D_E)."""

    Wq_kg: np.ndarray
    Wk_kg: np.ndarray
    Wv_kg: np.ndarray

    def __post_init__(self):
        self.Wq_kg = np.asarray(self.Wq_kg, dtype=np.float64)
        self.Wk_kg = np.asarray(self.Wk_kg, dtype=np.float64)
        self.Wv_kg = np.asarray(self.Wv_kg, dtype=np.float64)
        d = self.Wq_kg.shape[0]
        if self.Wq_kg.shape != (d, d):
            raise ShapeMismatch(f"Wq_kg must be square, got {self.Wq_kg.shape}")
        if self.Wk_kg.ndim != 2 or self.Wk_kg.shape[0] != d or self.Wv_kg.shape != self.Wk_kg.shape:
            raise ShapeMismatch(
                f"Wk_kg {self.Wk_kg.shape} and Wv_kg {self.Wv_kg.shape} must both be {d} x D_E"
            )
        for name in ("Wq_kg", "Wk_kg", "Wv_kg"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteInput(f"{name} has non-finite entries")

    @property
    def d(self) -> int:
        return self.Wq_kg.shape[0]

    @property
    def d_e(self) -> int:
        return self.Wk_kg.shape[1]

    def project_query(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.Wq_kg.T

    def project_keys(self, k: np.ndarray) -> np.ndarray:
        return np.asarray(k, dtype=np.float64) @ self.Wk_kg.T

    def project_values(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.Wv_kg.T

    @classmethod
    def from_seq(cls, seq: SeqState, d_e: int, rng: np.random.Generator) -> "KgHeads":
        """Training-style init: query head copied from Wq, key/value heads Gaussian(0, 1/D_E)."""
        scale = 1.0 / np.sqrt(d_e)
        return cls(
            Wq_kg=seq.Wq.copy(),
            Wk_kg=rng.standard_normal((seq.d, d_e)) * scale,
            Wv_kg=rng.standard_normal((seq.d, d_e)) * scale,
        )

    @classmethod
    def identity(cls, d: int, d_e: int) -> "KgHeads":
        """Identity heads; base embeddings are zero-padded or truncated to width ``d``."""
        eye = np.eye(d, d_e)
        return cls(Wq_kg=np.eye(d), Wk_kg=eye, Wv_kg=eye.copy())


@dataclass
class AttnOut:
    y: np.ndarray
    lambda_kg: np.ndarray
    lambda_seq: np.ndarray
    kg_scores: np.ndarray


class KgHeadGrads(NamedTuple):
    Wq_kg: np.ndarray
    Wk_kg: np.ndarray
    Wv_kg: np.ndarray


def _kg_inputs(seq: SeqState, kg_k, kg_v, heads: KgHeads) -> tuple[np.ndarray, np.ndarray]:
    kg_k = np.asarray(kg_k, dtype=np.float64)
    kg_v = np.asarray(kg_v, dtype=np.float64)
    if kg_k.ndim != 2 or kg_k.shape != kg_v.shape:
        raise ShapeMismatch(f"kg_k {kg_k.shape} and kg_v {kg_v.shape} must be equal M x D_E shapes")
    if kg_k.shape[1] != heads.d_e:
        raise ShapeMismatch(f"KG width {kg_k.shape[1]} != head input width {heads.d_e}")
    if heads.d != seq.d:
        raise ShapeMismatch(f"head width {heads.d} != sequence width {seq.d}")
    if not (np.all(np.isfinite(kg_k)) and np.all(np.isfinite(kg_v))):
        raise NonFiniteInput("KG keys/values have non-finite entries")
    return kg_k, kg_v


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 0:
        return logits.copy()
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def kg_logits(seq: SeqState, kg_k: np.ndarray, heads: KgHeads) -> np.ndarray:
    """``N x M`` KG logits <q~_n, k~_m> / sqrt(D)."""
    return heads.project_query(seq.x) @ heads.project_keys(kg_k).T / np.sqrt(seq.d)


def seq_logits(seq: SeqState) -> np.ndarray:
    """``N x N`` causal sequence logits; future positions are ``-inf``."""
    logits = seq.q @ seq.k.T / np.sqrt(seq.d)
    return np.where(_causal_mask(seq.n), logits, -np.inf)


def causal_self_attention(seq: SeqState) -> np.ndarray:
    """Plain causal self-attention (no KG part)."""
    return _row_softmax(seq_logits(seq)) @ seq.v


def _joint_probs(seq: SeqState, kg_k, kg_v, heads: KgHeads):
    kg_k, kg_v = _kg_inputs(seq, kg_k, kg_v, heads)
    l_kg = kg_logits(seq, kg_k, heads)
    joint = np.concatenate([l_kg, seq_logits(seq)], axis=1)
    return _row_softmax(joint), l_kg, heads.project_values(kg_v)


def rectangular_attention(seq: SeqState, kg_k, kg_v, heads: KgHeads) -> AttnOut:
    """One joint softmax over the M KG logits and the first n sequence logits."""
    probs, l_kg, v_kg = _joint_probs(seq, kg_k, kg_v, heads)
    m = l_kg.shape[1]
    y = probs @ np.concatenate([v_kg, seq.v], axis=0)
    lam_kg = probs[:, :m].sum(axis=1)
    return AttnOut(y=y, lambda_kg=lam_kg, lambda_seq=probs[:, m:].sum(axis=1), kg_scores=_row_softmax(l_kg))


def mixing_weights(l_kg: np.ndarray, l_seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """lambda_kg, lambda_seq from the partition sums, shifted by one shared row max."""
    shift = l_seq.max(axis=1)
    if l_kg.shape[1]:
        shift = np.maximum(shift, l_kg.max(axis=1))
    z_kg = np.exp(l_kg - shift[:, None]).sum(axis=1)
    z_seq = np.exp(l_seq - shift[:, None]).sum(axis=1)
    total = z_kg + z_seq
    return z_kg / total, z_seq / total


def decomposed_attention(seq: SeqState, kg_k, kg_v, heads: KgHeads) -> AttnOut:
    """Separate KG and sequence softmaxes mixed by lambda_kg / lambda_seq."""
    kg_k, kg_v = _kg_inputs(seq, kg_k, kg_v, heads)
    l_kg = kg_logits(seq, kg_k, heads)
    l_seq = seq_logits(seq)
    lam_kg, lam_seq = mixing_weights(l_kg, l_seq)
    p_kg = _row_softmax(l_kg)
    y = lam_seq[:, None] * (_row_softmax(l_seq) @ seq.v)
    if l_kg.shape[1]:
        y = y + lam_kg[:, None] * (p_kg @ heads.project_values(kg_v))
    return AttnOut(y=y, lambda_kg=lam_kg, lambda_seq=lam_seq, kg_scores=p_kg)


def kg_head_gradients(seq: SeqState, kg_k, kg_v, heads: KgHeads, upstream: np.ndarray) -> KgHeadGrads:
    """Gradients of sum(upstream * y) with respect to the three KG heads."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != seq.x.shape:
        raise ShapeMismatch(f"upstream must be {seq.x.shape}, got {upstream.shape}")
    probs, _, v_kg = _joint_probs(seq, kg_k, kg_v, heads)
    kg_k = np.asarray(kg_k, dtype=np.float64)
    kg_v = np.asarray(kg_v, dtype=np.float64)
    m = kg_k.shape[0]
    p_kg = probs[:, :m]
    y = probs @ np.concatenate([v_kg, seq.v], axis=0)

    # dL/dv~ and dL/dlogit for the KG columns of the joint softmax
    d_vkg = p_kg.T @ upstream
    g_dot_v = upstream @ v_kg.T
    g_dot_y = np.sum(upstream * y, axis=1, keepdims=True)
    d_logits = p_kg * (g_dot_v - g_dot_y) / np.sqrt(seq.d)

    q_kg = heads.project_query(seq.x)
    k_kg = heads.project_keys(kg_k)
    return KgHeadGrads(
        Wq_kg=(d_logits @ k_kg).T @ seq.x,
        Wk_kg=(d_logits.T @ q_kg).T @ kg_k,
        Wv_kg=d_vkg.T @ kg_v,
    )


def random_instance(seed: int, m: int, n: int, d: int, d_e: int):
    """Gaussian test instance ``(seq, kg_k, kg_v, heads)`` with training-style head init."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    seq = SeqState(
        x=rng.standard_normal((n, d)),
        Wq=rng.standard_normal((d, d)) * scale,
        Wk=rng.standard_normal((d, d)) * scale,
        Wv=rng.standard_normal((d, d)) * scale,
    )
    kg_k = rng.standard_normal((m, d_e))
    kg_v = rng.standard_normal((m, d_e))
    heads = KgHeads.from_seq(seq, d_e, rng)
    return seq, kg_k, kg_v, heads


def grad_check(
    instance_seed: int, m: int = 8, n: int = 4, d: int = 16, d_e: int = 12, h: float = 1e-5
) -> float:
    """Worst relative error between analytic and central-difference KG-head gradients.

    Per entry the error is ``|a - f| / max(|a|, |f|)`` (0 when both are 0).
    """
    seq, kg_k, kg_v, heads = random_instance(instance_seed, m, n, d, d_e)
    upstream = np.random.default_rng(instance_seed + 1_000_003).standard_normal((n, d))
    analytic = kg_head_gradients(seq, kg_k, kg_v, heads, upstream)

    def loss(h_: KgHeads) -> float:
        return float(np.sum(upstream * rectangular_attention(seq, kg_k, kg_v, h_).y))

    worst = 0.0
    for name, grad in zip(KgHeadGrads._fields, analytic):
        base = getattr(heads, name)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            hp = KgHeads(**{**_as_dict(heads), name: plus})
            hm = KgHeads(**{**_as_dict(heads), name: minus})
            fd = (loss(hp) - loss(hm)) / (2 * h)
            a = grad[idx]
            denom = max(abs(a), abs(fd))
            if denom > 0:
                worst = max(worst, abs(a - fd) / denom)
    return worst


def _as_dict(heads: KgHeads) -> dict:
    return {"Wq_kg": heads.Wq_kg, "Wk_kg": heads.Wk_kg, "Wv_kg": heads.Wv_kg}


def dump_instance(seq: SeqState, kg_k, kg_v, heads: KgHeads) -> dict:
    """JSON-ready debug dump of an attention instance."""
    return {
        "x": seq.x.tolist(),
        "Wq": seq.Wq.tolist(),
        "Wk": seq.Wk.tolist(),
        "Wv": seq.Wv.tolist(),
        "kg_k": np.asarray(kg_k, dtype=np.float64).tolist(),
        "kg_v": np.asarray(kg_v, dtype=np.float64).tolist(),
        "d_e": heads.d_e,
        **{k: v.tolist() for k, v in _as_dict(heads).items()},
    }


def load_instance(d: dict):
    d_e = int(d["d_e"])
    seq = SeqState(x=np.array(d["x"], dtype=np.float64), Wq=d["Wq"], Wk=d["Wk"], Wv=d["Wv"])
    kg_k = np.array(d["kg_k"], dtype=np.float64).reshape(-1, d_e)
    kg_v = np.array(d["kg_v"], dtype=np.float64).reshape(-1, d_e)
    heads = KgHeads(Wq_kg=d["Wq_kg"], Wk_kg=d["Wk_kg"], Wv_kg=d["Wv_kg"])
    return seq, kg_k, kg_v, heads
