"""KG triples to query/key/value strings (KG2KV) and corpus statistics."""
from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .errors import EmptyCorpus, IoError
from .rewrite import Rewriter, RuleRewriter

ENTITY_KINDS = ("named", "event", "concept")

QUESTION_PREFIXES = (
    "What is",
    "Tell me about",
    "Provide details on",
    "Describe",
    "Can you let me know",
    "Can you explain",
    "What insights can you provide about",
    "Can you elaborate on",
    "How would you describe",
    "Can you inform me about",
)


@dataclass(frozen=True)
class Triple:
    id: str
    head: str
    relation: str
    tail: str
    head_kind: str = "named"
    tail_kind: str = "named"

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            if not getattr(self, name).strip():
                raise ValueError(f"triple {self.id!r}: {name} is empty")
        for name in ("head_kind", "tail_kind"):
            if getattr(self, name) not in ENTITY_KINDS:
                raise ValueError(f"triple {self.id!r}: {name}={getattr(self, name)!r} not in {ENTITY_KINDS}")

    @classmethod
    def from_dict(cls, d: dict) -> "Triple":
        return cls(
            id=str(d["id"]),
            head=d["head"],
            relation=d["relation"],
            tail=d["tail"],
            head_kind=d.get("head_kind", "named"),
            tail_kind=d.get("tail_kind", "named"),
        )


@dataclass(frozen=True)
class QkvRecord:
    source_id: str
    masked: str
    attribute: str
    query: str
    key: str
    value: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QkvRecord":
        return cls(**{k: d[k] for k in ("source_id", "masked", "attribute", "query", "key", "value")})


@dataclass(frozen=True)
class CorpusMetrics:
    diversity_ratio: float
    avg_token_cost: float


def _sentence_end(text: str) -> str:
    return text if text.rstrip().endswith((".", "!", "?", "...")) else text + "."


def triple_to_qkv(
    t: Triple,
    masked: str,
    rewriter: Rewriter | None = None,
    prefix_seed: int = 0,
    prefixes: Sequence[str] = QUESTION_PREFIXES,
) -> QkvRecord:
    """Mask one entity of ``t`` and build the Q/K/V strings around the other.

    The masked entity becomes the value; the relation is rewritten into the
    attribute of the unmasked entity.
    """
    if masked not in ("head", "tail"):
        raise ValueError(f"masked must be 'head' or 'tail', got {masked!r}")
    if not prefixes:
        raise ValueError("prefix pool is empty")
    if rewriter is None:
        rewriter = RuleRewriter()
    attribute = rewriter(t.relation, masked)
    subject, answer = (t.head, t.tail) if masked == "tail" else (t.tail, t.head)
    body = f"the {attribute} of {subject}"
    prefix = random.Random(prefix_seed).choice(list(prefixes))
    return QkvRecord(
        source_id=t.id,
        masked=masked,
        attribute=attribute,
        query=f"{prefix} {body}?",
        key=body,
        value=_sentence_end(f"The {attribute} of {subject} is {answer}"),
    )


def training_mask(
    t: Triple,
    key_kinds: Iterable[str] = ("named",),
    value_kinds: Iterable[str] = ("event", "concept"),
) -> str | None:
    """Pick which side to mask under the training-data selection rule.

    The unmasked (key) entity must be of a kind in ``key_kinds`` and the
    masked (value) entity of a kind in ``value_kinds``. Tail masking wins
    when both orientations qualify; ``None`` means the triple is skipped.
    """
    key_kinds, value_kinds = set(key_kinds), set(value_kinds)
    if t.head_kind in key_kinds and t.tail_kind in value_kinds:
        return "tail"
    if t.tail_kind in key_kinds and t.head_kind in value_kinds:
        return "head"
    return None


def convert(
    triples: Iterable[Triple],
    mask: str = "tail",
    rewriter: Rewriter | None = None,
    seed: int = 0,
    key_kinds: Iterable[str] = ("named",),
    value_kinds: Iterable[str] = ("event", "concept"),
) -> list[QkvRecord]:
    """Run KG2KV over a triple stream.

    ``mask`` is ``"head"``, ``"tail"``, ``"both"`` (two records per triple) or
    ``"select"`` (the training-data rule of :func:`training_mask`). Record
    ``i`` of the input uses prefix seed ``seed + i``.
    """
    if rewriter is None:
        rewriter = RuleRewriter()
    key_kinds, value_kinds = tuple(key_kinds), tuple(value_kinds)
    out = []
    for i, t in enumerate(triples):
        if mask == "both":
            sides = ["tail", "head"]
        elif mask == "select":
            side = training_mask(t, key_kinds, value_kinds)
            sides = [] if side is None else [side]
        elif mask in ("head", "tail"):
            sides = [mask]
        else:
            raise ValueError(f"unknown mask mode {mask!r}")
        for side in sides:
            out.append(triple_to_qkv(t, side, rewriter, prefix_seed=seed + i))
    return out


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def corpus_metrics(
    records: Sequence[QkvRecord], tokenizer: Callable[[str], int] = whitespace_tokens
) -> CorpusMetrics:
    """Diversity ratio (unique attributes / records) and mean Q+K+V token cost."""
    if not records:
        raise EmptyCorpus("corpus_metrics needs at least one record")
    unique = len({r.attribute for r in records})
    tokens = sum(tokenizer(r.query) + tokenizer(r.key) + tokenizer(r.value) for r in records)
    return CorpusMetrics(diversity_ratio=unique / len(records), avg_token_cost=tokens / len(records))


def fixed_schema_records(
    triples: Sequence[Triple], schema: Sequence[str] = ("description",), seed: int = 0
) -> list[QkvRecord]:
    """Baseline corpus with attributes drawn from a fixed schema.

    Mimics template-synthesized KB data: every record describes the head
    entity and the attribute ignores the relation.
    """
    rng = random.Random(seed)
    out = []
    for i, t in enumerate(triples):
        attribute = schema[rng.randrange(len(schema))]
        body = f"the {attribute} of {t.head}"
        out.append(
            QkvRecord(
                source_id=t.id,
                masked="tail",
                attribute=attribute,
                query=f"{random.Random(seed + i).choice(QUESTION_PREFIXES)} {body}?",
                key=body,
                value=_sentence_end(f"The {attribute} of {t.head} is {t.tail}"),
            )
        )
    return out


def _read_jsonl(path: str | Path) -> Iterator[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IoError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    except FileNotFoundError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def read_triples(path: str | Path) -> list[Triple]:
    out = []
    for d in _read_jsonl(path):
        try:
            out.append(Triple.from_dict(d))
        except (KeyError, ValueError) as exc:
            raise IoError(f"{path}: bad triple record {d!r}: {exc}") from exc
    return out


def read_qkv(path: str | Path) -> list[QkvRecord]:
    out = []
    for d in _read_jsonl(path):
        try:
            out.append(QkvRecord.from_dict(d))
        except KeyError as exc:
            raise IoError(f"{path}: qkv record missing field {exc}") from exc
    return out


def _dump_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def write_qkv(records: Iterable[QkvRecord], path: str | Path) -> None:
    _dump_jsonl((r.to_dict() for r in records), path)


def write_triples(triples: Iterable[Triple], path: str | Path) -> None:
    _dump_jsonl((asdict(t) for t in triples), path)


def sample_corpus_path() -> Path:
    """Path of the bundled 500-triple sample corpus."""
    return Path(__file__).with_name("data") / "sample_triples.jsonl"
