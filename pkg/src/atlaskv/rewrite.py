"""Relation-to-noun rewriting used by KG2KV.

Two rewriters share one call signature ``rewriter(relation, missing) -> str``:
the offline :class:`RuleRewriter` backed by a seed lexicon, and
:class:`ApiRewriter`, which posts the relation-rewrite prompt to a chat
endpoint configured through environment variables.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
import warnings
from typing import Mapping, Protocol

from .errors import ApiError, UnknownRelation

logger = logging.getLogger(__name__)

MISSING_POSITIONS = ("head", "tail")

REWRITER_URL_ENV = "ATLASKV_REWRITER_URL"
REWRITER_KEY_ENV = "ATLASKV_REWRITER_KEY"

SYSTEM_PROMPT = """**Task:** Convert relation phrase to natural noun based on missing entity position.

**Rules:**
- **Missing head**: Passive relations → agent nouns ("govern" → "governor", "is participated by" → "participation")
- **Missing tail**: Active relations → object nouns ("produces" → "product", "achieves" → "achievement")

**Output:** Natural noun only.

**Examples:**
- ("is participated by", "head") → "participation"
- ("is participated by", "tail") → "participant"
- ("produces", "head") → "producer"
- ("produces", "tail") → "product\""""

USER_TEMPLATE = "relation: {relation}, missing: {missing}"

# relation -> (noun when head is missing, noun when tail is missing)
SEED_LEXICON: dict[str, tuple[str, str]] = {
    "because": ("result", "cause"),
    "causes": ("cause", "effect"),
    "is caused by": ("effect", "cause"),
    "results in": ("cause", "result"),
    "leads to": ("cause", "consequence"),
    "as a result": ("cause", "result"),
    "before": ("prior event", "subsequent event"),
    "after": ("subsequent event", "prior event"),
    "at the same time": ("concurrent event", "concurrent event"),
    "produces": ("producer", "product"),
    "is produced by": ("product", "producer"),
    "is participated by": ("participation", "participant"),
    "participates in": ("participant", "participation"),
    "govern": ("governor", "governance"),
    "governs": ("governor", "jurisdiction"),
    "achieves": ("achiever", "achievement"),
    "founded": ("founder", "foundation"),
    "is founded by": ("foundation", "founder"),
    "owns": ("owner", "property"),
    "is owned by": ("property", "owner"),
    "is located in": ("occupant", "location"),
    "located in": ("occupant", "location"),
    "works for": ("employee", "employer"),
    "employs": ("employer", "employee"),
    "is a member of": ("member", "membership"),
    "is part of": ("component", "whole"),
    "contains": ("container", "content"),
    "wrote": ("author", "writing"),
    "is written by": ("work", "author"),
    "created": ("creator", "creation"),
    "invented": ("inventor", "invention"),
    "discovered": ("discoverer", "discovery"),
    "is married to": ("spouse", "spouse"),
    "was born in": ("native", "birthplace"),
    "died in": ("decedent", "place of death"),
    "studied at": ("alumnus", "alma mater"),
    "teaches": ("teacher", "subject"),
    "leads": ("leader", "leadership"),
    "is led by": ("organization", "leader"),
    "supports": ("supporter", "support"),
    "opposes": ("opponent", "opposition"),
    "precedes": ("predecessor", "successor"),
    "follows": ("successor", "predecessor"),
    "requires": ("dependent", "requirement"),
    "uses": ("user", "instrument"),
    "is used by": ("tool", "user"),
    "consider": ("proponent", "opinion"),
    "considers": ("proponent", "opinion"),
    "is ranked": ("ranked item", "rank"),
    "is a": ("instance", "type"),
    "is the capital of": ("capital", "country"),
    "explains": ("explainer", "explanation"),
    "threatens": ("threat", "target"),
    "publishes": ("publisher", "publication"),
    "is described as": ("subject", "description"),
    "aims to": ("pursuer", "objective"),
}


class RelationFallbackWarning(UserWarning):
    """Emitted when a relation is missing from the lexicon and passed through."""


class Rewriter(Protocol):
    def __call__(self, relation: str, missing: str) -> str: ...


def normalize_relation(relation: str) -> str:
    return " ".join(relation.lower().split())


def _check_args(relation: str, missing: str) -> None:
    if not relation or not relation.strip():
        raise ValueError("relation must be non-empty")
    if missing not in MISSING_POSITIONS:
        raise ValueError(f"missing must be one of {MISSING_POSITIONS}, got {missing!r}")


class RuleRewriter:
    """Lexicon lookup keyed on the normalized relation phrase.

    With ``fallback=True`` (the default) a lexicon miss returns the
    normalized relation itself and emits :class:`RelationFallbackWarning`;
    with ``fallback=False`` it raises :class:`UnknownRelation`.
    """

    def __init__(self, lexicon: Mapping[str, tuple[str, str]] | None = None, fallback: bool = True):
        table = SEED_LEXICON if lexicon is None else lexicon
        self.lexicon = {normalize_relation(k): v for k, v in table.items()}
        self.fallback = fallback

    def __call__(self, relation: str, missing: str) -> str:
        _check_args(relation, missing)
        key = normalize_relation(relation)
        try:
            head_noun, tail_noun = self.lexicon[key]
        except KeyError:
            if not self.fallback:
                raise UnknownRelation(f"no rewrite rule for relation {relation!r}") from None
            warnings.warn(
                f"relation {relation!r} not in lexicon; using it verbatim",
                RelationFallbackWarning,
                stacklevel=2,
            )
            return key
        return head_noun if missing == "head" else tail_noun


class ApiRewriter:
    """Chat-completion style client for the relation-rewrite prompt.

    The request body is ``{"system": ..., "user": ...}``; the trimmed
    response body is taken as the noun. Requests on one client are
    serialized.
    """

    def __init__(self, url: str | None = None, api_key: str | None = None, timeout: float = 30.0):
        self.url = url or os.environ.get(REWRITER_URL_ENV)
        self.api_key = api_key if api_key is not None else os.environ.get(REWRITER_KEY_ENV)
        self.timeout = timeout
        self._lock = threading.Lock()
        if not self.url:
            raise ApiError(f"no rewriter endpoint configured (set {REWRITER_URL_ENV})")

    def __call__(self, relation: str, missing: str) -> str:
        _check_args(relation, missing)
        body = json.dumps(
            {"system": SYSTEM_PROMPT, "user": USER_TEMPLATE.format(relation=relation, missing=missing)}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with self._lock:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    text = resp.read().decode("utf-8")
            except (urllib.error.URLError, OSError) as exc:
                raise ApiError(f"rewriter request failed: {exc}") from exc
        noun = text.strip()
        if not noun:
            raise ApiError("rewriter returned an empty body")
        return noun


class FallbackRewriter:
    """Try ``primary``; on :class:`ApiError` fall back to ``secondary``."""

    def __init__(self, primary: Rewriter, secondary: Rewriter | None = None):
        self.primary = primary
        self.secondary = secondary if secondary is not None else RuleRewriter()

    def __call__(self, relation: str, missing: str) -> str:
        try:
            return self.primary(relation, missing)
        except ApiError as exc:
            logger.warning("rewriter API failed (%s); using rule table", exc)
            return self.secondary(relation, missing)


def rewrite_relation(relation: str, missing: str, rewriter: Rewriter | None = None) -> str:
    """Rewrite ``relation`` into the noun naming the attribute of the unmasked entity."""
    if rewriter is None:
        rewriter = RuleRewriter()
    return rewriter(relation, missing)
