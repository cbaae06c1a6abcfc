"""KG2KV conversion, relation rewriting and corpus metrics."""
import json
import threading
import warnings
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlaskv.errors import ApiError, EmptyCorpus, IoError, UnknownRelation
from atlaskv.kgkv import (
    QUESTION_PREFIXES,
    QkvRecord,
    Triple,
    convert,
    corpus_metrics,
    fixed_schema_records,
    read_qkv,
    read_triples,
    sample_corpus_path,
    training_mask,
    triple_to_qkv,
    write_qkv,
    write_triples,
)
from atlaskv.rewrite import (
    SEED_LEXICON,
    ApiRewriter,
    FallbackRewriter,
    RelationFallbackWarning,
    RuleRewriter,
    rewrite_relation,
)

FOUNDED = Triple(
    id="ex1",
    head="John founded StockLemon.com",
    relation="because",
    tail="John has made profits ...",
    head_kind="event",
    tail_kind="event",
)


def _rec(attr, i=0):
    return QkvRecord(str(i), "tail", attr, f"What is the {attr} of x?", f"the {attr} of x", f"The {attr} of x is y.")


class TestRewrite:
    @pytest.mark.parametrize(
        "relation, missing, noun",
        [("because", "tail", "cause"), ("because", "head", "result"), ("produces", "tail", "product")],
    )
    def test_lexicon_examples(self, relation, missing, noun):
        assert rewrite_relation(relation, missing) == noun

    def test_lexicon_size(self):
        assert len(SEED_LEXICON) >= 40

    def test_normalizes_case_and_spacing(self):
        assert rewrite_relation("  Because ", "tail") == "cause"

    def test_unknown_falls_back_with_warning(self):
        with pytest.warns(RelationFallbackWarning):
            assert RuleRewriter()("Zorbles Into", "tail") == "zorbles into"

    def test_unknown_strict_raises(self):
        with pytest.raises(UnknownRelation):
            RuleRewriter(fallback=False)("zorbles into", "tail")

    def test_bad_position(self):
        with pytest.raises(ValueError):
            rewrite_relation("because", "middle")

    def test_api_without_endpoint(self, monkeypatch):
        monkeypatch.delenv("ATLASKV_REWRITER_URL", raising=False)
        with pytest.raises(ApiError):
            ApiRewriter()


class _NounHandler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if "fail" in body["user"]:
            self.send_response(500)
            self.end_headers()
            return
        self.send_response(200)
        self.end_headers()
        self.wfile.write(b"  outcome \n")

    def log_message(self, *args):
        pass


@pytest.fixture
def noun_server():
    srv = HTTPServer(("127.0.0.1", 0), _NounHandler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    _NounHandler.seen = []
    yield f"http://127.0.0.1:{srv.server_port}/"
    srv.shutdown()


class TestApiRewriter:
    def test_roundtrip(self, noun_server):
        rw = ApiRewriter(url=noun_server, api_key="k")
        assert rw("leads to", "tail") == "outcome"
        body, auth = _NounHandler.seen[0]
        assert body["user"] == "relation: leads to, missing: tail"
        assert auth == "Bearer k"
        assert body["system"]

    def test_failure_and_fallback(self, noun_server):
        rw = ApiRewriter(url=noun_server)
        with pytest.raises(ApiError):
            rw("fail", "tail")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert FallbackRewriter(rw)("fail", "tail") == "fail"
        assert FallbackRewriter(rw)("because", "tail") == "outcome"


class TestTripleToQkv:
    def test_tail_masked_example(self):
        r = triple_to_qkv(FOUNDED, "tail")
        assert r.key == "the cause of John founded StockLemon.com"
        assert r.value == "The cause of John founded StockLemon.com is John has made profits ..."
        assert r.attribute == "cause"

    def test_head_masked_example(self):
        r = triple_to_qkv(FOUNDED, "head")
        assert r.key == "the result of John has made profits ..."
        assert r.value.startswith("The result of John has made profits ... is John founded StockLemon.com")

    def test_query_shape(self):
        r = triple_to_qkv(FOUNDED, "tail", prefix_seed=3)
        prefix = r.query[: -len(r.key) - 2]
        assert prefix in QUESTION_PREFIXES
        assert r.query == f"{prefix} {r.key}?"

    def test_value_gets_full_stop(self):
        t = Triple("a", "Acme", "produces", "widgets")
        assert triple_to_qkv(t, "tail").value == "The product of Acme is widgets."

    def test_bad_mask(self):
        with pytest.raises(ValueError):
            triple_to_qkv(FOUNDED, "both")

    def test_empty_prefix_pool(self):
        with pytest.raises(ValueError):
            triple_to_qkv(FOUNDED, "tail", prefixes=())

    def test_prefix_diversity(self):
        queries = {triple_to_qkv(FOUNDED, "tail", prefix_seed=s).query for s in range(100)}
        assert len(queries) >= 3

    def test_invalid_triples(self):
        with pytest.raises(ValueError):
            Triple("x", " ", "because", "y")
        with pytest.raises(ValueError):
            Triple("x", "a", "because", "y", head_kind="person")


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=30).filter(
    lambda s: s.strip()
)


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(head=_text, tail=_text, rel=st.sampled_from(sorted(SEED_LEXICON)), seed=st.integers(0, 2**31))
    def test_masked_entity_only_in_value(self, head, tail, rel, seed):
        t = Triple("p", head, rel, tail)
        for side, hidden, shown in (("tail", tail, head), ("head", head, tail)):
            r = triple_to_qkv(t, side, prefix_seed=seed)
            assert hidden in r.value
            assert r.key == f"the {r.attribute} of {shown}"
            assert r.value.startswith(f"The {r.attribute} of {shown} is ")
            if hidden not in f"the {r.attribute} of {shown}":
                assert hidden not in r.key

    @settings(max_examples=40, deadline=None)
    @given(head=_text, tail=_text, rel=st.sampled_from(sorted(SEED_LEXICON)), seed=st.integers(0, 2**31))
    def test_deterministic(self, head, tail, rel, seed):
        t = Triple("p", head, rel, tail)
        a = triple_to_qkv(t, "tail", prefix_seed=seed)
        b = triple_to_qkv(t, "tail", prefix_seed=seed)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


class TestConvert:
    def test_modes(self):
        ts = read_triples(sample_corpus_path())[:20]
        assert len(convert(ts, mask="tail")) == 20
        both = convert(ts, mask="both")
        assert len(both) == 40
        assert [r.masked for r in both[:2]] == ["tail", "head"]
        with pytest.raises(ValueError):
            convert(ts, mask="sideways")

    def test_select_rule(self):
        assert training_mask(Triple("a", "Acme", "r", "a merger", "named", "event")) == "tail"
        assert training_mask(Triple("a", "a merger", "r", "Acme", "event", "named")) == "head"
        assert training_mask(Triple("a", "Acme", "r", "Bob", "named", "named")) is None
        assert training_mask(Triple("a", "Acme", "r", "Bob", "named", "named"), value_kinds=("named",)) == "tail"

    def test_select_filters(self):
        ts = read_triples(sample_corpus_path())
        recs = convert(ts, mask="select")
        expected = sum(training_mask(t) is not None for t in ts)
        assert len(recs) == expected > 0


class TestMetrics:
    def test_all_same(self):
        m = corpus_metrics([_rec("description", i) for i in range(100)])
        assert m.diversity_ratio == 0.01

    def test_all_distinct(self):
        assert corpus_metrics([_rec(f"a{i}", i) for i in range(37)]).diversity_ratio == 1.0

    def test_token_cost(self):
        r = QkvRecord("0", "tail", "a", "q q", "k", "v v v")
        assert corpus_metrics([r]).avg_token_cost == 6.0
        assert corpus_metrics([r], tokenizer=len).avg_token_cost == 9.0

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            corpus_metrics([])

    def test_sample_corpus_frozen(self):
        # counted directly from the JSONL and lexicon, independently of convert()
        ts = read_triples(sample_corpus_path())
        assert len(ts) == 500
        assert corpus_metrics(convert(ts, mask="tail")).diversity_ratio == pytest.approx(42 / 500, abs=0)
        assert corpus_metrics(convert(ts, mask="both")).diversity_ratio == pytest.approx(71 / 1000, abs=0)

    def test_beats_fixed_schema(self):
        ts = read_triples(sample_corpus_path())
        ours = corpus_metrics(convert(ts)).diversity_ratio
        base = corpus_metrics(fixed_schema_records(ts)).diversity_ratio
        assert ours > base


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        ts = read_triples(sample_corpus_path())[:5]
        write_triples(ts, tmp_path / "t.jsonl")
        assert read_triples(tmp_path / "t.jsonl") == ts
        recs = convert(ts, mask="both")
        write_qkv(recs, tmp_path / "q.jsonl")
        assert read_qkv(tmp_path / "q.jsonl") == recs

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": 1}\n{oops\n')
        with pytest.raises(IoError):
            read_triples(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            read_triples(tmp_path / "nope.jsonl")
