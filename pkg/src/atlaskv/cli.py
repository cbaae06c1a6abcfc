"""Command-line entry point: ``atlaskv <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error (``ErrorName: message`` on stderr),
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import AtlasKVError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _m_list(text: str) -> list[int]:
    try:
        vals = [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"sizes must be >= 1, got {text!r}")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise argparse.ArgumentTypeError(f"sizes must be strictly ascending, got {text!r}")
    return vals


def _add_k(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-root", type=_positive, default=128)
    p.add_argument("--k-inter", type=_positive, default=64)
    p.add_argument("--k-leaf", type=_positive, default=16)


def _add_encoder(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", choices=("stub", "http"), default="stub",
                   help="http reads ATLASKV_ENCODER_URL / ATLASKV_ENCODER_KEY")
    p.add_argument("--dim", type=_positive, default=None, help="embedding width (stub default 64)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atlaskv", description="Knowledge-graph key/value injection toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("kg2kv", help="convert triples.jsonl to qkv.jsonl")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", type=Path)
    s.add_argument("--mask", choices=("head", "tail", "both", "select"), default="tail")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rewriter", choices=("rule", "api"), default="rule",
                   help="api reads ATLASKV_REWRITER_URL / ATLASKV_REWRITER_KEY and falls back to rules")
    s.add_argument("--strict", action="store_true", help="fail on relations missing from the lexicon")

    s = sub.add_parser("encode", help="embed qkv.jsonl into a key/value store directory")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=_positive, default=1)
    _add_encoder(s)

    s = sub.add_parser("build-index", help="build the root/inter/leaf hierarchy over a store")
    s.add_argument("--store", required=True, type=Path, help="store directory or its keys.akve")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend", choices=("balanced_kmeans", "gmm_balanced"), default="balanced_kmeans")
    s.add_argument("--n-iter", type=_positive, default=None)

    s = sub.add_parser("query", help="prune and score one question")
    s.add_argument("--store", required=True, type=Path)
    s.add_argument("--index", required=True, type=Path)
    s.add_argument("--text", required=True)
    s.add_argument("--seed", type=int, default=0, help="stub encoder seed")
    s.add_argument("--hot-capacity", type=_positive, default=None, help="hot tier capacity in bytes")
    s.add_argument("--explain", action="store_true", help="include per-step survivors and byte accounting")
    s.add_argument("--out", type=Path)
    _add_k(s)
    _add_encoder(s)

    s = sub.add_parser("bench", help="memory/complexity sweep over synthetic stores")
    s.add_argument("--m", type=_m_list, required=True, help="ascending sizes, e.g. 1000,1000000")
    s.add_argument("--d-e", type=_positive, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-queries", type=_positive, default=32)
    s.add_argument("--row-bytes", type=_positive, default=None)
    s.add_argument("--backend", choices=("balanced_kmeans", "gmm_balanced"), default="balanced_kmeans")
    s.add_argument("--format", choices=("csv", "json"), default=None)
    s.add_argument("--out", type=Path)
    _add_k(s)

    s = sub.add_parser("eval", help="grounding accuracy, exact vs pruned, on synthetic data")
    s.add_argument("--m", type=_positive, default=10_000)
    s.add_argument("--d-e", type=_positive, default=32)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--blob-sep", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend", choices=("balanced_kmeans", "gmm_balanced"), default="balanced_kmeans")
    s.add_argument("--format", choices=("csv", "json"), default="json")
    s.add_argument("--out", type=Path)
    _add_k(s)

    s = sub.add_parser("grad-check", help="finite-difference check of the KG head gradients")
    s.add_argument("--seeds", type=_positive, default=20)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)

    for sp in sub.choices.values():
        sp.set_defaults(_sub=sp)
    return p


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    from .errors import IoError

    try:
        out.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc.strerror}") from exc


def _require(parser, flag: str, path: Path) -> None:
    if not path.exists():
        parser.error(f"{flag}: no such file or directory: {path}")


def _encoder(args, default_dim: int = 64):
    from .encoder import HttpEncoder, StubEncoder

    dim = args.dim or default_dim
    if args.encoder == "http":
        return HttpEncoder(dim)
    return StubEncoder(dim, seed=args.seed)


def _cfg(args):
    from .hikvp import PruneConfig

    return PruneConfig(args.k_root, args.k_inter, args.k_leaf)


def cmd_kg2kv(args, parser) -> int:
    from .kgkv import convert, read_triples, write_qkv
    from .rewrite import ApiRewriter, FallbackRewriter, RuleRewriter

    _require(parser, "--in", args.inp)
    rule = RuleRewriter(fallback=not args.strict)
    rewriter = FallbackRewriter(ApiRewriter(), rule) if args.rewriter == "api" else rule
    records = convert(read_triples(args.inp), mask=args.mask, rewriter=rewriter, seed=args.seed)
    if args.out is None:
        _emit("".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records), None)
    else:
        write_qkv(records, args.out)
    return 0


def cmd_encode(args, parser) -> int:
    from .encoder import encode_corpus

    _require(parser, "--in", args.inp)
    store = encode_corpus(args.inp, _encoder(args), out=args.out, workers=args.workers)
    print(f"encoded {store.count} records ({store.dim}-wide) into {args.out}", file=sys.stderr)
    return 0


def cmd_build_index(args, parser) -> int:
    from .encoder import load_store
    from .hierarchy import build_hierarchy, save_index

    _require(parser, "--store", args.store)
    store = load_store(args.store)
    index = build_hierarchy(store, seed=args.seed, backend=args.backend, n_iter=args.n_iter)
    save_index(index, args.out)
    sz = index.sizes
    print(f"index M={sz.m_leaf} M_I={sz.m_inter} M_R={sz.m_root} S={sz.s} -> {args.out}", file=sys.stderr)
    return 0


def cmd_query(args, parser) -> int:
    from .attention import KgHeads
    from .encoder import load_store
    from .hierarchy import load_index
    from .hikvp import TieredStore, query_once

    _require(parser, "--store", args.store)
    _require(parser, "--index", args.index)
    store = load_store(args.store, mmap=True)
    index = load_index(args.index)
    tiered = TieredStore(store, index, hot_capacity_bytes=args.hot_capacity)
    heads = KgHeads.identity(store.dim, store.dim)
    res = query_once(args.text, _encoder(args, store.dim), index, tiered, heads, _cfg(args))
    pruned = res["answer_scores"]
    scores = pruned.scores
    payload = {
        "results": [
            {"rank": r + 1, "leaf": int(i), "id": store.ids[int(i)], "logit": float(l), "score": float(s)}
            for r, (i, l, s) in enumerate(zip(pruned.leaf_ids, pruned.logits, scores))
        ],
        "lambda_kg": float(res["attention"].lambda_kg[0]),
        "stats": res["stats"].to_json(),
    }
    if args.explain:
        payload["explain"] = [t.to_json() for t in pruned.trace]
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return 0


def cmd_bench(args, parser) -> int:
    from .evaluation import bench_sweep, records_to_csv, records_to_json

    fmt = args.format or ("json" if args.out is not None and args.out.suffix == ".json" else "csv")
    records = bench_sweep(args.m, _cfg(args), row_bytes=args.row_bytes, d_e=args.d_e, seed=args.seed,
                          n_queries=args.n_queries, backend=args.backend)
    _emit(records_to_csv(records) if fmt == "csv" else records_to_json(records), args.out)
    return 0


def cmd_eval(args, parser) -> int:
    from .attention import KgHeads
    from .evaluation import SyntheticSpec, gen_synthetic, grounding_accuracy
    from .hierarchy import build_hierarchy

    if not args.sigma >= 0 or not args.blob_sep > 0:
        parser.error("--sigma must be >= 0 and --blob-sep > 0")
    spec = SyntheticSpec(m=args.m, d_e=args.d_e, noise_sigma=args.sigma, blob_sep=args.blob_sep, seed=args.seed)
    data = gen_synthetic(spec)
    index = build_hierarchy(data.store, seed=args.seed, backend=args.backend)
    heads = KgHeads.identity(args.d_e, args.d_e)
    reports = [
        grounding_accuracy(data.store, index, heads, "exact", data.queries),
        grounding_accuracy(data.store, index, heads, _cfg(args), data.queries),
    ]
    if args.format == "json":
        text = json.dumps(
            [{"mode": r.config["mode"], "acc1": r.acc_at_1, "acc5": r.acc_at_5, "config": r.config} for r in reports],
            indent=2,
        ) + "\n"
    else:
        rows = ["mode,m,k_root,k_inter,k_leaf,acc1,acc5"]
        for r in reports:
            c = r.config
            rows.append(",".join(str(v) for v in (c["mode"], c["m"], c.get("k_root", ""), c.get("k_inter", ""),
                                                  c.get("k_leaf", ""), r.acc_at_1, r.acc_at_5)))
        text = "\n".join(rows) + "\n"
    _emit(text, args.out)
    return 0


def cmd_grad_check(args, parser) -> int:
    from .attention import grad_check

    errs = [grad_check(seed, h=args.h) for seed in range(args.seeds)]
    worst = float(np.max(errs))
    print(json.dumps({"seeds": args.seeds, "h": args.h, "max_rel_error": worst, "tol": args.tol}))
    if worst > args.tol:
        print(f"gradient check failed: max relative error {worst:.3g} > {args.tol:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "kg2kv": cmd_kg2kv,
    "encode": cmd_encode,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, args._sub)
    except SystemExit as exc:
        return int(exc.code or 0)
    except AtlasKVError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
