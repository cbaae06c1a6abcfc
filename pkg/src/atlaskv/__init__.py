"""Knowledge-graph key/value injection with hierarchical pruning."""
from .attention import (
    AttnOut,
    KgHeads,
    SeqState,
    decomposed_attention,
    grad_check,
    kg_head_gradients,
    rectangular_attention,
)
from .encoder import EmbeddingStore, HttpEncoder, StubEncoder, encode, encode_corpus, load_store, save_store
from .errors import AtlasKVError
from .evaluation import SyntheticSpec, bench_sweep, gen_synthetic, grounding_accuracy
from .hierarchy import HierarchyIndex, build_hierarchy, layer_sizes, load_index, save_index
from .hikvp import OpStats, PrunedSet, PruneConfig, TieredStore, prune_query, pruned_attention, query_once
from .kgkv import QkvRecord, Triple, convert, corpus_metrics, triple_to_qkv
from .rewrite import RuleRewriter, rewrite_relation

__version__ = "0.1.0"

__all__ = [
    "AtlasKVError", "AttnOut", "EmbeddingStore", "HierarchyIndex", "HttpEncoder", "KgHeads", "OpStats",
    "PruneConfig", "PrunedSet", "QkvRecord", "RuleRewriter", "SeqState", "StubEncoder", "SyntheticSpec",
    "TieredStore", "Triple", "bench_sweep", "build_hierarchy", "convert", "corpus_metrics",
    "decomposed_attention", "encode", "encode_corpus", "gen_synthetic", "grad_check", "grounding_accuracy",
    "kg_head_gradients", "layer_sizes", "load_index", "load_store", "prune_query", "pruned_attention",
    "query_once", "rectangular_attention", "rewrite_relation", "save_index", "save_store", "triple_to_qkv",
]
