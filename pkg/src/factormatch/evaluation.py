"""Leave-one-view-out retrieval evaluation and the experiment sweeps.

One view per object (the first, by default) queries an index built from all
remaining views; accuracy at depth n is the fraction of queries whose true
object lands in the top n. The sweeps rerun that measurement along one axis:
fusion weight alpha, quantization rate, fixed factorization rank versus the
estimated model order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

from . import codec
from .descriptors import DescriptorMatrix, view_index
from .factorization import FactorLoadings, nmf_loadings, pca_loadings
from .fusion import FusionParams, fuse
from .matcher import (
    METRIC_ANGLE,
    METRIC_CORRELATION,
    IndexedImage,
    ObjectIndex,
    RankedList,
    combined_hypotheses,
    rank_database,
)
from .model_order import estimate_order
from .service import nmf_seed

PIPELINES = ("pca_corr", "pca_angle", "nmf_corr", "nmf_angle", "combined")
_SINGLE_METRIC = {
    "pca_corr": ("pca", METRIC_CORRELATION),
    "pca_angle": ("pca", METRIC_ANGLE),
    "nmf_corr": ("nmf", METRIC_CORRELATION),
    "nmf_angle": ("nmf", METRIC_ANGLE),
}

RANK_ESTIMATED = "estimated"


def rank_mode_label(fixed_k: int | None) -> str:
    return RANK_ESTIMATED if fixed_k is None else f"fixed:{fixed_k}"


@dataclass(frozen=True)
class EvalRecord:
    pipeline: str
    rank_mode: str
    bits: int | None
    alpha: int | None
    top_n: int
    accuracy: float

    def config_key(self) -> tuple:
        return (self.pipeline, self.rank_mode, self.bits, self.alpha)


@dataclass
class EvalReport:
    corpus_label: str
    eta: int
    records: list[EvalRecord] = field(default_factory=list)
    runtime: dict[str, float] = field(default_factory=dict)

    def accuracy(self, pipeline: str, top_n: int = 1, **match) -> float:
        """Look up one accuracy value; extra kwargs filter on record fields."""
        hits = [
            r for r in self.records
            if r.pipeline == pipeline and r.top_n == top_n
            and all(getattr(r, k) == v for k, v in match.items())
        ]
        if len(hits) != 1:
            raise KeyError(
                f"{len(hits)} records match pipeline={pipeline}, top_n={top_n}, {match}"
            )
        return hits[0].accuracy

    def validate(self) -> None:
        """Accuracy must be in [0,1] and non-decreasing in top_n per config."""
        by_config: dict[tuple, list[EvalRecord]] = {}
        for rec in self.records:
            if not 0.0 <= rec.accuracy <= 1.0:
                raise ValueError(f"accuracy out of range in {rec}")
            by_config.setdefault(rec.config_key(), []).append(rec)
        for key, recs in by_config.items():
            recs = sorted(recs, key=lambda r: r.top_n)
            accs = [r.accuracy for r in recs]
            if any(b < a for a, b in zip(accs, accs[1:])):
                raise ValueError(f"accuracy not monotone in top_n for config {key}")

    def to_jsonl(self) -> str:
        lines = [json.dumps({
            "type": "header", "corpus": self.corpus_label, "eta": self.eta,
            "num_records": len(self.records),
        }, sort_keys=True)]
        for rec in self.records:
            lines.append(json.dumps({
                "type": "record", "pipeline": rec.pipeline, "rank_mode": rec.rank_mode,
                "bits": rec.bits, "alpha": rec.alpha, "top_n": rec.top_n,
                "accuracy": rec.accuracy,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary(self, depths: Sequence[int] = (1, 2, 3, 5, 10)) -> str:
        configs: dict[tuple, dict[int, float]] = {}
        for rec in self.records:
            configs.setdefault(rec.config_key(), {})[rec.top_n] = rec.accuracy
        depths = [d for d in depths if any(d in accs for accs in configs.values())]
        header = f"{'pipeline':<10} {'rank':<10} {'bits':>5} {'alpha':>5} " + " ".join(
            f"top-{d:<3}" for d in depths
        )
        lines = [self.corpus_label, header, "-" * len(header)]
        # stringified sort key: bits/alpha columns mix ints and None
        ordered = sorted(configs.items(), key=lambda kv: tuple(str(x) for x in kv[0]))
        for (pipeline, rank_mode, bits, alpha), accs in ordered:
            cells = " ".join(
                f"{accs[d]:7.4f}" if d in accs else "      -" for d in depths
            )
            lines.append(
                f"{pipeline:<10} {rank_mode:<10} {str(bits):>5} {str(alpha):>5} {cells}"
            )
        for phase, seconds in sorted(self.runtime.items()):
            lines.append(f"[{phase}: {seconds:.2f}s]")
        return "\n".join(lines)


# --- corpus preparation ---------------------------------------------------


def split_queries(
    corpus: Sequence[DescriptorMatrix], query_view: int = 1
) -> tuple[list[DescriptorMatrix], list[DescriptorMatrix]]:
    """Leave-one-view-out split: view ``query_view`` of each object queries
    an index built from every other view."""
    views_per_object: dict[str, int] = {}
    for m in corpus:
        views_per_object[m.object_id] = views_per_object.get(m.object_id, 0) + 1
    singletons = [obj for obj, n in views_per_object.items() if n < 2]
    if singletons:
        raise ValueError(
            f"leave-one-view-out needs >= 2 views per object; single-view "
            f"object(s): {sorted(singletons)[:5]}"
        )
    queries = [m for m in corpus if view_index(m.image_id) == query_view]
    database = [m for m in corpus if view_index(m.image_id) != query_view]
    if not queries:
        raise ValueError(f"no image has view index {query_view}")
    return queries, database


def _image_loadings(
    m: DescriptorMatrix,
    k_max: int | None,
    bits: int | None,
    fixed_k: int | None,
    base_seed: int,
) -> tuple[FactorLoadings, FactorLoadings, int]:
    if fixed_k is None:
        k = estimate_order(m, k_max).k_star
    else:
        k = min(fixed_k, min(m.T, m.N))
    pca, _ = pca_loadings(m, k)
    nmf, _, _ = nmf_loadings(m, k, seed=nmf_seed(m.image_id, base_seed))
    if bits is not None:
        pca = codec.dequantize(codec.quantize(pca, bits))
        nmf = codec.dequantize(codec.quantize(nmf, bits))
    return pca, nmf, k


def build_eval_index(
    database: Sequence[DescriptorMatrix],
    k_max: int | None = None,
    bits: int | None = 5,
    fixed_k: int | None = None,
    base_seed: int = 0,
) -> ObjectIndex:
    images = {}
    for m in database:
        pca, nmf, k = _image_loadings(m, k_max, bits, fixed_k, base_seed)
        images[m.image_id] = IndexedImage(
            image_id=m.image_id, object_id=m.object_id, pca=pca, nmf=nmf, k_star=k
        )
    return ObjectIndex(images=images)


def _true_object_rank(ranked: RankedList, object_id: str) -> int | None:
    for pos, entry in enumerate(ranked.entries, start=1):
        if entry.object_id == object_id:
            return pos
    return None


def _accuracy_records(
    positions: list[int | None],
    pipeline: str,
    rank_mode: str,
    bits: int | None,
    alpha: int | None,
    top: int,
) -> list[EvalRecord]:
    total = len(positions)
    return [
        EvalRecord(
            pipeline=pipeline, rank_mode=rank_mode, bits=bits, alpha=alpha,
            top_n=n,
            accuracy=sum(1 for p in positions if p is not None and p <= n) / total,
        )
        for n in range(1, top + 1)
    ]


# --- evaluate and sweeps ----------------------------------------------------


def evaluate(
    corpus: Sequence[DescriptorMatrix],
    eta: int = 20,
    alpha: int = 2,
    bits: int | None = 5,
    top: int = 20,
    k_max: int | None = None,
    fixed_k: int | None = None,
    query_view: int = 1,
    base_seed: int = 0,
    pipelines: Sequence[str] = PIPELINES,
    corpus_label: str = "corpus",
) -> EvalReport:
    """Measure top-n accuracy of the requested pipelines on one corpus."""
    unknown = set(pipelines) - set(PIPELINES)
    if unknown:
        raise ValueError(f"unknown pipeline(s) {sorted(unknown)}")
    top = min(top, eta)
    queries, database = split_queries(corpus, query_view)
    t0 = time.perf_counter()
    index = build_eval_index(database, k_max, bits, fixed_k, base_seed)
    t_index = time.perf_counter() - t0

    positions: dict[str, list[int | None]] = {p: [] for p in pipelines}
    t0 = time.perf_counter()
    for m in queries:
        q_pca, q_nmf, _ = _image_loadings(m, k_max, bits, fixed_k, base_seed)
        for pipeline in pipelines:
            if pipeline == "combined":
                v_pri, v_sec = combined_hypotheses(q_pca, q_nmf, index, eta)
                ranked = fuse(v_pri, v_sec, FusionParams(alpha=alpha, eta=eta))
            else:
                kind, metric = _SINGLE_METRIC[pipeline]
                query = q_pca if kind == "pca" else q_nmf
                ranked = rank_database(query, index, metric, eta)
            positions[pipeline].append(_true_object_rank(ranked, m.object_id))
    t_query = time.perf_counter() - t0

    report = EvalReport(corpus_label=corpus_label, eta=eta, runtime={
        "index_build": t_index, "queries": t_query,
    })
    mode = rank_mode_label(fixed_k)
    for pipeline in pipelines:
        report.records.extend(_accuracy_records(
            positions[pipeline], pipeline, mode, bits,
            alpha if pipeline == "combined" else None, top,
        ))
    report.validate()
    return report


def sweep_alpha(
    corpus: Sequence[DescriptorMatrix],
    alphas: Sequence[int] | None = None,
    eta: int = 20,
    bits: int | None = 5,
    top: int = 20,
    k_max: int | None = None,
    query_view: int = 1,
    base_seed: int = 0,
    corpus_label: str = "corpus",
) -> EvalReport:
    """Combined-pipeline accuracy across the fusion weight grid.

    The two hypotheses are computed once per query and re-fused per alpha;
    an ``nmf_angle`` reference row rides along (the alpha = eta column must
    reproduce it on corpora where the PCA prefilter recalls the true object).
    """
    if alphas is None:
        alphas = range(eta + 1)
    if any(not 0 <= a <= eta for a in alphas):
        raise ValueError(f"alphas must lie in [0, {eta}]")
    top = min(top, eta)
    queries, database = split_queries(corpus, query_view)
    t0 = time.perf_counter()
    index = build_eval_index(database, k_max, bits, None, base_seed)

    positions: dict[int, list[int | None]] = {a: [] for a in alphas}
    nmf_positions: list[int | None] = []
    for m in queries:
        q_pca, q_nmf, _ = _image_loadings(m, k_max, bits, None, base_seed)
        v_pri, v_sec = combined_hypotheses(q_pca, q_nmf, index, eta)
        for a in alphas:
            ranked = fuse(v_pri, v_sec, FusionParams(alpha=a, eta=eta))
            positions[a].append(_true_object_rank(ranked, m.object_id))
        nmf_positions.append(_true_object_rank(
            rank_database(q_nmf, index, METRIC_ANGLE, eta), m.object_id
        ))

    report = EvalReport(corpus_label=corpus_label, eta=eta, runtime={
        "total": time.perf_counter() - t0,
    })
    for a in alphas:
        report.records.extend(_accuracy_records(
            positions[a], "combined", RANK_ESTIMATED, bits, a, top))
    report.records.extend(_accuracy_records(
        nmf_positions, "nmf_angle", RANK_ESTIMATED, bits, None, top))
    report.validate()
    return report


def sweep_bits(
    corpus: Sequence[DescriptorMatrix],
    bit_grid: Sequence[int] = (1, 2, 3, 4, 5, 6, 8),
    eta: int = 20,
    alpha: int = 2,
    top: int = 20,
    k_max: int | None = None,
    query_view: int = 1,
    base_seed: int = 0,
    pipelines: Sequence[str] = PIPELINES,
    corpus_label: str = "corpus",
) -> EvalReport:
    """Accuracy versus quantization rate, plus an unquantized reference row."""
    t0 = time.perf_counter()
    report = EvalReport(corpus_label=corpus_label, eta=eta)
    for bits in [*bit_grid, None]:
        sub = evaluate(
            corpus, eta=eta, alpha=alpha, bits=bits, top=top, k_max=k_max,
            query_view=query_view, base_seed=base_seed, pipelines=pipelines,
            corpus_label=corpus_label,
        )
        report.records.extend(sub.records)
    report.runtime["total"] = time.perf_counter() - t0
    report.validate()
    return report


def sweep_rank(
    corpus: Sequence[DescriptorMatrix],
    fixed_ranks: Sequence[int] = (1, 2, 4, 8, 16),
    eta: int = 20,
    alpha: int = 2,
    bits: int | None = 5,
    top: int = 20,
    k_max: int | None = None,
    query_view: int = 1,
    base_seed: int = 0,
    pipelines: Sequence[str] = PIPELINES,
    corpus_label: str = "corpus",
) -> EvalReport:
    """Accuracy under fixed factorization ranks versus the estimated order."""
    if any(k < 1 for k in fixed_ranks):
        raise ValueError("fixed ranks must be positive")
    t0 = time.perf_counter()
    report = EvalReport(corpus_label=corpus_label, eta=eta)
    for fixed_k in [*fixed_ranks, None]:
        sub = evaluate(
            corpus, eta=eta, alpha=alpha, bits=bits, top=top, k_max=k_max,
            fixed_k=fixed_k, query_view=query_view, base_seed=base_seed,
            pipelines=pipelines, corpus_label=corpus_label,
        )
        report.records.extend(sub.records)
    report.runtime["total"] = time.perf_counter() - t0
    report.validate()
    return report
