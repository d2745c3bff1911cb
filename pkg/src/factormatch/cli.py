"""Command-line interface: serve an index, query a server, run evaluations."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import service
from .descriptors import (
    SynthCorpusSpec,
    generate_corpus,
    load_corpus,
    load_descriptors,
    save_corpus,
)
from .evaluation import evaluate, sweep_alpha, sweep_bits, sweep_rank
from .matcher import ObjectIndex

SYNTH_PREFIX = "synthetic:"


def load_corpus_arg(text: str):
    """A corpus argument is a directory of descriptor files or synthetic:<spec>."""
    if text.startswith(SYNTH_PREFIX):
        return generate_corpus(SynthCorpusSpec.from_string(text[len(SYNTH_PREFIX):]))
    path = Path(text)
    if not path.is_dir():
        raise SystemExit(f"corpus {text!r} is not a directory or synthetic spec")
    return load_corpus(path)


def load_index_arg(text: str, k_max: int | None, bits: int, base_seed: int) -> ObjectIndex:
    """Index argument: prebuilt .idx file, corpus directory, or synthetic spec."""
    path = Path(text)
    if path.is_file():
        return service.read_index(path)
    return service.build_index(load_corpus_arg(text), k_max=k_max, bits=bits,
                               base_seed=base_seed)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise SystemExit(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eta", type=int, default=20, help="ranked list length")
    parser.add_argument("--alpha", type=int, default=2, help="fusion weight")
    parser.add_argument("--bits", type=int, default=5, help="quantization bits")
    parser.add_argument("--k-max", type=int, default=None,
                        help="model-order scan ceiling (default: shape-derived)")
    parser.add_argument("--seed", type=int, default=0, help="NMF base seed")


def _add_eval_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True,
                        help="descriptor directory or synthetic:<spec>")
    parser.add_argument("--top", type=int, default=20, help="max accuracy depth")
    parser.add_argument("--query-view", type=int, default=1,
                        help="1-based view index used as the query")
    parser.add_argument("--out", default=None, help="write the JSONL report here")


def _emit_report(report, out: str | None) -> int:
    print(report.summary())
    if out:
        Path(out).write_text(report.to_jsonl())
        print(f"report written to {out}")
    try:
        report.validate()
    except ValueError as exc:
        print(f"report invariant violated: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="factormatch",
        description="Image retrieval from quantized PCA/NMF descriptor factor loadings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic descriptor corpus")
    p.add_argument("--spec", required=True,
                   help="objects=50,views=5,T=32,N=400,r=4,sigma=0.05,seed=1")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build-index", help="factorize a corpus into an index file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output .idx path")
    _add_common(p)

    p = sub.add_parser("serve", help="serve an index over TCP")
    p.add_argument("--index", required=True,
                   help=".idx file, descriptor directory, or synthetic:<spec>")
    p.add_argument("--listen", default="127.0.0.1:7010", help="host:port to bind")
    _add_common(p)

    p = sub.add_parser("query", help="query a running server with one image")
    p.add_argument("--server", required=True, help="host:port of the server")
    p.add_argument("--descriptors", required=True, help="descriptor file (.dmt or .csv)")
    p.add_argument("--timeout", type=float, default=30.0)
    _add_common(p)

    p = sub.add_parser("evaluate", help="leave-one-view-out accuracy of all pipelines")
    _add_eval_common(p)
    _add_common(p)

    p = sub.add_parser("sweep-alpha", help="combined accuracy across fusion weights")
    _add_eval_common(p)
    _add_common(p)
    p.add_argument("--alphas", default=None,
                   help="comma-separated alpha grid (default 0..eta)")

    p = sub.add_parser("sweep-bits", help="accuracy across quantization rates")
    _add_eval_common(p)
    _add_common(p)
    p.add_argument("--grid", default="1,2,3,4,5,6,8",
                   help="comma-separated bit widths")

    p = sub.add_parser("sweep-rank", help="fixed ranks versus estimated model order")
    _add_eval_common(p)
    _add_common(p)
    p.add_argument("--ranks", default="1,2,4,8,16",
                   help="comma-separated fixed ranks")

    args = parser.parse_args(argv)

    if args.command == "gen-corpus":
        corpus = generate_corpus(SynthCorpusSpec.from_string(args.spec))
        save_corpus(corpus, args.out)
        print(f"wrote {len(corpus)} descriptor files to {args.out}")
        return 0

    if args.command == "build-index":
        corpus = load_corpus_arg(args.corpus)
        records = service.quantized_records(
            corpus, k_max=args.k_max, bits=args.bits, base_seed=args.seed
        )
        service.write_index(args.out, records)
        stored = sum(r.stored_bytes() for r in records)
        print(f"indexed {len(records)} images "
              f"({stored} stored loading bytes, {stored / len(records):.0f}/image) "
              f"to {args.out}")
        return 0

    if args.command == "serve":
        index = load_index_arg(args.index, args.k_max, args.bits, args.seed)
        endpoint = parse_endpoint(args.listen)
        server = service.serve(index, endpoint)
        host, port = server.address
        print(f"serving {index.num_images} images / {index.num_objects} objects "
              f"on {host}:{port}")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.close()
        return 0

    if args.command == "query":
        data = Path(args.descriptors).read_bytes()
        fmt = "csv" if args.descriptors.endswith(".csv") else "binary"
        stem = Path(args.descriptors).stem
        m = load_descriptors(data, fmt, image_id=stem, object_id=stem)
        ranked = service.query_remote(
            parse_endpoint(args.server), m, eta=args.eta, alpha=args.alpha,
            bits=args.bits, k_max=args.k_max, base_seed=args.seed,
            timeout=args.timeout,
        )
        for rank, entry in enumerate(ranked.entries, start=1):
            print(f"{rank:3d}  {entry.object_id:<24} {entry.score:.6f}")
        return 0

    corpus = load_corpus_arg(args.corpus)
    label = args.corpus
    common = dict(eta=args.eta, top=args.top, k_max=args.k_max,
                  query_view=args.query_view, base_seed=args.seed,
                  corpus_label=label)
    if args.command == "evaluate":
        report = evaluate(corpus, alpha=args.alpha, bits=args.bits, **common)
    elif args.command == "sweep-alpha":
        alphas = ([int(a) for a in args.alphas.split(",")]
                  if args.alphas else None)
        report = sweep_alpha(corpus, alphas=alphas, bits=args.bits, **common)
    elif args.command == "sweep-bits":
        grid = [int(b) for b in args.grid.split(",")]
        report = sweep_bits(corpus, bit_grid=grid, alpha=args.alpha, **common)
    elif args.command == "sweep-rank":
        ranks = [int(k) for k in args.ranks.split(",")]
        report = sweep_rank(corpus, fixed_ranks=ranks, alpha=args.alpha,
                            bits=args.bits, **common)
    else:  # pragma: no cover
        parser.error(f"unknown command {args.command}")
        return 2
    return _emit_report(report, args.out)


if __name__ == "__main__":
    sys.exit(main())
