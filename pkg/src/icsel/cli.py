"""Command-line pipeline: ingest, index, gen-train-data, train, select, eval, bench.

Exit codes: 0 success, 2 config/validation, 3 missing or unreadable artifact,
4 dependency failure (scorer, embedding lookup, numeric degeneracy). Every
command is deterministic given (config, seed) and a deterministic scorer;
the wall-clock fields of eval and bench reports are the sole exception.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .corpus import (
    Corpus,
    EmbeddingMatrix,
    attach_embeddings,
    dedup,
    load_corpus,
    write_corpus,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    DuplicateIdError,
    IcselError,
    KernelError,
    MissingIdError,
    RetrievalError,
    ScorerError,
    TrainingDivergedError,
    TrainingError,
)
from .inference import greedy_map_fast, order_exemplars
from .kernel import build_base_kernel, condition_kernel
from .retrieval import Bm25Index, bm25_topk, dense_topk
from .scoring import (
    MockScorer,
    RemoteScorer,
    ScoreCache,
    ScoreRequest,
    Scorer,
    score_many,
    world_from_corpus,
)
from .training import (
    ProjectionModel,
    construct_training_data,
    init_model,
    load_model,
    load_training_instances,
    ranks_from_scores,
    save_model,
    save_training_instances,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DEPENDENCY = 4

EVAL_METHODS = ("random", "bm25", "topk", "dpp_untrained", "dpp_trained")
DEFAULT_BENCH_GRID = (50, 100, 200, 400, 800)


def _require(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is not set")
    return path


def _load_corpus_embeddings(cfg: RunConfig) -> tuple[Corpus, EmbeddingMatrix]:
    corpus = load_corpus(_require(cfg.corpus_path, "corpus_path"))
    embeddings = attach_embeddings(corpus, _require(cfg.embeddings_path, "embeddings_path"))
    return corpus, embeddings


def _load_queries(cfg: RunConfig) -> tuple[Corpus, EmbeddingMatrix]:
    queries = load_corpus(_require(cfg.queries_path, "queries_path"))
    qemb = attach_embeddings(
        queries, _require(cfg.query_embeddings_path, "query_embeddings_path")
    )
    return queries, qemb


def _scorer_from_kind(entry: dict, corpora: tuple[Corpus, ...]) -> Scorer:
    kind = entry.get("kind")
    if kind == "mock":
        world = world_from_corpus(
            corpora,
            universe_size=int(entry.get("universe_size", 16)),
            alpha=float(entry.get("alpha", 4.0)),
            rho=float(entry.get("rho", 2.0)),
        )
        return MockScorer(world)
    if kind == "remote":
        endpoint = entry.get("endpoint")
        if not endpoint:
            raise ConfigError("remote scorer needs an endpoint")
        return RemoteScorer(
            endpoint,
            timeout=float(entry.get("timeout", 30.0)),
            retries=int(entry.get("retries", 3)),
        )
    if kind == "cache":
        path = entry.get("path")
        if not path:
            raise ConfigError("cache scorer needs a path")
        base = entry.get("base")
        remote = _scorer_from_kind(base, corpora) if base else None
        return ScoreCache(path, remote=remote)
    raise ConfigError(f"unknown scorer kind {kind!r}")


def _build_scorer(cfg: RunConfig, corpora: tuple[Corpus, ...]) -> Scorer:
    return _scorer_from_kind(cfg.scorer, corpora)


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# selection core shared by select, eval, and bench


def _pool_and_projection(
    model: ProjectionModel,
    embeddings: EmbeddingMatrix,
    query_vec: np.ndarray,
    n: int,
    exclude: int | None,
):
    """Dense pool by base similarity, plus the model's view of it.

    Returns (pool positions in descending base relevance, projected rows,
    model relevance per pool slot).
    """
    pool = dense_topk(embeddings, query_vec, n, exclude=exclude)
    order = np.asarray(pool.relevance_order, dtype=np.intp)
    phi = model.project_examples(embeddings.data[order])
    psi = model.project_queries(query_vec[np.newaxis, :])[0]
    rel = phi @ psi
    return order, phi, rel


def _pick_dpp(phi: np.ndarray, rel: np.ndarray, K: int, lam: float) -> list[int]:
    """Greedy MAP over the conditioned kernel, topped up to K by pool rank.

    Greedy stops early once no candidate adds volume (near-duplicates); the
    prompt still needs K exemplars, so the remainder fills in by base
    relevance. Returns local pool ranks.
    """
    L = build_base_kernel(phi)
    kern = condition_kernel(L, np.clip(rel, -1.0, 1.0), lam)
    picked = list(greedy_map_fast(kern, min(K, kern.n)).selected)
    if len(picked) < K:
        chosen = set(picked)
        for slot in range(len(phi)):
            if len(picked) >= K:
                break
            if slot not in chosen:
                picked.append(slot)
    return picked


def _base_rank_relevance(n: int) -> np.ndarray:
    # descending proxy so order_exemplars puts the best base rank last
    return -np.arange(n, dtype=np.float64)


def _finalize(order: np.ndarray, rel: np.ndarray, picked: list[int]) -> list[int]:
    """Prompt order (most similar last), mapped back to corpus positions."""
    ordered_local = order_exemplars(picked, rel)
    return [int(order[i]) for i in ordered_local]


def _request(
    corpus: Corpus, positions: list[int], query_input: str, target_output: str
) -> ScoreRequest:
    exemplars = tuple(
        (corpus.records[p].input_text, corpus.records[p].output_text) for p in positions
    )
    return ScoreRequest(
        exemplars=exemplars, query_input=query_input, target_output=target_output
    )


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig, args) -> int:
    corpus = load_corpus(_require(cfg.corpus_path, "corpus_path"))
    inputs = [rec.input_text for rec in corpus.records]
    outputs = [rec.output_text for rec in corpus.records]
    stats = {
        "records": len(corpus),
        "distinct_examples": len(dedup(corpus)),
        "mean_input_chars": (sum(map(len, inputs)) / len(corpus)) if len(corpus) else 0.0,
        "mean_output_chars": (sum(map(len, outputs)) / len(corpus)) if len(corpus) else 0.0,
    }
    if args.out:
        write_corpus(corpus, args.out)
        stats["normalized_copy"] = args.out
    sys.stdout.write(json.dumps(stats, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_index(cfg: RunConfig, args) -> int:
    corpus = load_corpus(_require(cfg.corpus_path, "corpus_path"))
    index = Bm25Index(corpus)
    stats = {
        "documents": index.num_docs,
        "vocabulary_size": len(index.idf),
        "average_doc_tokens": index.avg_len,
        "k1": index.k1,
        "b": index.b,
    }
    payload = json.dumps(stats, sort_keys=True) + "\n"
    _emit(payload, args.out)
    return EXIT_OK


def cmd_gen_train_data(cfg: RunConfig, args) -> int:
    corpus, embeddings = _load_corpus_embeddings(cfg)
    scorer = _build_scorer(cfg, (corpus,))
    anchors = None
    if cfg.num_anchors:
        if cfg.num_anchors > len(corpus):
            raise ConfigError(
                f"num_anchors={cfg.num_anchors} exceeds corpus size {len(corpus)}"
            )
        anchors = list(range(cfg.num_anchors))
    instances = construct_training_data(
        corpus,
        embeddings,
        n=cfg.n,
        M=cfg.M,
        K=cfg.K,
        scorer=scorer,
        seed=cfg.seed,
        anchor_positions=anchors,
        exclude_self=cfg.exclude_self,
    )
    out = args.out or cfg.instances_path
    save_training_instances(_require(out, "instances_path"), instances, corpus)
    sys.stdout.write(f"wrote {len(instances)} training instances to {out}\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    corpus, embeddings = _load_corpus_embeddings(cfg)
    instances = load_training_instances(
        _require(cfg.instances_path, "instances_path"), corpus
    )
    result = train(
        corpus,
        embeddings,
        instances,
        lambda_grid=cfg.lambda_grid,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        seed=cfg.seed,
    )
    out = args.out or cfg.model_path
    save_model(_require(out, "model_path"), result.model)
    summary = {
        "lambda": result.lam,
        "initial_loss": result.loss_curve[0],
        "final_loss": result.loss_curve[-1],
        "epochs": len(result.loss_curve) - 1,
        "skipped_instances": result.skipped,
        "validation_losses": {
            f"{lam:g}": loss for lam, loss in sorted(result.val_losses.items())
        },
        "model_path": out,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def _resolve_query(cfg: RunConfig, args, corpus: Corpus, embeddings: EmbeddingMatrix):
    """Find the query vector for select. Returns (vector, excluded position)."""
    by_id = getattr(args, "query_id", None)
    by_text = getattr(args, "query_text", None)
    if (by_id is None) == (by_text is None):
        raise ConfigError("select needs exactly one of --query-id or --query-text")
    if by_id is not None:
        if by_id in corpus.index:
            pos = corpus.position(by_id)
            return embeddings.data[pos].copy(), (pos if cfg.exclude_self else None)
    else:
        for pos, rec in enumerate(corpus.records):
            if rec.input_text == by_text:
                return embeddings.data[pos].copy(), (pos if cfg.exclude_self else None)
    if cfg.queries_path and cfg.query_embeddings_path:
        queries, qemb = _load_queries(cfg)
        if by_id is not None:
            if by_id in queries.index:
                return qemb.data[queries.position(by_id)].copy(), None
        else:
            for pos, rec in enumerate(queries.records):
                if rec.input_text == by_text:
                    return qemb.data[pos].copy(), None
    wanted = by_id if by_id is not None else by_text
    raise ScorerError(f"no embedding available for query {wanted!r}")


def cmd_select(cfg: RunConfig, args) -> int:
    corpus, embeddings = _load_corpus_embeddings(cfg)
    query_vec, exclude = _resolve_query(cfg, args, corpus, embeddings)
    if args.untrained:
        model = init_model(embeddings.dim)
    else:
        if not cfg.model_path:
            raise FileNotFoundError("no trained model: set model_path or pass --untrained")
        model = load_model(cfg.model_path)
    lam = cfg.inference_lambda if cfg.inference_lambda is not None else model.lam
    method = args.method or "dpp"
    if method not in ("dpp", "topk"):
        raise ConfigError(f"unknown select method {method!r} (expected dpp or topk)")
    n, K = cfg.inference_n, cfg.inference_K
    order, phi, rel = _pool_and_projection(model, embeddings, query_vec, n, exclude)
    if method == "topk":
        picked = list(range(K))
        positions = _finalize(order, _base_rank_relevance(n), picked)
    else:
        picked = _pick_dpp(phi, rel, K, lam)
        positions = _finalize(order, rel, picked)
    text = "".join(corpus.records[p].id + "\n" for p in positions)
    _emit(text, args.out)
    return EXIT_OK


def _parse_methods(raw: str | None, cfg: RunConfig) -> list[str]:
    if raw:
        names = [m.strip() for m in raw.split(",") if m.strip()]
    else:
        names = [m for m in EVAL_METHODS if m != "dpp_trained" or cfg.model_path]
    for name in names:
        if name not in EVAL_METHODS:
            raise ConfigError(
                f"unknown eval method {name!r} (expected subset of {EVAL_METHODS})"
            )
    # canonical order, duplicates collapsed
    return [m for m in EVAL_METHODS if m in names]


def cmd_eval(cfg: RunConfig, args) -> int:
    corpus, embeddings = _load_corpus_embeddings(cfg)
    queries, qemb = _load_queries(cfg)
    methods = _parse_methods(args.methods, cfg)
    scorer = _build_scorer(cfg, (corpus, queries))
    n, K = cfg.inference_n, cfg.inference_K
    identity = init_model(embeddings.dim)
    lam_untrained = (
        cfg.inference_lambda if cfg.inference_lambda is not None else identity.lam
    )
    trained = None
    if "dpp_trained" in methods:
        if not cfg.model_path:
            raise FileNotFoundError("dpp_trained needs model_path in the config")
        trained = load_model(cfg.model_path)
    bm25 = Bm25Index(corpus) if "bm25" in methods else None

    report_methods = {}
    for method in methods:
        histogram = np.zeros(n, dtype=np.int64)
        mean_scores = []
        reciprocal_ranks = []
        wall = 0.0
        for qi, qrec in enumerate(queries.records):
            query_vec = qemb.data[qi]
            started = time.perf_counter()
            if method == "bm25":
                pool = bm25_topk(bm25, qrec.input_text, n)
                order = np.asarray(pool.relevance_order, dtype=np.intp)
                rel = _base_rank_relevance(n)
                picked = list(range(K))
            elif method == "topk":
                order, _, _ = _pool_and_projection(identity, embeddings, query_vec, n, None)
                rel = _base_rank_relevance(n)
                picked = list(range(K))
            elif method == "random":
                order, _, _ = _pool_and_projection(identity, embeddings, query_vec, n, None)
                rel = _base_rank_relevance(n)
                rng = np.random.default_rng([cfg.seed, 7, qi])
                picked = [int(i) for i in rng.choice(n, size=K, replace=False)]
            else:
                model = trained if method == "dpp_trained" else identity
                lam = (
                    cfg.inference_lambda
                    if cfg.inference_lambda is not None
                    else (model.lam if method == "dpp_trained" else lam_untrained)
                )
                order, phi, rel = _pool_and_projection(model, embeddings, query_vec, n, None)
                picked = _pick_dpp(phi, rel, K, lam)
            positions = _finalize(order, rel, picked)
            wall += time.perf_counter() - started

            histogram[np.asarray(picked, dtype=np.intp)] += 1
            requests = [_request(corpus, positions, qrec.input_text, qrec.output_text)]
            rng = np.random.default_rng([cfg.seed, 13, qi])
            for _ in range(cfg.M):
                draw = [int(i) for i in rng.choice(n, size=K, replace=False)]
                cand = _finalize(order, _base_rank_relevance(n), draw)
                requests.append(
                    _request(corpus, cand, qrec.input_text, qrec.output_text)
                )
            scores = score_many(scorer, requests)
            mean_scores.append(scores[0])
            reciprocal_ranks.append(1.0 / ranks_from_scores(scores)[0])
        report_methods[method] = {
            "mean_score": float(np.mean(mean_scores)),
            "mrr": float(np.mean(reciprocal_ranks)),
            "rank_histogram": histogram.tolist(),
            "wall_clock_per_query": wall / len(queries),
        }

    report = {
        "num_queries": len(queries),
        "inference_n": n,
        "inference_K": K,
        "mrr_candidates": cfg.M + 1,
        "methods": report_methods,
    }
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _parse_grid(raw: str | None) -> tuple[int, ...]:
    if not raw:
        return DEFAULT_BENCH_GRID
    try:
        grid = tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--n-grid must be comma-separated integers, got {raw!r}") from None
    if not grid or any(v <= 0 for v in grid):
        raise ConfigError("--n-grid values must be positive")
    return grid


def cmd_bench(cfg: RunConfig, args) -> int:
    corpus, embeddings = _load_corpus_embeddings(cfg)
    queries, qemb = _load_queries(cfg)
    grid = _parse_grid(args.n_grid)
    if max(grid) > len(corpus):
        raise ConfigError(
            f"pool size {max(grid)} exceeds corpus size {len(corpus)}"
        )
    model = load_model(cfg.model_path) if cfg.model_path else init_model(embeddings.dim)
    lam = cfg.inference_lambda if cfg.inference_lambda is not None else model.lam
    timing_rows = ["n,topk_per_query_s,map_per_query_s"]
    histogram_rows = ["n,rank,count"]
    for n in grid:
        K = min(cfg.inference_K, n)
        histogram = np.zeros(n, dtype=np.int64)
        topk_total = 0.0
        map_total = 0.0
        for qi in range(len(queries)):
            query_vec = qemb.data[qi]
            started = time.perf_counter()
            pool = dense_topk(embeddings, query_vec, n)
            topk_positions = [int(p) for p in pool.relevance_order[:K]][::-1]
            topk_total += time.perf_counter() - started

            started = time.perf_counter()
            order, phi, rel = _pool_and_projection(model, embeddings, query_vec, n, None)
            picked = _pick_dpp(phi, rel, K, lam)
            _ = _finalize(order, rel, picked)
            map_total += time.perf_counter() - started
            histogram[np.asarray(picked, dtype=np.intp)] += 1
        timing_rows.append(
            f"{n},{topk_total / len(queries):.9f},{map_total / len(queries):.9f}"
        )
        for rank in range(n):
            histogram_rows.append(f"{n},{rank},{int(histogram[rank])}")
    payload = "\n".join(timing_rows) + "\n\n" + "\n".join(histogram_rows) + "\n"
    _emit(payload, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icsel",
        description="Exemplar subset selection: retrieval, training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="override selection lambda; inf selects by pure diversity",
    )
    common.add_argument(
        "--method", default=None, help="selection method where applicable"
    )
    common.add_argument("--out", default=None, help="write output to this path")

    p = sub.add_parser("ingest", parents=[common], help="validate a corpus and report stats")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", parents=[common], help="build the BM25 index and report stats")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser(
        "gen-train-data", parents=[common], help="score candidate subsets per anchor"
    )
    p.set_defaults(func=cmd_gen_train_data)

    p = sub.add_parser("train", parents=[common], help="fit the two-tower projection")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", parents=[common], help="select exemplars for one query")
    p.add_argument("--query-id", default=None)
    p.add_argument("--query-text", default=None)
    p.add_argument(
        "--untrained",
        action="store_true",
        help="use the identity projection instead of a trained model",
    )
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", parents=[common], help="compare selection methods")
    p.add_argument(
        "--methods",
        default=None,
        help=f"comma-separated subset of {','.join(EVAL_METHODS)}",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="latency table over pool sizes")
    p.add_argument("--n-grid", default=None, help="comma-separated pool sizes")
    p.set_defaults(func=cmd_bench)
    return parser


def _exit_code(exc: Exception) -> int | None:
    if isinstance(exc, (ConfigError, RetrievalError)):
        return EXIT_CONFIG
    if isinstance(exc, (FileNotFoundError, CorpusFormatError, DuplicateIdError, MissingIdError)):
        return EXIT_MISSING
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DEPENDENCY
    if isinstance(exc, TrainingError):
        # scorer failures surface wrapped; the chain tells them apart
        if isinstance(exc.__cause__, ScorerError):
            return EXIT_DEPENDENCY
        return EXIT_CONFIG
    if isinstance(exc, (ScorerError, KernelError)):
        return EXIT_DEPENDENCY
    if isinstance(exc, IcselError):
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, seed=args.seed, inference_lambda=args.lam)
        return args.func(cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
