"""Shared fixtures: tiny corpora, a synthetic workspace, and a CLI runner."""
from __future__ import annotations

import contextlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

from icsel.cli import main as cli_main
from icsel.corpus import Corpus, ExampleRecord, write_corpus, write_embeddings
from icsel.scoring import make_world


def make_corpus(*pairs: tuple[str, str, str]) -> Corpus:
    """Build a corpus from (id, input, output) triples."""
    return Corpus.from_records(
        [ExampleRecord(id=i, input_text=x, output_text=y) for i, x, y in pairs]
    )


def write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def run_cli(argv: list[str]) -> tuple[int, str, str]:
    """Run the CLI in-process, capturing stdout/stderr."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = cli_main(list(argv))
        except SystemExit as exc:
            code = int(exc.code or 0)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="session")
def workspace(tmp_path_factory) -> dict:
    """Synthetic world on disk plus a config, training data, and a model.

    Small enough to build once per session (a few seconds) and shared by
    every CLI test that needs a trained pipeline.
    """
    root = tmp_path_factory.mktemp("ws")
    sw = make_world(200, num_queries=30, universe_size=16, seed=0, noise_scale=1.0)

    corpus_path = root / "corpus.jsonl"
    embeddings_path = root / "embeddings.bin"
    queries_path = root / "queries.jsonl"
    query_embeddings_path = root / "qemb.bin"
    write_corpus(sw.corpus, corpus_path)
    write_embeddings(embeddings_path, sw.embeddings.ids, sw.embeddings.data)
    write_corpus(sw.queries, queries_path)
    write_embeddings(query_embeddings_path, sw.query_embeddings.ids, sw.query_embeddings.data)

    cfg = {
        "corpus_path": str(corpus_path),
        "embeddings_path": str(embeddings_path),
        "queries_path": str(queries_path),
        "query_embeddings_path": str(query_embeddings_path),
        "instances_path": str(root / "instances.jsonl"),
        "model_path": str(root / "model.bin"),
        "scorer": {"kind": "mock", "universe_size": 16},
        "n": 30,
        "K": 4,
        "M": 8,
        "lambda_grid": [0.05, 0.1],
        "epochs": 10,
        "batch_size": 32,
        "lr": 0.01,
        "seed": 0,
        "inference_K": 4,
        "inference_n": 30,
        "num_anchors": 80,
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(cfg))

    code, _, err = run_cli(["gen-train-data", "--config", str(config_path)])
    assert code == 0, err
    code, _, err = run_cli(["train", "--config", str(config_path)])
    assert code == 0, err

    return {
        "root": root,
        "config": config_path,
        "config_dict": cfg,
        "world": sw,
        "corpus_path": corpus_path,
        "embeddings_path": embeddings_path,
    }


@pytest.fixture(scope="session")
def keep_self_config(workspace) -> Path:
    """Config variant with self-exclusion off and no trained model."""
    cfg = dict(workspace["config_dict"])
    cfg["exclude_self"] = False
    cfg["model_path"] = ""
    path = workspace["root"] / "config_keep_self.json"
    path.write_text(json.dumps(cfg))
    return path
