"""Subset-quality oracles: synthetic mock scorer, file cache, remote client.

Scores live in the log domain end to end. A scorer is any callable taking a
ScoreRequest and returning a float log-likelihood; the training pipeline is
agnostic to which implementation backs it.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, EmbeddingMatrix, ExampleRecord
from .errors import CacheMissError, ProtocolError, ScorerError

DEFAULT_ALPHA = 4.0
DEFAULT_RHO = 2.0
DEFAULT_UNIVERSE = 16

Scorer = Callable[["ScoreRequest"], float]


@dataclass(frozen=True)
class ScoreRequest:
    """One oracle call: ordered exemplars, a query, and the target to score."""

    exemplars: tuple[tuple[str, str], ...]
    query_input: str
    target_output: str

    def __post_init__(self):
        if not self.target_output:
            raise ScorerError("target_output must be non-empty")
        object.__setattr__(
            self,
            "exemplars",
            tuple((str(a), str(b)) for a, b in self.exemplars),
        )


def request_hash(request: ScoreRequest) -> str:
    """Canonical hex digest of a request; exemplar order is significant."""
    payload = json.dumps(
        {
            "exemplars": [list(pair) for pair in request.exemplars],
            "query_input": request.query_input,
            "target_output": request.target_output,
        },
        ensure_ascii=True,
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MockWorld:
    """Synthetic ground truth: every text owns a subset of T attributes."""

    universe_size: int
    attributes: Mapping[str, frozenset]
    alpha: float = DEFAULT_ALPHA
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        if self.universe_size <= 0:
            raise ScorerError("universe_size must be positive")
        for text, attrs in self.attributes.items():
            for a in attrs:
                if not 0 <= a < self.universe_size:
                    raise ScorerError(
                        f"attribute {a} of {text!r} outside [0, {self.universe_size})"
                    )

    def lookup(self, text: str) -> frozenset:
        try:
            return self.attributes[text]
        except KeyError:
            raise ScorerError(f"unknown example text {text!r}") from None


def _log_sigmoid(x: float) -> float:
    return float(-np.logaddexp(0.0, -x))


def mock_score(world: MockWorld, request: ScoreRequest) -> float:
    """log(sigmoid(alpha * coverage - rho * redundancy)); always <= 0.

    Coverage is the covered fraction of the query's attributes; redundancy is
    the overlap fraction among the exemplars' attribute multiset. The score is
    permutation-invariant in exemplar order and strictly decreases when an
    exemplar contributing no new attributes is added.
    """
    query_attrs = world.lookup(request.query_input)
    exemplar_attrs = [world.lookup(inp) for inp, _ in request.exemplars]
    union = frozenset().union(*exemplar_attrs) if exemplar_attrs else frozenset()
    if query_attrs:
        coverage = len(query_attrs & union) / len(query_attrs)
    else:
        coverage = 1.0
    total = sum(len(a) for a in exemplar_attrs)
    redundancy = (total - len(union)) / total if total else 0.0
    return _log_sigmoid(world.alpha * coverage - world.rho * redundancy)


class MockScorer:
    """Scorer adapter around a MockWorld."""

    def __init__(self, world: MockWorld):
        self.world = world

    def __call__(self, request: ScoreRequest) -> float:
        return mock_score(self.world, request)


def world_from_corpus(
    corpora: Sequence[Corpus],
    universe_size: int = DEFAULT_UNIVERSE,
    alpha: float = DEFAULT_ALPHA,
    rho: float = DEFAULT_RHO,
) -> MockWorld:
    """Rebuild a MockWorld from corpora whose outputs encode attribute sets.

    Synthetic records carry their ground truth in the output text as
    "attrs 3 7 12", so a world written to disk as corpus + query files can be
    rehydrated without a separate artifact. Raises ScorerError on outputs
    that do not parse.
    """
    attrs_by_text: dict[str, frozenset] = {}
    for corpus in corpora:
        for rec in corpus.records:
            parts = rec.output_text.split()
            if not parts or parts[0] != "attrs":
                raise ScorerError(
                    f"output of {rec.id!r} does not encode attributes: "
                    f"{rec.output_text!r}"
                )
            try:
                attrs = frozenset(int(p) for p in parts[1:])
            except ValueError:
                raise ScorerError(
                    f"output of {rec.id!r} has non-integer attributes"
                ) from None
            attrs_by_text[rec.input_text] = attrs
    return MockWorld(
        universe_size=universe_size,
        attributes=attrs_by_text,
        alpha=alpha,
        rho=rho,
    )


@dataclass(frozen=True)
class SyntheticWorld:
    """A generated corpus plus held-out queries sharing one attribute world."""

    corpus: Corpus
    embeddings: EmbeddingMatrix
    queries: Corpus
    query_embeddings: EmbeddingMatrix
    world: MockWorld


def make_world(
    num_examples: int,
    num_queries: int = 0,
    universe_size: int = DEFAULT_UNIVERSE,
    noise_dims: int = 8,
    noise_scale: float = 0.35,
    min_attrs: int = 2,
    max_attrs: int = 5,
    query_min_attrs: int | None = None,
    query_max_attrs: int | None = None,
    num_clusters: int = 0,
    cluster_scale: float = 1.0,
    attr_scale: float = 1.0,
    alpha: float = DEFAULT_ALPHA,
    rho: float = DEFAULT_RHO,
    seed: int = 0,
    entangle: bool = True,
    block_attrs: bool = False,
) -> SyntheticWorld:
    """Generate a synthetic corpus whose structure the mock oracle understands.

    Each item gets a random attribute subset. Its base feature vector is the
    multi-hot attribute indicator (scaled by attr_scale), an optional one-hot
    distractor cluster block, and a Gaussian noise tail, optionally mixed by
    a fixed random rotation so no single coordinate carries clean signal,
    then L2-normalized. With num_clusters > 0 and cluster_scale above
    attr_scale, untrained similarity is dominated by cluster identity, which
    the oracle ignores; training has to learn to reweight toward attributes.
    Queries are held out of the corpus but share the world and recipe.

    With block_attrs, the attribute universe is partitioned into one
    contiguous block per cluster and corpus items draw attributes only from
    their own cluster's block, so same-cluster items are redundant in
    exactly the attributes the oracle counts. Queries draw wider attribute
    sets spanning several blocks starting from a home cluster: similarity
    then herds top-k toward the home cluster while coverage demands picks
    across clusters, which is the regime a diversity-aware selector wins.
    """
    if num_examples <= 0:
        raise ScorerError("num_examples must be positive")
    if query_min_attrs is None:
        query_min_attrs = min_attrs
    if query_max_attrs is None:
        query_max_attrs = max_attrs
    for lo, hi in ((min_attrs, max_attrs), (query_min_attrs, query_max_attrs)):
        if not 1 <= lo <= hi <= universe_size:
            raise ScorerError("need 1 <= min_attrs <= max_attrs <= universe_size")
    if block_attrs and (num_clusters <= 0 or universe_size % num_clusters):
        raise ScorerError("block_attrs needs num_clusters to divide universe_size")
    block = universe_size // num_clusters if block_attrs else 0
    rng = np.random.default_rng(seed)
    total = num_examples + num_queries
    d_in = universe_size + num_clusters + noise_dims
    rotation = np.eye(d_in)
    if entangle:
        # fixed orthogonal mix so signal is recoverable but not axis-aligned
        raw = rng.normal(size=(d_in, d_in))
        rotation, _ = np.linalg.qr(raw)

    attrs_by_text = {}
    records = []
    features = np.zeros((total, d_in))
    for i in range(total):
        lo, hi = (
            (min_attrs, max_attrs)
            if i < num_examples
            else (query_min_attrs, query_max_attrs)
        )
        count = int(rng.integers(lo, hi + 1))
        cluster = int(rng.integers(num_clusters)) if num_clusters else -1
        if block_attrs:
            if i < num_examples:
                take = min(count, block)
                picks = cluster * block + rng.choice(block, size=take, replace=False)
                attrs = frozenset(picks.tolist())
            else:
                # home cluster first, then spill into others until count is met
                order = [cluster]
                order += [c for c in rng.permutation(num_clusters).tolist() if c != cluster]
                got: list[int] = []
                for c in order:
                    if len(got) >= count:
                        break
                    take = min(block, count - len(got))
                    got.extend((c * block + rng.choice(block, size=take, replace=False)).tolist())
                attrs = frozenset(got)
        else:
            attrs = frozenset(rng.choice(universe_size, size=count, replace=False).tolist())
        text = f"item {i:05d}"
        output = "attrs " + " ".join(str(a) for a in sorted(attrs))
        attrs_by_text[text] = attrs
        records.append(ExampleRecord(id=f"ex{i:05d}", input_text=text, output_text=output))
        vec = np.zeros(d_in)
        vec[sorted(attrs)] = attr_scale
        if num_clusters:
            vec[universe_size + cluster] = cluster_scale
        if noise_dims:
            vec[universe_size + num_clusters :] = noise_scale * rng.normal(size=noise_dims)
        features[i] = rotation @ vec
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    features = features / norms

    corpus = Corpus.from_records(records[:num_examples])
    embeddings = EmbeddingMatrix(ids=corpus.ids, data=features[:num_examples])
    queries = Corpus.from_records(records[num_examples:])
    query_embeddings = EmbeddingMatrix(ids=queries.ids, data=features[num_examples:])
    world = MockWorld(
        universe_size=universe_size,
        attributes=attrs_by_text,
        alpha=alpha,
        rho=rho,
    )
    return SyntheticWorld(
        corpus=corpus,
        embeddings=embeddings,
        queries=queries,
        query_embeddings=query_embeddings,
        world=world,
    )


class ScoreCache:
    """JSONL-backed score cache keyed by the canonical request hash.

    Offline (no remote): a miss raises CacheMissError naming the hash.
    Online (remote given): a miss forwards to the remote scorer and appends
    the result, so cached and remote values agree bit-exactly afterwards.
    """

    def __init__(self, path: str, remote: Scorer | None = None):
        self.path = path
        self.remote = remote
        self._scores: dict[str, float] = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        row = json.loads(line)
                        self._scores[str(row["hash"])] = float(row["score"])
                    except (ValueError, TypeError, KeyError) as exc:
                        raise ScorerError(
                            f"corrupt cache line {lineno} in {path}: {exc}"
                        ) from exc

    def __len__(self) -> int:
        return len(self._scores)

    def __call__(self, request: ScoreRequest) -> float:
        key = request_hash(request)
        if key in self._scores:
            return self._scores[key]
        if self.remote is None:
            raise CacheMissError(key)
        value = float(self.remote(request))
        self._scores[key] = value
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"hash": key, "score": value}) + "\n")
        return value


def remote_score(
    endpoint: str,
    request: ScoreRequest,
    timeout: float = 30.0,
    retries: int = 3,
    backoff: float = 0.5,
) -> float:
    """Score a request against the HTTP sidecar, retrying transport failures.

    Retries use exponential backoff and apply only to transport errors and
    5xx responses; 4xx responses and malformed bodies fail immediately.
    """
    import requests

    body = {
        "exemplars": [
            {"input": inp, "output": out} for inp, out in request.exemplars
        ],
        "query_input": request.query_input,
        "target_output": request.target_output,
    }
    url = endpoint.rstrip("/") + "/score"
    last_error: Exception | None = None
    for attempt in range(retries):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.RequestException as exc:
            last_error = exc
            if attempt + 1 < retries:
                time.sleep(backoff * (2.0 ** attempt))
            continue
        if resp.status_code >= 500:
            last_error = ScorerError(f"sidecar error {resp.status_code}")
            if attempt + 1 < retries:
                time.sleep(backoff * (2.0 ** attempt))
            continue
        if resp.status_code != 200:
            raise ScorerError(
                f"sidecar rejected request: {resp.status_code} {resp.text[:200]}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"sidecar returned non-JSON body: {exc}") from exc
        if not isinstance(payload, dict) or "log_likelihood" not in payload:
            raise ProtocolError("sidecar response missing log_likelihood")
        try:
            return float(payload["log_likelihood"])
        except (TypeError, ValueError) as exc:
            raise ProtocolError("sidecar log_likelihood is not a number") from exc
    raise ScorerError(
        f"sidecar unreachable after {retries} attempts: {last_error}"
    )


class RemoteScorer:
    """Scorer adapter around remote_score with fixed connection settings."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries

    def __call__(self, request: ScoreRequest) -> float:
        return remote_score(
            self.endpoint, request, timeout=self.timeout, retries=self.retries
        )


def score_many(
    scorer: Scorer,
    requests_in: Sequence[ScoreRequest],
    max_in_flight: int = 8,
) -> list:
    """Score a batch with bounded concurrency, preserving input order."""
    if max_in_flight <= 1 or len(requests_in) <= 1:
        return [scorer(req) for req in requests_in]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(scorer, requests_in))
