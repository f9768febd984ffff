"""Training pipeline: scored subset instances, margin loss, and optimization.

The model is two linear projection towers over fixed base features. Tower
outputs are row-normalized, so the query-example inner product is a relevance
in [-1, 1] and the example gram matrix has unit diagonal. Subset scores are
unnormalized conditioned log-determinants; the loss compares their ordering
against oracle ranks with a margin scaled by the rank gap.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, EmbeddingMatrix
from .errors import (
    NonFiniteGradientError,
    TrainingDivergedError,
    TrainingError,
)
from .kernel import SubsetIndex
from .retrieval import CandidatePool, dense_topk
from .scoring import ScoreRequest, Scorer

C_FLOOR = 1e-6
NORM_FLOOR = 1e-12


def ranks_from_scores(scores: Sequence[float]) -> tuple[int, ...]:
    """Dense ranks, 1 = best, by descending score; ties by ascending index."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    ranks = [0] * len(scores)
    for position, j in enumerate(order):
        ranks[j] = position + 1
    return tuple(ranks)


@dataclass(frozen=True)
class TrainingInstance:
    """One anchor with a candidate pool and M oracle-scored subsets.

    Subsets index into the pool (0-based pool slots, not corpus positions).
    Pool slot order is descending base relevance, so slot 0 is the nearest
    candidate and subset 0 is conventionally the plain top-K subset.
    """

    anchor_position: int
    pool: CandidatePool
    subsets: tuple[SubsetIndex, ...]
    lm_scores: tuple[float, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        m = len(self.subsets)
        if m < 2:
            raise TrainingError("an instance needs at least two subsets")
        if not (len(self.lm_scores) == len(self.ranks) == m):
            raise TrainingError("subsets, lm_scores, and ranks must align")
        sizes = {len(s.members) for s in self.subsets}
        if len(sizes) != 1:
            raise TrainingError("all subsets must share one size K")
        n = len(self.pool)
        for s in self.subsets:
            if s.members[-1] >= n:
                raise TrainingError("subset member outside the pool")
        if self.ranks != ranks_from_scores(self.lm_scores):
            raise TrainingError("ranks are inconsistent with lm_scores")

    @property
    def subset_size(self) -> int:
        return len(self.subsets[0].members)


@dataclass
class ProjectionModel:
    """Two projection towers: W_in maps queries, W_ex maps examples."""

    W_in: np.ndarray
    W_ex: np.ndarray
    lam: float

    def __post_init__(self):
        self.W_in = np.asarray(self.W_in, dtype=np.float64)
        self.W_ex = np.asarray(self.W_ex, dtype=np.float64)
        if self.W_in.shape != self.W_ex.shape or self.W_in.ndim != 2:
            raise TrainingError("towers must share one (d_out, d_in) shape")
        if self.d_out > self.d_in:
            raise TrainingError("d_out must not exceed d_in")
        if not (np.all(np.isfinite(self.W_in)) and np.all(np.isfinite(self.W_ex))):
            raise TrainingError("tower weights must be finite")
        if not self.lam > 0:
            raise TrainingError("lambda must be positive")

    @property
    def d_out(self) -> int:
        return self.W_in.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_in.shape[1]

    def project_queries(self, X: np.ndarray) -> np.ndarray:
        return _normalize(np.asarray(X, dtype=np.float64) @ self.W_in.T)

    def project_examples(self, A: np.ndarray) -> np.ndarray:
        return _normalize(np.asarray(A, dtype=np.float64) @ self.W_ex.T)


def _normalize(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=-1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        raise TrainingError("projection collapsed a row to zero norm")
    return V / norms


def init_model(d_in: int, d_out: int | None = None, lam: float = 0.05) -> ProjectionModel:
    """Truncated-identity towers: untrained relevance equals base relevance."""
    if d_out is None:
        d_out = d_in
    W = np.eye(d_out, d_in)
    return ProjectionModel(W_in=W.copy(), W_ex=W.copy(), lam=lam)


def save_model(path: str, model: ProjectionModel) -> None:
    header = json.dumps(
        {"d_in": model.d_in, "d_out": model.d_out, "lambda": model.lam}
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.W_in, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.W_ex, dtype="<f4").tobytes())


def load_model(path: str) -> ProjectionModel:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            meta = json.loads(header.decode("utf-8"))
            d_in, d_out, lam = int(meta["d_in"]), int(meta["d_out"]), float(meta["lambda"])
        except (ValueError, KeyError) as exc:
            raise TrainingError(f"bad model header in {path}: {exc}") from exc
        count = d_out * d_in
        payload = fh.read()
    if len(payload) != 2 * count * 4:
        raise TrainingError(
            f"model payload is {len(payload)} bytes, expected {2 * count * 4}"
        )
    W_in = np.frombuffer(payload[: count * 4], dtype="<f4").astype(np.float64)
    W_ex = np.frombuffer(payload[count * 4 :], dtype="<f4").astype(np.float64)
    return ProjectionModel(
        W_in=W_in.reshape(d_out, d_in), W_ex=W_ex.reshape(d_out, d_in), lam=lam
    )


def exemplar_corpus_positions(
    instance: TrainingInstance, subset: SubsetIndex
) -> tuple[int, ...]:
    """Corpus positions of a subset's members, least relevant first.

    Pool slots are ordered by descending relevance, so ascending-similarity
    prompt order is descending slot order (most similar candidate last).
    """
    slots = sorted(subset.members, reverse=True)
    return tuple(instance.pool.member_positions[t] for t in slots)


def _score_request(
    corpus: Corpus, instance: TrainingInstance, subset: SubsetIndex
) -> ScoreRequest:
    anchor = corpus.records[instance.anchor_position]
    exemplars = tuple(
        (corpus.records[p].input_text, corpus.records[p].output_text)
        for p in exemplar_corpus_positions(instance, subset)
    )
    return ScoreRequest(
        exemplars=exemplars,
        query_input=anchor.input_text,
        target_output=anchor.output_text,
    )


def _sample_subsets(
    n: int, K: int, M: int, rng: np.random.Generator
) -> list[SubsetIndex]:
    """Subset 0 is the top-K slots; the rest are uniform distinct draws."""
    top = SubsetIndex.of(range(K))
    total = math.comb(n, K)
    if total < M:
        raise TrainingError(
            f"cannot draw {M} distinct subsets: C({n},{K}) = {total}"
        )
    chosen = [top]
    seen = {top.members}
    if total <= 4 * M or total <= 10000:
        # near-saturation: enumerate instead of rejection sampling
        universe = [c for c in combinations(range(n), K) if c != top.members]
        for idx in rng.permutation(len(universe))[: M - 1]:
            chosen.append(SubsetIndex(tuple(universe[idx])))
        return chosen
    while len(chosen) < M:
        draw = SubsetIndex.of(rng.choice(n, size=K, replace=False).tolist())
        if draw.members not in seen:
            seen.add(draw.members)
            chosen.append(draw)
    return chosen


def construct_training_data(
    corpus: Corpus,
    embeddings: EmbeddingMatrix,
    *,
    n: int,
    M: int,
    K: int,
    scorer: Scorer,
    seed: int = 0,
    anchor_positions: Sequence[int] | None = None,
    exclude_self: bool = True,
) -> list[TrainingInstance]:
    """Build scored instances: dense pool, top-K subset plus uniform draws.

    Deterministic in (corpus, embeddings, parameters, seed) for a
    deterministic scorer; each anchor draws from its own child generator so
    results do not depend on anchor iteration order.
    """
    size = len(corpus.records)
    if not 0 < n < size:
        raise TrainingError(f"pool size n={n} must satisfy 0 < n < corpus size {size}")
    if not 0 < K <= n:
        raise TrainingError(f"subset size K={K} must satisfy 0 < K <= n")
    if M < 2:
        raise TrainingError("M must be at least 2")
    if math.comb(n, K) < M:
        raise TrainingError(
            f"cannot draw {M} distinct subsets: C({n},{K}) = {math.comb(n, K)}"
        )
    anchors = (
        list(range(size)) if anchor_positions is None else list(anchor_positions)
    )
    instances = []
    for a in anchors:
        record = corpus.records[a]
        rng = np.random.default_rng([seed, a])
        pool = dense_topk(
            embeddings,
            embeddings.data[a],
            n,
            exclude=a if exclude_self else None,
            query_id=record.id,
        )
        subsets = tuple(_sample_subsets(n, K, M, rng))
        partial = TrainingInstance(
            anchor_position=a,
            pool=pool,
            subsets=subsets,
            lm_scores=tuple(float(j) for j in range(len(subsets), 0, -1)),
            ranks=tuple(range(1, len(subsets) + 1)),
        )
        scores = []
        for s in subsets:
            try:
                scores.append(float(scorer(_score_request(corpus, partial, s))))
            except Exception as exc:
                raise TrainingError(
                    f"scorer failed for anchor {record.id}: {exc}"
                ) from exc
        instances.append(
            TrainingInstance(
                anchor_position=a,
                pool=pool,
                subsets=subsets,
                lm_scores=tuple(scores),
                ranks=ranks_from_scores(scores),
            )
        )
    return instances


def save_training_instances(
    path: str, instances: Sequence[TrainingInstance], corpus: Corpus
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            row = {
                "anchor": corpus.records[inst.anchor_position].id,
                "pool": [corpus.records[p].id for p in inst.pool.member_positions],
                "subsets": [list(s.members) for s in inst.subsets],
                "scores": list(inst.lm_scores),
            }
            fh.write(json.dumps(row) + "\n")


def load_training_instances(path: str, corpus: Corpus) -> list[TrainingInstance]:
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                anchor = corpus.position(str(row["anchor"]))
                positions = tuple(corpus.position(str(i)) for i in row["pool"])
                subsets = tuple(
                    SubsetIndex.of([int(t) for t in s]) for s in row["subsets"]
                )
                scores = tuple(float(x) for x in row["scores"])
            except Exception as exc:
                raise TrainingError(
                    f"bad training instance at line {lineno} of {path}: {exc}"
                ) from exc
            pool = CandidatePool(
                query_id=str(row["anchor"]),
                member_positions=positions,
                relevance_order=positions,
            )
            instances.append(
                TrainingInstance(
                    anchor_position=anchor,
                    pool=pool,
                    subsets=subsets,
                    lm_scores=scores,
                    ranks=ranks_from_scores(scores),
                )
            )
    return instances


def pairwise_margin_loss(
    model_scores: Sequence[float], ranks: Sequence[int]
) -> float:
    """Hinge loss over all rank-ordered subset pairs.

    c = max - min of model scores (floored, treated as constant) normalizes
    score gaps; the margin for a pair grows with its rank gap over M. Zero
    iff every better-ranked subset outscores each worse one by its margin.
    """
    loss, _ = _loss_and_score_grad(np.asarray(model_scores, dtype=np.float64), ranks)
    return loss


def _loss_and_score_grad(
    scores: np.ndarray, ranks: Sequence[int], c_fixed: float | None = None
) -> tuple[float, np.ndarray]:
    # c_fixed pins the spread constant; finite-difference probes of the
    # stop-gradient loss must evaluate with c frozen at the base point
    m = len(scores)
    if m < 2:
        raise TrainingError("need at least two subsets for the pairwise loss")
    if sorted(ranks) != list(range(1, m + 1)):
        raise TrainingError("ranks must be a permutation of 1..M")
    order = sorted(range(m), key=lambda j: ranks[j])
    s = scores[np.asarray(order)]
    if c_fixed is None:
        c = max(float(np.max(scores) - np.min(scores)), C_FLOOR)
    else:
        c = float(c_fixed)
    # terms[t, u] for t < u: worse-ranked u versus better-ranked t
    gap = (s[None, :] - s[:, None]) / c
    margin = (np.arange(m)[None, :] - np.arange(m)[:, None]) / float(m)
    terms = np.triu(gap + margin, k=1)
    active = np.triu((gap + margin) > 0.0, k=1)
    loss = float(np.sum(terms[active])) if np.any(active) else 0.0
    g_sorted = (active.sum(axis=0) - active.sum(axis=1)) / c
    grad = np.zeros(m)
    grad[np.asarray(order)] = g_sorted
    return loss, grad


@dataclass(frozen=True)
class InstanceForward:
    """Model scores for one instance plus what the backward pass reuses."""

    scores: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    u_norm: float
    v_norms: np.ndarray
    singular: bool


def instance_forward(
    model: ProjectionModel,
    embeddings: EmbeddingMatrix,
    instance: TrainingInstance,
    lam: float | None = None,
) -> InstanceForward | None:
    """Score every subset of the instance; None when degenerate.

    Scores are the conditioned log-determinants in decomposed form:
    sum of member relevances over lambda plus log det of the projected gram
    restriction. Returns None when a projection collapses or any subset
    restriction is singular, so callers can skip and count.
    """
    lam = model.lam if lam is None else float(lam)
    x = embeddings.data[instance.anchor_position]
    A = embeddings.data[np.asarray(instance.pool.member_positions, dtype=np.intp)]
    u = model.W_in @ x
    u_norm = float(np.linalg.norm(u))
    V = A @ model.W_ex.T
    v_norms = np.linalg.norm(V, axis=1)
    if u_norm < NORM_FLOOR or np.any(v_norms < NORM_FLOOR):
        return None
    psi = u / u_norm
    phi = V / v_norms[:, None]
    r = phi @ psi
    scores = np.zeros(len(instance.subsets))
    for j, subset in enumerate(instance.subsets):
        idx = np.asarray(subset.members, dtype=np.intp)
        gram = phi[idx] @ phi[idx].T
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            return None
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        scores[j] = float(np.sum(r[idx])) / lam + logdet
    return InstanceForward(
        scores=scores,
        psi=psi,
        phi=phi,
        u_norm=u_norm,
        v_norms=v_norms,
        singular=False,
    )


@dataclass(frozen=True)
class GradientResult:
    loss: float
    grad_W_in: np.ndarray
    grad_W_ex: np.ndarray
    skipped: bool


def loss_gradient(
    model: ProjectionModel,
    embeddings: EmbeddingMatrix,
    instance: TrainingInstance,
    lam: float | None = None,
) -> GradientResult:
    """Analytic gradients of the pairwise loss through the log-determinants.

    The spread constant c is treated as fixed (no gradient) and the hinge
    subgradient at the kink is zero. Degenerate instances (singular subset
    restriction or collapsed projection) come back with skipped=True and
    zero gradients rather than raising.
    """
    lam = model.lam if lam is None else float(lam)
    zero = (np.zeros_like(model.W_in), np.zeros_like(model.W_ex))
    fwd = instance_forward(model, embeddings, instance, lam)
    if fwd is None:
        return GradientResult(math.nan, zero[0], zero[1], skipped=True)
    loss, g_scores = _loss_and_score_grad(fwd.scores, instance.ranks)
    if not np.any(g_scores):
        return GradientResult(loss, zero[0], zero[1], skipped=False)

    x = embeddings.data[instance.anchor_position]
    A = embeddings.data[np.asarray(instance.pool.member_positions, dtype=np.intp)]
    phi, psi = fwd.phi, fwd.psi
    d_phi = np.zeros_like(phi)
    d_psi = np.zeros_like(psi)
    for j, subset in enumerate(instance.subsets):
        g = g_scores[j]
        if g == 0.0:
            continue
        idx = np.asarray(subset.members, dtype=np.intp)
        phi_s = phi[idx]
        gram = phi_s @ phi_s.T
        # d logdet(gram)/d phi_s = 2 * gram^{-1} phi_s
        d_phi[idx] += g * (psi[None, :] / lam + 2.0 * np.linalg.solve(gram, phi_s))
        d_psi += (g / lam) * phi_s.sum(axis=0)

    # backprop through row normalization phi = v/|v|, psi = u/|u|
    d_V = (d_phi - np.sum(d_phi * phi, axis=1, keepdims=True) * phi) / fwd.v_norms[:, None]
    d_u = (d_psi - float(d_psi @ psi) * psi) / fwd.u_norm
    grad_W_ex = d_V.T @ A
    grad_W_in = np.outer(d_u, x)
    return GradientResult(loss, grad_W_in, grad_W_ex, skipped=False)


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a named parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> dict:
    """One standard Adam update; returns new parameters, mutates state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
    state.step += 1
    t = state.step
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        updated[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


@dataclass(frozen=True)
class TrainResult:
    model: ProjectionModel
    loss_curve: tuple[float, ...]
    lam: float
    val_losses: Mapping[float, float]
    skipped: int


def _mean_loss(
    model: ProjectionModel,
    embeddings: EmbeddingMatrix,
    instances: Sequence[TrainingInstance],
    lam: float,
) -> float:
    losses = []
    for inst in instances:
        fwd = instance_forward(model, embeddings, inst, lam)
        if fwd is not None:
            losses.append(_loss_and_score_grad(fwd.scores, inst.ranks)[0])
    return float(np.mean(losses)) if losses else math.inf


def _train_single(
    embeddings: EmbeddingMatrix,
    instances: Sequence[TrainingInstance],
    *,
    lam: float,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    d_out: int | None,
) -> tuple[ProjectionModel, tuple[float, ...], int]:
    model = init_model(embeddings.dim, d_out, lam)
    params = {"W_in": model.W_in, "W_ex": model.W_ex}
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    skipped = 0

    def current() -> ProjectionModel:
        return ProjectionModel(W_in=params["W_in"], W_ex=params["W_ex"], lam=lam)

    curve = [_mean_loss(current(), embeddings, instances, lam)]
    high_epochs = 0
    for _ in range(epochs):
        order = rng.permutation(len(instances))
        for start in range(0, len(order), batch_size):
            batch = [instances[i] for i in order[start : start + batch_size]]
            g_in = np.zeros_like(params["W_in"])
            g_ex = np.zeros_like(params["W_ex"])
            used = 0
            snapshot = current()
            for inst in batch:
                res = loss_gradient(snapshot, embeddings, inst, lam)
                if res.skipped:
                    skipped += 1
                    continue
                g_in += res.grad_W_in
                g_ex += res.grad_W_ex
                used += 1
            if used == 0:
                continue
            params = adam_step(
                state, params, {"W_in": g_in / used, "W_ex": g_ex / used}
            )
        epoch_loss = _mean_loss(current(), embeddings, instances, lam)
        curve.append(epoch_loss)
        baseline = curve[0] if math.isfinite(curve[0]) else 1.0
        if epoch_loss > 10.0 * max(baseline, C_FLOOR):
            high_epochs += 1
            if high_epochs >= 2:
                raise TrainingDivergedError(
                    f"mean loss {epoch_loss:.4g} above 10x initial for 2 epochs"
                )
        else:
            high_epochs = 0
    return current(), tuple(curve), skipped


def train(
    corpus: Corpus,
    embeddings: EmbeddingMatrix,
    instances: Sequence[TrainingInstance],
    *,
    lambda_grid: Sequence[float] = (0.01, 0.05, 0.1),
    epochs: int = 30,
    batch_size: int = 128,
    lr: float = 1e-5,
    seed: int = 0,
    d_out: int | None = None,
    val_fraction: float = 0.2,
) -> TrainResult:
    """Sweep the lambda grid with a validation split, then fit the winner.

    The returned loss curve has epochs + 1 entries; entry 0 is the
    pre-update baseline on the full instance set.
    """
    if not instances:
        raise TrainingError("no training instances")
    if not lambda_grid:
        raise TrainingError("lambda_grid must be non-empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(instances))
    n_val = int(len(instances) * val_fraction) if len(instances) >= 5 else 0
    val = [instances[i] for i in order[:n_val]]
    fit = [instances[i] for i in order[n_val:]]

    val_losses: dict[float, float] = {}
    if len(lambda_grid) == 1:
        chosen = float(lambda_grid[0])
    else:
        for lam in lambda_grid:
            lam = float(lam)
            try:
                model, _, _ = _train_single(
                    embeddings,
                    fit,
                    lam=lam,
                    epochs=epochs,
                    batch_size=batch_size,
                    lr=lr,
                    seed=seed,
                    d_out=d_out,
                )
            except TrainingDivergedError:
                val_losses[lam] = math.inf
                continue
            holdout = val if val else fit
            val_losses[lam] = _mean_loss(model, embeddings, holdout, lam)
        finite = [lam for lam in val_losses if math.isfinite(val_losses[lam])]
        if not finite:
            raise TrainingDivergedError("every lambda in the grid diverged")
        chosen = min(finite, key=lambda lam: (val_losses[lam], lam))

    model, curve, skipped = _train_single(
        embeddings,
        list(instances),
        lam=chosen,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        seed=seed,
        d_out=d_out,
    )
    return TrainResult(
        model=model,
        loss_curve=curve,
        lam=chosen,
        val_losses=val_losses,
        skipped=skipped,
    )


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank of a list of 1-based ranks."""
    if not ranks:
        raise TrainingError("mrr of an empty list")
    for rank in ranks:
        if rank < 1:
            raise TrainingError(f"ranks must be >= 1, got {rank}")
    return float(sum(1.0 / rank for rank in ranks) / len(ranks))
