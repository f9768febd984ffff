"""A compact deterministic causal language model over raw bytes.

The model is an Elman-style recurrence with weights drawn once from a seed
derived from the model name, so a given name always denotes the same fixed
model: no files to download, no dropout, no sampling. Scoring runs in float64
and threads hidden state left to right, which makes target log-likelihoods
exactly decomposable across any byte boundary (teacher forcing).
"""
from __future__ import annotations

import zlib

import numpy as np

VOCAB = 257          # 256 byte values plus BOS
BOS = 256

_REGISTRY = {
    "byte-rnn-32": 32,
    "byte-rnn-64": 64,
}
DEFAULT_MODEL = "byte-rnn-32"


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted)))


class ByteLm:
    """Fixed-weight byte-level causal LM with deterministic embeddings."""

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim
        rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
        scale = 1.0 / np.sqrt(dim)
        self.E = rng.normal(scale=scale, size=(VOCAB, dim))
        self.W = rng.normal(scale=0.5 * scale, size=(dim, dim))
        self.U = rng.normal(scale=scale, size=(VOCAB, dim))

    @staticmethod
    def encode(text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def _step(self, h: np.ndarray, token: int) -> np.ndarray:
        return np.tanh(self.W @ h + self.E[token])

    def state_after(self, prompt: str) -> np.ndarray:
        """Hidden state after consuming BOS and the prompt bytes."""
        h = self._step(np.zeros(self.dim), BOS)
        for token in self.encode(prompt):
            h = self._step(h, token)
        return h

    def continuation_logprob(
        self, state: np.ndarray, target: str
    ) -> tuple[float, np.ndarray]:
        """Sum of target-byte log-probabilities from a threaded state.

        Returns the total and the state after the target, so successive
        calls teacher-force through a split target.
        """
        h = state
        total = 0.0
        for token in self.encode(target):
            total += float(_log_softmax(self.U @ h)[token])
            h = self._step(h, token)
        return total, h

    def score(self, prompt: str, target: str) -> tuple[float, int]:
        """Log-likelihood of target conditioned on prompt, and its token count."""
        tokens = self.encode(target)
        if not tokens:
            raise ValueError("target must encode to at least one token")
        total, _ = self.continuation_logprob(self.state_after(prompt), target)
        return total, len(tokens)

    def embed(self, text: str) -> np.ndarray:
        """L2-normalized mean of hidden states over BOS plus the text bytes."""
        h = self._step(np.zeros(self.dim), BOS)
        acc = h.copy()
        count = 1
        for token in self.encode(text):
            h = self._step(h, token)
            acc += h
            count += 1
        mean = acc / count
        norm = float(np.linalg.norm(mean))
        return mean / max(norm, 1e-12)


def load_model(name: str) -> ByteLm | None:
    """Instantiate a registered model; unknown names stay unloaded."""
    dim = _REGISTRY.get(name)
    if dim is None:
        return None
    return ByteLm(name, dim)
