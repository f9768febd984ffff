"""Example corpus loading, deduplication, and embedding alignment.

A corpus is an ordered, immutable list of (input, output) text records with
stable unique ids. Feature vectors live in a separate binary file so the same
corpus can be paired with embeddings from different encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusFormatError, DuplicateIdError, MissingIdError


@dataclass(frozen=True)
class ExampleRecord:
    """One (input text, output text) example with a stable id.

    output_text may be empty for query-only records; input_text never is.
    """

    id: str
    input_text: str
    output_text: str

    def __post_init__(self):
        if not self.id:
            raise CorpusFormatError("record id must be non-empty")
        if not self.input_text:
            raise CorpusFormatError(f"record {self.id!r}: input text must be non-empty")


@dataclass(frozen=True)
class Corpus:
    """Immutable ordered collection of records with an id index."""

    records: tuple[ExampleRecord, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_records(cls, records: Iterable[ExampleRecord]) -> "Corpus":
        recs = tuple(records)
        index: dict[str, int] = {}
        for pos, rec in enumerate(recs):
            if rec.id in index:
                raise DuplicateIdError(
                    f"duplicate id {rec.id!r} at positions {index[rec.id]} and {pos}"
                )
            index[rec.id] = pos
        return cls(records=recs, index=index)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, pos: int) -> ExampleRecord:
        return self.records[pos]

    def position(self, record_id: str) -> int:
        return self.index[record_id]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-major feature matrix aligned to corpus order.

    Rows are stored as float64; kernel math downstream requires double
    precision. Row i belongs to the record at corpus position i.
    """

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise CorpusFormatError("embedding data must be a 2-d matrix")
        if self.data.shape[0] != len(self.ids):
            raise CorpusFormatError(
                f"row count {self.data.shape[0]} does not match id count {len(self.ids)}"
            )
        if self.data.shape[1] == 0:
            raise CorpusFormatError("embedding dimension must be positive")

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSON Lines corpus: one {"id", "input", "output"} object per line.

    Records keep file order. Blank lines are rejected; duplicate ids name
    both offending lines.
    """
    path = Path(path)
    records: list[ExampleRecord] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                raise CorpusFormatError("blank line in corpus file", line=lineno)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError("expected a JSON object", line=lineno)
            missing = {"id", "input", "output"} - obj.keys()
            if missing:
                raise CorpusFormatError(
                    f"missing keys: {sorted(missing)}", line=lineno
                )
            rec_id = obj["id"]
            if not isinstance(rec_id, str):
                raise CorpusFormatError("id must be a string", line=lineno)
            if rec_id in seen:
                raise DuplicateIdError(
                    f"duplicate id {rec_id!r} on lines {seen[rec_id]} and {lineno}"
                )
            seen[rec_id] = lineno
            try:
                records.append(
                    ExampleRecord(id=rec_id, input_text=obj["input"], output_text=obj["output"])
                )
            except CorpusFormatError as exc:
                raise CorpusFormatError(str(exc), line=lineno) from exc
    return Corpus.from_records(records)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(
                json.dumps(
                    {"id": rec.id, "input": rec.input_text, "output": rec.output_text},
                    ensure_ascii=False,
                )
                + "\n"
            )


def dedup(corpus: Corpus) -> Corpus:
    """Collapse records with byte-identical (input_text, output_text) pairs.

    The first occurrence wins; relative order is otherwise preserved.
    Idempotent: dedup(dedup(c)) == dedup(c).
    """
    seen_pairs: set[tuple[str, str]] = set()
    kept: list[ExampleRecord] = []
    for rec in corpus.records:
        key = (rec.input_text, rec.output_text)
        if key in seen_pairs:
            continue
        seen_pairs.add(key)
        kept.append(rec)
    return Corpus.from_records(kept)


def write_embeddings(path: str | Path, ids: Sequence[str], data: np.ndarray) -> None:
    """Write an embedding file: JSON header line, then little-endian float32 rows."""
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] != len(ids):
        raise CorpusFormatError("data must be a 2-d matrix with one row per id")
    header = {"count": int(data.shape[0]), "dim": int(data.shape[1]), "ids": list(ids)}
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_embedding_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read an embedding file into (ids, float64 matrix) without any reordering."""
    path = Path(path)
    with path.open("rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"invalid embedding header: {exc}", line=1) from exc
        for key in ("count", "dim", "ids"):
            if key not in header:
                raise CorpusFormatError(f"embedding header missing {key!r}", line=1)
        count, dim, ids = header["count"], header["dim"], header["ids"]
        if dim <= 0:
            raise CorpusFormatError("embedding dimension must be positive", line=1)
        if len(ids) != count:
            raise CorpusFormatError(
                f"header count {count} does not match ids length {len(ids)}", line=1
            )
        payload = fh.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise CorpusFormatError(
            f"embedding payload holds {len(payload)} bytes, expected {expected} "
            f"({count} rows x {dim} dims x 4 bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    return list(ids), data


def attach_embeddings(corpus: Corpus, matrix_path: str | Path) -> EmbeddingMatrix:
    """Load embeddings and restrict/reorder rows to corpus order.

    The file ids must be a superset of corpus ids; extra rows are dropped.
    Row i of the result corresponds to corpus record i.
    """
    file_ids, data = read_embedding_file(matrix_path)
    pos_by_id = {rec_id: i for i, rec_id in enumerate(file_ids)}
    absent = [rec.id for rec in corpus.records if rec.id not in pos_by_id]
    if absent:
        raise MissingIdError(f"embedding file missing ids: {absent}")
    rows = np.array([pos_by_id[rec.id] for rec in corpus.records], dtype=np.intp)
    return EmbeddingMatrix(ids=tuple(corpus.ids), data=data[rows].copy())
