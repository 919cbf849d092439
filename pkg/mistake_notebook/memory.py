"""
The mistake notebook: an ordered store of structured guidance entries with
snapshot/rollback and canonical JSONL persistence.

The store has a single writer. Snapshots are immutable values and can be
handed to any reader.
"""
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional, Union

from pydantic import ValidationError

from mistake_notebook.errors import (
    DimensionMismatch,
    DuplicateSubject,
    InvalidEntry,
    IoFailure,
    MalformedLine,
    UnknownSubject,
    ZeroNorm,
)
from mistake_notebook.logger_config import get_logger
from mistake_notebook.schemas import GUIDANCE_FIELDS, GuidanceNote, MemoryEntry
from mistake_notebook.vectors import canonical_float, is_unit, l2_normalize

logger = get_logger(__name__)

PathLike = Union[str, Path]


def count_tokens(text: str) -> int:
    """Whitespace token count: a token is a maximal run of non-whitespace characters."""
    return len(text.split())


class MemoryStats(NamedTuple):
    entry_count: int
    avg_guidance_tokens: float


@dataclass(frozen=True)
class MemorySnapshot:
    """Frozen copy of a store's entries and version at capture time."""
    entries: tuple[MemoryEntry, ...]
    version: int
    dimension: Optional[int]


def entry_to_json(entry: MemoryEntry) -> str:
    """Canonical JSONL line for one entry (no trailing newline)."""
    guidance = {name: getattr(entry.guidance, name) for name in GUIDANCE_FIELDS}
    embedding = ", ".join(canonical_float(x) for x in entry.embedding)
    return (
        '{"subject": ' + json.dumps(entry.subject, ensure_ascii=False)
        + ', "guidance": ' + json.dumps(guidance, ensure_ascii=False)
        + ', "embedding": [' + embedding + ']}'
    )


def entry_from_json(line: str, line_no: int) -> MemoryEntry:
    """Parse one JSONL line into an entry, reporting problems by line number."""
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLine(line_no, f"invalid JSON ({e.msg})") from e

    if not isinstance(data, dict):
        raise MalformedLine(line_no, "expected a JSON object")
    missing = [key for key in ("subject", "guidance", "embedding") if key not in data]
    if missing:
        raise MalformedLine(line_no, f"missing keys {missing}")

    raw_embedding = data["embedding"]
    if not isinstance(raw_embedding, list) or not raw_embedding or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw_embedding
    ):
        raise MalformedLine(line_no, "embedding must be a non-empty list of numbers")

    try:
        embedding = raw_embedding if is_unit(raw_embedding) else l2_normalize(raw_embedding)
        guidance = GuidanceNote(**data["guidance"]) if isinstance(data["guidance"], dict) else None
        if guidance is None:
            raise MalformedLine(line_no, "guidance must be an object")
        return MemoryEntry(subject=data["subject"], guidance=guidance, embedding=embedding)
    except (ValidationError, TypeError, ZeroNorm) as e:
        raise MalformedLine(line_no, f"invalid entry ({e})") from e


def check_entry(entry: MemoryEntry) -> None:
    """
    Re-check the entry invariants; model_copy and model_construct skip the validators.

    Raises:
        InvalidEntry: On a blank or unstripped subject or a non-unit embedding
    """
    if not entry.subject or entry.subject != entry.subject.strip():
        logger.error(f"Invalid entry, bad subject: {entry.subject!r}")
        raise InvalidEntry(f"Entry subject must be non-empty and stripped: {entry.subject!r}")
    if not entry.embedding or not is_unit(entry.embedding):
        logger.error(f"Invalid entry {entry.subject!r}: embedding is not unit norm")
        raise InvalidEntry(f"Embedding of {entry.subject!r} must be a finite unit vector")


class MemoryStore:
    """
    Ordered mistake-notebook memory.

    Attributes:
        dimension: Embedding dimension; pinned by the first entry when None
        version: Counter bumped by every committed mutation
    """

    def __init__(self, dimension: Optional[int] = None):
        if dimension is not None and dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.version = 0
        self._entries: list[MemoryEntry] = []
        self._index: dict[str, int] = {}

    # ---- read access -------------------------------------------------

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(tuple(self._entries))

    def __getitem__(self, index: int) -> MemoryEntry:
        return self._entries[index]

    def __eq__(self, other: object) -> bool:
        """Stores are equal when their canonical serializations are equal."""
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return self.dimension == other.dimension and self.to_jsonl() == other.to_jsonl()

    def __repr__(self) -> str:
        return f"<MemoryStore(entries={len(self)}, dimension={self.dimension}, version={self.version})>"

    def index_of(self, subject: str) -> Optional[int]:
        return self._index.get(subject.strip())

    def subjects(self) -> list[str]:
        return [entry.subject for entry in self._entries]

    # ---- mutations ---------------------------------------------------

    def append_entry(self, entry: MemoryEntry) -> "MemoryStore":
        """
        Append a new node at the tail.

        Raises:
            InvalidEntry: If the entry skipped validation and breaks an entry invariant
            DuplicateSubject: If the subject is already stored
            DimensionMismatch: If the embedding dimension disagrees with the store
        """
        check_entry(entry)
        if entry.subject in self._index:
            logger.warning(f"Append rejected, duplicate subject: {entry.subject!r}")
            raise DuplicateSubject(entry.subject)
        if self.dimension is not None and entry.dimension != self.dimension:
            logger.error(f"Append rejected, dimension {entry.dimension} != {self.dimension}")
            raise DimensionMismatch(self.dimension, entry.dimension)

        if self.dimension is None:
            self.dimension = entry.dimension
        self._index[entry.subject] = len(self._entries)
        self._entries.append(entry)
        self.version += 1
        logger.debug(f"Appended entry {entry.subject!r} (size={len(self)}, version={self.version})")
        return self

    def replace_guidance(self, subject: str, merged: GuidanceNote) -> "MemoryStore":
        """
        Replace the guidance of an existing subject; subject and embedding stay.

        Raises:
            UnknownSubject: If no entry has this subject
        """
        index = self.index_of(subject)
        if index is None:
            logger.warning(f"Replace rejected, unknown subject: {subject!r}")
            raise UnknownSubject(subject)
        current = self._entries[index]
        self._entries[index] = current.model_copy(update={"guidance": merged})
        self.version += 1
        logger.debug(f"Replaced guidance of {subject!r} (version={self.version})")
        return self

    # ---- snapshot / restore -----------------------------------------

    def snapshot(self) -> MemorySnapshot:
        return MemorySnapshot(entries=tuple(self._entries), version=self.version, dimension=self.dimension)

    @classmethod
    def restore(cls, snapshot: MemorySnapshot) -> "MemoryStore":
        """Rebuild a store equal to the captured one, version included."""
        store = cls(dimension=snapshot.dimension)
        store._entries = list(snapshot.entries)
        store._index = {entry.subject: i for i, entry in enumerate(snapshot.entries)}
        store.version = snapshot.version
        return store

    def copy(self) -> "MemoryStore":
        return MemoryStore.restore(self.snapshot())

    # ---- persistence -------------------------------------------------

    def to_jsonl(self) -> str:
        return "".join(entry_to_json(entry) + "\n" for entry in self._entries)

    def save_jsonl(self, path: PathLike) -> None:
        """
        Write one canonical JSON object per line, in insertion order.

        Raises:
            IoFailure: If the file cannot be written
        """
        target = Path(path)
        temporary = target.with_name(target.name + ".tmp")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(temporary, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(self.to_jsonl())
            os.replace(temporary, target)
        except OSError as e:
            logger.error(f"Failed to save memory to {target}: {e}")
            raise IoFailure(f"Cannot write memory file {target}: {e}") from e
        logger.info(f"Saved memory: {len(self)} entries -> {target}")

    @classmethod
    def load_jsonl(cls, path: PathLike, dimension: Optional[int] = None) -> "MemoryStore":
        """
        Load a store written by save_jsonl.

        Raises:
            IoFailure: If the file cannot be read
            MalformedLine: If a line is not a valid entry
            DimensionMismatch: If embeddings have different dimensions
        """
        source = Path(path)
        try:
            text = source.read_text(encoding="utf-8")
        except OSError as e:
            logger.error(f"Failed to read memory from {source}: {e}")
            raise IoFailure(f"Cannot read memory file {source}: {e}") from e

        store = cls(dimension=dimension)
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            entry = entry_from_json(line, line_no)
            try:
                store.append_entry(entry)
            except DuplicateSubject as e:
                raise MalformedLine(line_no, str(e)) from e
        logger.info(f"Loaded memory: {len(store)} entries from {source}")
        return store

    # ---- accounting --------------------------------------------------

    def stats(self, tokenizer: Callable[[str], int] = count_tokens) -> MemoryStats:
        """Entry count and average guidance length in tokens."""
        if not self._entries:
            return MemoryStats(0, 0.0)
        total = sum(tokenizer(entry.guidance.full_text()) for entry in self._entries)
        return MemoryStats(len(self._entries), total / len(self._entries))
