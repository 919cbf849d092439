"""
Unit tests for the memory store
Covers append/replace, snapshot/restore, JSONL persistence and stats
"""
import json
import random

import pytest

from mistake_notebook.errors import (
    DimensionMismatch,
    DuplicateSubject,
    InvalidEntry,
    IoFailure,
    MalformedLine,
    UnknownSubject,
)
from mistake_notebook.memory import MemoryStore, count_tokens, entry_to_json
from mistake_notebook.schemas import GuidanceNote


def note_with_tokens(count, word="tok"):
    """Guidance whose five fields total `count` whitespace tokens (count >= 5)."""
    words = [word] * count
    parts = [words[0:1], words[1:2], words[2:3], words[3:4], words[4:]]
    return GuidanceNote(
        corrected_examples=" ".join(parts[0]),
        correct_approach=" ".join(parts[1]),
        mistake_summary=" ".join(parts[2]),
        generalizable_strategy=" ".join(parts[3]),
        anti_patterns=" ".join(parts[4]),
    )


@pytest.mark.unit
class TestAppendEntry:
    """Test cases for append_entry"""

    def test_append_to_empty_store(self, make_entry):
        """Empty store + entry gives size 1, version 1"""
        store = MemoryStore()
        store.append_entry(make_entry("A", [1.0, 0.0]))
        assert len(store) == 1
        assert store.version == 1
        assert store.dimension == 2

    def test_append_duplicate_subject(self, make_entry):
        """Same subject twice raises DuplicateSubject"""
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))
        with pytest.raises(DuplicateSubject):
            store.append_entry(make_entry("A", [0.0, 1.0]))
        assert len(store) == 1
        assert store.version == 1

    def test_append_dimension_mismatch(self, make_entry):
        """Entries must match the store dimension"""
        store = MemoryStore(dimension=3)
        with pytest.raises(DimensionMismatch):
            store.append_entry(make_entry("A", [1.0, 0.0]))

    def test_append_fifty(self, make_entry):
        """49 entries + 1 gives 50"""
        store = MemoryStore()
        for i in range(49):
            store.append_entry(make_entry(f"subject {i}", [1.0, float(i)]))
        store.append_entry(make_entry("last", [0.0, 1.0]))
        assert len(store) == 50
        assert store.subjects()[-1] == "last"

    def test_embeddings_are_unit_norm(self, make_entry):
        """Entries are normalized at ingestion"""
        entry = make_entry("A", [3.0, 4.0])
        assert entry.embedding == pytest.approx((0.6, 0.8))

    def test_unvalidated_entry_rejected(self, make_entry):
        """Copies that skip the validators cannot break the store invariants"""
        store = MemoryStore()
        valid = make_entry("A", [1.0, 0.0])
        for bad in (
            valid.model_copy(update={"embedding": (3.0, 4.0)}),
            valid.model_copy(update={"embedding": (float("nan"), 0.0)}),
            valid.model_copy(update={"subject": "  "}),
            valid.model_copy(update={"subject": " A "}),
        ):
            with pytest.raises(InvalidEntry):
                store.append_entry(bad)
        assert len(store) == 0
        assert store.version == 0
        assert store.dimension is None


@pytest.mark.unit
class TestReplaceGuidance:
    """Test cases for replace_guidance"""

    def test_replace_existing(self, make_entry, sample_note):
        """Replacement keeps size, subject and embedding"""
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))
        new_note = sample_note.model_copy(update={"anti_patterns": "Never for quotients."})
        store.replace_guidance("A", new_note)
        assert len(store) == 1
        assert store[0].guidance.anti_patterns == "Never for quotients."
        assert store[0].embedding == (1.0, 0.0)

    def test_replace_unknown(self, sample_note):
        """Replacing an absent subject raises UnknownSubject"""
        with pytest.raises(UnknownSubject):
            MemoryStore().replace_guidance("missing", sample_note)

    def test_two_replaces_bump_version_twice(self, make_entry, sample_note):
        """Each committed mutation increases the version"""
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))
        before = store.version
        store.replace_guidance("A", sample_note)
        store.replace_guidance("A", sample_note)
        assert store.version == before + 2


@pytest.mark.unit
class TestSnapshotRestore:
    """Test cases for snapshot and restore"""

    def test_restore_undoes_mutation(self, make_entry):
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))
        snapshot = store.snapshot()
        store.append_entry(make_entry("B", [0.0, 1.0]))
        restored = MemoryStore.restore(snapshot)
        assert len(restored) == 1
        assert restored.version == snapshot.version
        assert restored == MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))

    def test_snapshot_of_empty_store(self):
        restored = MemoryStore.restore(MemoryStore().snapshot())
        assert len(restored) == 0
        assert restored.version == 0

    def test_replay_after_restore_is_deterministic(self, make_entry):
        """snapshot, append 3, restore, re-append the same 3 gives an equal store"""
        store = MemoryStore().append_entry(make_entry("base", [1.0, 1.0]))
        snapshot = store.snapshot()
        entries = [make_entry(f"s{i}", [float(i), 1.0]) for i in range(3)]
        for entry in entries:
            store.append_entry(entry)
        replay = MemoryStore.restore(snapshot)
        for entry in entries:
            replay.append_entry(entry)
        assert replay.to_jsonl() == store.to_jsonl()
        assert replay.version == store.version

    def test_snapshot_is_immutable(self, make_entry):
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0]))
        snapshot = store.snapshot()
        store.append_entry(make_entry("B", [0.0, 1.0]))
        assert len(snapshot.entries) == 1
        with pytest.raises(AttributeError):
            snapshot.version = 7


@pytest.mark.unit
class TestPersistence:
    """Test cases for JSONL save/load"""

    def test_round_trip(self, tmp_path, make_entry):
        store = MemoryStore()
        for i, vector in enumerate(([1.0, 0.0, 0.0], [0.3, 0.4, 0.5], [-1.0, 2.0, 0.5])):
            store.append_entry(make_entry(f"subject {i}", vector))
        path = tmp_path / "memory.jsonl"
        store.save_jsonl(path)
        loaded = MemoryStore.load_jsonl(path)
        assert loaded == store
        assert path.read_text(encoding="utf-8") == loaded.to_jsonl()

    def test_line_schema(self, make_entry):
        line = json.loads(entry_to_json(make_entry("A", [1.0, 0.0])))
        assert list(line) == ["subject", "guidance", "embedding"]
        assert set(line["guidance"]) == {
            "corrected_examples", "correct_approach", "mistake_summary",
            "generalizable_strategy", "anti_patterns",
        }

    def test_truncated_line(self, tmp_path, make_entry):
        """A truncated second line reports MalformedLine(2)"""
        store = MemoryStore().append_entry(make_entry("A", [1.0, 0.0])).append_entry(make_entry("B", [0.0, 1.0]))
        lines = store.to_jsonl().splitlines()
        path = tmp_path / "memory.jsonl"
        path.write_text(lines[0] + "\n" + lines[1][:25] + "\n", encoding="utf-8")
        with pytest.raises(MalformedLine) as exc_info:
            MemoryStore.load_jsonl(path)
        assert exc_info.value.line_no == 2

    def test_mixed_dimensions(self, tmp_path, make_entry):
        lines = entry_to_json(make_entry("A", [1.0, 0.0])) + "\n" + entry_to_json(make_entry("B", [0.0, 1.0, 0.0])) + "\n"
        path = tmp_path / "memory.jsonl"
        path.write_text(lines, encoding="utf-8")
        with pytest.raises(DimensionMismatch):
            MemoryStore.load_jsonl(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            MemoryStore.load_jsonl(tmp_path / "absent.jsonl")

    def test_empty_file_loads_empty_store(self, tmp_path):
        path = tmp_path / "memory.jsonl"
        path.write_text("", encoding="utf-8")
        assert len(MemoryStore.load_jsonl(path)) == 0

    def test_entry_count_equals_line_count(self, tmp_path, make_entry):
        store = MemoryStore()
        for i in range(4):
            store.append_entry(make_entry(f"s{i}", [1.0, float(i)]))
        path = tmp_path / "memory.jsonl"
        store.save_jsonl(path)
        assert store.stats().entry_count == len(path.read_text(encoding="utf-8").splitlines())

    @pytest.mark.slow
    def test_random_sequences_preserve_invariants(self, tmp_path, make_entry, sample_note):
        """Random append/merge/snapshot/restore sequences keep round trip and uniqueness after every step"""
        rng = random.Random(7)
        path = tmp_path / "memory.jsonl"
        store = MemoryStore()
        snapshot = store.snapshot()
        for step in range(500):
            action = rng.choice(["append", "append", "replace", "snapshot", "restore"])
            if action == "append":
                subject = f"subject {rng.randrange(60)}"
                if store.index_of(subject) is None:
                    store.append_entry(make_entry(subject, [rng.uniform(-1, 1) for _ in range(4)] + [1.0]))
            elif action == "replace" and len(store):
                subject = rng.choice(store.subjects())
                store.replace_guidance(subject, sample_note.model_copy(update={"mistake_summary": f"step {step}"}))
            elif action == "snapshot":
                snapshot = store.snapshot()
            elif action == "restore":
                store = MemoryStore.restore(snapshot)

            assert len(set(store.subjects())) == len(store)
            store.save_jsonl(path)
            loaded = MemoryStore.load_jsonl(path, dimension=store.dimension)
            assert loaded == store, f"round trip broken after step {step} ({action})"
            assert path.read_text(encoding="utf-8") == store.to_jsonl()


@pytest.mark.unit
class TestStats:
    """Test cases for stats"""

    def test_empty_store(self):
        assert MemoryStore().stats() == (0, 0.0)

    def test_average_tokens(self, make_entry):
        """Entries of 10 and 30 tokens average 20"""
        store = MemoryStore()
        store.append_entry(make_entry("A", [1.0, 0.0], note_with_tokens(10)))
        store.append_entry(make_entry("B", [0.0, 1.0], note_with_tokens(30)))
        assert store.stats() == (2, 20.0)

    def test_count_tokens(self):
        assert count_tokens("  a  b\tc\nd ") == 4
        assert count_tokens("") == 0
