"""
Shared fixtures for the test suite
"""
import pytest

from mistake_notebook.fixtures import FIXTURE_DIMENSION, ScriptBuilder, write_arithmetic_fixture
from mistake_notebook.gateway import ROLES, ModelGateway
from mistake_notebook.logger_config import reset_logging
from mistake_notebook.schemas import GuidanceNote, MemoryEntry


@pytest.fixture(autouse=True)
def clean_logging():
    """Every test starts and ends without package handlers."""
    reset_logging()
    yield
    reset_logging()


@pytest.fixture
def sample_note():
    return GuidanceNote(
        corrected_examples="Question: 7 mod 3. Mistake answer: 2.33. Correct answer: 1.",
        correct_approach="Divide, keep the integer quotient, subtract quotient times divisor.",
        mistake_summary="The real quotient was reported instead of the remainder.",
        generalizable_strategy="For a mod b return a - b * floor(a / b).",
        anti_patterns="Do not apply to questions that ask for a quotient.",
    )


@pytest.fixture
def make_entry(sample_note):
    """Build an entry from a subject and a raw (unnormalized) vector."""
    def _make(subject, vector, note=None):
        return MemoryEntry.create(subject, note or sample_note, vector)
    return _make


@pytest.fixture
def make_gateway():
    """Gateway whose every role is served by one scripted backend."""
    def _make(builder=None, dimension=FIXTURE_DIMENSION, max_in_flight=1, retry_count=0):
        backend = (builder or ScriptBuilder()).backend(dimension=dimension)
        return ModelGateway(
            {role: backend for role in ROLES},
            dimension=dimension,
            retry_counts={role: retry_count for role in ROLES},
            max_in_flight={role: max_in_flight for role in ROLES},
        )
    return _make


@pytest.fixture
def fixture_dir(tmp_path):
    """The shipped arithmetic fixture written to a temporary directory."""
    write_arithmetic_fixture(tmp_path / "fixture")
    return tmp_path / "fixture"
