"""
Exception hierarchy for the mistake-notebook engine.

Every error raised by the package derives from NotebookError so callers can
catch the whole family at the command-line boundary.
"""
from typing import Iterable, Optional


class NotebookError(Exception):
    """Base class for all package errors"""
    pass


class ConfigError(NotebookError):
    """Invalid run or simulation configuration"""
    pass


# ============================================
# Memory store
# ============================================

class DuplicateSubject(NotebookError):
    """Custom exception for appending a subject that already exists"""

    def __init__(self, subject: str):
        self.subject = subject
        super().__init__(f"Subject already present in memory: {subject!r}")


class UnknownSubject(NotebookError):
    """Custom exception for replacing guidance of a missing subject"""

    def __init__(self, subject: str):
        self.subject = subject
        super().__init__(f"Subject not found in memory: {subject!r}")


class DimensionMismatch(NotebookError):
    """Custom exception for vectors whose dimension disagrees with the store"""

    def __init__(self, expected: Optional[int], actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Embedding dimension mismatch: expected {expected}, got {actual}")


class InvalidEntry(NotebookError):
    """Custom exception for entries violating the memory invariants"""
    pass


class MalformedLine(NotebookError):
    """Custom exception for unparseable JSONL lines (1-based line number)"""

    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        self.reason = reason
        message = f"Malformed line {line_no}"
        if reason:
            message = f"{message}: {reason}"
        super().__init__(message)


class IoFailure(NotebookError):
    """Custom exception for unreadable or unwritable files"""
    pass


# ============================================
# Retrieval
# ============================================

class ZeroNorm(NotebookError):
    """Custom exception for cosine similarity on a zero vector"""
    pass


# ============================================
# Model gateway and prompts
# ============================================

class GatewayError(NotebookError):
    """Base class for model call failures"""
    retryable = False


class TransportFailure(GatewayError):
    """Network-level failure talking to a provider"""
    retryable = True


class GatewayTimeout(GatewayError):
    """Provider did not answer within the configured timeout"""
    retryable = True


class ProviderError(GatewayError):
    """Provider answered with an error status or an unusable body"""

    def __init__(self, status: Optional[int], body: str):
        self.status = status
        self.body = body
        super().__init__(f"Provider error (status={status}): {body}")


class UnboundPlaceholder(NotebookError):
    """Custom exception for rendering a template with a missing binding"""

    def __init__(self, name: str, template_id: str = ""):
        self.name = name
        self.template_id = template_id
        super().__init__(f"Unbound placeholder {{{name}}} in template {template_id!r}")


class ParseFailure(NotebookError):
    """Model output could not be parsed into the expected structure"""
    pass


class MissingAssignments(ParseFailure):
    """Cluster assignment omitted some of the batch's query ids"""

    def __init__(self, ids: Iterable[str]):
        self.ids = frozenset(ids)
        super().__init__(f"Cluster assignment missing ids: {sorted(self.ids)}")


class MissingSection(ParseFailure):
    """Guidance text lacks one of the five mandatory sections"""

    def __init__(self, name: str, reason: str = "not found"):
        self.name = name
        super().__init__(f"Guidance section {name!r} {reason}")


# ============================================
# Evolution and tasks
# ============================================

class LengthMismatch(NotebookError):
    """Reward vectors compared by net improvement differ in length"""
    pass


class DuplicateId(NotebookError):
    """Custom exception for task files repeating an id"""

    def __init__(self, task_id: str, line_no: int):
        self.task_id = task_id
        self.line_no = line_no
        super().__init__(f"Duplicate task id {task_id!r} on line {line_no}")


class RegimeError(NotebookError):
    """Dataset does not satisfy the learning regime's requirements"""
    pass
