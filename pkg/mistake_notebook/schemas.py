"""
Pydantic schemas for the notebook's domain types.
"""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mistake_notebook.vectors import NORM_TOLERANCE, is_unit, l2_normalize

GUIDANCE_FIELDS = (
    "corrected_examples",
    "correct_approach",
    "mistake_summary",
    "generalizable_strategy",
    "anti_patterns",
)

Regime = Literal["supervised", "self_evolution"]


# ============================================
# Memory Schemas
# ============================================

class GuidanceNote(BaseModel):
    """The five mandatory parts of a mistake note."""
    corrected_examples: str = Field(..., description="Mistake/answer pairs grounding the note")
    correct_approach: str = Field(..., description="Step-by-step method that should be applied")
    mistake_summary: str = Field(..., description="Root cause behind the errors")
    generalizable_strategy: str = Field(..., description="Reusable problem-solving pattern")
    anti_patterns: str = Field(..., description="Situations where the guidance must not be applied")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "example": {
                "corrected_examples": "Q: 17 mod 5. Mistake: 3.4. Correct: 2 (17 = 3*5 + 2).",
                "correct_approach": "Divide, keep the integer quotient, subtract quotient*divisor.",
                "mistake_summary": "Reported the real quotient instead of the remainder.",
                "generalizable_strategy": "For 'a mod b' always return a - b*floor(a/b).",
                "anti_patterns": "Do not apply to questions asking for a quotient or a ratio.",
            }
        }
    )

    @field_validator(*GUIDANCE_FIELDS)
    @classmethod
    def strip_and_require(cls, value: str) -> str:
        """Every part is stripped and must be non-empty."""
        value = value.strip()
        if not value:
            raise ValueError("guidance parts must be non-empty")
        return value

    def full_text(self) -> str:
        return "\n".join(getattr(self, name) for name in GUIDANCE_FIELDS)


class MemoryEntry(BaseModel):
    """One notebook node: subject, guidance and the subject's unit embedding."""
    subject: str = Field(..., min_length=1)
    guidance: GuidanceNote
    embedding: tuple[float, ...] = Field(..., min_length=1)

    model_config = ConfigDict(frozen=True)

    @field_validator("subject")
    @classmethod
    def strip_subject(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("subject must be non-empty")
        return value

    @model_validator(mode='after')
    def validate_unit_norm(self):
        """Embeddings are stored L2-normalized."""
        if not is_unit(self.embedding, NORM_TOLERANCE):
            raise ValueError("embedding must have unit L2 norm")
        return self

    @classmethod
    def create(cls, subject: str, guidance: GuidanceNote, embedding) -> "MemoryEntry":
        """Build an entry, normalizing the raw embedding first."""
        return cls(subject=subject, guidance=guidance, embedding=l2_normalize(embedding))

    @property
    def dimension(self) -> int:
        return len(self.embedding)


# ============================================
# Gateway Schemas
# ============================================

class Message(BaseModel):
    """Role-tagged chat message."""
    role: Literal["system", "user", "assistant"]
    content: str

    @model_validator(mode='after')
    def validate_content(self):
        if self.role in ("system", "user") and not self.content.strip():
            raise ValueError(f"{self.role} messages must have content")
        return self


class GenerationParams(BaseModel):
    """Decoding parameters sent with every completion."""
    temperature: float = Field(0.0, ge=0.0)
    presence_penalty: float = 1.5
    max_tokens: int = Field(8192, gt=0)
    seed: int = 42
    think_mode: bool = False

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "temperature": 0.0,
                "presence_penalty": 1.5,
                "max_tokens": 8192,
                "seed": 42,
                "think_mode": False,
            }
        }
    )


class JudgeVerdict(BaseModel):
    """Binary judge outcome."""
    success: bool
    reasoning: str = ""


# ============================================
# Retrieval and Evolution Schemas
# ============================================

class RetrievalConfig(BaseModel):
    """Retrieval and merge thresholds."""
    top_k: int = Field(1, ge=1)
    similarity_threshold: float = Field(0.6, ge=-1.0, le=1.0, alias="retrieval_threshold")
    merge_threshold: float = Field(0.85, ge=-1.0, le=1.0)

    model_config = ConfigDict(
        populate_by_name=True,
        extra="forbid",
        json_schema_extra={
            "example": {"top_k": 1, "retrieval_threshold": 0.6, "merge_threshold": 0.85}
        }
    )

    @model_validator(mode='after')
    def validate_thresholds(self):
        """Merging must be at least as strict as retrieval."""
        if self.merge_threshold < self.similarity_threshold:
            raise ValueError("merge_threshold must be >= retrieval_threshold")
        return self


class EvolutionConfig(BaseModel):
    """Batching and failure identification."""
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(1, ge=1)
    failure_threshold: float = 0.5
    regime: Regime = "supervised"

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {"batch_size": 16, "epochs": 1, "failure_threshold": 0.5, "regime": "supervised"}
        }
    )


class TaskInstance(BaseModel):
    """One query of the task distribution."""
    id: str = Field(..., min_length=1)
    question: str = Field(..., min_length=1)
    gold_answer: Optional[str] = Field(None, alias="answer")
    metadata: dict[str, str] = Field(default_factory=dict)

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    def without_gold(self) -> "TaskInstance":
        """Copy with the gold answer removed (self-evolution grading view)."""
        return self.model_copy(update={"gold_answer": None})


class GradeResult(BaseModel):
    """Reward in [0, 1] with optional judge reasoning."""
    reward: float = Field(..., ge=0.0, le=1.0)
    rationale: Optional[str] = None


class Trajectory(BaseModel):
    """One query's input, retrieved context, output and reward."""
    query_id: str
    question: str
    retrieved_context: str = ""
    output: str = ""
    reward: Optional[float] = Field(None, ge=0.0, le=1.0)
    phase: Literal["baseline", "regenerated", "eval"] = "baseline"
    rationale: Optional[str] = None
    applicability: Optional[str] = None
    error: Optional[str] = None

    @property
    def graded(self) -> bool:
        return self.reward is not None


class ClusterMember(BaseModel):
    """A failed query as seen by the tuner."""
    query_id: str
    question: str
    output: str
    gold_answer: Optional[str] = None
    rationale: Optional[str] = None


class SubjectCluster(BaseModel):
    """Failures of one batch sharing a tuner-assigned subject."""
    subject: str = Field(..., min_length=1)
    members: list[ClusterMember] = Field(..., min_length=1)


class ClusterRecord(BaseModel):
    """Ledger line item describing what happened to one cluster."""
    subject: str
    member_count: int
    action: Literal["merged", "appended", "dropped"]
    low_specificity: bool = False


class EvolutionReport(BaseModel):
    """Per-batch ledger record."""
    epoch: int = 0
    batch_index: int
    status: Literal["accepted", "rejected", "skipped", "aborted"]
    baseline_rewards: list[Optional[float]]
    regenerated_rewards: list[Optional[float]] = Field(default_factory=list)
    delta: int = 0
    accepted: bool = False
    failure_count: int = 0
    ungraded_count: int = 0
    clusters: list[ClusterRecord] = Field(default_factory=list)
    memory_size_after: int
    avg_guidance_tokens_after: float
    abort_reason: Optional[str] = None

    @model_validator(mode='after')
    def validate_gate(self):
        """A batch is accepted exactly when its net improvement is positive."""
        if self.accepted != (self.delta > 0):
            raise ValueError("accepted must equal (delta > 0)")
        if self.accepted != (self.status == "accepted"):
            raise ValueError("status 'accepted' must match the accepted flag")
        return self


# ============================================
# Simulation Schemas
# ============================================

class AdditiveRewardModel(BaseModel):
    """Reward change = shared effect mu + noise with standard deviation sigma."""
    mu: float = 0.5
    sigma: float = Field(1.0, gt=0.0)
    noise_kind: Literal["gaussian", "bounded-uniform"] = "gaussian"

    model_config = ConfigDict(extra="forbid")


class SimConfig(BaseModel):
    """Monte Carlo sweep settings."""
    model: AdditiveRewardModel = Field(default_factory=AdditiveRewardModel)
    cluster_sizes: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16], min_length=1)
    trials: int = Field(100_000, ge=1)
    seed: int = 42

    model_config = ConfigDict(extra="forbid")

    @field_validator("cluster_sizes")
    @classmethod
    def validate_sizes(cls, sizes: list[int]) -> list[int]:
        if any(size < 1 for size in sizes):
            raise ValueError("cluster sizes must be positive")
        if any(later <= earlier for earlier, later in zip(sizes, sizes[1:])):
            raise ValueError("cluster sizes must be strictly increasing")
        return sizes


class EvaluationReport(BaseModel):
    """Frozen-memory evaluation outcome."""
    task_count: int
    graded_count: int
    ungraded_count: int
    accuracy: float = Field(..., ge=0.0, le=1.0)
    memory_size: int
    avg_guidance_tokens: float
    rewards: list[Optional[float]] = Field(default_factory=list)
