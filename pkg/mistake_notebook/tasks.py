"""
Task ingestion and grading.

Supervised runs grade by normalized exact match against gold; self-evolution
runs ask a binary LLM judge and never see the gold answer. SQL execution
accuracy is delegated to an external executor command.
"""
import json
import re
import subprocess
from abc import ABC, abstractmethod
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Union

from pydantic import ValidationError

from mistake_notebook.errors import DuplicateId, IoFailure, MalformedLine, ParseFailure, RegimeError
from mistake_notebook.logger_config import get_logger
from mistake_notebook.prompts import build_judge_prompt, parse_verdict_binary
from mistake_notebook.schemas import GradeResult, TaskInstance

if TYPE_CHECKING:
    from mistake_notebook.config import GraderConfig
    from mistake_notebook.gateway import ModelGateway

logger = get_logger(__name__)

JUDGE_ATTEMPTS = 2


# ============================================
# Loading
# ============================================

def load_tasks(path: Union[str, Path]) -> list[TaskInstance]:
    """
    Load a task JSONL file: {"id", "question", "answer"?, "metadata"?} per line.

    Raises:
        IoFailure: If the file cannot be read
        MalformedLine: If a line is not a valid task
        DuplicateId: If an id repeats
    """
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as e:
        logger.error(f"Cannot read tasks from {source}: {e}")
        raise IoFailure(f"Cannot read task file {source}: {e}") from e

    tasks: list[TaskInstance] = []
    seen: set[str] = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLine(line_no, f"invalid JSON ({e.msg})") from e
        if not isinstance(record, dict):
            raise MalformedLine(line_no, "expected a JSON object")
        if isinstance(record.get("id"), int):
            record["id"] = str(record["id"])
        try:
            task = TaskInstance.model_validate(record)
        except ValidationError as e:
            raise MalformedLine(line_no, f"invalid task ({e.error_count()} errors)") from e
        if task.id in seen:
            logger.error(f"Duplicate task id {task.id!r} on line {line_no} of {source}")
            raise DuplicateId(task.id, line_no)
        seen.add(task.id)
        tasks.append(task)

    logger.info(f"Loaded {len(tasks)} tasks from {source}")
    return tasks


def require_gold(tasks: Sequence[TaskInstance]) -> None:
    """
    Supervised runs need a gold answer on every task.

    Raises:
        RegimeError: Naming the tasks without one
    """
    missing = [task.id for task in tasks if task.gold_answer is None]
    if missing:
        logger.error(f"Supervised regime but {len(missing)} tasks lack an answer")
        raise RegimeError(f"Supervised regime requires 'answer' on every task; missing: {missing[:10]}")


# ============================================
# Exact match
# ============================================

_ANSWER_IS = re.compile(r"answer\s+is\s*:?\s*(?P<answer>[^\n]+)", re.IGNORECASE)
_FRAC = re.compile(r"\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}")
_NUMBER = re.compile(r"[-+]?(\d{1,3}(,\d{3})+|\d+)(\.\d+)?")
# spaces next to an operator or bracket; whitespace between two numbers stays
_OPERATOR_SPACE = re.compile(r"\s*([()+\-*/^,])\s*")


def _last_boxed(text: str) -> Optional[str]:
    """Content of the last \\boxed{...}, following balanced braces."""
    tag = "\\boxed{"
    start = text.rfind(tag)
    if start == -1:
        return None
    depth = 1
    for position in range(start + len(tag), len(text)):
        if text[position] == "{":
            depth += 1
        elif text[position] == "}":
            depth -= 1
            if depth == 0:
                return text[start + len(tag):position]
    return None


def extract_final_answer(text: str) -> Optional[str]:
    """
    Final answer of a model output: the last boxed span, else the last
    "answer is" span, else the last non-empty line.
    """
    boxed = _last_boxed(text)
    if boxed is not None and boxed.strip():
        return boxed.strip()
    matches = list(_ANSWER_IS.finditer(text))
    if matches:
        return matches[-1].group("answer").strip()
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    return lines[-1] if lines else None


def normalize_answer(text: str) -> str:
    """
    Case and whitespace folding plus rational-number canonicalization:
    "42.0", " 42 " and "84/2" all normalize to "42".
    """
    value = text.replace("$", "").strip()
    value = _FRAC.sub(r"(\1)/(\2)", value)
    value = " ".join(value.casefold().split())
    value = value.rstrip(".").strip()

    candidate = _OPERATOR_SPACE.sub(r"\1", value)
    if re.search(r"\s", candidate):
        return value
    candidate = candidate.replace("(", "").replace(")", "")
    if _NUMBER.fullmatch(candidate):
        candidate = candidate.replace(",", "")
    try:
        number = Fraction(candidate)
    except (ValueError, ZeroDivisionError):
        return value
    if number.denominator == 1:
        return str(number.numerator)
    return f"{number.numerator}/{number.denominator}"


def grade_exact(output: str, gold: str) -> GradeResult:
    """Reward 1 iff the normalized final answer equals the normalized gold."""
    answer = extract_final_answer(output)
    if answer is None:
        return GradeResult(reward=0.0, rationale="no answer found")
    matched = normalize_answer(answer) == normalize_answer(gold)
    return GradeResult(reward=1.0 if matched else 0.0)


# ============================================
# Judge
# ============================================

def grade_by_judge(
    question: str,
    trajectory_text: str,
    gateway: "ModelGateway",
    template: str = "single_trajectory",
) -> Optional[GradeResult]:
    """
    Binary judge reward with judge reasoning as rationale.

    An unparseable verdict is retried once with the identical prompt; a
    second failure returns None (ungraded). Gateway errors propagate.
    """
    prompt = build_judge_prompt(template, question, trajectory_text)
    for attempt in range(1, JUDGE_ATTEMPTS + 1):
        raw = gateway.complete("judge", prompt.messages, template_id=prompt.template_id)
        try:
            verdict = parse_verdict_binary(raw)
        except ParseFailure as e:
            logger.warning(f"Judge verdict unparseable (attempt {attempt}/{JUDGE_ATTEMPTS}): {e}")
            continue
        return GradeResult(reward=1.0 if verdict.success else 0.0, rationale=verdict.reasoning or None)
    return None


# ============================================
# Graders
# ============================================

class Grader(ABC):
    """Abstract base class for reward functions R(output, task)."""

    needs_gold = False

    @abstractmethod
    def grade(self, task: TaskInstance, output: str) -> Optional[GradeResult]:
        """
        Grade one output.

        Returns:
            GradeResult, or None when the item cannot be graded
        """
        pass


class ExactMatchGrader(Grader):
    needs_gold = True

    def grade(self, task: TaskInstance, output: str) -> Optional[GradeResult]:
        if task.gold_answer is None:
            raise RegimeError(f"Task {task.id!r} has no gold answer for exact-match grading")
        return grade_exact(output, task.gold_answer)


class JudgeGrader(Grader):
    """Self-evolution grader; only the question and the output reach the judge."""

    def __init__(self, gateway: "ModelGateway", template: str = "single_trajectory"):
        self.gateway = gateway
        self.template = template

    def grade(self, task: TaskInstance, output: str) -> Optional[GradeResult]:
        return grade_by_judge(task.question, output, self.gateway, self.template)


class ExecutionGrader(Grader):
    """
    Execution accuracy through an external executor.

    The command reads {"predicted_sql", "gold_sql", "db_ref"} on stdin and
    writes {"match": bool} on stdout. Any executor failure leaves the item
    ungraded.
    """
    needs_gold = True

    def __init__(self, command: Sequence[str], timeout_s: float = 60.0):
        self.command = list(command)
        self.timeout_s = timeout_s

    def grade(self, task: TaskInstance, output: str) -> Optional[GradeResult]:
        if task.gold_answer is None:
            raise RegimeError(f"Task {task.id!r} has no gold query for execution grading")
        request = {
            "predicted_sql": extract_final_answer(output) or "",
            "gold_sql": task.gold_answer,
            "db_ref": task.metadata.get("db_ref"),
        }
        try:
            completed = subprocess.run(
                self.command,
                input=json.dumps(request),
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
                check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            logger.warning(f"Executor failed for task {task.id!r}: {e}")
            return None
        if completed.returncode != 0:
            logger.warning(f"Executor exited {completed.returncode} for task {task.id!r}: {completed.stderr.strip()}")
            return None
        try:
            match = json.loads(completed.stdout)["match"]
        except (json.JSONDecodeError, KeyError, TypeError):
            logger.warning(f"Executor output for task {task.id!r} is not {{\"match\": bool}}")
            return None
        if not isinstance(match, bool):
            return None
        return GradeResult(reward=1.0 if match else 0.0)


def build_grader(config: "GraderConfig", gateway: "ModelGateway") -> Grader:
    """Grader for a run's grader section."""
    if config.kind == "exact":
        return ExactMatchGrader()
    if config.kind == "judge":
        return JudgeGrader(gateway, config.judge_template)
    return ExecutionGrader(config.executor_command or [])
