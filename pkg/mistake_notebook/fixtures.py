"""
Scripted fixtures for offline runs.

ScriptBuilder records scripted-backend responses keyed exactly the way the
engine renders its prompts, so a script stays valid whenever the templates
change. write_arithmetic_fixture() materializes the shipped demo: a task
family where committed guidance deterministically fixes one failure class.
"""
import json
from pathlib import Path
from typing import Optional, Sequence, Union

from mistake_notebook.gateway import EMBED_TEMPLATE, ScriptedBackend, message_digest, text_digest
from mistake_notebook.logger_config import get_logger
from mistake_notebook.prompts import (
    Prompt,
    build_cluster_prompt,
    build_context,
    build_extraction_prompt,
    build_judge_prompt,
    build_merge_prompt,
    build_solve_prompt,
    format_guidance,
)
from mistake_notebook.schemas import GuidanceNote, MemoryEntry, SubjectCluster, TaskInstance

logger = get_logger(__name__)

PathLike = Union[str, Path]


class ScriptBuilder:
    """Accumulates (template, digest) -> response lines for a ScriptedBackend."""

    def __init__(self):
        self._responses: dict[tuple[str, str], str] = {}

    def __len__(self) -> int:
        return len(self._responses)

    def _put(self, template_id: str, digest: str, response: str) -> "ScriptBuilder":
        key = (template_id, digest)
        if key in self._responses and self._responses[key] != response:
            raise ValueError(f"Conflicting scripted response for template {template_id!r}")
        self._responses[key] = response
        return self

    def add(self, prompt: Prompt, response: str) -> "ScriptBuilder":
        return self._put(prompt.template_id, message_digest(prompt.messages), response)

    def solve(self, question: str, response: str, entries: Sequence[MemoryEntry] = ()) -> "ScriptBuilder":
        """Tuning-model answer given the entries retrieval will put in context."""
        return self.add(build_solve_prompt(question, build_context(entries)), response)

    def cluster(self, failures: Sequence[tuple[str, str]], assignments: dict[str, str]) -> "ScriptBuilder":
        return self.add(build_cluster_prompt(failures), json.dumps(assignments, ensure_ascii=False))

    def extract(self, cluster: SubjectCluster, response: str) -> "ScriptBuilder":
        return self.add(build_extraction_prompt(cluster), response)

    def merge(self, subject: str, existing: GuidanceNote, new: GuidanceNote, response: str) -> "ScriptBuilder":
        return self.add(build_merge_prompt(subject, existing, new), response)

    def judge(self, kind: str, question: str, output: str, response: str) -> "ScriptBuilder":
        return self.add(build_judge_prompt(kind, question, output), response)

    def embed(self, text: str, vector: Sequence[float]) -> "ScriptBuilder":
        return self._put(EMBED_TEMPLATE, text_digest(text), json.dumps([float(x) for x in vector]))

    def lines(self) -> list[dict]:
        return [
            {"template": template_id, "digest": digest, "response": response}
            for (template_id, digest), response in self._responses.items()
        ]

    def write(self, path: PathLike) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="\n") as handle:
            for line in self.lines():
                handle.write(json.dumps(line, ensure_ascii=False) + "\n")
        return target

    def backend(self, seed: int = 42, dimension: int = 8) -> ScriptedBackend:
        return ScriptedBackend(dict(self._responses), seed=seed, dimension=dimension)


# ============================================
# Shipped arithmetic fixture
# ============================================

MOD_SUBJECT = "Arithmetic: Remainder of integer division computed with modulo reduction"
FIXTURE_DIMENSION = 8
MOD_AXIS = 0
SUM_AXIS = 1

TRAIN_ROWS = [
    ("t1", "plus", 12, 7),
    ("t2", "mod", 17, 5),
    ("t3", "plus", 25, 16),
    ("t4", "mod", 23, 4),
    ("t5", "mod", 29, 6),
    ("t6", "plus", 33, 9),
    ("t7", "mod", 38, 7),
    ("t8", "plus", 41, 28),
]

EVAL_ROWS = [
    ("e1", "mod", 47, 9),
    ("e2", "plus", 54, 13),
    ("e3", "mod", 52, 10),
    ("e4", "plus", 66, 21),
]


def axis(index: int, dimension: int = FIXTURE_DIMENSION) -> list[float]:
    vector = [0.0] * dimension
    vector[index] = 1.0
    return vector


def make_task(task_id: str, family: str, a: int, b: int) -> TaskInstance:
    if family == "mod":
        question, answer = f"Compute {a} mod {b}.", a % b
    else:
        question, answer = f"Compute {a} plus {b}.", a + b
    return TaskInstance(
        id=task_id,
        question=question,
        answer=str(answer),
        metadata={"family": family, "a": str(a), "b": str(b)},
    )


def unguided_output(task: TaskInstance) -> str:
    """The tuning model without guidance: sums are right, remainders come back as quotients."""
    a, b = int(task.metadata["a"]), int(task.metadata["b"])
    if task.metadata["family"] == "plus":
        return f"{a} + {b} = {a + b}. The answer is \\boxed{{{a + b}}}."
    return f"{a} divided by {b} gives {a // b}. The answer is \\boxed{{{a // b}}}."


def guided_output(task: TaskInstance) -> str:
    a, b = int(task.metadata["a"]), int(task.metadata["b"])
    q, r = divmod(a, b)
    return (
        "The attached guidance is applicable.\n"
        f"{a} = {q} * {b} + {r}, so the remainder is {r}. The answer is \\boxed{{{r}}}."
    )


def fixture_note() -> GuidanceNote:
    return GuidanceNote(
        corrected_examples=(
            "Question: Compute 17 mod 5. Mistake answer: 3 (the quotient). "
            "Correct answer: 2, because 17 = 3 * 5 + 2."
        ),
        correct_approach="Divide, keep the integer quotient q, and report a - q * b.",
        mistake_summary="The quotient of the division was reported instead of the remainder.",
        generalizable_strategy="For 'a mod b' always return the value r with a = q * b + r and 0 <= r < b.",
        anti_patterns="Do not apply this to questions asking for a quotient, a ratio or a sum.",
    )


def fixture_tasks() -> tuple[list[TaskInstance], list[TaskInstance]]:
    return [make_task(*row) for row in TRAIN_ROWS], [make_task(*row) for row in EVAL_ROWS]


def build_fixture_script(
    train: Sequence[TaskInstance],
    evaluation: Sequence[TaskInstance],
    batch_size: int = 4,
) -> ScriptBuilder:
    """
    Responses for a supervised run over `train` and evaluations over `evaluation`.

    Every batch of `train` that contains modulo questions is scripted to
    cluster them under MOD_SUBJECT and distill fixture_note().
    """
    builder = ScriptBuilder()
    note = fixture_note()
    entry = MemoryEntry.create(MOD_SUBJECT, note, axis(MOD_AXIS))
    builder.embed(MOD_SUBJECT, axis(MOD_AXIS))

    for task in list(train) + list(evaluation):
        family = task.metadata["family"]
        builder.embed(task.question, axis(MOD_AXIS if family == "mod" else SUM_AXIS))
        builder.solve(task.question, unguided_output(task))
        if family == "mod":
            builder.solve(task.question, guided_output(task), entries=[entry])

    for start in range(0, len(train), batch_size):
        failures = [task for task in train[start:start + batch_size] if task.metadata["family"] == "mod"]
        if not failures:
            continue
        builder.cluster([(task.id, task.question) for task in failures], {task.id: MOD_SUBJECT for task in failures})
        cluster = SubjectCluster(
            subject=MOD_SUBJECT,
            members=[
                {
                    "query_id": task.id,
                    "question": task.question,
                    "output": unguided_output(task),
                    "gold_answer": task.gold_answer,
                }
                for task in failures
            ],
        )
        builder.extract(cluster, format_guidance(note))
    return builder


def _write_tasks(path: Path, tasks: Sequence[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for task in tasks:
            record = {"id": task.id, "question": task.question, "answer": task.gold_answer, "metadata": task.metadata}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def write_arithmetic_fixture(directory: PathLike, batch_size: int = 4) -> Path:
    """
    Write train.jsonl, eval.jsonl, script.jsonl and run.json into a directory.

    Returns:
        Path of run.json
    """
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    train, evaluation = fixture_tasks()
    _write_tasks(target / "train.jsonl", train)
    _write_tasks(target / "eval.jsonl", evaluation)
    build_fixture_script(train, evaluation, batch_size).write(target / "script.jsonl")

    endpoint = {"backend": "scripted", "model_name": "fixture", "script_path": "script.jsonl", "max_in_flight": 2}
    config = {
        "dataset_path": "train.jsonl",
        "eval_dataset_path": "eval.jsonl",
        "memory_path": "memory.jsonl",
        "ledger_path": "ledger.jsonl",
        "tuning_configuration": "self_tuning",
        "endpoints": {role: dict(endpoint) for role in ("tuning", "tuner", "judge", "embedder")},
        "retrieval": {"top_k": 1, "retrieval_threshold": 0.6, "merge_threshold": 0.85},
        "evolution": {"batch_size": batch_size, "epochs": 1, "failure_threshold": 0.5, "regime": "supervised"},
        "grader": {"kind": "exact"},
        "embedding_dimension": FIXTURE_DIMENSION,
    }
    config_path = target / "run.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote arithmetic fixture to {target}")
    return config_path


def fixture_entry(note: Optional[GuidanceNote] = None) -> MemoryEntry:
    """The memory entry the fixture's accepted batch produces."""
    return MemoryEntry.create(MOD_SUBJECT, note or fixture_note(), axis(MOD_AXIS))
