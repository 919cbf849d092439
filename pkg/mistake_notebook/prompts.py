"""
Prompt templates for every model role and the parsers for their outputs.

Template bodies are data. Placeholders use str.format syntax; literal braces
are doubled.
"""
import json
import re
from string import Formatter
from typing import Iterable, NamedTuple, Optional, Sequence

from mistake_notebook.errors import (
    MissingAssignments,
    MissingSection,
    ParseFailure,
    UnboundPlaceholder,
)
from mistake_notebook.logger_config import get_logger
from mistake_notebook.memory import count_tokens
from mistake_notebook.schemas import (
    GUIDANCE_FIELDS,
    GuidanceNote,
    JudgeVerdict,
    MemoryEntry,
    Message,
    SubjectCluster,
)

logger = get_logger(__name__)

_formatter = Formatter()


class PromptTemplate:
    """
    Template rendered into a role-tagged message list.

    Args:
        template_id: Stable identifier (also the scripted-backend key)
        user: Body of the user message
        system: Optional body of a leading system message
    """

    def __init__(self, template_id: str, user: str, system: Optional[str] = None) -> None:
        self.template_id = template_id
        self.user = user
        self.system = system

    def get_fields(self) -> list[str]:
        """Placeholder names in order of first appearance."""
        names: list[str] = []
        for body in (self.system, self.user):
            if body is None:
                continue
            for _, field_name, _, _ in _formatter.parse(body):
                if field_name is not None and field_name not in names:
                    names.append(field_name)
        return names

    def render(self, bindings: dict[str, str]) -> list[Message]:
        """
        Substitute every placeholder.

        Raises:
            UnboundPlaceholder: If a placeholder has no binding
        """
        for name in self.get_fields():
            if name not in bindings:
                logger.error(f"Template {self.template_id!r} rendered without {{{name}}}")
                raise UnboundPlaceholder(name, self.template_id)
        values = {key: str(value) for key, value in bindings.items()}
        messages = []
        if self.system is not None:
            messages.append(Message(role="system", content=_formatter.vformat(self.system, (), values)))
        messages.append(Message(role="user", content=_formatter.vformat(self.user, (), values)))
        return messages


class Prompt(NamedTuple):
    template_id: str
    messages: list[Message]


def render(template: PromptTemplate, bindings: dict[str, str]) -> list[Message]:
    return template.render(bindings)


# ============================================
# Template bodies
# ============================================

APPLICABILITY_INSTRUCTION = """\
The following mistake notes are not necessarily tied to the current question, but you may use them to deepen your analytical approach.

IMPORTANT: Before applying any guidance below, carefully evaluate:
1. Does the current problem match the applicability conditions stated in the guidance?
2. Is the problem type and context similar to the examples in the guidance?
3. If the problem is fundamentally different (e.g., combinatorics vs modulo arithmetic, complex numbers vs number theory), do NOT force-fit the guidance.
4. Only use guidance that is clearly relevant to the current problem structure and requirements.

Before solving, review the attached guidance. State whether it is: "applicable", "partially applicable", or "irrelevant". Use only applicable parts when answering."""

CLUSTER_SYSTEM = """\
You are an expert in categorizing questions into precise, high-relevance subjects for Retrieval-Augmented Generation (RAG).

Your goal is to assign each question a subject label that:
- Maximizes retrieval relevance by precisely describing the problem type and solution method
- Groups only genuinely similar questions together (same domain AND same approach)
- Avoids over-broad categories that would match unrelated problems

Include: (1) Mathematical Domain, (2) Problem Type, (3) Solution Method.

Examples of GOOD subjects:
- "Combinatorics: Counting arrangements in grids with row and column sum constraints using stars and bars"
- "Complex Analysis: Evaluating products over roots of unity using polynomial evaluation"

Examples of BAD subjects (too broad):
- "modulo arithmetic" -- could match any modulo problem
- "number theory" -- could match any number theory problem"""

CLUSTER_USER = """\
Questions:

{questions}

Output format: respond with a single JSON object that maps every question id listed above to its subject string, for example {{"q1": "Domain: problem type using solution method"}}. Assign each id exactly once and add no other keys."""

EXTRACT_USER = """\
You are an expert in analyzing model errors and maintaining a "mistake notebook" to improve future performance.

Subject: {subject}

Error Examples:

{error_context}

Task: Extract insights from the mistakes and rewrite them as a structured mistake note.

Your response must include :

1. Corrected Examples with mistake answers
- For each, include:
  - The original question and mistake answer
  - Correct answer and correct reasoning process

2. Correct Approach
- Provide the correct reasoning method or step-by-step approach that should be applied.

3. Mistake Summary
- Identify the root cause behind the errors (reasoning flaw, misunderstanding of concept, missing steps, incorrect logic, etc.).

4. Generalizable Strategy
- Summarize reusable problem-solving patterns and how to avoid future mistakes.

5. ANTI-PATTERNS

List specific things to AVOID:
- Common ways this guidance gets misapplied
- Situations where following this guidance would be WRONG
- Red flags that indicate the guidance doesn't fit

Output format should resemble a mistake notebook entry: concise, structured, knowledge-focused, and reusable for similar future questions."""

MERGE_USER = """\
You are synthesizing guidance for subject: {subject}

Existing guidance from related subjects in the memory:

{existing_guidance}

New guidance to incorporate:

{new_guidance}

Task: Merge these into a single coherent guidance that:
- Combines insights from related subjects with new guidance
- Eliminates redundancy while preserving key information and examples of the mistakes
- Preserves and emphasizes applicability conditions: clearly state when each method applies
- Focuses on actionable advice
- Maintains consistent style
- Includes warnings about when NOT to apply the guidance to avoid misapplication

Keep the five numbered sections: 1. Corrected Examples, 2. Correct Approach, 3. Mistake Summary, 4. Generalizable Strategy, 5. ANTI-PATTERNS.

Merged guidance:"""

JUDGE_PAIRWISE_USER = """\
You are an expert in web navigation and user interface interaction.

Given this web navigation task: {question}

Compare these two proposed actions and determine which one is MORE CORRECT:

Action A: {answer1}
Action B: {answer2}

Evaluation criteria (in order of importance):

Task relevance - Does this action directly help achieve the stated goal?

UI logic - Is this a logical next step given the current page state?

Element availability - Does the target element actually exist on the page?

Efficiency - Is this the most direct path to accomplish the task?

Think step by step, then respond with exactly ONE of these options:

"Action A is more correct"

"Action B is more correct"

"Both are equally correct or equally wrong"

Your response must start with one of these exact phrases."""

JUDGE_SINGLE_USER = """\
You are an expert in web navigation and user interface interaction evaluation. Your task is to determine if a candidate answer is correct for a given web navigation task.

You DO NOT have access to a ground truth answer, so you must judge strictly based on the provided web context (HTML), the user's task goal, and the interaction history.

Context and Task: {question}

Proposed Action to Evaluate: {candidate_answer}

Evaluation Steps:

Goal Analysis: What is the user trying to achieve?

State Analysis: Based on previous actions, where are we in the flow?

Element Verification: Does the element selected in the proposed action exist in the HTML? Is it the correct element to interact with?

Action Validity: Is the action (CLICK, TYPE, SELECT) appropriate for this element and goal?

Judgment Criteria:

CORRECT: The action is the logical, necessary, and correct next step to advance the task.

INCORRECT: The action is irrelevant, interacts with the wrong element, uses the wrong action type, or hinders the task.

Respond with exactly ONE of the following lines, followed by your reasoning:

"Judgment: CORRECT"

"Judgment: INCORRECT\""""

JUDGE_EXECUTION_USER = """\
You are an expert Judge for an AI Agent execution log.
Your goal is to determine if the Agent successfully completed the user's task based on the provided execution log.

**Input Data:**

1. Task Question: "{question}"

2. Execution Log (JSON format):

<<<EXECUTION_LOG_START>>>

{trajectory}

<<<EXECUTION_LOG_END>>>

**Judgment Criteria:**

- **SUCCESS**: The agent found the requested information, performed the requested action, or provided the correct answer in the final turn. The code executed without fatal errors.

- **FAILURE**: The agent encountered a Python exception that stopped progress, got stuck in a loop, failed to call the correct API, authorized incorrectly, or the log ends abruptly without an answer.

**Output Format:**

You must output a single JSON object with the following structure:

{{
  "reasoning": "Brief analysis of why it succeeded or failed (max 50 words).",
  "is_success": true or false
}}"""

APPLICABILITY = PromptTemplate("applicability", APPLICABILITY_INSTRUCTION)
SOLVE = PromptTemplate("solve", "{question}")
SOLVE_WITH_GUIDANCE = PromptTemplate("solve_with_guidance", "{question}", system="{context}")
CLUSTER = PromptTemplate("cluster", CLUSTER_USER, system=CLUSTER_SYSTEM)
EXTRACT = PromptTemplate("extract", EXTRACT_USER)
MERGE = PromptTemplate("merge", MERGE_USER)
JUDGE_PAIRWISE = PromptTemplate("judge_pairwise", JUDGE_PAIRWISE_USER)
JUDGE_SINGLE = PromptTemplate("judge_single", JUDGE_SINGLE_USER)
JUDGE_EXECUTION = PromptTemplate("judge_execution", JUDGE_EXECUTION_USER)

TEMPLATES: dict[str, PromptTemplate] = {
    template.template_id: template
    for template in (
        APPLICABILITY,
        SOLVE,
        SOLVE_WITH_GUIDANCE,
        CLUSTER,
        EXTRACT,
        MERGE,
        JUDGE_PAIRWISE,
        JUDGE_SINGLE,
        JUDGE_EXECUTION,
    )
}

JUDGE_TEMPLATES = {
    "single_trajectory": JUDGE_SINGLE,
    "execution_log": JUDGE_EXECUTION,
}


def get_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATES:
        raise ValueError(f"Unknown template: {template_id}")
    return TEMPLATES[template_id]


# ============================================
# Guidance formatting and parsing
# ============================================

SECTION_TITLES = {
    "corrected_examples": "Corrected Examples",
    "correct_approach": "Correct Approach",
    "mistake_summary": "Mistake Summary",
    "generalizable_strategy": "Generalizable Strategy",
    "anti_patterns": "ANTI-PATTERNS",
}

_SECTION_PATTERNS = {
    "corrected_examples": r"corrected\s+examples?",
    "correct_approach": r"correct\s+approach(?:es)?",
    "mistake_summary": r"mistakes?\s+summary",
    "generalizable_strategy": r"generali[sz]able\s+strateg(?:y|ies)",
    "anti_patterns": r"anti[\s_-]?patterns?",
}

_HEADING = re.compile(
    r"^(?P<prefix>[ \t]*(?:#{1,6}[ \t]*)?(?:[*_]{1,2}[ \t]*)?(?:(?P<number>\d+)[ \t]*[.):][ \t]*)?(?:[*_]{1,2}[ \t]*)?)"
    r"(?:" + "|".join(f"(?P<{name}>{pattern})" for name, pattern in _SECTION_PATTERNS.items()) + r")"
    r"\b(?P<tail>[^\n]*)$",
    re.IGNORECASE | re.MULTILINE,
)


class _Heading(NamedTuple):
    section: str
    start: int
    end: int
    inline: str
    rank: int


def format_guidance(note: GuidanceNote) -> str:
    """Canonical five-section text of a guidance note."""
    blocks = [
        f"{number}. {SECTION_TITLES[name]}\n{getattr(note, name)}"
        for number, name in enumerate(GUIDANCE_FIELDS, start=1)
    ]
    return "\n\n".join(blocks)


def _find_headings(raw: str) -> list[_Heading]:
    """
    Heading candidates ranked 2 for the canonical "N. Title" line with the
    section's own number, 1 for other decorated headings and 0 for bare
    "Title: text" lines.
    """
    headings = []
    for match in _HEADING.finditer(raw):
        section = next(name for name in _SECTION_PATTERNS if match.group(name))
        prefix = match.group("prefix").strip()
        tail = match.group("tail")
        bare_tail = tail.strip(" \t*_#:")
        has_colon = ":" in tail
        inline = tail.split(":", 1)[1].strip(" \t*_") if has_colon else ""
        strong = bool(prefix) or not bare_tail
        if not strong and not tail.lstrip(" \t*_").startswith(":"):
            continue
        number = match.group("number")
        if number is not None and int(number) == GUIDANCE_FIELDS.index(section) + 1 and not bare_tail:
            rank = 2
        else:
            rank = 1 if strong else 0
        headings.append(_Heading(section, match.start(), match.end(), inline, rank))
    return headings


def _best(candidates: Sequence[_Heading]) -> Optional[_Heading]:
    """Highest rank, earliest position."""
    if not candidates:
        return None
    return min(candidates, key=lambda h: (-h.rank, h.start))


def _choose_in_order(headings: Sequence[_Heading]) -> Optional[dict[str, _Heading]]:
    """
    Pick one heading per section walking the sections in their numbered
    order, each after the previous pick and of the best rank seen for that
    section. None when the response does not follow that order.
    """
    chosen: dict[str, _Heading] = {}
    previous = -1
    for section in GUIDANCE_FIELDS:
        candidates = [h for h in headings if h.section == section]
        top = _best(candidates)
        heading = _best([h for h in candidates if h.start > previous and h.rank == (top.rank if top else -1)])
        if heading is None:
            return None
        chosen[section] = heading
        previous = heading.start
    return chosen


def parse_guidance(raw: str) -> GuidanceNote:
    """
    Locate the five sections by their headings and build a GuidanceNote.

    Matching is anchored on heading lines, tolerant of case, numbering and
    markdown decoration. Sections in numbered order are read first; any
    other order falls back to the best heading of each section.

    Raises:
        MissingSection: If a section is absent or empty
    """
    headings = _find_headings(raw)
    chosen = _choose_in_order(headings)
    if chosen is None:
        chosen = {}
        for section in GUIDANCE_FIELDS:
            heading = _best([h for h in headings if h.section == section])
            if heading is None:
                logger.warning(f"Guidance response lacks section {section!r}")
                raise MissingSection(section)
            chosen[section] = heading

    ordered = sorted(chosen.values(), key=lambda h: h.start)
    bodies: dict[str, str] = {}
    for position, heading in enumerate(ordered):
        stop = ordered[position + 1].start if position + 1 < len(ordered) else len(raw)
        parts = [heading.inline, raw[heading.end:stop].strip()]
        body = "\n".join(part for part in parts if part).strip()
        if not body:
            logger.warning(f"Guidance section {heading.section!r} is empty")
            raise MissingSection(heading.section, "is empty")
        bodies[heading.section] = body
    return GuidanceNote(**bodies)


# ============================================
# Cluster assignment and judge parsing
# ============================================

_FENCE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL | re.IGNORECASE)


def _load_json_object(raw: str) -> Optional[dict]:
    text = raw.strip()
    candidates = [text]
    candidates.extend(match.group(1) for match in _FENCE.finditer(text))
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        candidates.append(text[start:end + 1])
    for candidate in candidates:
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    return None


def parse_cluster_assignment(raw: str, batch_ids: Iterable[str]) -> dict[str, str]:
    """
    Read the tuner's JSON mapping of query id to subject.

    Raises:
        ParseFailure: If no JSON object is found, a subject is empty, or an id is unknown
        MissingAssignments: If some batch ids were not assigned
    """
    expected = set(batch_ids)
    data = _load_json_object(raw)
    if data is None:
        logger.warning("Cluster assignment is not a JSON object")
        raise ParseFailure("Cluster assignment is not a JSON object")

    assignments: dict[str, str] = {}
    unknown = []
    for key, value in data.items():
        query_id = str(key)
        if query_id not in expected:
            unknown.append(query_id)
            continue
        if not isinstance(value, str) or not value.strip():
            raise ParseFailure(f"Empty subject for {query_id!r}")
        assignments[query_id] = value.strip()

    if unknown:
        logger.warning(f"Cluster assignment names unknown ids: {sorted(unknown)}")
        raise ParseFailure(f"Unknown ids in cluster assignment: {sorted(unknown)}")
    missing = expected - set(assignments)
    if missing:
        logger.warning(f"Cluster assignment misses ids: {sorted(missing)}")
        raise MissingAssignments(missing)
    return assignments


def is_low_specificity(subject: str) -> bool:
    """Subjects shorter than four tokens are too broad to key retrieval well."""
    return count_tokens(subject) < 4


_JUDGMENT_LINE = re.compile(r"judgment:\s*(correct|incorrect)", re.IGNORECASE)


def parse_verdict_binary(raw: str) -> JudgeVerdict:
    """
    Binary verdict from either judge format.

    Line format: success when a line reads "Judgment: CORRECT".
    JSON format: success when the object's is_success field is true.

    Raises:
        ParseFailure: If neither format is present
    """
    lines = raw.splitlines()
    for position, line in enumerate(lines):
        cleaned = line.strip().strip('"*`').strip()
        match = _JUDGMENT_LINE.fullmatch(cleaned)
        if match:
            reasoning = "\n".join(lines[position + 1:]).strip()
            return JudgeVerdict(success=match.group(1).upper() == "CORRECT", reasoning=reasoning)

    data = _load_json_object(raw)
    if data is not None and isinstance(data.get("is_success"), bool):
        return JudgeVerdict(success=data["is_success"], reasoning=str(data.get("reasoning", "")))

    raise ParseFailure("Judge output has neither a Judgment line nor an is_success field")


_PAIRWISE = {
    "action a is more correct": "A",
    "action b is more correct": "B",
    "both are equally correct or equally wrong": "tie",
}


def parse_pairwise_verdict(raw: str) -> str:
    """
    "A", "B" or "tie" from a pairwise comparison judge.

    Raises:
        ParseFailure: If the response does not start with one of the fixed phrases
    """
    head = raw.strip().lstrip('"*` ').lower()
    for phrase, verdict in _PAIRWISE.items():
        if head.startswith(phrase):
            return verdict
    raise ParseFailure("Pairwise judge response does not start with a verdict phrase")


_APPLICABILITY = re.compile(r"\b(partially applicable|not applicable|applicable|irrelevant)\b", re.IGNORECASE)


def extract_applicability(output: str) -> Optional[str]:
    """First applicability self-assessment stated in a model answer, if any."""
    match = _APPLICABILITY.search(output)
    if not match:
        return None
    label = match.group(1).lower()
    return "irrelevant" if label == "not applicable" else label


# ============================================
# Prompt builders
# ============================================

def build_context(entries: Sequence[MemoryEntry]) -> str:
    """Retrieved guidance prefixed by the applicability instruction; empty without entries."""
    if not entries:
        return ""
    notes = [
        f"Mistake note {number}: {entry.subject}\n{format_guidance(entry.guidance)}"
        for number, entry in enumerate(entries, start=1)
    ]
    return APPLICABILITY_INSTRUCTION + "\n\n" + "\n\n".join(notes)


def build_solve_prompt(question: str, context: str) -> Prompt:
    """z = x (+) context: the context goes into the system message."""
    if context:
        return Prompt(SOLVE_WITH_GUIDANCE.template_id,
                      SOLVE_WITH_GUIDANCE.render({"context": context, "question": question}))
    return Prompt(SOLVE.template_id, SOLVE.render({"question": question}))


def build_cluster_prompt(failures: Sequence[tuple[str, str]]) -> Prompt:
    """failures: (query_id, question) pairs in batch order."""
    questions = "\n\n".join(f"[{query_id}] {question}" for query_id, question in failures)
    return Prompt(CLUSTER.template_id, CLUSTER.render({"questions": questions}))


def render_error_context(cluster: SubjectCluster) -> str:
    blocks = []
    for number, member in enumerate(cluster.members, start=1):
        lines = [
            f"Example {number}:",
            f"Question: {member.question}",
            f"Mistake answer: {member.output}",
        ]
        if member.gold_answer is not None:
            lines.append(f"Correct answer: {member.gold_answer}")
        if member.rationale:
            lines.append(f"Judge feedback: {member.rationale}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def build_extraction_prompt(cluster: SubjectCluster) -> Prompt:
    bindings = {"subject": cluster.subject, "error_context": render_error_context(cluster)}
    return Prompt(EXTRACT.template_id, EXTRACT.render(bindings))


def build_merge_prompt(subject: str, existing: GuidanceNote, new: GuidanceNote) -> Prompt:
    bindings = {
        "subject": subject,
        "existing_guidance": format_guidance(existing),
        "new_guidance": format_guidance(new),
    }
    return Prompt(MERGE.template_id, MERGE.render(bindings))


def build_judge_prompt(kind: str, question: str, output: str) -> Prompt:
    """kind: "single_trajectory" (candidate answer) or "execution_log" (full log)."""
    if kind not in JUDGE_TEMPLATES:
        raise ValueError(f"Unknown judge template: {kind}")
    template = JUDGE_TEMPLATES[kind]
    key = "candidate_answer" if kind == "single_trajectory" else "trajectory"
    return Prompt(template.template_id, template.render({"question": question, key: output}))


def build_pairwise_prompt(question: str, answer1: str, answer2: str) -> Prompt:
    bindings = {"question": question, "answer1": answer1, "answer2": answer2}
    return Prompt(JUDGE_PAIRWISE.template_id, JUDGE_PAIRWISE.render(bindings))
