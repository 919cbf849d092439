"""
Batch evolution loop.

For every batch: baseline generation with retrieved guidance, failure
identification, subject clustering by the tuner, guidance distillation,
merge-or-append into a candidate memory, regeneration of the whole batch
against the candidate, and an accept-if-improves gate that commits the
candidate only when the net improvement is strictly positive.

Phases are barrier-ordered. Items inside a phase may run on a thread pool
bounded by the gateway's in-flight cap; memory mutation stays on the
calling thread.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple, Optional, Sequence, TypeVar

from pydantic import BaseModel, ConfigDict, Field

from mistake_notebook.errors import (
    DimensionMismatch,
    DuplicateSubject,
    GatewayError,
    InvalidEntry,
    LengthMismatch,
    NotebookError,
    ParseFailure,
)
from mistake_notebook.gateway import ModelGateway, Vector
from mistake_notebook.logger_config import get_logger
from mistake_notebook.memory import MemoryStore
from mistake_notebook.prompts import (
    build_cluster_prompt,
    build_context,
    build_extraction_prompt,
    build_merge_prompt,
    build_solve_prompt,
    extract_applicability,
    is_low_specificity,
    parse_cluster_assignment,
    parse_guidance,
)
from mistake_notebook.retrieval import find_merge_candidate, retrieve
from mistake_notebook.schemas import (
    ClusterMember,
    ClusterRecord,
    EvaluationReport,
    EvolutionConfig,
    EvolutionReport,
    GuidanceNote,
    MemoryEntry,
    RetrievalConfig,
    SubjectCluster,
    TaskInstance,
    Trajectory,
)
from mistake_notebook.tasks import Grader

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ReportCallback = Callable[[EvolutionReport], None]


class EvolutionSettings(BaseModel):
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    evolution: EvolutionConfig = Field(default_factory=EvolutionConfig)

    model_config = ConfigDict(frozen=True)


class CandidateMemory(NamedTuple):
    store: MemoryStore
    actions: dict[str, str]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """Order-preserving map over a bounded thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(fn, items))


# ============================================
# Step 1: baseline
# ============================================

def retrieve_context(query_embedding: Optional[Vector], store: MemoryStore, cfg: RetrievalConfig) -> str:
    if query_embedding is None or len(store) == 0:
        return ""
    hits = retrieve(query_embedding, store, cfg)
    return build_context([store[hit.entry_index] for hit in hits])


def embed_queries(batch: Sequence[TaskInstance], gateway: ModelGateway) -> list[Vector]:
    """Raw-question embeddings, one embedder call per batch."""
    return gateway.embed([task.question for task in batch])


def generate(task: TaskInstance, context: str, gateway: ModelGateway, phase: str = "baseline") -> Trajectory:
    """One tuning-model call; a gateway failure becomes an ungraded trajectory."""
    prompt = build_solve_prompt(task.question, context)
    try:
        output = gateway.complete("tuning", prompt.messages, template_id=prompt.template_id)
    except GatewayError as e:
        logger.warning(f"Generation failed for {task.id!r} ({phase}), item ungraded: {e}")
        return Trajectory(query_id=task.id, question=task.question, retrieved_context=context, phase=phase, error=str(e))

    applicability = extract_applicability(output) if context else None
    if applicability:
        logger.debug(f"{task.id}: guidance self-assessed as {applicability!r}")
    return Trajectory(
        query_id=task.id,
        question=task.question,
        retrieved_context=context,
        output=output,
        phase=phase,
        applicability=applicability,
    )


def run_baseline(
    batch: Sequence[TaskInstance],
    store: MemoryStore,
    gateway: ModelGateway,
    retrieval_cfg: RetrievalConfig,
    query_embeddings: Optional[Sequence[Vector]] = None,
    phase: str = "baseline",
) -> list[Trajectory]:
    """
    Generate one trajectory per query with z = x (+) Ret(x, M).

    Embeddings are computed here when the store is non-empty and none were
    supplied; an empty store means empty contexts and no embedder call.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    if len(store) and query_embeddings is None:
        query_embeddings = embed_queries(batch, gateway)
    contexts = [
        retrieve_context(query_embeddings[i] if query_embeddings else None, store, retrieval_cfg)
        for i in range(len(batch))
    ]
    return parallel_map(
        lambda pair: generate(pair[0], pair[1], gateway, phase),
        list(zip(batch, contexts)),
        gateway.max_in_flight("tuning"),
    )


def grade_one(task: TaskInstance, trajectory: Trajectory, grader: Grader) -> Trajectory:
    if trajectory.error is not None:
        return trajectory
    view = task if grader.needs_gold else task.without_gold()
    try:
        result = grader.grade(view, trajectory.output)
    except GatewayError as e:
        logger.warning(f"Grading failed for {task.id!r}, item ungraded: {e}")
        return trajectory.model_copy(update={"error": str(e)})
    if result is None:
        logger.warning(f"No verdict for {task.id!r}, item ungraded")
        return trajectory
    return trajectory.model_copy(update={"reward": result.reward, "rationale": result.rationale})


def grade_batch(
    batch: Sequence[TaskInstance],
    trajectories: Sequence[Trajectory],
    grader: Grader,
    workers: int = 1,
) -> list[Trajectory]:
    """Fill rewards; items that cannot be graded keep reward None."""
    return parallel_map(lambda pair: grade_one(pair[0], pair[1], grader), list(zip(batch, trajectories)), workers)


# ============================================
# Step 2: failures, clusters, guidance
# ============================================

def identify_failures(trajectories: Sequence[Trajectory], cfg: EvolutionConfig) -> list[int]:
    """0-based indices with reward below the failure threshold; ungraded items never fail."""
    return [
        i for i, trajectory in enumerate(trajectories)
        if trajectory.reward is not None and trajectory.reward < cfg.failure_threshold
    ]


def cluster_failures(members: Sequence[ClusterMember], gateway: ModelGateway) -> list[SubjectCluster]:
    """
    Group failures by tuner-assigned subject.

    Clusters appear in order of their first member; members keep batch order.

    Raises:
        ParseFailure: If the tuner's assignment cannot be read
        GatewayError: If the tuner call fails
    """
    if not members:
        raise ValueError("no failures to cluster")
    prompt = build_cluster_prompt([(member.query_id, member.question) for member in members])
    raw = gateway.complete("tuner", prompt.messages, template_id=prompt.template_id)
    assignments = parse_cluster_assignment(raw, [member.query_id for member in members])

    groups: dict[str, list[ClusterMember]] = {}
    for member in members:
        groups.setdefault(assignments[member.query_id], []).append(member)
    clusters = [SubjectCluster(subject=subject, members=group) for subject, group in groups.items()]
    logger.info(f"Clustered {len(members)} failures into {len(clusters)} subjects")
    return clusters


def distill_guidance(
    cluster: SubjectCluster,
    gateway: ModelGateway,
    store: Optional[MemoryStore] = None,
) -> tuple[str, GuidanceNote]:
    """
    One extraction call per cluster, parsed into a five-part note.

    The current memory enters at the merge step; here it is only consulted
    to report whether the subject will fuse into an existing node.

    Raises:
        MissingSection: If the tuner's note lacks a section
    """
    prompt = build_extraction_prompt(cluster)
    raw = gateway.complete("tuner", prompt.messages, template_id=prompt.template_id)
    note = parse_guidance(raw)
    if store is not None and store.index_of(cluster.subject) is not None:
        logger.debug(f"Subject {cluster.subject!r} already in memory, guidance will be merged")
    return cluster.subject, note


def build_candidate_memory(
    store: MemoryStore,
    distilled: Sequence[tuple[str, GuidanceNote]],
    retrieval_cfg: RetrievalConfig,
    gateway: ModelGateway,
) -> CandidateMemory:
    """
    M' = Update(M, {(s, g_s)}): merge into the nearest node above the merge
    threshold, else append. Works on a copy; the input store is untouched.
    A failing item is dropped and the rest proceed.
    """
    candidate = store.copy()
    actions: dict[str, str] = {}
    for subject, note in distilled:
        try:
            embedding = gateway.embed_one(subject)
            index = candidate.index_of(subject)
            if index is None:
                index = find_merge_candidate(embedding, candidate, retrieval_cfg)
            if index is None:
                candidate.append_entry(MemoryEntry.create(subject, note, embedding))
                actions[subject] = "appended"
                continue
            existing = candidate[index]
            prompt = build_merge_prompt(existing.subject, existing.guidance, note)
            raw = gateway.complete("tuner", prompt.messages, template_id=prompt.template_id)
            candidate.replace_guidance(existing.subject, parse_guidance(raw))
            actions[subject] = "merged"
            logger.debug(f"Merged {subject!r} into {existing.subject!r}")
        except (GatewayError, ParseFailure, DuplicateSubject, DimensionMismatch, InvalidEntry) as e:
            logger.warning(f"Dropped guidance for {subject!r}: {e}")
            actions[subject] = "dropped"
    return CandidateMemory(candidate, actions)


# ============================================
# Step 3: gate
# ============================================

def net_improvement(baseline: Sequence[Optional[float]], regenerated: Sequence[Optional[float]]) -> int:
    """
    Sum of I[after > before] - I[after < before]; pairs with an ungraded side are skipped.

    Raises:
        LengthMismatch: If the sequences differ in length
    """
    if len(baseline) != len(regenerated):
        raise LengthMismatch(f"baseline has {len(baseline)} rewards, regenerated has {len(regenerated)}")
    delta = 0
    for before, after in zip(baseline, regenerated):
        if before is None or after is None:
            continue
        delta += (after > before) - (after < before)
    return delta


def _members(batch: Sequence[TaskInstance], trajectories: Sequence[Trajectory], failures: Sequence[int],
             with_gold: bool) -> list[ClusterMember]:
    return [
        ClusterMember(
            query_id=batch[i].id,
            question=batch[i].question,
            output=trajectories[i].output,
            gold_answer=batch[i].gold_answer if with_gold else None,
            rationale=trajectories[i].rationale,
        )
        for i in failures
    ]


def run_batch(
    batch: Sequence[TaskInstance],
    store: MemoryStore,
    gateway: ModelGateway,
    grader: Grader,
    settings: EvolutionSettings,
    batch_index: int = 0,
    epoch: int = 1,
) -> tuple[MemoryStore, EvolutionReport]:
    """
    One pass of the evolution loop over a batch.

    Returns:
        The committed store (the candidate when accepted, the restored
        snapshot otherwise) and the batch's ledger record
    """
    snapshot = store.snapshot()
    grade_workers = gateway.max_in_flight("judge")

    def report(status: str, baseline_rewards, **fields) -> tuple[MemoryStore, EvolutionReport]:
        committed = fields.pop("committed", None)
        if committed is None:
            committed = MemoryStore.restore(snapshot)
        stats = committed.stats()
        record = EvolutionReport(
            epoch=epoch,
            batch_index=batch_index,
            status=status,
            baseline_rewards=baseline_rewards,
            memory_size_after=stats.entry_count,
            avg_guidance_tokens_after=stats.avg_guidance_tokens,
            **fields,
        )
        return committed, record

    try:
        query_embeddings = embed_queries(batch, gateway) if len(store) else None
    except NotebookError as e:
        logger.error(f"Batch {batch_index}: query embedding failed, batch aborted", exc_info=True)
        return report("aborted", [None] * len(batch), ungraded_count=len(batch), abort_reason=f"embedding: {e}")

    baseline = run_baseline(batch, store, gateway, settings.retrieval, query_embeddings)
    baseline = grade_batch(batch, baseline, grader, grade_workers)
    baseline_rewards = [t.reward for t in baseline]
    ungraded = sum(1 for t in baseline if t.reward is None)
    failures = identify_failures(baseline, settings.evolution)

    if not failures:
        logger.info(f"Epoch {epoch} batch {batch_index}: no failures, skipped")
        return report("skipped", baseline_rewards, ungraded_count=ungraded)

    members = _members(batch, baseline, failures, grader.needs_gold)
    try:
        clusters = cluster_failures(members, gateway)
    except (ParseFailure, GatewayError) as e:
        logger.error(f"Batch {batch_index}: clustering failed, memory retained: {e}")
        return report("aborted", baseline_rewards, failure_count=len(failures), ungraded_count=ungraded,
                      abort_reason=f"clustering: {e}")

    records: dict[str, ClusterRecord] = {}
    distilled: list[tuple[str, GuidanceNote]] = []
    for cluster in clusters:
        low = is_low_specificity(cluster.subject)
        if low:
            logger.warning(f"Low-specificity subject: {cluster.subject!r}")
        try:
            distilled.append(distill_guidance(cluster, gateway, store))
            action = "appended"
        except (ParseFailure, GatewayError) as e:
            logger.warning(f"Cluster {cluster.subject!r} dropped: {e}")
            action = "dropped"
        records[cluster.subject] = ClusterRecord(
            subject=cluster.subject, member_count=len(cluster.members), action=action, low_specificity=low
        )

    if not distilled:
        logger.warning(f"Batch {batch_index}: no guidance distilled, memory retained")
        return report("aborted", baseline_rewards, failure_count=len(failures), ungraded_count=ungraded,
                      clusters=list(records.values()), abort_reason="no guidance distilled")

    candidate, actions = build_candidate_memory(store, distilled, settings.retrieval, gateway)
    for subject, action in actions.items():
        records[subject] = records[subject].model_copy(update={"action": action})

    try:
        if query_embeddings is None:
            query_embeddings = embed_queries(batch, gateway)
    except NotebookError as e:
        logger.error(f"Batch {batch_index}: query embedding failed before regeneration", exc_info=True)
        return report("aborted", baseline_rewards, failure_count=len(failures), ungraded_count=ungraded,
                      clusters=list(records.values()), abort_reason=f"embedding: {e}")

    regenerated = run_baseline(batch, candidate, gateway, settings.retrieval, query_embeddings, phase="regenerated")
    regenerated = grade_batch(batch, regenerated, grader, grade_workers)
    regenerated_rewards = [t.reward for t in regenerated]
    delta = net_improvement(baseline_rewards, regenerated_rewards)
    accepted = delta > 0

    ungraded += sum(1 for t in regenerated if t.reward is None)
    logger.info(
        f"Epoch {epoch} batch {batch_index}: failures={len(failures)} clusters={len(clusters)} "
        f"delta={delta} -> {'accepted' if accepted else 'rejected'}"
    )
    return report(
        "accepted" if accepted else "rejected",
        baseline_rewards,
        committed=candidate if accepted else None,
        regenerated_rewards=regenerated_rewards,
        delta=delta,
        accepted=accepted,
        failure_count=len(failures),
        ungraded_count=ungraded,
        clusters=list(records.values()),
    )


# ============================================
# Epochs and evaluation
# ============================================

def make_batches(dataset: Sequence[TaskInstance], batch_size: int) -> list[list[TaskInstance]]:
    """Consecutive batches; the last one may be partial."""
    return [list(dataset[start:start + batch_size]) for start in range(0, len(dataset), batch_size)]


def run_epoch(
    dataset: Sequence[TaskInstance],
    store: MemoryStore,
    gateway: ModelGateway,
    grader: Grader,
    settings: EvolutionSettings,
    epoch: int = 1,
    on_report: Optional[ReportCallback] = None,
) -> tuple[MemoryStore, list[EvolutionReport]]:
    """One pass over the dataset in batch order."""
    reports: list[EvolutionReport] = []
    for batch_index, batch in enumerate(make_batches(dataset, settings.evolution.batch_size)):
        store, record = run_batch(batch, store, gateway, grader, settings, batch_index, epoch)
        reports.append(record)
        if on_report is not None:
            on_report(record)
    accepted = sum(1 for record in reports if record.accepted)
    logger.info(f"Epoch {epoch} done: accepted {accepted}/{len(reports)} batches, memory size {len(store)}")
    return store, reports


def run_evolution(
    dataset: Sequence[TaskInstance],
    store: MemoryStore,
    gateway: ModelGateway,
    grader: Grader,
    settings: EvolutionSettings,
    epochs: Optional[int] = None,
    on_report: Optional[ReportCallback] = None,
) -> tuple[MemoryStore, list[EvolutionReport]]:
    """Run several epochs (settings.evolution.epochs unless given), streaming reports."""
    total = epochs if epochs is not None else settings.evolution.epochs
    if total < 1:
        raise ValueError("epochs must be positive")
    reports: list[EvolutionReport] = []
    for epoch in range(1, total + 1):
        store, epoch_reports = run_epoch(dataset, store, gateway, grader, settings, epoch, on_report)
        reports.extend(epoch_reports)
    return store, reports


def evaluate(
    dataset: Sequence[TaskInstance],
    store: MemoryStore,
    gateway: ModelGateway,
    grader: Grader,
    settings: EvolutionSettings,
) -> EvaluationReport:
    """Retrieval-augmented generation over a frozen memory; accuracy over graded items."""
    rewards: list[Optional[float]] = []
    for batch in make_batches(dataset, settings.evolution.batch_size):
        trajectories = run_baseline(batch, store, gateway, settings.retrieval, phase="eval")
        trajectories = grade_batch(batch, trajectories, grader, gateway.max_in_flight("judge"))
        rewards.extend(t.reward for t in trajectories)

    graded = [reward for reward in rewards if reward is not None]
    stats = store.stats()
    accuracy = sum(graded) / len(graded) if graded else 0.0
    logger.info(f"Evaluation: accuracy={accuracy:.4f} over {len(graded)}/{len(rewards)} graded tasks")
    return EvaluationReport(
        task_count=len(rewards),
        graded_count=len(graded),
        ungraded_count=len(rewards) - len(graded),
        accuracy=accuracy,
        memory_size=stats.entry_count,
        avg_guidance_tokens=stats.avg_guidance_tokens,
        rewards=rewards,
    )
