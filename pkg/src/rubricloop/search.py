"""Candidate expansion, bandit evaluation, diversity-aware selection and minibatch sampling."""

from __future__ import annotations

import hashlib
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .confusion import build_confusion, top_misconfident
from .embeddings import Embedder, HashingEmbedder
from .errors import BatchAbortedError, ConfigError, InputError
from .grader import Grader
from .logging_config import get_logger
from .metrics import min_max_normalize, report
from .models import (
    AGGREGATE,
    CONSOLIDATED,
    CandidateKind,
    CandidatePool,
    CandidateScore,
    ConfusionMatrix,
    GradedResponse,
    LabeledResponse,
    RubricCandidate,
    RulePatch,
)
from .prompts import render_patch_rules

logger = get_logger(__name__)

# Candidate kinds whose target mode can earn the diversity bonus.
_BONUS_KINDS = (CandidateKind.PER_MODE, CandidateKind.CONSOLIDATED)


def _kind_for(patch: RulePatch) -> CandidateKind:
    if patch.mode == CONSOLIDATED:
        return CandidateKind.CONSOLIDATED
    if patch.mode == AGGREGATE:
        return CandidateKind.AGGREGATE
    return CandidateKind.PER_MODE


def cap_rules(rules: str, max_words: int) -> str:
    """Drop the oldest blank-line separated blocks until the section fits ``max_words``."""
    blocks = [b for b in rules.split("\n\n") if b.strip()]
    while len(blocks) > 1 and sum(len(b.split()) for b in blocks) > max_words:
        dropped = blocks.pop(0)
        logger.warning("Rules section over %d words; dropped block %r", max_words, dropped[:60])
    return "\n\n".join(blocks)


def apply_patch(parent: RubricCandidate, patch: RulePatch, max_words: int = 2000) -> str:
    """``parent ⊕ patch``: per-mode and aggregate patches append, consolidated ones replace."""
    addition = render_patch_rules(patch)
    if patch.consolidated or not parent.rules_section.strip():
        rules = addition
    else:
        rules = f"{parent.rules_section.strip()}\n\n{addition}"
    return parent.with_rules(cap_rules(rules, max_words))


def expand_candidates(
    beam: Sequence[RubricCandidate],
    patches: Sequence[RulePatch],
    round_index: int,
    max_rules_words: int = 2000,
) -> CandidatePool:
    """Every beam member combined with every patch."""
    if not beam or not patches:
        raise InputError("expansion needs a non-empty beam and at least one patch")
    children: List[RubricCandidate] = []
    for parent in beam:
        for patch in patches:
            text = apply_patch(parent, patch, max_rules_words)
            digest = hashlib.sha256(f"{parent.id}|{patch.id}|{text}".encode("utf-8")).hexdigest()
            children.append(
                RubricCandidate(
                    id=f"r{round_index}-{digest[:10]}",
                    prompt_text=text,
                    parent_id=parent.id,
                    patch_id=patch.id,
                    lineage=[*parent.lineage, parent.id],
                    target_mode=patch.mode,
                    kind=_kind_for(patch),
                    round=round_index,
                )
            )
    return CandidatePool(round=round_index, candidates=children)


class _Arm:
    """Running evaluation state of one candidate."""

    def __init__(self, candidate: RubricCandidate, matrix: ConfusionMatrix) -> None:
        self.candidate = candidate
        self.matrix = matrix
        self.chunks = 0
        self.items = 0
        self.failures = 0
        self.graded: List[GradedResponse] = []

    @property
    def mean_kappa(self) -> float:
        if self.matrix.total == 0:
            return 0.0
        return report(self.matrix).kappa


class UCBOutcome(BaseModel):
    pool: CandidatePool
    graded: Dict[str, List[GradedResponse]] = Field(default_factory=dict)
    items: int = 0
    allocation: List[str] = Field(default_factory=list)


def ucb_value(mean: float, chunks: int, total_chunks: int, c: float) -> float:
    return mean + c * math.sqrt(2.0 * math.log(total_chunks) / chunks)


def ucb_evaluate(
    pool: CandidatePool,
    eval_batch: Sequence[LabeledResponse],
    budget: int,
    grader: Grader,
    chunk_size: int = 8,
    c: float = 1.0,
) -> UCBOutcome:
    """Spend ``budget`` chunk evaluations over the pool with UCB1 allocation.

    Every candidate first grades chunk 0. Each further chunk goes to the
    candidate with the highest ``mean κ + c·sqrt(2 ln N / n_i)`` among those
    with chunks left, ties to the earlier pool position. A candidate's mean κ
    is the κ of its confusion matrix pooled over the chunks it has graded.
    Parse failures count against a candidate over the whole batch: the run
    aborts once they exceed the grader's abort ratio of ``len(eval_batch)``.
    """
    candidates = pool.candidates
    if not candidates:
        raise InputError("cannot evaluate an empty pool")
    if budget < len(candidates):
        raise ConfigError(
            f"UCB budget of {budget} chunks cannot cover {len(candidates)} candidates"
        )
    if not eval_batch:
        raise InputError("cannot evaluate on an empty batch")
    chunks = [list(eval_batch[i : i + chunk_size]) for i in range(0, len(eval_batch), chunk_size)]
    arms = [_Arm(cand, ConfusionMatrix.zeros(grader.config.scale)) for cand in candidates]
    allocation: List[str] = []
    abort_at = grader.config.abort_ratio * len(eval_batch)

    def pull(arm: _Arm) -> None:
        chunk = chunks[arm.chunks]
        graded, failures = grader.grade_batch(arm.candidate, chunk)
        arm.failures += len(failures)
        if arm.failures > abort_at:
            raise BatchAbortedError(arm.failures, len(eval_batch))
        if failures:
            logger.warning(
                "%d of %d items of candidate %s failed to parse",
                len(failures),
                len(chunk),
                arm.candidate.id,
            )
        arm.matrix = arm.matrix + build_confusion(
            (g for g in graded if g.true_label is not None), grader.config.scale
        )
        arm.graded.extend(graded)
        arm.items += len(chunk)
        arm.chunks += 1
        allocation.append(arm.candidate.id)

    for arm in arms:
        pull(arm)
    spent = len(arms)
    while spent < budget:
        total = sum(a.chunks for a in arms)
        best: Optional[_Arm] = None
        best_value = -math.inf
        for arm in arms:
            if arm.chunks >= len(chunks):
                continue
            value = ucb_value(arm.mean_kappa, arm.chunks, total, c)
            if value > best_value:
                best, best_value = arm, value
        if best is None:
            logger.info("Every candidate graded the full batch after %d chunks", spent)
            break
        pull(best)
        spent += 1

    total = sum(a.chunks for a in arms)
    means = [a.mean_kappa for a in arms]
    normalized = min_max_normalize(means)
    scores: Dict[str, CandidateScore] = {}
    for arm, mean, norm in zip(arms, means, normalized):
        scores[arm.candidate.id] = CandidateScore(
            candidate_id=arm.candidate.id,
            mean_kappa=mean,
            accuracy=report(arm.matrix).accuracy if arm.matrix.total else 0.0,
            chunks=arm.chunks,
            items=arm.items,
            ucb=ucb_value(mean, arm.chunks, total, c),
            normalized=norm,
        )
    return UCBOutcome(
        pool=pool.model_copy(update={"scores": scores}),
        graded={arm.candidate.id: sorted(arm.graded, key=lambda g: g.response_id) for arm in arms},
        items=sum(a.items for a in arms),
        allocation=allocation,
    )


def select_score(score: CandidateScore, candidate: RubricCandidate, covered: set, weight: float) -> float:
    bonus = (
        weight
        if candidate.kind in _BONUS_KINDS and candidate.target_mode not in covered
        else 0.0
    )
    return score.normalized + bonus


def diverse_select(pool: CandidatePool, beam_size: int, weight: float) -> List[RubricCandidate]:
    """Greedy beam selection: normalized κ plus ``weight`` for a mode not yet covered.

    Ties go to the higher raw κ, then the smaller candidate id. The covered
    set starts empty on every call.
    """
    if beam_size < 1:
        raise ConfigError("beam size must be at least 1")
    missing = [c.id for c in pool.candidates if c.id not in pool.scores]
    if missing:
        raise InputError(f"unscored candidates in pool: {', '.join(missing)}")
    if len(pool.candidates) <= beam_size:
        if len(pool.candidates) < beam_size:
            logger.info(
                "Pool of %d is smaller than beam size %d; keeping all",
                len(pool.candidates),
                beam_size,
            )
        beam_size = len(pool.candidates)

    remaining = list(pool.candidates)
    covered: set = set()
    selected: List[RubricCandidate] = []
    for _ in range(beam_size):
        pick = min(
            remaining,
            key=lambda cand: (
                -select_score(pool.scores[cand.id], cand, covered, weight),
                -pool.scores[cand.id].mean_kappa,
                cand.id,
            ),
        )
        selected.append(pick)
        remaining.remove(pick)
        if pick.kind in _BONUS_KINDS and pick.target_mode is not None:
            covered.add(pick.target_mode)
    return selected


def nearest_neighbors(vectors: np.ndarray, query: int, k: int) -> List[int]:
    """Indices of the ``k`` rows most cosine-similar to row ``query`` (itself included).

    Rows must be L2-normalized. Ties go to the lower index.
    """
    sims = vectors @ vectors[query]
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:k]]


def sample_minibatch(
    prev_misconf: Sequence[GradedResponse],
    train: Sequence[LabeledResponse],
    k: int,
    batch_cap: int,
    seed: int,
    round_index: int = 1,
    embedder: Optional[Embedder] = None,
    anchors_m: int = 8,
) -> List[LabeledResponse]:
    """Training minibatch for one round.

    Without prior gradings this is a seeded uniform sample. Otherwise the
    ``anchors_m`` most misconfident items become anchors, each contributes its
    ``k`` nearest training neighbors, and seeded uniform draws pad the batch.
    """
    if not train:
        raise InputError("training set is empty")
    cap = min(batch_cap, len(train))
    rng = np.random.default_rng([seed, round_index])
    if not prev_misconf:
        return [train[int(i)] for i in rng.choice(len(train), size=cap, replace=False)]

    index = {item.response_id: n for n, item in enumerate(train)}
    anchors = [
        index[g.response_id]
        for g in top_misconfident(prev_misconf, anchors_m)
        if g.response_id in index
    ]
    chosen: Dict[int, None] = {}
    if anchors:
        vectors = (embedder or HashingEmbedder()).embed_many(
            [item.text for item in train], [item.response_id for item in train]
        )
        for anchor in anchors:
            for neighbor in nearest_neighbors(vectors, anchor, k):
                chosen.setdefault(neighbor, None)
    picked = list(chosen)[:cap]
    if len(picked) < cap:
        taken = set(picked)
        rest = np.array([n for n in range(len(train)) if n not in taken])
        picked.extend(int(i) for i in rng.permutation(rest)[: cap - len(picked)])
    logger.debug("Minibatch: %d anchors, %d neighbors, %d total", len(anchors), len(chosen), len(picked))
    return [train[n] for n in picked]
