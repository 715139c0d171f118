"""The optimization loop: evaluate, diagnose per error mode, repair, search, select."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field

from .config import RunConfig
from .confusion import build_confusion, build_mode_context, top_k_modes, top_misconfident
from .datasets import partitions
from .embeddings import Embedder, HashingEmbedder
from .errors import ConfigError, InputError, ParseError, RubricLoopError
from .gateway import Gateway
from .grader import Evaluation, Grader, GraderConfig
from .logging_config import get_logger
from .metrics import report
from .models import (
    CandidateReport,
    ConfusionMatrix,
    Dataset,
    ErrorMode,
    GradedResponse,
    GradingFailure,
    LabeledResponse,
    MetricReport,
    ModeDiagnosis,
    OptimizationResult,
    RoundRecord,
    RubricCandidate,
    RulePatch,
    ScoreScale,
    mode_label,
)
from .reflection import ReflectionAgents
from .run_store import RunStore
from .search import diverse_select, expand_candidates, sample_minibatch, ucb_evaluate

logger = get_logger(__name__)

# Ledger bucket for work outside the round loop: baseline report, final selection, test inference.
OUTSIDE_LOOP = 0


class Inference(BaseModel):
    """Per-item grading of a held-out set, with metrics when every item is labeled."""

    graded: List[GradedResponse] = Field(default_factory=list)
    failures: List[GradingFailure] = Field(default_factory=list)
    report: Optional[MetricReport] = None


def _rank_key(candidate: RubricCandidate, metrics: MetricReport) -> Tuple[float, float, int, str]:
    return (-metrics.kappa, -metrics.accuracy, len(candidate.prompt_text), candidate.id)


def select_final(
    grader: Grader,
    beam: Sequence[RubricCandidate],
    val: Sequence[LabeledResponse],
    known: Optional[Dict[str, MetricReport]] = None,
) -> Tuple[RubricCandidate, Dict[str, MetricReport]]:
    """Highest validation κ; ties by accuracy, then shorter prompt, then id.

    ``known`` holds reports already computed on the same validation set.
    """
    if not beam:
        raise InputError("cannot select from an empty beam")
    reports: Dict[str, MetricReport] = {}
    for candidate in beam:
        if known and candidate.id in known:
            reports[candidate.id] = known[candidate.id]
        else:
            reports[candidate.id] = grader.evaluate_candidate(candidate, val).report
    best = min(beam, key=lambda c: _rank_key(c, reports[c.id]))
    logger.info(
        "Selected %s (validation kappa %.3f, accuracy %.3f)",
        best.id,
        reports[best.id].kappa,
        reports[best.id].accuracy,
    )
    return best, reports


def infer(grader: Grader, best: RubricCandidate, items: Sequence[LabeledResponse]) -> Inference:
    """Grade held-out items; parse failures are kept out of the metrics but counted."""
    if not items:
        return Inference()
    graded, failures = grader.grade_batch(best, items)
    metrics = None
    if all(item.label is not None for item in items):
        matrix = build_confusion(graded, grader.config.scale)
        metrics = report(matrix, parse_failures=len(failures))
    if failures:
        logger.warning("%d of %d test items could not be graded", len(failures), len(items))
    return Inference(graded=graded, failures=failures, report=metrics)


class Optimizer:
    """Runs the round loop for one configuration over one dataset."""

    def __init__(
        self,
        config: RunConfig,
        gateway: Gateway,
        scale: ScoreScale,
        embedder: Optional[Embedder] = None,
        store: Optional[RunStore] = None,
    ) -> None:
        self.config = config
        self.gateway = gateway
        self.scale = scale
        self.embedder = embedder or HashingEmbedder()
        self.store = store
        self.grader = Grader(
            gateway,
            GraderConfig(num_classes=scale.num_classes, probability_mode=config.probability_mode),
        )
        self.agents = ReflectionAgents(gateway, config.edit_budget)

    # -- one round ---------------------------------------------------------------------

    def _evaluate_beam(
        self, beam: Sequence[RubricCandidate], batch: Sequence[LabeledResponse]
    ) -> Dict[str, Evaluation]:
        """Every beam member graded on ``batch``, members fanned out like the agent calls."""
        workers = max(1, min(len(beam), self.gateway.concurrency))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evaluations = list(pool.map(lambda c: self.grader.evaluate_candidate(c, batch), beam))
        return {candidate.id: evaluation for candidate, evaluation in zip(beam, evaluations)}

    def _mode_matrix(
        self, beam: Sequence[RubricCandidate], evaluations: Dict[str, Evaluation], best_id: str
    ) -> ConfusionMatrix:
        if self.config.mode_source == "pooled":
            pooled = ConfusionMatrix.zeros(self.scale)
            for candidate in beam:
                pooled = pooled + evaluations[candidate.id].matrix
            return pooled
        return evaluations[best_id].matrix

    def _mode_patches(
        self,
        rules: str,
        graded: Sequence[GradedResponse],
        matrix: ConfusionMatrix,
        modes: Sequence[ErrorMode],
        texts: Dict[str, str],
    ) -> Tuple[List[ModeDiagnosis], List[RulePatch], List[str]]:
        """One Reflector and one Refiner call per mode, fanned out; unparseable modes are skipped."""
        cfg = self.config
        contexts = [
            build_mode_context(graded, mode, matrix, texts, cfg.error_cap, cfg.contrastive_n)
            for mode in modes
        ]
        active = [mode.key for mode in modes]
        skipped: List[str] = []
        workers = max(1, min(len(contexts), self.gateway.concurrency))

        def diagnose(ctx):
            try:
                return self.agents.diagnose(rules, ctx, active)
            except ParseError as exc:
                logger.warning("Skipping mode %s: diagnosis unreadable (%s)", ctx.mode.label, exc)
                return None

        with ThreadPoolExecutor(max_workers=workers) as pool:
            diagnosed = list(pool.map(diagnose, contexts))
        diagnoses = [d for d in diagnosed if d is not None]
        skipped.extend(ctx.mode.key for ctx, d in zip(contexts, diagnosed) if d is None)

        def refine(pair):
            ctx, diagnosis = pair
            others = [key for key in active if key != ctx.mode.key]
            try:
                return self.agents.refine(rules, diagnosis, ctx, others)
            except ParseError as exc:
                logger.warning("Skipping mode %s: rule patch unreadable (%s)", ctx.mode.label, exc)
                return None

        pairs = [(ctx, d) for ctx, d in zip(contexts, diagnosed) if d is not None]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            refined = list(pool.map(refine, pairs))
        patches = [p for p in refined if p is not None]
        skipped.extend(ctx.mode.key for (ctx, _), p in zip(pairs, refined) if p is None)
        return diagnoses, patches, skipped

    def aggregate_baseline_round(
        self,
        rules: str,
        evaluation: Evaluation,
        texts: Dict[str, str],
    ) -> Tuple[List[ModeDiagnosis], List[RulePatch]]:
        """Comparison arm: one Reflector call over mixed errors, one Refiner call, one patch."""
        errors = [g for g in evaluation.graded if g.true_label is not None and not g.correct]
        errors = top_misconfident(errors, self.config.error_cap)
        try:
            diagnosis = self.agents.aggregate_diagnose(rules, errors, texts, evaluation.report)
            patch = self.agents.aggregate_refine(rules, diagnosis, errors, texts)
        except ParseError as exc:
            logger.warning("Aggregate feedback unreadable this round (%s)", exc)
            return [], []
        return [diagnosis], [patch]

    def run_round(
        self,
        t: int,
        beam: List[RubricCandidate],
        anchors: Sequence[GradedResponse],
        train: Sequence[LabeledResponse],
        val: Sequence[LabeledResponse],
    ) -> Tuple[RoundRecord, List[GradedResponse]]:
        cfg = self.config
        self.gateway.ledger.begin_round(t)
        batch = sample_minibatch(
            anchors,
            train,
            cfg.neighbors_k,
            cfg.batch_cap,
            cfg.seed,
            t,
            self.embedder,
            cfg.anchors_m,
        )
        texts = {item.response_id: item.text for item in batch}

        evaluations = self._evaluate_beam(beam, batch)
        best = min(beam, key=lambda c: (-evaluations[c.id].report.kappa, -evaluations[c.id].report.accuracy, c.id))
        best_eval = evaluations[best.id]
        matrix = self._mode_matrix(beam, evaluations, best.id)
        modes = top_k_modes(matrix, cfg.top_k) if matrix.off_diagonal else []
        logger.info(
            "Round %d: best %s kappa=%.3f acc=%.3f, modes %s",
            t,
            best.id,
            best_eval.report.kappa,
            best_eval.report.accuracy,
            ", ".join(f"{m.label} ({m.count})" for m in modes) or "none",
        )

        diagnoses: List[ModeDiagnosis] = []
        patches: List[RulePatch] = []
        consolidated: Optional[RulePatch] = None
        skipped: List[str] = []
        if modes:
            rules = best.rules_section
            if cfg.baseline_mode:
                diagnoses, patches = self.aggregate_baseline_round(rules, best_eval, texts)
            else:
                diagnoses, patches, skipped = self._mode_patches(
                    rules, best_eval.graded, matrix, modes, texts
                )
                if patches:
                    consolidated = self.agents.consolidate(rules, patches, matrix)

        pool_scores = []
        ucb_items = 0
        new_beam = list(beam)
        next_anchors = top_misconfident(best_eval.graded, cfg.anchors_m)
        expansions = patches + ([consolidated] if consolidated else [])
        if expansions:
            pool = expand_candidates(beam, expansions, t, cfg.max_rules_words)
            budget = math.ceil(cfg.ucb_budget_factor * len(pool.candidates))
            outcome = ucb_evaluate(pool, batch, budget, self.grader, cfg.chunk_size, cfg.ucb_c)
            new_beam = diverse_select(outcome.pool, cfg.beam_size, cfg.diversity_weight)
            pool_scores = [outcome.pool.scores[c.id] for c in outcome.pool.candidates]
            ucb_items = outcome.items
            next_anchors = top_misconfident(outcome.graded[new_beam[0].id], cfg.anchors_m)
            logger.info(
                "Round %d: pool of %d, %d items graded under UCB, beam %s",
                t,
                len(pool.candidates),
                ucb_items,
                ", ".join(f"{c.id}[{mode_label(c.target_mode)}]" for c in new_beam),
            )
        elif modes:
            logger.warning("Round %d produced no usable patch; the beam carries over", t)
        else:
            logger.info("Round %d: no errors on the minibatch; the beam carries over", t)

        validation = None
        if cfg.track_validation and val:
            reports = [e.report for e in self._evaluate_beam(new_beam, val).values()]
            validation = min(reports, key=lambda r: (-r.kappa, -r.accuracy))

        record = RoundRecord(
            round=t,
            minibatch_ids=[item.response_id for item in batch],
            beam_reports=[
                CandidateReport(
                    candidate_id=c.id,
                    kind=c.kind,
                    target_mode=c.target_mode,
                    report=evaluations[c.id].report,
                )
                for c in beam
            ],
            best_candidate_id=best.id,
            matrix=matrix,
            modes=modes,
            diagnoses=diagnoses,
            patches=patches,
            consolidated=consolidated,
            pool_scores=pool_scores,
            ucb_items=ucb_items,
            beam=new_beam,
            anchors=next_anchors,
            validation=validation,
            usage=self.gateway.ledger.round_usage(t),
            converged=not modes,
            skipped_modes=skipped,
        )
        return record, best_eval.graded

    # -- whole run ---------------------------------------------------------------------

    def run(
        self,
        root: RubricCandidate,
        train: Sequence[LabeledResponse],
        val: Sequence[LabeledResponse],
        test: Sequence[LabeledResponse],
        history: Sequence[RoundRecord] = (),
    ) -> OptimizationResult:
        cfg = self.config
        if not train:
            raise InputError("training split is empty")
        if any(item.label is None for item in (*train, *val)):
            raise InputError("training and validation items need labels")
        test_ids = {item.response_id for item in test}
        if test_ids & {item.response_id for item in (*train, *val)}:
            raise InputError("test items overlap with training or validation items")

        if self.store is not None:
            self.store.init(cfg)
        records: List[RoundRecord] = list(history)
        beam: List[RubricCandidate] = list(records[-1].beam) if records else [root]
        anchors: List[GradedResponse] = list(records[-1].anchors) if records else []
        for record in records:
            self.gateway.ledger.restore(record.round, record.usage)

        best_kappa = -math.inf
        stale = 0
        for record in records:
            stale, best_kappa = self._patience_step(record, stale, best_kappa)
        stopped_early = bool(cfg.patience and stale >= cfg.patience)

        try:
            for t in range(len(records) + 1, cfg.rounds + 1):
                if stopped_early:
                    break
                record, graded = self.run_round(t, beam, anchors, train, val)
                records.append(record)
                if self.store is not None:
                    self.store.save_round(record, graded)
                beam, anchors = list(record.beam), list(record.anchors)
                stale, best_kappa = self._patience_step(record, stale, best_kappa)
                if cfg.patience and stale >= cfg.patience:
                    logger.info("No kappa improvement for %d rounds; stopping early", stale)
                    stopped_early = t < cfg.rounds
        except RubricLoopError as exc:
            logger.error("Run aborted in round %d: %s", len(records) + 1, exc)
            if self.store is not None:
                self.store.save_ledger(self.gateway.ledger_snapshot())
            raise

        self.gateway.ledger.begin_round(OUTSIDE_LOOP)
        known: Dict[str, MetricReport] = {}
        initial_report = None
        if val:
            initial_report = self.grader.evaluate_candidate(root, val).report
            known[root.id] = initial_report
            best, val_reports = select_final(self.grader, beam, val, known)
        else:
            logger.warning("No validation items; keeping the top beam member")
            best, val_reports = beam[0], {}

        test_run = Inference()
        if cfg.run_test and test:
            test_run = infer(self.grader, best, test)
        result = OptimizationResult(
            best_prompt=best,
            rounds=records,
            ledger=self.gateway.ledger_snapshot(),
            initial_report=initial_report,
            val_reports=val_reports,
            test_report=test_run.report,
            stopped_early=stopped_early,
        )
        if self.store is not None:
            self.store.save_result(result, test_run.graded if cfg.run_test and test else None)
        return result

    @staticmethod
    def _patience_step(record: RoundRecord, stale: int, best_kappa: float) -> Tuple[int, float]:
        kappa = record.best_report.kappa
        if kappa > best_kappa:
            return 0, kappa
        return stale + 1, best_kappa


def run_optimization(
    config: RunConfig,
    dataset: Dataset,
    gateway: Gateway,
    embedder: Optional[Embedder] = None,
    store: Optional[RunStore] = None,
    resume_at: Optional[int] = None,
    initial_rubric: Optional[str] = None,
) -> OptimizationResult:
    """Split ``dataset``, run the loop from the initial rubric and select the final prompt.

    With ``resume_at`` the rounds before it are reloaded from ``store`` and
    the loop continues from there.
    """
    text = initial_rubric or config.rubric_text()
    if not text:
        raise ConfigError("No initial rubric: set initial_rubric or initial_rubric_path")
    root = RubricCandidate.root(text)
    train, val, test = partitions(dataset, config.split_ratios, config.seed)
    logger.info("Split: %d train, %d val, %d test", len(train), len(val), len(test))

    history: List[RoundRecord] = []
    if resume_at is not None:
        if store is None:
            raise ConfigError("Resuming needs a run directory")
        history = store.load_state(resume_at)
        logger.info("Resuming at round %d with %d saved rounds", resume_at, len(history))

    optimizer = Optimizer(config, gateway, dataset.scale, embedder=embedder, store=store)
    return optimizer.run(root, train, val, test, history=history)
