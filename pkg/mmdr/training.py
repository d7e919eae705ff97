"""Training schedules for DR, SDR and MDR.

DR   three independent runs (intent, text, image), each with its own Adam state,
     epoch budget and best-dev selection.
SDR  one run; every step draws an intent, an image and a text batch, back-props
     the three losses into the shared gradient buffers and takes one Adam step.
MDR  one run over stratified mixed-modality batches with the joint loss only.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from mmdr.autodiff import Tape, Tensor, concat
from mmdr.config import RunConfig
from mmdr.data.augment import intent_label_flips, intent_labels, prefix_augment
from mmdr.data.batching import batch_stream, filter_for
from mmdr.data.pools import build_pools
from mmdr.encoders import encode_contexts, encode_image_responses, encode_text_responses
from mmdr.errors import DataError, NumericalError
from mmdr.evaluation import TrailEntry, evaluate, selection_key
from mmdr.models import CandidatePool, DialogueExample, EvalReport, Modality, Objective, Regime
from mmdr.objectives import ContrastiveBatch, IntentBatch, contrastive_loss, intent_loss, joint_loss
from mmdr.optim import AdamState, LrSchedule, lr_at_step, step_params, zero_grads
from mmdr.regimes import ModelBundle
from mmdr.runlog import RunLog

# Backward order inside one SDR step.
SDR_OBJECTIVES = (Objective.INTENT, Objective.IMAGE, Objective.TEXT)

_RUN_SLOT = {"intent": 0, "text": 1, "image": 2, "sdr": 3, "mdr": 4}

CheckpointCallback = Callable[[str, TrailEntry, str, AdamState], None]
ProgressCallback = Callable[[str, int, int], None]


@dataclass(frozen=True)
class RunPlan:
    """One optimization problem: which objectives are summed and which components they update."""

    name: str
    objectives: tuple[Objective, ...]
    components: tuple[str, ...]
    epochs: int
    metric: Objective | None


@dataclass
class RunOutcome:
    plan: RunPlan
    steps: int
    trail: list[TrailEntry]
    best: TrailEntry
    state: AdamState
    losses: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    bundle: ModelBundle
    runs: dict[str, RunOutcome]

    @property
    def trail(self) -> list[TrailEntry]:
        return [entry for run in self.runs.values() for entry in run.trail]


def plan_runs(bundle: ModelBundle, config: RunConfig) -> list[RunPlan]:
    epochs = config.train.epochs
    if bundle.regime == Regime.DR:
        budget = {Objective.INTENT: epochs.intent, Objective.TEXT: epochs.text, Objective.IMAGE: epochs.image}
        return [
            RunPlan(obj.value, (obj,), tuple(bundle.components_for(obj)), budget[obj], obj)
            for obj in (Objective.INTENT, Objective.TEXT, Objective.IMAGE)
        ]
    if bundle.regime == Regime.SDR:
        return [
            RunPlan(
                "sdr",
                SDR_OBJECTIVES,
                tuple(bundle.components()),
                max(epochs.intent, epochs.text, epochs.image),
                None,
            )
        ]
    return [RunPlan("mdr", (Objective.JOINT,), tuple(bundle.components()), epochs.joint, None)]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.data[...] = snapshot[name]


def _copy_state(state: AdamState) -> AdamState:
    return AdamState(
        step=state.step,
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )


class Trainer:
    """Owns a bundle while it trains.

    Args:
        bundle: Freshly built (or partially trained) model
        train_examples: Raw training split; prefix augmentation is applied here
        dev_examples: Dev split used for periodic evaluation
        config: Resolved run configuration
        log: Event stream for step/eval/checkpoint events
        dev_pools: Pre-built dev pools; built from the eval config when omitted
        workers: Evaluation threads (training itself is single-threaded)
        on_checkpoint: Called with (run name, trail entry, "best" | "last", optimizer state)
        progress: Called with (run name, step, total steps)
    """

    def __init__(
        self,
        bundle: ModelBundle,
        train_examples: Sequence[DialogueExample],
        dev_examples: Sequence[DialogueExample],
        config: RunConfig,
        log: RunLog | None = None,
        dev_pools: CandidatePool | None = None,
        workers: int = 1,
        on_checkpoint: CheckpointCallback | None = None,
        progress: ProgressCallback | None = None,
    ) -> None:
        self.bundle = bundle
        self.config = config
        self.log = log or RunLog()
        self.workers = workers
        self.on_checkpoint = on_checkpoint
        self.progress = progress
        tc = config.train
        self.train_examples = prefix_augment(train_examples) if tc.prefix_augment else list(train_examples)
        self.dev_examples = list(dev_examples)
        self.flips = intent_label_flips(self.train_examples, tc.intent_label_noise, tc.seed)
        self.dev_pools = dev_pools or build_pools(
            "dev", self.dev_examples, config.eval.seed, config.eval.pool_size, config.eval.shared_pool
        )
        self.schedule = LrSchedule(tc.learning_rate, tc.decay_fraction, tc.decay_interval)

    def train(self) -> TrainResult:
        """Run every optimization problem of the bundle's regime."""
        present = {ex.gold_modality for ex in self.train_examples}
        missing = [m.value for m in Modality if m not in present]
        if missing:
            raise DataError(f"training split has no {' or '.join(missing)} responses")
        if self.workers > 1:
            self.log.log_event("warning", message="training is single-threaded; workers apply to evaluation only")
        self.log.log_event(
            "run_start",
            regime=self.bundle.regime.value,
            train_examples=len(self.train_examples),
            dev_examples=len(self.dev_examples),
            config_hash=self.config.config_hash(),
        )
        runs = {plan.name: self.run(plan) for plan in plan_runs(self.bundle, self.config)}
        best = {
            name: {"step": r.best.step, "key": list(selection_key(r.best.report, r.plan.metric))}
            for name, r in runs.items()
        }
        self.log.log_event("run_end", regime=self.bundle.regime.value, best=best)
        return TrainResult(bundle=self.bundle, runs=runs)

    def run_subtask(self, objective: Objective) -> RunOutcome:
        """Train a single DR subtask on its own."""
        plans = {p.objectives: p for p in plan_runs(self.bundle, self.config)}
        if (objective,) not in plans or self.bundle.regime != Regime.DR:
            raise DataError(f"{objective.value} is not a separate subtask of {self.bundle.regime.value}")
        return self.run(plans[(objective,)])

    def steps_for(self, plan: RunPlan) -> int:
        n = len(filter_for(self.train_examples, plan.objectives[0]))
        total = plan.epochs * math.ceil(n / self.config.train.batch_size)
        cap = self.config.train.max_steps
        return min(total, cap) if cap is not None else total

    def _streams(self, plan: RunPlan) -> dict[Objective, Iterator[tuple[int, list[DialogueExample]]]]:
        tc = self.config.train
        streams = {}
        for obj in plan.objectives:
            if not filter_for(self.train_examples, obj):
                raise DataError(f"no training examples for the {obj.value} objective")
            streams[obj] = batch_stream(
                self.train_examples,
                self.bundle.regime,
                obj,
                tc.batch_size,
                tc.seed + _RUN_SLOT[plan.name],
                tc.joint_image_ratio,
            )
        return streams

    def run(self, plan: RunPlan) -> RunOutcome:
        tc = self.config.train
        params = self.bundle.named_parameters(plan.components)
        state = AdamState.for_params(params)
        streams = self._streams(plan)
        rng = np.random.default_rng([tc.seed, _RUN_SLOT[plan.name]])
        total = self.steps_for(plan)

        trail: list[TrailEntry] = []
        best: TrailEntry | None = None
        best_params = _snapshot(params)
        losses: list[float] = []

        for step in range(1, total + 1):
            lr = lr_at_step(self.schedule, step - 1)
            zero_grads(params)
            step_losses: dict[str, float] = {}
            epoch = 0
            try:
                for obj in plan.objectives:
                    epoch, batch = next(streams[obj])
                    with Tape() as tape:
                        loss = self.loss(obj, batch, rng)
                    if not np.isfinite(loss.item()):
                        raise NumericalError(f"{obj.value} loss is not finite", {"objective": obj.value})
                    tape.backward(loss)
                    step_losses[obj.value] = loss.item()
                step_params(params, state, lr)
            except NumericalError as e:
                _restore(params, best_params)
                diagnostics = {"run": plan.name, "step": step, "losses": step_losses, **e.diagnostics}
                self.log.log_event("abort", **diagnostics, message=str(e))
                raise NumericalError(f"{plan.name} run aborted at step {step}: {e}", diagnostics) from e

            losses.append(sum(step_losses.values()))
            if step % tc.log_every == 0 or step == 1:
                self.log.log_event("step", run=plan.name, step=step, epoch=epoch, lr=lr, losses=step_losses)
            if self.progress is not None:
                self.progress(plan.name, step, total)

            if step % tc.eval_every == 0 or step == total:
                entry = TrailEntry(step=step, report=self._evaluate(plan), subtask=plan.metric)
                trail.append(entry)
                improved = best is None or selection_key(entry.report, plan.metric) > selection_key(
                    best.report, plan.metric
                )
                if improved:
                    best = entry
                    best_params = _snapshot(params)
                self.log.log_event(
                    "eval",
                    run=plan.name,
                    step=step,
                    report=entry.report.model_dump(mode="json"),
                    best=improved,
                )
                if self.on_checkpoint is not None:
                    if improved:
                        self.on_checkpoint(plan.name, entry, "best", state)
                    self.on_checkpoint(plan.name, entry, "last", state)

        if best is None:
            entry = TrailEntry(step=0, report=self._evaluate(plan), subtask=plan.metric)
            trail.append(entry)
            best = entry
        _restore(params, best_params)
        self.log.log_event("checkpoint", run=plan.name, step=best.step, selected=True)
        return RunOutcome(plan=plan, steps=total, trail=trail, best=best, state=_copy_state(state), losses=losses)

    def _evaluate(self, plan: RunPlan) -> EvalReport:
        return evaluate(self.bundle, self.dev_examples, self.dev_pools, workers=self.workers)

    def loss(self, objective: Objective, batch: Sequence[DialogueExample], rng: np.random.Generator) -> Tensor:
        """Training-mode loss of one batch for one objective."""
        b = self.bundle
        tc = self.config.train
        if objective == Objective.INTENT:
            _, head = b.intent_predictor()
            ctx = encode_contexts(b.context_encoder_for(objective), [ex.context for ex in batch], True, rng)
            return intent_loss(IntentBatch(ctx, intent_labels(batch, self.flips)), head)

        if objective == Objective.JOINT:
            batch = [ex for ex in batch if ex.gold_modality == Modality.TEXT] + [
                ex for ex in batch if ex.gold_modality == Modality.IMAGE
            ]
        ctx = encode_contexts(b.context_encoder_for(objective), [ex.context for ex in batch], True, rng)
        parts = []
        texts = [ex.text_response for ex in batch if ex.text_response is not None]
        images = [ex.image_response for ex in batch if ex.image_response is not None]
        if texts:
            parts.append(encode_text_responses(b.text_response_encoder, texts, True, rng))
        if images:
            parts.append(encode_image_responses(b.image_encoder, images, True, rng))
        responses = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        contrastive = ContrastiveBatch(
            ctx,
            responses,
            temperature=b.temperature,
            response_ids=[ex.response_id for ex in batch],
            mask_duplicates=tc.mask_duplicate_responses,
        )
        return joint_loss(contrastive) if objective == Objective.JOINT else contrastive_loss(contrastive)


def train(
    bundle: ModelBundle,
    train_examples: Sequence[DialogueExample],
    dev_examples: Sequence[DialogueExample],
    config: RunConfig,
    log: RunLog | None = None,
    **kwargs,
) -> TrainResult:
    return Trainer(bundle, train_examples, dev_examples, config, log, **kwargs).train()
