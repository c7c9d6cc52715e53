"""The incremental few-shot segmentation protocol and its training loop."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, LabeledImage, SegDataset, SyntheticSpec, generate_dataset, hflip
from .methods import MethodSpec
from .metrics import ConfusionAccumulator, MetricsReport, aggregate, make_report
from .nn import CosineClassifier, FeatureExtractor, NormMode, SegModel
from .protolearn import (
    DistillVariant,
    LossConfig,
    TeacherSnapshot,
    build_teacher,
    extend_random,
    imprint,
    loss_terms,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

VAL_ID_OFFSET = 1_000_000
SHOT_CHOICES = (1, 2, 5)


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainerConfig:
    lr_base: float = 1e-2
    lr_fsl: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iters_base: int = 2000
    iters_fsl: int = 200
    batch_size_base: int = 10
    max_batch_fsl: int = 10
    flip: bool = True

    def __post_init__(self):
        for name in ("lr_base", "lr_fsl", "iters_base", "iters_fsl", "batch_size_base", "max_batch_fsl"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be nonnegative")

    def fsl_batch_size(self, n_images: int) -> int:
        return min(self.max_batch_fsl, n_images)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (16, 16)
    feature_dim: int = 16
    tau: float = 10.0
    learn_tau: bool = False
    norm_momentum: float = 0.1
    br_clip: bool = False
    final_relu: bool = False


@dataclass(frozen=True)
class ProtocolConfig:
    shots: int = 1
    setting: str = "ss"
    strict: bool = False
    folds: tuple[int, ...] = (0,)
    fold_size: int = 2
    ms_steps: int = 2
    ms_classes_per_step: int = 1
    seed: int = 0
    trials: int = 4
    n_train_pool: int = 800
    n_base_images: int = 300
    n_val_images: int = 100
    background_in_base: bool = True
    hm_mode: str = "recompute"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.shots not in SHOT_CHOICES:
            raise ValueError(f"shots must be one of {SHOT_CHOICES}, got {self.shots}")
        if self.setting not in ("ss", "ms"):
            raise ValueError(f"setting must be 'ss' or 'ms', got {self.setting!r}")
        if self.setting == "ms" and self.ms_steps * self.ms_classes_per_step != self.fold_size:
            raise ValueError(
                f"multi-step schedule {self.ms_steps} x {self.ms_classes_per_step} does not cover fold size {self.fold_size}"
            )
        if self.trials < 1 or self.fold_size < 1:
            raise ValueError("trials and fold_size must be positive")
        if self.hm_mode not in ("recompute", "average"):
            raise ValueError(f"hm_mode must be 'recompute' or 'average', got {self.hm_mode!r}")

    def schedule(self, new_classes: Sequence[int]) -> list[list[int]]:
        """New classes per FSL step: all at once (SS) or ascending chunks (MS)."""
        ordered = sorted(new_classes)
        if self.setting == "ss":
            return [ordered]
        k = self.ms_classes_per_step
        return [ordered[i : i + k] for i in range(0, len(ordered), k)]


# -- class splits and data selection ---------------------------------------------

@dataclass(frozen=True)
class ClassSplit:
    all_classes: tuple[int, ...]
    folds: tuple[tuple[int, ...], ...]
    background_class: int = 0

    def new_classes(self, fold: int) -> tuple[int, ...]:
        if not 0 <= fold < len(self.folds):
            raise ValueError(f"fold {fold} out of range; {len(self.folds)} folds exist")
        return self.folds[fold]

    def base_classes(self, fold: int) -> tuple[int, ...]:
        new = set(self.new_classes(fold))
        return tuple(c for c in self.all_classes if c not in new)


def make_folds(n_classes: int, fold_size: int) -> ClassSplit:
    """Contiguous ascending folds over classes 1..n_classes-1 (0 is background)."""
    if fold_size < 1 or (n_classes - 1) % fold_size:
        raise ValueError(f"{n_classes - 1} foreground classes cannot be split into folds of {fold_size}")
    folds = tuple(
        tuple(range(1 + j * fold_size, 1 + (j + 1) * fold_size)) for j in range((n_classes - 1) // fold_size)
    )
    return ClassSplit(tuple(range(n_classes)), folds)


def filter_base_dataset(pool: SegDataset, new_classes: Iterable[int]) -> SegDataset:
    """Keep only images without a single pixel of any new class."""
    new = np.asarray(sorted(set(new_classes)))
    kept = SegDataset(tuple(it for it in pool if not np.isin(it.mask, new).any()))
    if not len(kept):
        raise ValueError("every image contains a new class; the base step has no data")
    return kept


def sample_fsl_dataset(pool: SegDataset, k: int, shots: int, rng: np.random.Generator) -> SegDataset:
    """``shots`` distinct images containing class ``k``, uniformly without replacement."""
    eligible = pool.containing(k)
    if len(eligible) < shots:
        raise ValueError(f"class {k}: {len(eligible)} eligible images, {shots - len(eligible)} short of {shots} shots")
    picks = rng.choice(len(eligible), size=shots, replace=False)
    return SegDataset(tuple(eligible[int(i)] for i in picks))


def relabel_strict(mask: np.ndarray, old_classes: Iterable[int]) -> np.ndarray:
    """Annotate old-class pixels as background."""
    old = [c for c in old_classes if c != 0]
    mask = np.asarray(mask)
    return np.where(np.isin(mask, old), 0, mask).astype(mask.dtype)


def training_mask(mask: np.ndarray, known: Iterable[int], old: Iterable[int], strict: bool) -> np.ndarray:
    """FSL-step labels: classes not yet known become background; strict mode
    also maps old classes to background."""
    known = sorted(set(known))
    out = np.where(np.isin(mask, known) | (mask == IGNORE_INDEX), mask, 0)
    return relabel_strict(out, old) if strict else out


def eval_mask(mask: np.ndarray, known: Iterable[int]) -> np.ndarray:
    """Validation labels: classes the model has not seen yet are ignored."""
    return np.where(np.isin(mask, sorted(set(known))), mask, IGNORE_INDEX)


# -- optimization ----------------------------------------------------------------

def poly_lr(it: int, max_iter: int, lr_init: float, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr_init * (1.0 - it / max_iter) ** power


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    lr: float,
    velocity: list[np.ndarray],
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """In place: v <- momentum * v + (g + wd * p); p <- p - lr * v."""
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity buffers differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape or velocity[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        velocity[i] = momentum * velocity[i] + (g + weight_decay * p.data)
        p.data = p.data - lr * velocity[i]


class SGD:
    """Momentum SGD whose velocity buffers live as long as the optimizer."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], lr, self.velocity, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainLog:
    ce: list[float] = field(default_factory=list)
    distill: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def _collate(items: Sequence[LabeledImage], flips: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    items = [hflip(it) if f else it for it, f in zip(items, flips)]
    return np.stack([it.image for it in items]), np.stack([it.mask for it in items])


def train(
    model: SegModel,
    dataset: SegDataset,
    iters: int,
    lr_init: float,
    batch_size: int,
    rng: np.random.Generator,
    trainer: TrainerConfig = TrainerConfig(),
    teacher: Optional[TeacherSnapshot] = None,
    loss_cfg: LossConfig = LossConfig(variant=DistillVariant.NONE),
) -> TrainLog:
    """Minimize cross-entropy (+ distillation) with momentum SGD and poly LR.

    A fresh optimizer is created per call, so velocity never crosses steps.
    """
    opt = SGD(model.parameters(), trainer.momentum, trainer.weight_decay)
    batches = _batches(len(dataset), batch_size, rng)
    history = TrainLog()
    for it in range(iters):
        idx = next(batches)
        flips = rng.random(len(idx)) < 0.5 if trainer.flip else np.zeros(len(idx), dtype=bool)
        x, y = _collate([dataset[int(i)] for i in idx], flips)
        opt.zero_grad()
        terms = loss_terms(x, y, model, teacher, loss_cfg, training=True)
        T.backward(terms.total)
        opt.step(poly_lr(it, iters, lr_init))
        history.ce.append(terms.ce.item())
        history.distill.append(terms.distill.item() if terms.distill is not None else 0.0)
        history.total.append(terms.total.item())
        history.batch_sizes.append(len(idx))
    return history


# -- protocol state machine ------------------------------------------------------

@dataclass
class ProtocolState:
    step: int
    model: SegModel
    classes: tuple[int, ...]  # C^t
    new_classes: tuple[int, ...]  # K^t
    base_classes: tuple[int, ...]  # C^0
    prev_model: Optional[SegModel] = None
    norm_frozen: bool = False
    dataset: Optional[SegDataset] = None  # D^t, the only data this step may touch
    log: Optional[TrainLog] = None


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def build_model(cfg: ProtocolConfig, classes: Sequence[int], rng: np.random.Generator, in_channels: int = 3) -> SegModel:
    m = cfg.model
    fx = FeatureExtractor.create(in_channels, m.hidden, m.feature_dim, rng, m.norm_momentum, m.final_relu)
    for norm in fx.norm_layers:
        norm.clip = m.br_clip
    clf = CosineClassifier.random(m.feature_dim, classes, rng, m.tau)
    if m.learn_tau:
        clf.tau.requires_grad = True
    return SegModel(fx, clf)


def run_base_step(cfg: ProtocolConfig, split: ClassSplit, pool: SegDataset, fold: int) -> ProtocolState:
    """Train on base classes only, then freeze every normalization layer's running statistics."""
    new = split.new_classes(fold)
    base_data = filter_base_dataset(pool, new)
    if len(base_data) < cfg.n_base_images:
        raise ValueError(
            f"fold {fold}: only {len(base_data)} base images after filtering, {cfg.n_base_images} requested"
        )
    base_data = base_data[: cfg.n_base_images]
    classes = split.base_classes(fold)
    rng = derive_rng(cfg.seed, fold, 0)
    model = build_model(cfg, classes, rng)
    tr = cfg.trainer
    history = train(model, base_data, tr.iters_base, tr.lr_base, min(tr.batch_size_base, len(base_data)), rng, tr)
    model.extractor.freeze_norm_stats()
    return ProtocolState(
        step=0,
        model=model,
        classes=tuple(classes),
        new_classes=tuple(classes),
        base_classes=tuple(classes),
        norm_frozen=True,
        dataset=base_data,
        log=history,
    )


def run_fsl_step(
    state: ProtocolState,
    fsl_dataset: SegDataset,
    method: MethodSpec,
    new_classes: Sequence[int],
    trainer: TrainerConfig = TrainerConfig(),
    rng: Optional[np.random.Generator] = None,
    init_rng: Optional[np.random.Generator] = None,
) -> ProtocolState:
    """One few-shot learning step; ``fsl_dataset`` labels must lie in C^t."""
    rng = rng if rng is not None else np.random.default_rng(0)
    init_rng = init_rng if init_rng is not None else np.random.default_rng(1)
    new = tuple(sorted(set(int(c) for c in new_classes)))
    prev = state.model
    if method.imprint:
        model = imprint(prev, fsl_dataset, new)
    else:
        model = extend_random(prev, new, init_rng)
    model.extractor.set_norm_mode(method.norm_mode)
    model.extractor.freeze_norm_stats()

    history = None
    if method.finetune:
        teacher = None
        if method.distill is DistillVariant.PD:
            teacher = build_teacher(prev, fsl_dataset, new)
        elif method.distill in (DistillVariant.KD, DistillVariant.L2):
            teacher = TeacherSnapshot.of(prev)
        history = train(
            model,
            fsl_dataset,
            trainer.iters_fsl,
            trainer.lr_fsl,
            trainer.fsl_batch_size(len(fsl_dataset)),
            rng,
            trainer,
            teacher=teacher,
            loss_cfg=method.loss_config,
        )
    return ProtocolState(
        step=state.step + 1,
        model=model,
        classes=tuple(state.classes) + new,
        new_classes=new,
        base_classes=state.base_classes,
        prev_model=prev,
        norm_frozen=True,
        dataset=fsl_dataset,
        log=history,
    )


def evaluate(
    model: SegModel,
    val: SegDataset,
    base_classes: Sequence[int],
    new_classes: Sequence[int],
    n_classes: int,
    background_in_base: bool = True,
    **ids,
) -> MetricsReport:
    known = list(model.classes)
    acc = ConfusionAccumulator(n_classes)
    preds = model.predict(val.images())
    for pred, item in zip(preds, val):
        acc.update(pred, eval_mask(item.mask, known))
    return make_report(acc, base_classes, new_classes, background_in_base=background_in_base, **ids)


# -- experiment orchestration ----------------------------------------------------

@dataclass
class Pools:
    train: SegDataset
    val: SegDataset


def make_pools(cfg: ProtocolConfig, spec: SyntheticSpec) -> Pools:
    return Pools(
        train=generate_dataset(spec, cfg.n_train_pool, spec.shape_classes),
        val=generate_dataset(spec, cfg.n_val_images, spec.shape_classes, start_id=VAL_ID_OFFSET),
    )


def sample_step_dataset(
    pool: SegDataset, step_classes: Sequence[int], shots: int, rng: np.random.Generator
) -> SegDataset:
    """Per-class few-shot samples for one step, merged without duplicate images."""
    seen: set[int] = set()
    items = []
    for k in step_classes:
        for it in sample_fsl_dataset(pool, k, shots, rng):
            if it.id not in seen:
                seen.add(it.id)
                items.append(it)
    return SegDataset(tuple(items))


@dataclass
class TrialResult:
    method: str
    fold: int
    trial: int
    reports: list[MetricsReport]
    final_model: SegModel
    fsl_batch_sizes: list[int] = field(default_factory=list)
    fsl_masks: list[np.ndarray] = field(default_factory=list)
    norm_stats: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)


def run_trial(
    cfg: ProtocolConfig,
    split: ClassSplit,
    method: MethodSpec,
    fold: int,
    trial: int,
    base: ProtocolState,
    pools: Pools,
    n_classes: int,
) -> TrialResult:
    sample_rng = derive_rng(cfg.seed, fold, 1, trial)
    state = replace(base, dataset=None, log=None)
    result = TrialResult(method.name, fold, trial, [], base.model)
    for step, step_classes in enumerate(cfg.schedule(split.new_classes(fold)), start=1):
        raw = sample_step_dataset(pools.train, step_classes, cfg.shots, sample_rng)
        known = tuple(state.classes) + tuple(step_classes)
        fsl = raw.map_masks(lambda m: training_mask(m, known, state.classes, cfg.strict))
        result.fsl_masks.extend(it.mask for it in fsl)
        state = run_fsl_step(
            state,
            fsl,
            method,
            step_classes,
            cfg.trainer,
            rng=derive_rng(cfg.seed, fold, 3, trial, step),
            init_rng=derive_rng(cfg.seed, fold, 2, trial, step),
        )
        if state.log is not None:
            result.fsl_batch_sizes.extend(state.log.batch_sizes)
        result.norm_stats.append([(n.mu_r.copy(), n.sigma_r.copy()) for n in state.model.extractor.norm_layers])
        learned_new = [c for c in state.classes if c not in state.base_classes]
        result.reports.append(
            evaluate(
                state.model,
                pools.val,
                state.base_classes,
                learned_new,
                n_classes,
                cfg.background_in_base,
                fold_index=fold,
                step_index=step,
                trial_index=trial,
            )
        )
    result.final_model = state.model
    return result


def _base_task(args):
    cfg, split, pools, fold = args
    return fold, run_base_step(cfg, split, pools.train, fold)


def _trial_task(args):
    return run_trial(*args)


def run_experiment(
    cfg: ProtocolConfig,
    methods: Sequence[MethodSpec],
    spec: SyntheticSpec,
    jobs: int = 1,
    pools: Optional[Pools] = None,
) -> tuple[list[TrialResult], dict[int, ProtocolState]]:
    """Base step per fold (shared by all methods and trials), then every
    (method, fold, trial) run.  Results are sorted by (method order, fold, trial)."""
    split = make_folds(spec.n_classes, cfg.fold_size)
    pools = pools if pools is not None else make_pools(cfg, spec)
    base_args = [(cfg, split, pools, fold) for fold in cfg.folds]
    trial_keys = [(mi, fold, trial) for mi in range(len(methods)) for fold in cfg.folds for trial in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            bases = dict(ex.map(_base_task, base_args))
            trial_args = [
                (cfg, split, methods[mi], fold, trial, bases[fold], pools, spec.n_classes)
                for mi, fold, trial in trial_keys
            ]
            results = list(ex.map(_trial_task, trial_args))
    else:
        bases = dict(_base_task(a) for a in base_args)
        results = [
            run_trial(cfg, split, methods[mi], fold, trial, bases[fold], pools, spec.n_classes)
            for mi, fold, trial in trial_keys
        ]
    return results, bases


def summarize(results: Sequence[TrialResult], hm_mode: str = "recompute") -> MetricsReport:
    """Average over MS steps (per run), then trials, then folds."""
    by_fold: dict[int, list[MetricsReport]] = {}
    for r in results:
        per_run = aggregate(r.reports, axes=("step",), hm_mode=hm_mode) if len(r.reports) > 1 else r.reports[-1]
        by_fold.setdefault(r.fold, []).append(per_run)
    fold_means = [aggregate(reps, axes=("trial",), hm_mode=hm_mode) for _, reps in sorted(by_fold.items())]
    return aggregate(fold_means, axes=("fold", "trial", "step"), hm_mode=hm_mode)
