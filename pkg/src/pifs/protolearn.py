"""Prototype imprinting, the imprinted teacher, and the loss family.

Prototypes of new classes are masked averages of unit-normalized pixel
features.  The teacher used for distillation is the previous feature extractor
paired with the previous prototypes extended by those imprinted ones, so its
scores cover both old and new classes.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, SegDataset
from .nn import (
    CosineClassifier,
    FeatureExtractor,
    SegModel,
    class_probabilities,
    cosine_scores,
    feature_extract,
)
from .tensor import EPS_NORM, DomainError, ShapeError, Tensor

DEFAULT_LAMBDA = 10.0


class DistillVariant(str, enum.Enum):
    NONE = "none"
    PD = "pd"
    KD = "kd"
    L2 = "l2"


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    variant: DistillVariant = DistillVariant.PD

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        object.__setattr__(self, "variant", DistillVariant(self.variant))


def binary_mask(y: np.ndarray, k: int) -> np.ndarray:
    return (np.asarray(y) == k).astype(np.float64)


def _unit_rows(f: np.ndarray) -> np.ndarray:
    # channel sums accumulate left to right so results are reproducible by a plain loop
    sq = f[:, 0] * f[:, 0]
    for j in range(1, f.shape[1]):
        sq = sq + f[:, j] * f[:, j]
    return f / np.sqrt(sq)[:, None]


def map_prototype(dataset: SegDataset, k: int, fx: FeatureExtractor) -> np.ndarray:
    """Masked average pooling of normalized eval-mode features for class ``k``.

    Each image containing ``k`` contributes the mean of its class-``k`` unit
    features; the prototype is the mean of those per-image means.
    """
    support = [it for it in dataset if np.any(it.mask == k)]
    if not support:
        raise ValueError(f"no image contains class {k}; cannot compute its prototype")
    total = np.zeros(fx.feature_dim)
    with T.no_grad():
        for item in support:
            feats = feature_extract(fx, item.image, training=False).data
            pix = np.argwhere(item.mask == k)
            f = feats[item.mask == k]
            norms_sq = (f * f).sum(axis=1)
            bad = np.flatnonzero(np.sqrt(norms_sq) < EPS_NORM)
            if bad.size:
                raise DomainError(
                    f"class {k} pixel {tuple(int(v) for v in pix[bad[0]])} of image {item.id} has a degenerate feature"
                )
            total = total + _unit_rows(f).sum(axis=0) / len(f)
    return total / len(support)


def imprint(model: SegModel, dataset: SegDataset, new_classes: Iterable[int]) -> SegModel:
    """Copy of ``model`` with one MAP prototype column appended per new class."""
    new = sorted(set(int(c) for c in new_classes))
    clash = set(new) & set(model.classes)
    if clash:
        raise ValueError(f"classes {sorted(clash)} are already known to the model")
    cols = [map_prototype(dataset, k, model.extractor) for k in new]
    out = model.copy()
    clf = out.classifier
    weight = np.concatenate([clf.weight.data, np.stack(cols, axis=1)], axis=1) if cols else clf.weight.data
    out.classifier = CosineClassifier(
        Tensor(weight, requires_grad=clf.weight.requires_grad), clf.classes + new, clf.tau.item(), clf.tau.requires_grad
    )
    return out


def extend_random(model: SegModel, new_classes: Iterable[int], rng: np.random.Generator) -> SegModel:
    """Copy of ``model`` with random unit prototype columns for new classes."""
    from .nn import random_unit_columns

    new = sorted(set(int(c) for c in new_classes))
    clash = set(new) & set(model.classes)
    if clash:
        raise ValueError(f"classes {sorted(clash)} are already known to the model")
    out = model.copy()
    clf = out.classifier
    cols = random_unit_columns(clf.feature_dim, len(new), rng)
    out.classifier = CosineClassifier(
        Tensor(np.concatenate([clf.weight.data, cols], axis=1), requires_grad=True),
        clf.classes + new,
        clf.tau.item(),
        clf.tau.requires_grad,
    )
    return out


class TeacherSnapshot:
    """Frozen extractor plus a fixed classifier; never records gradients."""

    def __init__(self, extractor: FeatureExtractor, weight: np.ndarray, classes: Sequence[int], tau: float):
        self.extractor = copy.deepcopy(extractor)
        for p in self.extractor.parameters():
            p.requires_grad = False
        self.extractor.freeze_norm_stats()
        self.classifier = CosineClassifier(Tensor(np.array(weight)), classes, tau)

    @classmethod
    def of(cls, model: SegModel) -> "TeacherSnapshot":
        """The previous-step model itself as teacher (for the KD / L2 baselines)."""
        clf = model.classifier
        return cls(model.extractor, clf.weight.data, clf.classes, clf.tau.item())

    @property
    def classes(self) -> list[int]:
        return list(self.classifier.classes)

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + [self.classifier.weight, self.classifier.tau]

    def features(self, images) -> Tensor:
        with T.no_grad():
            return feature_extract(self.extractor, images, training=False)

    def forward(self, images) -> tuple[Tensor, Tensor]:
        with T.no_grad():
            feats = feature_extract(self.extractor, images, training=False)
            return feats, class_probabilities(cosine_scores(feats, self.classifier))

    def __call__(self, images) -> Tensor:
        return self.forward(images)[1]


def build_teacher(prev_model: SegModel, dataset: SegDataset, new_classes: Iterable[int]) -> TeacherSnapshot:
    """Previous extractor with old prototypes kept and new ones imprinted by MAP."""
    imprinted = imprint(prev_model, dataset, new_classes)
    clf = imprinted.classifier
    return TeacherSnapshot(prev_model.extractor, clf.weight.data, clf.classes, clf.tau.item())


# -- losses --------------------------------------------------------------------

def _class_columns(mask: np.ndarray, classes: Sequence[int], ignore_index: int) -> tuple[np.ndarray, np.ndarray]:
    lut = np.full(max(max(classes), ignore_index) + 1, -1, dtype=np.int64)
    lut[np.asarray(classes)] = np.arange(len(classes))
    mask = np.asarray(mask)
    valid = mask != ignore_index
    bad = valid & ((mask < 0) | (mask >= len(lut)) | (lut[np.clip(mask, 0, len(lut) - 1)] < 0))
    if np.any(bad):
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {int(mask[pos])} at pixel {pos} is neither a known class nor ignore_index")
    cols = np.where(valid, lut[np.where(valid, mask, classes[0])], 0)
    return cols, valid


def ce_loss(probs: Tensor, mask: np.ndarray, classes: Optional[Sequence[int]] = None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log p(true class) over the non-ignored pixels.

    ``classes`` maps probability columns to class indices (identity by default).
    """
    n_cls = probs.shape[-1]
    classes = list(range(n_cls)) if classes is None else list(classes)
    if len(classes) != n_cls:
        raise ShapeError(f"{n_cls} probability columns but {len(classes)} classes")
    if np.shape(mask) != probs.shape[:-1]:
        raise ShapeError(f"mask shape {np.shape(mask)} does not match probabilities {probs.shape}")
    cols, valid = _class_columns(mask, classes, ignore_index)
    onehot = np.zeros(probs.shape)
    np.put_along_axis(onehot, cols[..., None], valid[..., None].astype(np.float64), axis=-1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)
    p_true = T.sum(probs * Tensor(onehot), axis=-1) + Tensor((~valid).astype(np.float64))
    return T.scale(T.sum(T.log(p_true)), -1.0 / n_valid)


def entropy(probs: np.ndarray) -> float:
    """Mean per-pixel entropy of a distribution over the last axis."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=-1).mean())


def pd_loss(student_probs: Tensor, teacher_probs) -> Tensor:
    """Mean per-pixel cross-entropy H(teacher, student) over all current classes."""
    teacher = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if teacher.shape[-1] != student_probs.shape[-1]:
        raise ShapeError(
            f"teacher scores {teacher.shape[-1]} classes, student {student_probs.shape[-1]}; "
            "was the teacher built before imprinting the new classes?"
        )
    if teacher.shape != student_probs.shape:
        raise ShapeError(f"teacher shape {teacher.shape} != student shape {student_probs.shape}")
    n_pixels = int(np.prod(student_probs.shape[:-1]))
    return T.scale(T.sum(T.log(student_probs) * Tensor(teacher)), -1.0 / n_pixels)


def kd_old_loss(
    student_probs: Tensor,
    teacher_probs,
    old_classes: Sequence[int],
    student_classes: Optional[Sequence[int]] = None,
) -> Tensor:
    """Cross-entropy between the previous model's distribution and the student
    renormalized over the old classes only."""
    teacher = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    student_classes = list(range(student_probs.shape[-1])) if student_classes is None else list(student_classes)
    old = list(old_classes)
    missing = set(old) - set(student_classes)
    if missing:
        raise ValueError(f"old classes {sorted(missing)} are not student classes")
    if teacher.shape[-1] != len(old):
        raise ShapeError(f"teacher has {teacher.shape[-1]} classes but {len(old)} old classes were given")
    cols = [student_classes.index(c) for c in old]
    lead = student_probs.shape[:-1]
    sel = T.index_select(student_probs, cols, axis=-1)
    denom = T.broadcast_to(T.reshape(T.sum(sel, axis=-1), (*lead, 1)), sel.shape)
    renorm = sel / denom
    n_pixels = int(np.prod(lead))
    return T.scale(T.sum(T.log(renorm) * Tensor(teacher)), -1.0 / n_pixels)


def l2_feature_loss(f_student: Tensor, f_teacher) -> Tensor:
    """Mean over pixels of the squared Euclidean distance between features."""
    f_teacher = T.as_tensor(f_teacher)
    if f_student.shape != f_teacher.shape:
        raise ShapeError(f"feature shapes differ: {f_student.shape} vs {f_teacher.shape}")
    diff = f_student - f_teacher
    n_pixels = int(np.prod(f_student.shape[:-1]))
    return T.scale(T.sum(diff * diff), 1.0 / n_pixels)


@dataclass
class LossTerms:
    ce: Tensor
    distill: Optional[Tensor]
    total: Tensor


def loss_terms(
    x: np.ndarray,
    y: np.ndarray,
    model: SegModel,
    teacher: Optional[TeacherSnapshot],
    cfg: LossConfig,
    training: bool = True,
) -> LossTerms:
    images = Tensor(x)
    feats, probs = model.forward(images, training=training)
    ce = ce_loss(probs, y, model.classes)
    variant = cfg.variant
    if variant is DistillVariant.NONE:
        return LossTerms(ce, None, ce)
    if teacher is None:
        raise ValueError(f"distillation variant {variant.value!r} needs a teacher")
    if variant is DistillVariant.PD:
        distill = pd_loss(probs, teacher(images))
    elif variant is DistillVariant.KD:
        distill = kd_old_loss(probs, teacher(images), teacher.classes, model.classes)
    else:
        distill = l2_feature_loss(feats, teacher.features(images))
    if cfg.lam == 0:
        return LossTerms(ce, distill, ce)
    return LossTerms(ce, distill, ce + T.scale(distill, cfg.lam))


def total_loss(x, y, model: SegModel, teacher: Optional[TeacherSnapshot], cfg: LossConfig, training: bool = True) -> Tensor:
    """Cross-entropy plus lambda times the configured distillation term."""
    return loss_terms(x, y, model, teacher, cfg, training).total
