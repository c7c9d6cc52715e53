"""Registry of incremental few-shot methods (PIFS and its ablations)."""

from __future__ import annotations

from dataclasses import dataclass

from .nn import NormMode
from .protolearn import DEFAULT_LAMBDA, DistillVariant, LossConfig


@dataclass(frozen=True)
class MethodSpec:
    name: str
    imprint: bool
    finetune: bool
    norm_mode: NormMode = NormMode.BATCH_NORM
    distill: DistillVariant = DistillVariant.NONE
    lam: float = DEFAULT_LAMBDA

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, variant=self.distill)

    @property
    def needs_teacher(self) -> bool:
        return self.finetune and self.distill is not DistillVariant.NONE

    def with_lambda(self, lam: float) -> "MethodSpec":
        return MethodSpec(self.name, self.imprint, self.finetune, self.norm_mode, self.distill, lam)


BN, BR = NormMode.BATCH_NORM, NormMode.BATCH_RENORM
NONE, PD, KD, L2 = DistillVariant.NONE, DistillVariant.PD, DistillVariant.KD, DistillVariant.L2

METHODS: dict[str, MethodSpec] = {
    m.name: m
    for m in (
        MethodSpec("ft", imprint=False, finetune=True, norm_mode=BN, distill=NONE),
        MethodSpec("ft_kd", imprint=False, finetune=True, norm_mode=BN, distill=KD),
        MethodSpec("ft_l2", imprint=False, finetune=True, norm_mode=BN, distill=L2),
        MethodSpec("wi", imprint=True, finetune=False, norm_mode=BN, distill=NONE),
        MethodSpec("wi_ft", imprint=True, finetune=True, norm_mode=BN, distill=NONE),
        MethodSpec("wi_ft_pd", imprint=True, finetune=True, norm_mode=BN, distill=PD),
        MethodSpec("wi_ft_br", imprint=True, finetune=True, norm_mode=BR, distill=NONE),
        MethodSpec("wi_ft_br_kd", imprint=True, finetune=True, norm_mode=BR, distill=KD),
        MethodSpec("wi_ft_br_l2", imprint=True, finetune=True, norm_mode=BR, distill=L2),
        MethodSpec("pifs", imprint=True, finetune=True, norm_mode=BR, distill=PD),
    )
}
METHODS["wi_ft_br_pd"] = METHODS["pifs"]

# Rows of the component ablation, in table order.
ABLATION_ROWS: list[tuple[str, str]] = [
    ("FT", "ft"),
    ("FT+KD", "ft_kd"),
    ("FT+L2", "ft_l2"),
    ("WI", "wi"),
    ("FT+WI", "wi_ft"),
    ("FT+WI+PD", "wi_ft_pd"),
    ("FT+WI+BR", "wi_ft_br"),
    ("FT+WI+BR+KD", "wi_ft_br_kd"),
    ("FT+WI+BR+L2", "wi_ft_br_l2"),
    ("FT+WI+BR+PD", "pifs"),
]


def get_method(name: str) -> MethodSpec:
    try:
        return METHODS[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(sorted(METHODS))}") from None
