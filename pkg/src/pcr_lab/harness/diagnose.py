"""Layer-wise cosine between the plasticity and stability gradients."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

from ..conflict import cosine
from ..grpo import GrpoConfig, plasticity_loss_and_grad, stability_loss_and_grad
from ..model import ModelConfig
from ..tensor import GradSet, dot, norm


@dataclass(frozen=True)
class CosineRow:
    layer: str
    tag: str
    cosine: float
    dot: float
    norm_pla: float
    norm_sta: float
    zero_norm: bool


def cosine_table(g_pla: GradSet, g_sta: GradSet) -> list[CosineRow]:
    g_pla.check_congruent(g_sta)
    rows = []
    for a, b in zip(g_pla.entries, g_sta.entries):
        va, vb = a.value.reshape(-1), b.value.reshape(-1)
        na, nb = norm(va), norm(vb)
        rows.append(CosineRow(a.name, a.tag.value, cosine(va, vb), dot(va, vb), na, nb,
                              na == 0.0 or nb == 0.0))
    return rows


def diagnose(params, ref_params, groups, cfg: GrpoConfig, mcfg: ModelConfig) -> list[CosineRow]:
    _, g_pla = plasticity_loss_and_grad(params, groups, cfg, mcfg)
    _, g_sta = stability_loss_and_grad(params, ref_params, groups, cfg, mcfg)
    return cosine_table(g_pla, g_sta)


def write_cosine_csv(rows: list[CosineRow], path) -> None:
    cols = [f.name for f in fields(CosineRow)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                        for c in cols])
