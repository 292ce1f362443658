"""Task towers with relevance injection, the shared expert, softmax heads and
the joint loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import init_matrix, zeros_param
from .moe import Mlp

TOWER_A = (512, 256, 128)
TOWER_B = (256, 128, 64)
TASKS = ("ctr", "cvr", "relv")


class TowerNet:
    """Three ReLU layers, optionally followed by a linear map to ``out_dim``."""

    def __init__(
        self,
        in_dim: int,
        sizes: Sequence[int],
        rng: np.random.Generator,
        out_dim: int | None = None,
    ):
        self.body = Mlp((in_dim, *sizes), rng, final_relu=True)
        self.proj_w = self.proj_b = None
        if out_dim is not None:
            self.proj_w = init_matrix(rng, sizes[-1], out_dim)
            self.proj_b = zeros_param(1, out_dim)

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    @property
    def out_dim(self) -> int:
        return self.proj_w.cols if self.proj_w is not None else self.body.out_dim

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.body.named_params(prefix)
        if self.proj_w is not None:
            out[f"{prefix}.proj.w"] = self.proj_w
            out[f"{prefix}.proj.b"] = self.proj_b
        return out

    def forward(self, x: Tensor, training: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
        h = self.body.forward(x, training, dropout, rng)
        if self.proj_w is not None:
            h = ad.linear(h, self.proj_w, self.proj_b)
        return h


def relevance_tower(tower: TowerNet, x_relv: Tensor, training: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
    return tower.forward(x_relv, training, dropout, rng)


def task_tower(
    tower: TowerNet,
    x_task: Tensor,
    o_relv: Tensor | None,
    training: bool = False,
    dropout: float = 0.0,
    rng=None,
    stop_relevance_gradient: bool = False,
) -> Tensor:
    """o = [x; o_relv] + h([x; o_relv]).

    Without a relevance input (independent single-task training) the residual
    is ``x`` alone.
    """
    if o_relv is None:
        residual = x_task
    else:
        if stop_relevance_gradient:
            o_relv = ad.stop_gradient(o_relv)
        residual = ad.concat_cols([x_task, o_relv])
    if residual.cols != tower.out_dim:
        raise ad.ShapeError(f"tower output {tower.out_dim} cannot add to residual width {residual.cols}")
    return ad.add(residual, tower.forward(residual, training, dropout, rng))


class Head:
    """Linear map to two logits followed by a row softmax."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.w = init_matrix(rng, in_dim, 2)
        self.b = zeros_param(1, 2)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def head_forward(head: Head, o: Tensor, o_s: Tensor | None, task: str) -> Tensor:
    if task not in TASKS:
        raise KeyError(f"unknown task {task!r}")
    if task == "relv" and o_s is not None:
        raise ValueError("the relevance head takes no shared-expert input")
    feats = o if o_s is None else ad.concat_cols([o, o_s])
    return ad.softmax_rows(ad.linear(feats, head.w, head.b))


@dataclass(frozen=True)
class LossWeights:
    ctr: float = 1.0
    cvr: float = 1.0
    relv: float = 1.0

    def __post_init__(self):
        vals = (self.ctr, self.cvr, self.relv)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")


def check_funnel(click: np.ndarray, apply: np.ndarray) -> None:
    if np.any((np.asarray(apply) == 1) & (np.asarray(click) == 0)):
        raise ValueError("funnel violation: apply=1 on an unclicked record")


def joint_loss(
    y_ctr: Tensor | None,
    y_cvr: Tensor | None,
    y_relv: Tensor | None,
    click: np.ndarray,
    apply: np.ndarray,
    relevant: np.ndarray,
    w: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Batch-mean of the per-record weighted cross-entropy sum.

    The CVR term only counts clicked records. A head passed as ``None`` (or
    weighted zero) contributes nothing. Returns the loss tensor and the
    per-task batch means for logging.
    """
    click = np.asarray(click, dtype=np.int64)
    apply = np.asarray(apply, dtype=np.int64)
    relevant = np.asarray(relevant, dtype=np.int64)
    check_funnel(click, apply)
    n = click.size
    parts: dict[str, Tensor] = {}
    terms = (
        ("ctr", y_ctr, click, np.ones(n), w.ctr),
        ("cvr", y_cvr, apply, click.astype(np.float64), w.cvr),
        ("relv", y_relv, relevant, np.ones(n), w.relv),
    )
    total = None
    for name, y, labels, mask, lam in terms:
        if y is None:
            continue
        ce = ad.cross_entropy(y, labels, mask / n)
        parts[name] = ce
        if lam == 0:
            continue
        term = ad.scale(ce, lam)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("loss has no active term")
    return total, {k: float(v.data[0, 0]) for k, v in parts.items()}


def final_score(y_ctr, y_cvr) -> np.ndarray:
    """p_ctr(positive) * p_cvr(positive), row-wise."""
    a = y_ctr.data if isinstance(y_ctr, Tensor) else np.asarray(y_ctr)
    b = y_cvr.data if isinstance(y_cvr, Tensor) else np.asarray(y_cvr)
    return np.atleast_2d(a)[:, 1] * np.atleast_2d(b)[:, 1]
