"""Role-aware multi-gate mixture of experts."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import init_matrix, zeros_param

GATE_KEYS = ("ctr", "cvr", "relv", "shared")
EXPERT_SIZES = (128, 64, 32)
GATE_SIZES = (32, 16)


class Mlp:
    """Stack of linear layers with ReLU after each hidden layer.

    ``final_relu`` controls the activation after the last layer. Dropout is
    applied between consecutive layers in training mode.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, final_relu: bool = True):
        if len(sizes) < 2:
            raise ValueError("an MLP needs input and output sizes")
        self.sizes = tuple(sizes)
        self.final_relu = final_relu
        self.weights = [init_matrix(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [zeros_param(1, b) for b in sizes[1:]]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), 1):
            out[f"{prefix}.l{i}.w"] = w
            out[f"{prefix}.l{i}.b"] = b
        return out

    def forward(self, x: Tensor, training: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
        if x.cols != self.in_dim:
            raise ad.ShapeError(f"MLP expects width {self.in_dim}, got {x.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i < last or self.final_relu:
                x = ad.relu(x)
            if i < last:
                x = ad.dropout(x, dropout, training, rng)
        return x


class ExpertNet(Mlp):
    def __init__(self, in_dim: int, rng: np.random.Generator, sizes: Sequence[int] = EXPERT_SIZES):
        super().__init__((in_dim, *sizes), rng, final_relu=True)


def expert_forward(e: ExpertNet, x: Tensor, training: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
    return e.forward(x, training, dropout, rng)


class GateNet(Mlp):
    """Gate MLP ending in a softmax over experts. Never uses dropout."""

    def __init__(self, in_dim: int, n_experts: int, rng: np.random.Generator, sizes: Sequence[int] = GATE_SIZES):
        super().__init__((in_dim, *sizes, n_experts), rng, final_relu=False)

    @property
    def n_experts(self) -> int:
        return self.out_dim


def gate_forward(g: GateNet, gate_input: Tensor) -> Tensor:
    return ad.softmax_rows(g.forward(gate_input))


class MoeBlock:
    """Shared experts mixed separately for each gate key."""

    def __init__(
        self,
        in_dim: int,
        gate_in_dim: int,
        n_experts: int,
        rng: np.random.Generator,
        gate_keys: Sequence[str] = GATE_KEYS,
        expert_sizes: Sequence[int] = EXPERT_SIZES,
        gate_sizes: Sequence[int] = GATE_SIZES,
    ):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        unknown = set(gate_keys) - set(GATE_KEYS)
        if unknown:
            raise ValueError(f"unknown gate keys {sorted(unknown)}")
        self.experts = [ExpertNet(in_dim, rng, expert_sizes) for _ in range(n_experts)]
        self.gates = {k: GateNet(gate_in_dim, n_experts, rng, gate_sizes) for k in gate_keys}

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def out_dim(self) -> int:
        return self.experts[0].out_dim

    def named_params(self, prefix: str = "moe") -> dict[str, Tensor]:
        out = {}
        for i, e in enumerate(self.experts):
            out.update(e.named_params(f"{prefix}.expert{i}"))
        for k, g in self.gates.items():
            out.update(g.named_params(f"{prefix}.gate.{k}"))
        return out

    def expert_outputs(self, x: Tensor, training: bool = False, dropout: float = 0.0, rng=None) -> list[Tensor]:
        return [expert_forward(e, x, training, dropout, rng) for e in self.experts]

    def gate_weights(self, task: str, gate_input: Tensor) -> Tensor:
        if task not in self.gates:
            raise KeyError(f"no gate for task {task!r}")
        return gate_forward(self.gates[task], gate_input)

    def forward(
        self, x: Tensor, gate_input: Tensor, training: bool = False, dropout: float = 0.0, rng=None
    ) -> dict[str, Tensor]:
        """Mixed representation for every gate, evaluating each expert once."""
        outs = self.expert_outputs(x, training, dropout, rng)
        return {k: ad.mixture(self.gate_weights(k, gate_input), outs) for k in self.gates}


def moe_combine(
    block: MoeBlock, x: Tensor, role_emb: Tensor, task: str, training: bool = False, dropout: float = 0.0, rng=None
) -> Tensor:
    """x_hat = sum_i g_i f_i(x) for one task's gate."""
    if task not in GATE_KEYS:
        raise KeyError(f"unknown task {task!r}")
    gates = block.gate_weights(task, role_emb)
    return ad.mixture(gates, block.expert_outputs(x, training, dropout, rng))
