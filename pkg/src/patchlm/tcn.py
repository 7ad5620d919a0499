"""Feed-forward block built from stacked dilated causal 1-D convolutions.

Replaces the usual position-wise MLP: a 1x1 projection widens the channels
by mlp_ratio, a stack of residual ReLU convolutions mixes along time, and a
1x1 projection returns to the model width with a residual to the block
input. Left padding keeps every convolution causal, and the growing
dilation schedule widens the receptive field without extra parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TcnParams:
    in_proj: Tensor  # [hidden, D, 1]
    layers: list  # of Tensor [hidden, hidden, K]
    out_proj: Tensor  # [D, hidden, 1]
    dilations: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != len(self.dilations):
            raise ValueError("one dilation per inner layer required")

    @property
    def kernel_size(self) -> int:
        return self.layers[0].shape[2] if self.layers else 1

    def tensors(self):
        out = {"in_proj": self.in_proj, "out_proj": self.out_proj}
        for i, k in enumerate(self.layers):
            out[f"conv{i}"] = k
        return out


def init_tcn_params(dim: int, mlp_ratio: int, kernel_size: int, dilations, rng,
                    dtype=np.float64, std: float = 0.02) -> TcnParams:
    hidden = mlp_ratio * dim
    return TcnParams(
        in_proj=T.parameter(rng.normal(0.0, std, size=(hidden, dim, 1)), dtype=dtype),
        layers=[
            T.parameter(rng.normal(0.0, std, size=(hidden, hidden, kernel_size)), dtype=dtype)
            for _ in dilations
        ],
        out_proj=T.parameter(rng.normal(0.0, std, size=(dim, hidden, 1)), dtype=dtype),
        dilations=list(dilations),
    )


def receptive_field(kernel_size: int, dilations) -> int:
    return 1 + sum((kernel_size - 1) * d for d in dilations)


def tcn_block(x: Tensor, params: TcnParams, mode: str = "eval", rng=None,
              dropout_rate: float = 0.0, branch_scale: float = 1.0) -> Tensor:
    """x[D, L] -> [D, L]; causal, with a residual to the block input."""
    train = mode == "train"
    h = T.conv1d(x, params.in_proj)
    for kernel, dil in zip(params.layers, params.dilations):
        h = T.relu(T.add(T.conv1d(h, kernel, dilation=dil, causal_left_pad=True), h))
    branch = T.conv1d(h, params.out_proj)
    branch = T.dropout(branch, dropout_rate, rng=rng, train=train)
    return T.add(x, T.scale(branch, branch_scale))
