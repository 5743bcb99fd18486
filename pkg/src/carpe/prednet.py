"""Four-layer CNN mapping a pedestrian's stacked input to its future track.

Inputs are laid out channels-first, 2 x beta x 2: channel 0 holds the relative
track (rows are time steps, columns x and y), channel 1 holds the social
feature h' reshaped the same way. Spatial geometry for beta rows:

    beta x 2 --conv1 2x2/(2,1)--> beta/2 x 1 --conv2 2x1/(2,1)--> beta/4 x 1
             --conv3 2x1/(2,1)--> beta/8 x 1 --conv4 (beta/8)x1--> 1 x 1, 2T channels
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .graphnet import uniform_init, zeros
from .tensor import Tensor

STRIDE = (2, 1)


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: tuple[int, int] = STRIDE

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, kh: int, kw: int, stride=STRIDE) -> "ConvLayer":
        fan_in = c_in * kh * kw
        return cls(uniform_init(rng, (c_out, c_in, kh, kw), fan_in), zeros(c_out), tuple(stride))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.kernel, self.bias, self.stride)


@dataclass
class PredParams:
    conv1: ConvLayer
    conv2: ConvLayer
    conv3: ConvLayer
    conv4: ConvLayer

    @classmethod
    def init(cls, rng: np.random.Generator, beta: int, pred_len: int,
             c1: int = 128, c2: int = 256) -> "PredParams":
        if beta % 8:
            raise ValueError(f"observation length must be a multiple of 8, got {beta}")
        out = 2 * pred_len
        return cls(
            conv1=ConvLayer.init(rng, 2, c1, 2, 2),
            conv2=ConvLayer.init(rng, c1, c2, 2, 1),
            conv3=ConvLayer.init(rng, c2, out, 2, 1),
            conv4=ConvLayer.init(rng, out, out, beta // 8, 1, stride=(1, 1)),
        )

    @property
    def layers(self) -> list[ConvLayer]:
        return [self.conv1, self.conv2, self.conv3, self.conv4]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers, 1):
            out += [(f"conv{i}.kernel", layer.kernel), (f"conv{i}.bias", layer.bias)]
        return out


def build_input(R, h_prime: Tensor) -> Tensor:
    """Stack relative track and social feature into the CNN input.

    Accepts one pedestrian (R: beta x 2, h': 2*beta) giving 2 x beta x 2, or a
    batch (R: N x beta x 2, h': N x 2*beta) giving N x 2 x beta x 2.
    """
    R = np.asarray(R)
    single = R.ndim == 2
    if single:
        R = R[None]
        h_prime = tc.reshape(h_prime, (1, -1))
    n, beta, _ = R.shape
    if h_prime.shape != (n, 2 * beta):
        raise tc.ShapeError(f"social feature {h_prime.shape} must have length 2*beta = {2 * beta}")
    rel = Tensor(R[:, None], dtype=h_prime.dtype)
    social = tc.reshape(h_prime, (n, 1, beta, 2))
    S = tc.concat([rel, social], axis=1)
    return tc.reshape(S, (2, beta, 2)) if single else S


def cnn_forward(S: Tensor, params: PredParams) -> Tensor:
    """Run the four convolutions; returns T x 2 (or N x T x 2) relative offsets."""
    beta = S.shape[-2]
    if beta % 8 or S.shape[-1] != 2 or S.shape[-3] != 2:
        raise tc.ShapeError(f"prediction input {S.shape} must be 2 x beta x 2 with beta a multiple of 8")
    x = tc.relu(params.conv1(S))
    x = tc.relu(params.conv2(x))
    x = tc.relu(params.conv3(x))
    x = params.conv4(x)
    if x.shape[-2:] != (1, 1):
        raise tc.ShapeError(f"prediction head produced spatial shape {x.shape[-2:]}, expected 1 x 1")
    channels = x.shape[-3]
    lead = x.shape[:-3]
    return tc.reshape(x, (*lead, channels // 2, 2))


def to_absolute(rel_future, origin) -> np.ndarray:
    """Shift relative predictions back to world meters."""
    rel = np.asarray(rel_future.data if isinstance(rel_future, Tensor) else rel_future)
    origin = np.asarray(origin)
    return rel + origin[..., None, :]
