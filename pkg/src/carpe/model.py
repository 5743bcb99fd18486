"""End-to-end model: assembly, training, accounting and weight files."""
from __future__ import annotations

import io
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .dataio import FrameSample
from .graphnet import GraphParams, gin_layer, embed_nodes
from .optim import AdamState, adam_step, clip_global_norm
from .prednet import PredParams, build_input, cnn_forward, to_absolute
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"CARPE001"


class WeightFormatError(ValueError):
    """A weight file is truncated, corrupt or inconsistent."""


@dataclass(frozen=True)
class Hyper:
    beta: int = 8
    T: int = 12
    C1: int = 128
    C2: int = 256

    def __post_init__(self):
        if min(self.beta, self.T, self.C1, self.C2) < 1:
            raise ValueError(f"hyperparameters must be positive: {self}")
        if self.beta % 8:
            raise ValueError(f"beta must be a multiple of 8, got {self.beta}")


@dataclass
class CarpeModel:
    hyper: Hyper
    graph: GraphParams
    pred: PredParams

    @classmethod
    def init(cls, hyper: Hyper = Hyper(), seed: int | np.random.Generator = 1) -> "CarpeModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        graph = GraphParams.init(rng, hyper.beta)
        pred = PredParams.init(rng, hyper.beta, hyper.T, hyper.C1, hyper.C2)
        return cls(hyper, graph, pred)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters in weight-file order."""
        return self.graph.named_tensors() + self.pred.named_tensors()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "CarpeModel":
        """Convert every parameter in place; returns self."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.graph.rho.W.dtype


@dataclass
class Batch:
    """Pedestrians of several frames stacked row-wise; ``counts`` gives P per frame."""

    obs_abs: np.ndarray
    obs_rel: np.ndarray
    counts: list[int]
    future_rel: np.ndarray | None = None

    @property
    def origin(self) -> np.ndarray:
        return self.obs_abs[:, 0, :]


def collate(samples: Sequence[FrameSample]) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty list of samples")
    fut = None
    if all(s.future is not None for s in samples):
        fut = np.concatenate([s.future_rel for s in samples])
    return Batch(
        obs_abs=np.concatenate([s.obs_abs for s in samples]),
        obs_rel=np.concatenate([s.obs_rel for s in samples]),
        counts=[s.num_peds for s in samples],
        future_rel=fut,
    )


def forward_relative(batch: Batch, model: CarpeModel) -> Tensor:
    """Predicted offsets from each pedestrian's first observed position, N x T x 2."""
    if batch.obs_abs.shape[1:] != (model.hyper.beta, 2):
        raise tc.ShapeError(f"observations {batch.obs_abs.shape[1:]} do not match "
                            f"model beta={model.hyper.beta}")
    h = embed_nodes(batch.obs_abs, batch.obs_rel, model.graph)
    h_prime = gin_layer(h, model.graph, batch.counts)
    S = build_input(batch.obs_rel, h_prime)
    return cnn_forward(S, model.pred)


def forward(sample: FrameSample | Sequence[FrameSample], model: CarpeModel) -> np.ndarray:
    """Absolute future positions for every pedestrian: P x T x 2 meters.

    Given a list of frames, their pedestrians are concatenated in order; each
    frame still forms its own graph.
    """
    samples = [sample] if isinstance(sample, FrameSample) else list(sample)
    if any(s.num_peds < 1 for s in samples):
        raise ValueError("frame has no pedestrians")
    batch = collate(samples)
    rel = forward_relative(batch, model)
    return to_absolute(rel, batch.origin)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 80
    frame_batch: int = 64
    lr: float = 0.01
    clip: float = 5.0
    seed: int = 1
    precision: str = "f32"

    def __post_init__(self):
        if self.epochs < 0 or self.frame_batch < 1 or self.lr <= 0 or self.clip <= 0:
            raise ValueError(f"invalid training configuration: {self}")


@dataclass
class TrainReport:
    losses: list[float]
    model: CarpeModel
    wall_time: float
    seed: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "wall_time_s": self.wall_time, "epoch_losses": self.losses,
                "config": self.config, "hyper": asdict(self.model.hyper)}


def train(samples: Sequence[FrameSample], config: TrainConfig = TrainConfig(),
          hyper: Hyper = Hyper(), model: CarpeModel | None = None) -> TrainReport:
    """Fit the model with MSE on relative coordinates, global-norm clipping and Adam.

    One PRNG stream seeded by ``config.seed`` initialises the weights (unless
    a model is passed) and then shuffles the frames every epoch. Each batch
    loss averages over all pedestrians and steps of its frames.
    """
    if not samples:
        raise ValueError("training set is empty")
    if any(s.future is None for s in samples):
        raise ValueError("training samples need ground-truth futures")
    rng = np.random.default_rng(config.seed)
    with tc.precision(config.precision):
        if model is None:
            model = CarpeModel.init(hyper, rng)
        model.astype(tc.get_dtype())
        params = model.parameters()
        state = AdamState(lr=config.lr)
        losses = []
        t0 = time.perf_counter()
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples))
            total, n_batches = 0.0, 0
            for start in range(0, len(order), config.frame_batch):
                batch = collate([samples[i] for i in order[start:start + config.frame_batch]])
                model.zero_grad()
                with Tape() as tape:
                    pred = forward_relative(batch, model)
                    loss = tc.mse_loss(pred, batch.future_rel)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss {value} at epoch {epoch + 1}, batch {n_batches + 1}")
                tc.backward(loss, tape)
                clip_global_norm([p.grad for p in params], config.clip)
                adam_step(params, state)
                total += value
                n_batches += 1
            losses.append(total / n_batches)
            log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, losses[-1])
        wall = time.perf_counter() - t0
    return TrainReport(losses, model, wall, config.seed, asdict(config))


# ---------------------------------------------------------------------------
# Accounting


def count_params(model: CarpeModel) -> int:
    return sum(p.data.size for p in model.parameters())


def layer_macs(model: CarpeModel, num_peds: int = 1) -> dict[str, int]:
    """Multiply-accumulates per frame, by layer.

    Dense and convolution layers cost one MAC per weight use (bias adds are
    not counted) and scale with the number of pedestrians. The neighbour sum
    is counted in its linear-time form (one shared total, then one
    subtraction per node): (2P - 1) * 8*beta additions, each counted as one MAC.
    """
    hp = model.hyper
    p = num_peds
    if p < 1:
        raise ValueError("need at least one pedestrian")
    out = {
        "rho": p * model.graph.rho.W.data.size,
        "phi0": p * (model.graph.phi0.first.W.data.size + model.graph.phi0.second.W.data.size),
        "phi1": p * (model.graph.phi1.first.W.data.size + model.graph.phi1.second.W.data.size),
        "neighborhood_sum": (2 * p - 1) * 8 * hp.beta,
    }
    h, w = hp.beta, 2
    for i, layer in enumerate(model.pred.layers, 1):
        o, c, kh, kw = layer.kernel.shape
        sh, sw = layer.stride
        h, w = (h - kh) // sh + 1, (w - kw) // sw + 1
        out[f"conv{i}"] = p * h * w * o * c * kh * kw
    return out


def count_flops(model: CarpeModel, num_peds: int = 1) -> float:
    """Floating-point operations per frame, taking one MAC as two operations."""
    return 2.0 * sum(layer_macs(model, num_peds).values())


# ---------------------------------------------------------------------------
# Weight files


def _manifest(hyper: Hyper, count: int) -> bytes:
    return (f"beta={hyper.beta}\nT={hyper.T}\nC1={hyper.C1}\nC2={hyper.C2}\n"
            f"count={count}\n").encode()


def save_weights(model: CarpeModel, path) -> None:
    """Write magic, a length-prefixed manifest, then float32 little-endian parameters."""
    count = count_params(model)
    manifest = _manifest(model.hyper, count)
    blob = np.concatenate([p.data.ravel() for p in model.parameters()]).astype("<f4")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    buf.write(blob.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_manifest(raw: bytes) -> tuple[dict[str, int], int]:
    """Parse the header; returns (fields, offset of the parameter blob)."""
    if raw[:8] != MAGIC:
        raise WeightFormatError(f"bad magic {raw[:8]!r}; expected {MAGIC!r}")
    if len(raw) < 12:
        raise WeightFormatError("file truncated inside the header")
    (length,) = struct.unpack("<I", raw[8:12])
    if 12 + length > len(raw):
        raise WeightFormatError("file truncated inside the manifest")
    try:
        text = raw[12:12 + length].decode()
        fields = {}
        for line in text.splitlines():
            if line.strip():
                key, value = line.split("=", 1)
                fields[key.strip()] = int(value)
    except (UnicodeDecodeError, ValueError) as exc:
        raise WeightFormatError(f"corrupted manifest: {exc}") from None
    missing = {"beta", "T", "C1", "C2", "count"} - fields.keys()
    if missing:
        raise WeightFormatError(f"manifest lacks {', '.join(sorted(missing))}")
    return fields, 12 + length


def load_weights(path) -> CarpeModel:
    raw = Path(path).read_bytes()
    fields, offset = read_manifest(raw)
    try:
        hyper = Hyper(fields["beta"], fields["T"], fields["C1"], fields["C2"])
    except ValueError as exc:
        raise WeightFormatError(f"invalid manifest hyperparameters: {exc}") from None
    with tc.precision("f32"):
        model = CarpeModel.init(hyper, seed=0)
    expected = count_params(model)
    if fields["count"] != expected:
        raise WeightFormatError(f"manifest count {fields['count']} does not match "
                                f"{expected} parameters implied by its hyperparameters")
    blob = raw[offset:]
    if len(blob) != 4 * expected:
        raise WeightFormatError(f"length mismatch: {len(blob)} parameter bytes, expected {4 * expected}")
    values = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for p in model.parameters():
        n = p.data.size
        p.data = values[pos:pos + n].astype(np.float32).reshape(p.shape)
        pos += n
    return model
