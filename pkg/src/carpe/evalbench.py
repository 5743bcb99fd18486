"""Displacement metrics, the linear baseline, evaluation and latency benchmarking."""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .dataio import FrameSample
from .model import CarpeModel, forward

Predictor = Union[CarpeModel, Callable[[FrameSample], np.ndarray]]


def _check(Y, Yhat) -> tuple[np.ndarray, np.ndarray]:
    Y = np.asarray(Y, dtype=np.float64)
    Yhat = np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"ground truth {Y.shape} and prediction {Yhat.shape} differ in shape")
    if Y.ndim == 2:
        Y, Yhat = Y[None], Yhat[None]
    if Y.ndim != 3 or Y.shape[-1] != 2:
        raise ValueError(f"trajectories must be P x T x 2, got {Y.shape}")
    return Y, Yhat


def displacement(Y, Yhat) -> np.ndarray:
    """Per-pedestrian, per-step Euclidean errors: P x T."""
    Y, Yhat = _check(Y, Yhat)
    return np.linalg.norm(Y - Yhat, axis=-1)


def ade(Y, Yhat) -> float:
    """Mean L2 error over all pedestrians and predicted steps."""
    return float(displacement(Y, Yhat).mean())


def fde(Y, Yhat) -> float:
    """Mean L2 error at the last predicted step."""
    return float(displacement(Y, Yhat)[:, -1].mean())


def linear_baseline(A, pred_len: int = 12) -> np.ndarray:
    """Ordinary least-squares line per coordinate, extrapolated ``pred_len`` steps.

    ``A`` is beta x 2 (or P x beta x 2); observed steps are t = 1..beta.
    """
    A = np.asarray(A, dtype=np.float64)
    single = A.ndim == 2
    if single:
        A = A[None]
    beta = A.shape[1]
    if beta < 2:
        raise ValueError("linear fit needs at least two observed steps")
    t_obs = np.arange(1, beta + 1, dtype=np.float64)
    design = np.stack([np.ones(beta), t_obs], axis=1)
    # one column per (pedestrian, coordinate)
    targets = A.transpose(1, 0, 2).reshape(beta, -1)
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    t_fut = np.arange(beta + 1, beta + pred_len + 1, dtype=np.float64)
    future = np.stack([np.ones(pred_len), t_fut], axis=1) @ coef
    out = future.reshape(pred_len, A.shape[0], 2).transpose(1, 0, 2)
    return out[0] if single else out


def linear_predictor(pred_len: int = 12) -> Callable[[FrameSample], np.ndarray]:
    def predict(sample: FrameSample) -> np.ndarray:
        return linear_baseline(sample.obs_abs, pred_len)
    return predict


@dataclass
class SceneMetrics:
    ade: float
    fde: float
    peds: int
    windows: int


@dataclass
class MetricsReport:
    ade: float
    fde: float
    peds: int
    windows: int
    per_scene: dict[str, SceneMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _predict_all(predictor: Predictor, samples: Sequence[FrameSample], chunk: int = 256):
    if isinstance(predictor, CarpeModel):
        # each frame keeps its own graph; chunking only amortises overhead
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            pred = forward(part, predictor)
            bounds = np.cumsum([s.num_peds for s in part])[:-1]
            yield from zip(part, np.split(pred, bounds))
    else:
        for s in samples:
            yield s, predictor(s)


def evaluate(predictor: Predictor, samples: Sequence[FrameSample]) -> MetricsReport:
    """Global ADE/FDE over every (pedestrian, window) pair in ``samples``."""
    if not samples:
        raise ValueError("test set is empty")
    if isinstance(predictor, CarpeModel):
        beta, T = samples[0].obs_abs.shape[1], samples[0].future.shape[1]
        if (beta, T) != (predictor.hyper.beta, predictor.hyper.T):
            raise ValueError(f"model expects beta={predictor.hyper.beta}, T={predictor.hyper.T}; "
                             f"data has beta={beta}, T={T}")
    sums = defaultdict(lambda: [0.0, 0.0, 0, 0])  # ade sum, fde sum, peds, windows
    for sample, pred in _predict_all(predictor, samples):
        d = displacement(sample.future, pred)
        acc = sums[sample.scene_id]
        acc[0] += float(d.mean(axis=1).sum())
        acc[1] += float(d[:, -1].sum())
        acc[2] += d.shape[0]
        acc[3] += 1
    per_scene = {k: SceneMetrics(a / p, f / p, p, w) for k, (a, f, p, w) in sums.items()}
    peds = sum(m.peds for m in per_scene.values())
    return MetricsReport(
        ade=sum(v[0] for v in sums.values()) / peds,
        fde=sum(v[1] for v in sums.values()) / peds,
        peds=peds,
        windows=len(samples),
        per_scene=per_scene,
    )


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "ade", "fde", "peds", "windows"])
        for scene, m in sorted(report.per_scene.items()):
            w.writerow([scene, repr(m.ade), repr(m.fde), m.peds, m.windows])


# ---------------------------------------------------------------------------
# Latency


def host_description() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return f"{cpu}; {os.cpu_count()} logical cpus; {platform.system()} {platform.release()}; " \
           f"python {platform.python_version()}; numpy {np.__version__}"


@dataclass
class LatencyReport:
    latencies_s: list[float]
    peds: list[int]
    device: str = "cpu"

    @property
    def mean(self) -> float:
        return float(np.mean(self.latencies_s))

    @property
    def median(self) -> float:
        return float(np.median(self.latencies_s))

    @property
    def p99(self) -> float:
        return float(np.percentile(self.latencies_s, 99))

    @property
    def fps(self) -> float:
        return 1.0 / self.mean

    def summary(self) -> dict:
        peds = np.asarray(self.peds)
        return {
            "device": self.device,
            "runs": len(self.latencies_s),
            "mean_ms": self.mean * 1e3,
            "median_ms": self.median * 1e3,
            "p99_ms": self.p99 * 1e3,
            "fps": self.fps,
            "peds_mean": float(peds.mean()),
            "peds_min": int(peds.min()),
            "peds_max": int(peds.max()),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "P", "latency_us"])
            for i, (lat, p) in enumerate(zip(self.latencies_s, self.peds)):
                w.writerow([i, p, f"{lat * 1e6:.3f}"])


def benchmark(predictor: Predictor, samples: Sequence[FrameSample], warmup: int = 50,
              runs: int = 1000, device: str | None = None) -> LatencyReport:
    """Time single-frame prediction, cycling through ``samples``.

    Each timed iteration predicts one frame (all of its pedestrians at once),
    including input assembly and conversion to world coordinates.
    """
    if not samples:
        raise ValueError("benchmark needs at least one sample")
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    if isinstance(predictor, CarpeModel):
        model = predictor
        predictor = lambda s: forward(s, model)  # noqa: E731
    clock = time.perf_counter
    n = len(samples)
    for i in range(warmup):
        predictor(samples[i % n])
    lat, peds = [], []
    for i in range(runs):
        s = samples[(warmup + i) % n]
        t0 = clock()
        predictor(s)
        lat.append(clock() - t0)
        peds.append(s.num_peds)
    return LatencyReport(lat, peds, device or host_description())


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
