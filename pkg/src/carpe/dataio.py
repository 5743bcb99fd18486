"""ETH/UCY annotation parsing, windowing, leave-one-out splits and streaming.

Annotation files hold one ``frame_id ped_id x y`` record per line (any
whitespace, ``#`` comments allowed). Coordinates stay in raw meters.
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCENES = ("eth", "hotel", "univ", "zara1", "zara2")
OBS_LEN = 8
PRED_LEN = 12


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation data."""


@dataclass(frozen=True)
class RawAnnotation:
    frame_id: int
    ped_id: int
    x: float
    y: float


@dataclass
class FrameSample:
    """Every pedestrian present throughout one observation(+future) window.

    Arrays are stacked over pedestrians, ordered by ascending ``ped_ids``:
    ``obs_abs`` and ``obs_rel`` are P x obs_len x 2, ``future`` is
    P x pred_len x 2 in absolute meters, or None for streaming samples.
    """

    scene_id: str
    window_start_frame: int
    ped_ids: np.ndarray
    obs_abs: np.ndarray
    obs_rel: np.ndarray
    future: np.ndarray | None = None
    end_frame: int | None = None

    @property
    def num_peds(self) -> int:
        return len(self.ped_ids)

    @property
    def origin(self) -> np.ndarray:
        """First observed position of each pedestrian, P x 2."""
        return self.obs_abs[:, 0, :]

    @property
    def future_rel(self) -> np.ndarray:
        if self.future is None:
            raise ValueError("sample has no future segment")
        return self.future - self.origin[:, None, :]

    def permuted(self, order: Sequence[int]) -> "FrameSample":
        order = np.asarray(order)
        return FrameSample(
            self.scene_id, self.window_start_frame, self.ped_ids[order],
            self.obs_abs[order], self.obs_rel[order],
            None if self.future is None else self.future[order], self.end_frame,
        )


@dataclass(frozen=True)
class SplitPlan:
    held_out: str
    train_scenes: tuple[str, ...]


def _parse_int(tok: str) -> int:
    try:
        return int(tok)
    except ValueError:
        val = float(tok)
        if not val.is_integer():
            raise ValueError(f"{tok!r} is not an integer")
        return int(val)


def parse_lines(lines: Iterable[str], source: str = "<input>") -> list[RawAnnotation]:
    out = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if len(fields) != 4:
            raise AnnotationError(f"{source}:{lineno}: expected 4 fields, got {len(fields)}")
        try:
            ann = RawAnnotation(_parse_int(fields[0]), _parse_int(fields[1]),
                                float(fields[2]), float(fields[3]))
        except ValueError as exc:
            raise AnnotationError(f"{source}:{lineno}: {exc}") from None
        if ann.frame_id < 0:
            raise AnnotationError(f"{source}:{lineno}: negative frame id {ann.frame_id}")
        if not (math.isfinite(ann.x) and math.isfinite(ann.y)):
            raise AnnotationError(f"{source}:{lineno}: non-finite coordinate")
        key = (ann.frame_id, ann.ped_id)
        if key in seen:
            raise AnnotationError(f"{source}:{lineno}: duplicate record for frame {key[0]}, ped {key[1]}")
        seen.add(key)
        out.append(ann)
    out.sort(key=lambda a: (a.frame_id, a.ped_id))
    return out


def parse_annotation_file(path) -> list[RawAnnotation]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc}") from exc
    return parse_lines(text.splitlines(), source=str(path))


def to_relative(A: np.ndarray) -> np.ndarray:
    """Offset every position by the first one, so ``R[0] == (0, 0)``."""
    A = np.asarray(A)
    return A - A[..., :1, :]


def frame_interval(frame_ids: Iterable[int]) -> int:
    """Greatest common step between annotated frames (10 for raw ETH/UCY)."""
    ids = sorted(set(frame_ids))
    if len(ids) < 2:
        return 1
    return reduce(math.gcd, (b - a for a, b in zip(ids, ids[1:])))


def _windows(annotations: Sequence[RawAnnotation], obs_len: int, pred_len: int,
             stride: int, scene_id: str, frame_step: int | None) -> list[FrameSample]:
    if not annotations:
        return []
    step = frame_step or frame_interval(a.frame_id for a in annotations)
    first = min(a.frame_id for a in annotations)
    seq_len = obs_len + pred_len

    tracks: dict[int, dict[int, tuple[float, float]]] = defaultdict(dict)
    for a in annotations:
        if (a.frame_id - first) % step:
            raise AnnotationError(f"frame {a.frame_id} is off the {step}-frame grid")
        tracks[a.ped_id][(a.frame_id - first) // step] = (a.x, a.y)

    # window start step -> pedestrians present at every step of that window
    members: dict[int, list[int]] = defaultdict(list)
    for ped, pos in tracks.items():
        steps = sorted(pos)
        run_start = steps[0]
        for prev, cur in zip(steps, steps[1:] + [None]):
            if cur is not None and cur == prev + 1:
                continue
            for s in range(run_start, prev - seq_len + 2):
                if s % stride == 0:
                    members[s].append(ped)
            run_start = cur

    samples = []
    for s in sorted(members):
        peds = sorted(members[s])
        traj = np.array([[tracks[p][s + k] for k in range(seq_len)] for p in peds], dtype=np.float64)
        obs = traj[:, :obs_len]
        samples.append(FrameSample(
            scene_id=scene_id,
            window_start_frame=first + s * step,
            ped_ids=np.array(peds),
            obs_abs=obs,
            obs_rel=to_relative(obs),
            future=traj[:, obs_len:] if pred_len else None,
            end_frame=first + (s + obs_len - 1) * step,
        ))
    return samples


def build_windows(annotations: Sequence[RawAnnotation], obs_len: int = OBS_LEN,
                  pred_len: int = PRED_LEN, stride: int = 1, scene_id: str = "",
                  frame_step: int | None = None) -> list[FrameSample]:
    """Slide an ``obs_len + pred_len`` window over one scene's steps.

    Raw frame ids are mapped to step indices by dividing by the annotation
    interval (inferred as the gcd of frame differences unless ``frame_step``
    is given). Only pedestrians present at every step of a window belong to
    it; windows with nobody qualifying are dropped.
    """
    if obs_len < 1 or pred_len < 1:
        raise ValueError(f"obs_len and pred_len must be >= 1, got {obs_len}, {pred_len}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return _windows(annotations, obs_len, pred_len, stride, scene_id, frame_step)


def observation_windows(annotations: Sequence[RawAnnotation], obs_len: int = OBS_LEN,
                        scene_id: str = "", frame_step: int | None = None) -> list[FrameSample]:
    """Observation-only windows: what a stream buffer sees at each step."""
    if obs_len < 1:
        raise ValueError(f"obs_len must be >= 1, got {obs_len}")
    return _windows(annotations, obs_len, 0, 1, scene_id, frame_step)


def leave_one_out_split(scene_table: Iterable[str], held_out: str) -> SplitPlan:
    scenes = tuple(scene_table)
    if held_out not in scenes:
        raise ValueError(f"unknown scene {held_out!r}; expected one of {', '.join(scenes)}")
    return SplitPlan(held_out, tuple(s for s in scenes if s != held_out))


def scene_files(root, scene: str, part: str) -> list[Path]:
    return sorted((Path(root) / scene / part).glob("*.txt"))


def load_split(root, held_out: str, obs_len: int = OBS_LEN, pred_len: int = PRED_LEN,
               stride: int = 1) -> tuple[list[FrameSample], list[FrameSample]]:
    """Training and test windows for one leave-one-out split.

    Follows the common dataset layout where ``<root>/<scene>/train`` already
    holds the training portions of the other four scenes and
    ``<root>/<scene>/test`` holds the held-out scene. Windows never span
    files.
    """
    leave_one_out_split(SCENES, held_out)
    root = Path(root)
    if not (root / held_out).is_dir():
        raise FileNotFoundError(f"no scene directory {root / held_out}")
    train_files = scene_files(root, held_out, "train")
    test_files = scene_files(root, held_out, "test")
    if not test_files:
        raise FileNotFoundError(f"no test files under {root / held_out / 'test'}")

    def load(files, scene_id=None):
        out = []
        for f in files:
            out.extend(build_windows(parse_annotation_file(f), obs_len, pred_len, stride,
                                     scene_id or f.stem))
        return out

    return load(train_files), load(test_files, held_out)


@dataclass
class StreamBuffer:
    """Per-pedestrian ring buffers of the last ``obs_len`` detections.

    With ``frame_step`` set, a jump between pushed frames larger than one
    step resets every track.
    """

    obs_len: int = OBS_LEN
    frame_step: int | None = None
    last_frame: int | None = None
    tracks: dict[int, deque] = field(default_factory=dict)


def stream_push(buffer: StreamBuffer, frame_id: int,
                detections: Iterable[tuple[int, float, float]]) -> list[FrameSample]:
    """Add one frame of ``(ped_id, x, y)`` detections.

    Returns a one-element list with the sample of every pedestrian whose
    buffer holds a full contiguous history ending at ``frame_id``, or an
    empty list. Pedestrians missing from this frame lose their history.
    """
    if buffer.last_frame is not None and frame_id <= buffer.last_frame:
        raise ValueError(f"frame {frame_id} arrived after frame {buffer.last_frame}")
    gap = (buffer.frame_step is not None and buffer.last_frame is not None
           and frame_id - buffer.last_frame != buffer.frame_step)
    old = {} if gap else buffer.tracks
    tracks: dict[int, deque] = {}
    for ped_id, x, y in detections:
        if ped_id in tracks:
            raise ValueError(f"pedestrian {ped_id} detected twice in frame {frame_id}")
        buf = old.get(ped_id) or deque(maxlen=buffer.obs_len)
        buf.append((frame_id, float(x), float(y)))
        tracks[ped_id] = buf
    buffer.tracks = tracks
    buffer.last_frame = frame_id

    ready = sorted(p for p, buf in tracks.items() if len(buf) == buffer.obs_len)
    if not ready:
        return []
    obs = np.array([[(x, y) for _, x, y in tracks[p]] for p in ready], dtype=np.float64)
    return [FrameSample(
        scene_id="stream",
        window_start_frame=tracks[ready[0]][0][0],
        ped_ids=np.array(ready),
        obs_abs=obs,
        obs_rel=to_relative(obs),
        future=None,
        end_frame=frame_id,
    )]
