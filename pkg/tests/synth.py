"""Synthetic crowd scenes in the ETH/UCY annotation layout.

Run as a script to write a toy dataset registry:

    python tests/synth.py /tmp/toy-data
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

SCENES = ("eth", "hotel", "univ", "zara1", "zara2")


def crowd_scene(seed: int, n_peds: int = 30, n_steps: int = 120, frame_step: int = 10,
                linear: bool = False) -> list[tuple[int, int, float, float]]:
    """Pedestrians walking across a 15 m plaza with mild turns and repulsion.

    Returns (frame_id, ped_id, x, y) records with a ``frame_step`` raw-frame
    interval. With ``linear`` every track is a straight line kept at full
    precision (no rounding).
    """
    rng = np.random.default_rng(seed)
    recs = []
    active = {}
    starts = np.sort(rng.integers(0, n_steps - 20, size=n_peds))
    lengths = rng.integers(18, 50, size=n_peds)
    for step in range(n_steps):
        for pid in np.flatnonzero(starts == step):
            side = rng.choice([-1.0, 1.0])
            pos = np.array([7.5 - side * 7.5, rng.uniform(0, 12)])
            vel = np.array([side * rng.uniform(0.3, 0.6), rng.normal(0, 0.1)])
            active[int(pid)] = [pos, vel, int(lengths[pid]), rng.normal(0, 0.02)]
        for pid in sorted(active):
            pos, vel, left, turn = active[pid]
            x, y = float(pos[0]), float(pos[1])
            if not linear:
                x, y = round(x, 4), round(y, 4)
            recs.append((step * frame_step, pid + 1, x, y))
        for pid in list(active):
            pos, vel, left, turn = active[pid]
            if not linear:
                c, s = np.cos(turn), np.sin(turn)
                vel = np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
                for other, (opos, *_rest) in active.items():
                    d = pos - opos
                    dist = np.hypot(*d)
                    if other != pid and 0 < dist < 1.5:
                        vel = vel + 0.05 * d / dist ** 2
            active[pid] = [pos + vel, vel, left - 1, turn]
            if left <= 1:
                del active[pid]
    return recs


def write_scene(path: Path, recs) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for frame, ped, x, y in recs:
            f.write(f"{float(frame)}\t{float(ped)}\t{x}\t{y}\n")


def write_registry(root, n_peds: int = 30, n_steps: int = 120, linear: bool = False) -> Path:
    """One synthetic recording per scene, arranged as <root>/<scene>/{train,val,test}."""
    root = Path(root)
    recordings = {s: crowd_scene(i, n_peds, n_steps, linear=linear) for i, s in enumerate(SCENES)}
    for held in SCENES:
        write_scene(root / held / "test" / f"{held}.txt", recordings[held])
        for other in SCENES:
            if other != held:
                write_scene(root / held / "train" / f"{other}_train.txt", recordings[other])
        (root / held / "val").mkdir(parents=True, exist_ok=True)
    return root


if __name__ == "__main__":
    print(write_registry(sys.argv[1] if len(sys.argv) > 1 else "toy-data"))
