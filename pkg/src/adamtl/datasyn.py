"""Synthetic multi-task scenes with graded visual complexity.

A scene holds 1..k rectangles, circles and triangles (one class per shape
kind) over a background whose noise grows with complexity. Segmentation,
saliency and a "normals" proxy (unit vector toward the owning shape's centre)
are all derived from the geometry, so labels are exact.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .heads import TaskSpec
from .io import write_pgm, write_ppm
from .numerics import RngState

SHAPES = ("rectangle", "circle", "triangle")
NUM_CLASSES = len(SHAPES) + 1
PALETTE = np.array([[0.9, 0.3, 0.2], [0.2, 0.85, 0.3], [0.25, 0.4, 0.95]])
CLUTTER_STEP = 0.06


@dataclass
class Dataset:
    images: np.ndarray      # [N, 3, H, W] float32 in [0, 1]
    seg: np.ndarray         # [N, H, W] int64, 0 = background
    saliency: np.ndarray    # [N, 1, H, W] float32 in {0, 1}
    normals: np.ndarray     # [N, 2, H, W] float32
    complexity: np.ndarray  # [N] int
    clutter: np.ndarray     # [N] float, background noise amplitude

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.seg[idx], self.saliency[idx], self.normals[idx],
                       self.complexity[idx], self.clutter[idx])

    def target(self, task: TaskSpec, idx=slice(None)) -> np.ndarray:
        return {"segmentation": self.seg, "saliency": self.saliency, "normals": self.normals}[task.kind][idx]

    def targets(self, tasks: Sequence[TaskSpec], idx=slice(None)) -> dict:
        return {t.name: self.target(t, idx) for t in tasks}


def _shape_mask(kind: str, cx: float, cy: float, r: float, aspect: float, px, py) -> np.ndarray:
    if kind == "rectangle":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r * aspect)
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    top = cy - r
    return (py >= top) & (py <= cy + r) & (np.abs(px - cx) <= (py - top) / 2)


def make_scene(rng: RngState, size: int, complexity: int, clutter: bool = True) -> tuple:
    """One scene: (image, seg, saliency, normals, clutter amplitude)."""
    py, px = np.mgrid[0:size, 0:size] + 0.5
    level = (complexity - 1) * CLUTTER_STEP if clutter else 0.0
    bg = 0.15 + 0.2 * rng.uniform((3,))
    image = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    if level > 0:
        image += level * (rng.uniform((3, size, size)) - 0.5) * 2
    seg = np.zeros((size, size), dtype=np.int64)
    owner = np.full((size, size), -1)
    centres = []
    for s in range(complexity):
        k = int(rng.uniform((1,))[0] * len(SHAPES))
        r = size * (0.12 + 0.10 * rng.uniform((1,))[0])
        aspect = 0.6 + 0.4 * rng.uniform((1,))[0]
        cx, cy = r + (size - 2 * r) * rng.uniform((2,))
        mask = _shape_mask(SHAPES[k], cx, cy, r, aspect, px, py)
        colour = np.clip(PALETTE[k] + 0.1 * (rng.uniform((3,)) - 0.5) * 2, 0, 1)
        image[:, mask] = colour[:, None]
        seg[mask] = k + 1
        owner[mask] = s
        centres.append((cx, cy))
    normals = np.zeros((2, size, size))
    for s, (cx, cy) in enumerate(centres):
        m = owner == s
        vx, vy = cx - px[m], cy - py[m]
        n = np.hypot(vx, vy)
        tiny = n < 1e-6
        vx, vy, n = np.where(tiny, 1.0, vx), np.where(tiny, 0.0, vy), np.where(tiny, 1.0, n)
        normals[0][m] = vx / n
        normals[1][m] = vy / n
    sal = (seg > 0).astype(np.float32)[None]
    return np.clip(image, 0, 1).astype(np.float32), seg, sal, normals.astype(np.float32), level


def generate(seed: int, count: int, size: int = 32, complexity_range: tuple = (1, 4), clutter: bool = True,
             patch_size: int = 4) -> Dataset:
    """Deterministic dataset; complexity cycles through ``complexity_range`` (inclusive)."""
    if size < 2 * patch_size:
        raise ValueError(f"size {size} must be at least 2 * patch_size ({2 * patch_size})")
    lo, hi = complexity_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad complexity range {complexity_range}")
    master = RngState(seed)
    items = []
    for i in range(count):
        c = lo + i % (hi - lo + 1)
        items.append((make_scene(master.spawn(f"scene-{i}"), size, c, clutter), c))
    if not items:
        z = np.zeros((0, size, size))
        return Dataset(np.zeros((0, 3, size, size), np.float32), z.astype(np.int64), z[:, None].astype(np.float32),
                       np.zeros((0, 2, size, size), np.float32), np.zeros(0, int), np.zeros(0))
    return Dataset(
        images=np.stack([s[0] for s, _ in items]),
        seg=np.stack([s[1] for s, _ in items]),
        saliency=np.stack([s[2] for s, _ in items]),
        normals=np.stack([s[3] for s, _ in items]),
        complexity=np.array([c for _, c in items]),
        clutter=np.array([s[4] for s, _ in items]),
    )


# -- metrics -----------------------------------------------------------------

class MetricAccumulator:
    """Dataset-level metric for one task; feed predictions one by one."""

    def __init__(self, task: TaskSpec):
        self.task = task
        if task.kind == "segmentation":
            self.conf = np.zeros((task.classes, task.classes), dtype=np.int64)
        else:
            self.tp = self.fp = self.fn = 0
            self.angle_sum = 0.0
            self.count = 0

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        """``pred`` is the raw decoder output for one image ([K,H,W], [1,H,W] or [2,H,W])."""
        pred = np.asarray(pred, dtype=np.float64)
        kind = self.task.kind
        if kind == "segmentation":
            lab = pred.argmax(axis=0).ravel()
            gt = np.asarray(target).ravel()
            np.add.at(self.conf, (gt, lab), 1)
        elif kind == "saliency":
            on = pred.reshape(-1) > 0.0  # sigmoid(z) > 0.5
            gt = np.asarray(target).reshape(-1) > 0.5
            self.tp += int((on & gt).sum())
            self.fp += int((on & ~gt).sum())
            self.fn += int((~on & gt).sum())
        else:
            t = np.asarray(target, dtype=np.float64)
            fg = np.abs(t).sum(axis=0) > 0
            if fg.any():
                p = pred[:, fg]
                n = np.linalg.norm(p, axis=0)
                cos = np.where(n > 0, (p * t[:, fg]).sum(axis=0) / np.where(n > 0, n, 1), 0.0)
                self.angle_sum += float(np.arccos(np.clip(cos, -1, 1)).sum())
                self.count += int(fg.sum())

    def value(self) -> float:
        kind = self.task.kind
        if kind == "segmentation":
            inter = np.diag(self.conf).astype(np.float64)
            union = self.conf.sum(0) + self.conf.sum(1) - inter
            present = union > 0
            return float((inter[present] / union[present]).mean()) if present.any() else 1.0
        if kind == "saliency":
            denom = 2 * self.tp + self.fp + self.fn
            return 1.0 if denom == 0 else 2 * self.tp / denom
        return self.angle_sum / self.count if self.count else 0.0


def metrics(pred: np.ndarray, target: np.ndarray, task: TaskSpec) -> float:
    """Metric of a single prediction: mIoU, F1 at probability 0.5, or mean angular error (radians)."""
    acc = MetricAccumulator(task)
    acc.update(pred, target)
    return acc.value()


def delta_m(multi: dict, single: dict, tasks: Sequence[TaskSpec]) -> float:
    """Mean sign-corrected relative change (in %) of ``multi`` against ``single``."""
    total = 0.0
    for t in tasks:
        sign = -1.0 if t.lower_is_better else 1.0
        total += sign * (multi[t.name] - single[t.name]) / single[t.name]
    return 100.0 * total / len(tasks)


# -- export ------------------------------------------------------------------

def export(dataset: Dataset, out_dir: str) -> str:
    """Write PPM images, PGM/CSV label maps and manifest.csv; returns the manifest path."""
    for sub in ("images", "seg", "saliency", "normals"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "image", "seg", "saliency", "normals", "complexity", "clutter"])
        for i in range(len(dataset)):
            names = [f"images/{i:05d}.ppm", f"seg/{i:05d}.pgm", f"saliency/{i:05d}.pgm", f"normals/{i:05d}.csv"]
            write_ppm(os.path.join(out_dir, names[0]), dataset.images[i])
            write_pgm(os.path.join(out_dir, names[1]), dataset.seg[i])
            write_pgm(os.path.join(out_dir, names[2]), dataset.saliency[i, 0] * 255)
            with open(os.path.join(out_dir, names[3]), "w", newline="") as nf:
                nw = csv.writer(nf, lineterminator="\n")
                nw.writerow(["y", "x", "nx", "ny"])
                ys, xs = np.nonzero(np.abs(dataset.normals[i]).sum(axis=0) > 0)
                for y, x in zip(ys, xs):
                    nw.writerow([y, x, repr(float(dataset.normals[i, 0, y, x])),
                                 repr(float(dataset.normals[i, 1, y, x]))])
            w.writerow([i, *names, int(dataset.complexity[i]), repr(float(dataset.clutter[i]))])
    return manifest

