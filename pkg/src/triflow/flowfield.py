"""Optical flow between toy-world frames plus the HSV color encoding.

Two estimators: an analytic one that reads entity motion straight out of the
paired simulator states (exact, used to build training data) and a 4x4
block-matching estimator that works from pixels alone. Flow images use the
HSV wheel: hue is the flow angle, saturation the magnitude over ``max_mag``,
value 1, so zero flow encodes as pure white.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .toyworld import (AGENT_RADIUS, FRAME_HW, GOAL_RADIUS, OBJECT_RADIUS,
                       EnvState, _disc_coverage)

BLOCK = 4
SEARCH_RADIUS = 3


@dataclass
class FlowField:
    vectors: np.ndarray            # (H, W, 2) pixel displacements (dx, dy)
    max_mag: float = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise ShapeError(f"flow vectors must be HxWx2, got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ShapeError("flow vectors must be finite")
        if self.max_mag is None:
            self.max_mag = max(float(self.magnitudes().max()), 1e-6)

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)


def analytic_flow(state_a: EnvState, state_b: EnvState) -> FlowField:
    """Exact per-pixel flow from entity motion between two states.

    Each pixel is assigned to the topmost entity whose (solid) disc covers it
    in the first state, draw order object > agent > goal; background pixels
    get zero flow. Displacements are in pixels, x along columns, y along rows.
    """
    hw = FRAME_HW
    vectors = np.zeros((hw, hw, 2), dtype=np.float64)
    layers = [
        (state_a.goal_pos, GOAL_RADIUS, state_b.goal_pos),
        (state_a.agent_pos, AGENT_RADIUS, state_b.agent_pos),
        (state_a.object_pos, OBJECT_RADIUS, state_b.object_pos),
    ]
    for pos_a, radius, pos_b in layers:
        mask = _disc_coverage(pos_a, radius) >= 0.5
        disp = (np.asarray(pos_b) - np.asarray(pos_a)) * hw
        vectors[mask] = disp
    return FlowField(vectors)


def block_match_flow(frame_a: np.ndarray, frame_b: np.ndarray,
                     block: int = BLOCK, radius: int = SEARCH_RADIUS) -> FlowField:
    """Integer-displacement flow minimizing block SSD, small displacements win ties."""
    if frame_a.shape != frame_b.shape:
        raise ShapeError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    h, w = frame_a.shape[:2]
    if h % block or w % block:
        raise ShapeError(f"frame size {h}x{w} not divisible by block {block}")
    padded = np.pad(frame_b, ((radius, radius), (radius, radius), (0, 0)), mode="edge")

    offsets = [(dx, dy) for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1)]
    offsets.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))

    vectors = np.zeros((h, w, 2), dtype=np.float64)
    for by in range(0, h, block):
        for bx in range(0, w, block):
            patch = frame_a[by:by + block, bx:bx + block]
            best, best_d = None, (0, 0)
            for dx, dy in offsets:
                cand = padded[by + radius + dy: by + radius + dy + block,
                              bx + radius + dx: bx + radius + dx + block]
                ssd = float(np.sum((patch - cand) ** 2))
                if best is None or ssd < best - 1e-12:
                    best, best_d = ssd, (dx, dy)
            vectors[by:by + block, bx:bx + block] = best_d
    return FlowField(vectors)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, method: str = "block-match",
                  states: tuple[EnvState, EnvState] | None = None) -> FlowField:
    if frame_a.shape != frame_b.shape:
        raise ShapeError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if method == "analytic":
        if states is None:
            raise ShapeError("analytic flow needs the paired simulator states")
        return analytic_flow(*states)
    if method == "block-match":
        return block_match_flow(frame_a, frame_b)
    raise ShapeError(f"unknown flow method {method!r}")


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    rgb = np.empty(h.shape + (3,), dtype=np.float64)
    for k, (r, g, b) in enumerate([(v, t, p), (q, v, p), (p, v, t),
                                   (p, q, v), (t, p, v), (v, p, q)]):
        m = i == k
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r[m], g[m], b[m]
    return rgb


def _rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    h = np.zeros_like(v)
    h = np.where(maxc == r, ((g - b) / safe) % 6.0, h)
    h = np.where((maxc == g) & (maxc != r), (b - r) / safe + 2.0, h)
    h = np.where((maxc == b) & (maxc != r) & (maxc != g), (r - g) / safe + 4.0, h)
    h = (h / 6.0) % 1.0
    h = np.where(span == 0, 0.0, h)
    return h, s, v


def flow_to_rgb(flow: FlowField, max_mag: float | None = None) -> np.ndarray:
    """Encode a flow field as a float RGB frame; zero flow maps to white."""
    if max_mag is None:
        max_mag = flow.max_mag
    v = flow.vectors
    angle = np.arctan2(v[..., 1], v[..., 0])  # [-pi, pi]
    hue = (angle / (2.0 * np.pi)) % 1.0
    sat = np.clip(flow.magnitudes() / max_mag, 0.0, 1.0)
    val = np.ones_like(sat)
    return _hsv_to_rgb(hue, sat, val).astype(np.float32)


def rgb_to_flow(frame: np.ndarray, max_mag: float) -> FlowField:
    """Inverse of :func:`flow_to_rgb` up to the saturation clip."""
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"expected HxWx3 frame, got {frame.shape}")
    h, s, _ = _rgb_to_hsv(np.asarray(frame, dtype=np.float64))
    angle = h * 2.0 * np.pi
    mag = s * max_mag
    vectors = np.stack([mag * np.cos(angle), mag * np.sin(angle)], axis=-1)
    return FlowField(vectors, max_mag=max_mag)


def dataset_max_mag(flows: list[np.ndarray], percentile: float = 99.0) -> float:
    """99th percentile of the nonzero flow magnitudes across a dataset."""
    mags = []
    for f in flows:
        m = np.linalg.norm(np.asarray(f, dtype=np.float64), axis=-1).ravel()
        mags.append(m[m > 1e-9])
    all_m = np.concatenate(mags) if mags else np.array([])
    if all_m.size == 0:
        return 1.0
    return max(float(np.percentile(all_m, percentile)), 1e-6)
