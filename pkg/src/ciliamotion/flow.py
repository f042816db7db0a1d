"""Dense optical flow and its differential invariants.

Flow is estimated per frame pair with the classical Horn-Schunck fixed-point
iteration; any dense estimator producing per-pixel (u, v) displacements can
stand in behind the same :class:`FlowField` contract. From the flow's
spatial derivatives three invariant fields are derived:

    rotation    = (dv/dx - du/dy) / 2     (half-curl)
    divergence  = du/dx + dv/dy
    deformation = sqrt((du/dx - dv/dy)^2 + (du/dy + dv/dx)^2)

Here u is horizontal displacement (columns, x), v vertical (rows, y), in
pixels per frame. Derivatives use central differences with one-sided
stencils at image borders; border pixels are best excluded from analytic
comparisons via :func:`border_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_ALPHA = 0.1
DEFAULT_ITERS = 500

# 8-neighbor weighted average used by the Horn-Schunck update
_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])


@dataclass
class FlowField:
    """Per-pair displacement stacks, each (pairs, H, W)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError(f"u/v shapes differ: {self.u.shape} vs {self.v.shape}")
        if self.u.ndim == 2:
            self.u = self.u[None]
            self.v = self.v[None]
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow field contains non-finite values")


@dataclass
class InvariantField:
    """Rotation, divergence, and deformation stacks, each (pairs, H, W)."""

    rotation: np.ndarray
    divergence: np.ndarray
    deformation: np.ndarray

    def as_array(self) -> np.ndarray:
        """Stack channels into (3, pairs, H, W): rotation, divergence, deformation."""
        return np.stack([self.rotation, self.divergence, self.deformation])

    @classmethod
    def from_array(cls, array: np.ndarray) -> "InvariantField":
        if array.ndim != 4 or array.shape[0] != 3:
            raise ValueError(f"expected (3, pairs, H, W), got {array.shape}")
        return cls(array[0].copy(), array[1].copy(), array[2].copy())


def horn_schunck(frame_a: np.ndarray, frame_b: np.ndarray,
                 alpha: float = DEFAULT_ALPHA, iters: int = DEFAULT_ITERS
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Estimate (u, v) displacement from ``frame_a`` to ``frame_b``.

    ``alpha`` weights the smoothness term (in intensity units); ``iters``
    fixed-point iterations are always run, so output is deterministic.
    Identical frames yield exactly zero flow.
    """
    frame_a = np.asarray(frame_a, dtype=np.float64)
    frame_b = np.asarray(frame_b, dtype=np.float64)
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if frame_a.ndim != 2:
        raise ValueError(f"frames must be 2-d, got shape {frame_a.shape}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")

    avg = 0.5 * (frame_a + frame_b)
    iy, ix = np.gradient(avg)
    it = frame_b - frame_a
    denom = alpha * alpha + ix * ix + iy * iy

    u = np.zeros_like(frame_a)
    v = np.zeros_like(frame_a)
    for _ in range(iters):
        u_bar = ndimage.convolve(u, _HS_KERNEL, mode="nearest")
        v_bar = ndimage.convolve(v, _HS_KERNEL, mode="nearest")
        shared = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * shared
        v = v_bar - iy * shared
    return u, v


def clip_flow(frames: np.ndarray, alpha: float = DEFAULT_ALPHA,
              iters: int = DEFAULT_ITERS) -> FlowField:
    """Flow for every consecutive pair of a (T, H, W) stack, in frame order."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError(f"need a (T>=2, H, W) stack, got {frames.shape}")
    pairs = [horn_schunck(frames[i], frames[i + 1], alpha=alpha, iters=iters)
             for i in range(frames.shape[0] - 1)]
    return FlowField(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def invariants(flow: FlowField) -> InvariantField:
    """Differential invariants of a flow field, per frame pair."""
    du_dy = np.gradient(flow.u, axis=-2)
    du_dx = np.gradient(flow.u, axis=-1)
    dv_dy = np.gradient(flow.v, axis=-2)
    dv_dx = np.gradient(flow.v, axis=-1)
    rotation = 0.5 * (dv_dx - du_dy)
    divergence = du_dx + dv_dy
    deformation = np.sqrt((du_dx - dv_dy) ** 2 + (du_dy + dv_dx) ** 2)
    return InvariantField(rotation, divergence, deformation)


def rotation_sequence(frames: np.ndarray, alpha: float = DEFAULT_ALPHA,
                      iters: int = DEFAULT_ITERS) -> np.ndarray:
    """Rotation stack (T-1, H, W) for a clip; the classifier's input signal."""
    return invariants(clip_flow(frames, alpha=alpha, iters=iters)).rotation


def border_mask(h: int, w: int) -> np.ndarray:
    """True on the one-pixel border where derivative stencils are one-sided."""
    mask = np.zeros((h, w), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return mask
