"""Optical flow grids: unit conversion, Middlebury I/O, ground truth, Horn-Schunck."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"

LUMA_601 = np.array([0.299, 0.587, 0.114])


class FlowFileError(ValueError):
    pass


class BadFlowMagic(FlowFileError):
    pass


class TruncatedFlowFile(FlowFileError):
    pass


class BadFlowDims(FlowFileError):
    pass


@dataclass
class PixelFlow:
    """Forward flow (u, v) in pixels per source-frame step, keyed by frame index.

    Each grid has shape (H, W, 2); u runs along columns, v along rows.
    """

    grids: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = {g.shape for g in self.grids.values()}
        if len(shapes) > 1:
            raise ValueError(f"flow grids differ in shape: {sorted(shapes)}")
        for k, g in self.grids.items():
            if g.ndim != 3 or g.shape[2] != 2:
                raise ValueError(f"flow grid {k} must be (H, W, 2), got {g.shape}")
            if not np.isfinite(g).all():
                raise ValueError(f"flow grid {k} has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        g = next(iter(self.grids.values()))
        return g.shape[0], g.shape[1]


def normalize_flow(flow: np.ndarray, T: int, H: int, W: int, stride: int = 1) -> np.ndarray:
    """Convert a pixel flow grid (H, W, 2) to normalized vectors (H, W, 3).

    With x, y and t each mapped so that the first index goes to -1 and the
    last to +1, a motion of u pixels per source frame becomes
    u * (T - 1) / (W - 1) normalized x-units per normalized t-unit.  A flow
    measured across ``stride`` source frames is divided by the stride first.
    """
    if min(T, H, W) < 2:
        raise ValueError(f"need T, H, W >= 2, got T={T} H={H} W={W}")
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != (H, W, 2):
        raise ValueError(f"flow grid {flow.shape} does not match video {H}x{W}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = np.empty((H, W, 3))
    out[..., 0] = flow[..., 0] / stride * ((T - 1) / (W - 1))
    out[..., 1] = flow[..., 1] / stride * ((T - 1) / (H - 1))
    out[..., 2] = 1.0
    return out


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("refusing to write non-finite flow")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], "<f4").tobytes())
        f.write(np.array([w, h], "<i4").tobytes())
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFlowFile(f"{path}: truncated flow file ({len(data)} bytes)")
    magic = np.frombuffer(data[:4], "<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadFlowMagic(f"{path}: invalid flow file magic {magic!r}")
    if len(data) < 12:
        raise TruncatedFlowFile(f"{path}: truncated flow header")
    w, h = (int(v) for v in np.frombuffer(data[4:12], "<i4"))
    if w <= 0 or h <= 0:
        raise BadFlowDims(f"{path}: nonpositive flow dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise TruncatedFlowFile(f"{path}: truncated flow payload, {len(data)} of {need} bytes")
    return np.frombuffer(data[12:need], "<f4").reshape(h, w, 2).copy()


def rotation_displacement(xs, ys, rate: float, center: tuple[float, float]):
    """Displacement of pixel (xs, ys) under one step of rotation by ``rate`` radians."""
    cx, cy = center
    c, s = math.cos(rate), math.sin(rate)
    dx, dy = xs - cx, ys - cy
    return c * dx - s * dy - dx, s * dx + c * dy - dy


def synth_flow(scene) -> PixelFlow:
    """Exact per-pixel forward motion (frame k to k+1) of a synthetic scene."""
    T, H, W = scene.dims
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    if scene.motion == "translate":
        u, v = scene.velocity
        grid = np.empty((H, W, 2))
        grid[..., 0] = u
        grid[..., 1] = v
    elif scene.motion == "rotate":
        du, dv = rotation_displacement(xs, ys, scene.rate, scene.rotation_center)
        grid = np.stack([du, dv], axis=-1)
    elif scene.motion == "static":
        grid = np.zeros((H, W, 2))
    else:
        raise ValueError(f"unsupported scene motion {scene.motion!r}")
    return PixelFlow({k: grid.copy() for k in range(T)})


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        return frame @ LUMA_601
    return frame


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12],
                    [1 / 6, 0.0, 1 / 6],
                    [1 / 12, 1 / 6, 1 / 12]])


def horn_schunck(frame_a, frame_b, alpha: float = 0.1, iterations: int = 1000) -> np.ndarray:
    """Horn-Schunck flow from ``frame_a`` to ``frame_b``, shape (H, W, 2).

    Derivatives are the original 2x2x2 cube averages; the Jacobi update is
    u = u_avg - Ix (Ix u_avg + Iy v_avg + It) / (alpha^2 + Ix^2 + Iy^2).
    """
    a = to_gray(frame_a)
    b = to_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    ap = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    bp = np.pad(b, ((0, 1), (0, 1)), mode="edge")
    ix = 0.25 * sum(p[r:r + a.shape[0], 1:] - p[r:r + a.shape[0], :-1]
                    for p in (ap, bp) for r in (0, 1))
    iy = 0.25 * sum(p[1:, c:c + a.shape[1]] - p[:-1, c:c + a.shape[1]]
                    for p in (ap, bp) for c in (0, 1))
    it = 0.25 * sum(bp[r:r + a.shape[0], c:c + a.shape[1]] - ap[r:r + a.shape[0], c:c + a.shape[1]]
                    for r in (0, 1) for c in (0, 1))

    u = np.zeros_like(a)
    v = np.zeros_like(a)
    denom = alpha ** 2 + ix ** 2 + iy ** 2
    for _ in range(iterations):
        u_avg = ndimage.correlate(u, _HS_AVG, mode="nearest")
        v_avg = ndimage.correlate(v, _HS_AVG, mode="nearest")
        resid = (ix * u_avg + iy * v_avg + it) / denom
        u = u_avg - ix * resid
        v = v_avg - iy * resid
    return np.stack([u, v], axis=-1)


def observed_pixel_flow(frames: np.ndarray, observed: list[int], alpha: float = 0.1,
                        iterations: int = 1000) -> PixelFlow:
    """Horn-Schunck flow for each observed frame, in pixels per source frame.

    Flow between consecutive observed frames is divided by their spacing.
    The last observed frame takes the negated backward flow to its predecessor.
    """
    grids = {}
    for i, k in enumerate(observed):
        if i + 1 < len(observed):
            nxt = observed[i + 1]
            grids[k] = horn_schunck(frames[k], frames[nxt], alpha, iterations) / (nxt - k)
        elif i > 0:
            prev = observed[i - 1]
            grids[k] = -horn_schunck(frames[k], frames[prev], alpha, iterations) / (k - prev)
        else:
            grids[k] = np.zeros(frames.shape[1:3] + (2,))
    return PixelFlow(grids)


def flows_for_frames(pf: PixelFlow, indices: list[int]) -> dict[int, np.ndarray]:
    """Pick the flow grid for each requested frame.

    A frame without its own forward flow (typically the last one) reuses
    the grid of the nearest earlier frame that has one.
    """
    out = {}
    have = sorted(pf.grids)
    for k in indices:
        if k in pf.grids:
            out[k] = pf.grids[k]
            continue
        earlier = [j for j in have if j < k]
        if not earlier:
            raise ValueError(f"no flow available for frame {k}")
        out[k] = pf.grids[earlier[-1]]
    return out


def rescale_flow(flow: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinearly resample a flow grid to (H, W) and scale its magnitudes to match."""
    h0, w0 = flow.shape[:2]
    if (h0, w0) == (H, W):
        return flow
    out = np.stack([ndimage.zoom(flow[..., c], (H / h0, W / w0), order=1, grid_mode=False)
                    for c in range(2)], axis=-1)
    out[..., 0] *= (W - 1) / (w0 - 1)
    out[..., 1] *= (H - 1) / (h0 - 1)
    return out
