"""Frame storage, coordinate normalization, sampling and synthetic scenes."""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .flow_field import PixelFlow, flows_for_frames, normalize_flow
from .objective import SampleBatch
from .siren_net import forward

OBSERVED = "observed"
HELD_OUT = "held-out"


class FrameLoadError(ValueError):
    pass


class FrameGapError(FrameLoadError):
    pass


class FrameSizeMismatch(FrameLoadError):
    pass


class UnreadableFrame(FrameLoadError):
    pass


class LargeBatchWarning(UserWarning):
    pass


class CoordMap:
    """Affine map between grid indices 0..n-1 and the interval [-1, 1]."""

    def __init__(self, n: int):
        if n < 2:
            raise ValueError(f"axis needs at least 2 samples, got {n}")
        self.n = n

    def to_norm(self, i):
        return (2.0 * np.asarray(i, dtype=np.float64) - (self.n - 1)) / (self.n - 1)

    def to_index(self, x):
        idx = (np.asarray(x, dtype=np.float64) + 1.0) * (self.n - 1) / 2.0
        nearest = np.round(idx)
        # values within rounding noise of a grid point snap to it
        return np.where(np.abs(idx - nearest) <= 8 * np.finfo(float).eps * self.n, nearest, idx)


@dataclass
class VideoTensor:
    """Frames (T, H, W, 3) in [0, 1] with one role tag per frame."""

    frames: np.ndarray
    fps: float | None = None
    roles: list[str] | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")
        if self.roles is not None and len(self.roles) != self.T:
            raise ValueError(f"{len(self.roles)} role tags for {self.T} frames")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.T, self.H, self.W

    def indices(self, role: str) -> list[int]:
        if self.roles is None:
            raise ValueError("video has no role tags; call split_observed first")
        return [k for k, r in enumerate(self.roles) if r == role]

    @property
    def observed(self) -> list[int]:
        return self.indices(OBSERVED)

    @property
    def held_out(self) -> list[int]:
        return self.indices(HELD_OUT)


def split_observed(video: VideoTensor, k: int = 2) -> list[str]:
    """Tag every k-th frame (starting at 0) as observed, the rest as held out.

    Sets ``video.roles`` and returns the tags.
    """
    if k < 2:
        raise ValueError(f"observation stride must be >= 2, got {k}")
    if video.T < 3:
        raise ValueError(f"need at least 3 frames to hold any out, got {video.T}")
    roles = [OBSERVED if i % k == 0 else HELD_OUT for i in range(video.T)]
    video.roles = roles
    return roles


_INDEX_RE = re.compile(r"(\d+)(?!.*\d)")


def load_frames(source, fps: float | None = None) -> VideoTensor:
    """Load numbered PNG/PPM frames from a directory or glob pattern.

    The frame index is the last integer in each file name; indices must run
    contiguously from the smallest one.
    """
    source = Path(source)
    if source.is_dir():
        files = [p for p in source.iterdir() if p.suffix.lower() in (".png", ".ppm")]
    else:
        files = list(source.parent.glob(source.name))
    numbered = {}
    for p in files:
        m = _INDEX_RE.search(p.stem)
        if m is None:
            continue
        idx = int(m.group(1))
        if idx in numbered:
            raise FrameLoadError(f"duplicate frame index {idx}: {numbered[idx].name}, {p.name}")
        numbered[idx] = p
    if not numbered:
        raise FrameLoadError(f"no numbered frames found at {source}")
    first = min(numbered)
    frames = []
    for idx in range(first, max(numbered) + 1):
        if idx not in numbered:
            raise FrameGapError(f"gap at index {idx}")
        try:
            with Image.open(numbered[idx]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except Exception as exc:
            raise UnreadableFrame(f"cannot read frame {idx} ({numbered[idx]}): {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise FrameSizeMismatch(
                f"frame {idx} is {arr.shape[1]}x{arr.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(arr)
    return VideoTensor(np.stack(frames), fps=fps)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frames(frames: np.ndarray, out_dir, names: list[str] | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"frame_{i:04d}.png" for i in range(len(frames))]
    paths = []
    for frame, name in zip(frames, names):
        p = out_dir / name
        Image.fromarray(to_uint8(frame)).save(p)
        paths.append(p)
    return paths


# --- sampling ----------------------------------------------------------------

def grid_coords(t_values, H: int, W: int, T: int) -> np.ndarray:
    """Normalized (x, y, t) for every pixel of every requested (fractional) frame time."""
    cx, cy, ct = CoordMap(W), CoordMap(H), CoordMap(T)
    tt, yy, xx = np.meshgrid(np.asarray(t_values, dtype=np.float64),
                             np.arange(H, dtype=np.float64),
                             np.arange(W, dtype=np.float64), indexing="ij")
    return np.stack([cx.to_norm(xx), cy.to_norm(yy), ct.to_norm(tt)], axis=-1).reshape(-1, 3)


class ObservedSamples:
    """Every pixel of every observed frame, with scaled targets and normalized flows."""

    def __init__(self, video: VideoTensor, flow: PixelFlow | dict, dtype=torch.float64):
        observed = video.observed
        T, H, W = video.dims
        if isinstance(flow, PixelFlow):
            grids = {k: normalize_flow(g, T, H, W) for k, g in flows_for_frames(flow, observed).items()}
        else:
            grids = flow
        missing = [k for k in observed if k not in grids]
        if missing:
            raise ValueError(f"no flow for observed frames {missing}")
        self.frame_index = np.repeat(np.asarray(observed), H * W)
        self.coords = torch.from_numpy(grid_coords(observed, H, W, T)).to(dtype)
        self.targets = torch.from_numpy(
            video.frames[observed].reshape(-1, 3) * 2.0 - 1.0).to(dtype)
        self.flows = torch.from_numpy(
            np.concatenate([grids[k].reshape(-1, 3) for k in observed])).to(dtype)

    def __len__(self):
        return self.coords.shape[0]

    def batch(self, idx) -> SampleBatch:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SampleBatch(self.coords[idx], self.targets[idx], self.flows[idx])

    def batches(self, batch_size: int, rng: np.random.Generator):
        """One epoch: a fresh random partition of all samples."""
        n = len(self)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size > n:
            warnings.warn(f"batch size {batch_size} exceeds {n} samples; using one full batch",
                          LargeBatchWarning, stacklevel=2)
            batch_size = n
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield self.batch(perm[start:start + batch_size])

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self) / min(batch_size, len(self)))


def make_batches(video: VideoTensor, flow, batch_size: int, rng: np.random.Generator):
    return ObservedSamples(video, flow).batches(batch_size, rng)


# --- synthetic scenes --------------------------------------------------------

PATTERNS = ("texture", "blobs", "checker")
MOTIONS = ("static", "translate", "rotate")


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene; ``dims`` is (T, H, W)."""

    pattern: str = "texture"
    motion: str = "translate"
    velocity: tuple[float, float] = (1.0, 0.5)
    rate: float = 0.0
    center: tuple[float, float] | None = None
    dims: tuple[int, int, int] = (16, 48, 48)
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        self.dims = tuple(int(d) for d in self.dims)
        if self.center is not None:
            self.center = tuple(float(c) for c in self.center)
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unsupported scene motion {self.motion!r}; choose from {MOTIONS}")
        T, H, W = self.dims
        if min(self.dims) < 2:
            raise ValueError(f"scene dims must all be >= 2, got {self.dims}")
        if self.max_displacement() > 0.25 * W:
            raise ValueError(
                f"motion of {self.max_displacement():.2f} px/frame exceeds 25% of width ({W})")
        if not self.params:
            self.params = _pattern_params(self.pattern, self.seed, H, W)

    @property
    def rotation_center(self) -> tuple[float, float]:
        T, H, W = self.dims
        return self.center if self.center is not None else ((W - 1) / 2.0, (H - 1) / 2.0)

    def max_displacement(self) -> float:
        T, H, W = self.dims
        if self.motion == "translate":
            return math.hypot(*self.velocity)
        if self.motion == "rotate":
            cx, cy = self.rotation_center
            r = max(math.hypot(x - cx, y - cy) for x in (0, W - 1) for y in (0, H - 1))
            return 2.0 * r * abs(math.sin(self.rate / 2.0))
        return 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))

    def source_position(self, xs, ys, t):
        """Pattern-space position shown at pixel (xs, ys) at time t (frame units)."""
        if self.motion == "translate":
            u, v = self.velocity
            return xs - u * t, ys - v * t
        if self.motion == "rotate":
            cx, cy = self.rotation_center
            a = -self.rate * t
            c, s = np.cos(a), np.sin(a)
            dx, dy = xs - cx, ys - cy
            return c * dx - s * dy + cx, s * dx + c * dy + cy
        return xs, ys

    def pattern_at(self, xs, ys) -> np.ndarray:
        return evaluate_pattern(self.pattern, self.params, xs, ys)

    def render(self, t) -> np.ndarray:
        """Analytic frame at (possibly fractional) time t, shape (H, W, 3)."""
        T, H, W = self.dims
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        return self.pattern_at(*self.source_position(xs, ys, t))


def _pattern_params(pattern: str, seed: int, H: int, W: int) -> dict:
    rng = np.random.default_rng(seed)
    if pattern == "texture":
        # wavelengths of roughly 5 to 20 px
        return {
            "freq": (rng.uniform(0.05, 0.2, size=(3, 4, 2)) * 2 * np.pi).tolist(),
            "phase": rng.uniform(0, 2 * np.pi, size=(3, 4)).tolist(),
        }
    if pattern == "blobs":
        n = 6
        return {
            "center": np.column_stack([rng.uniform(0, W - 1, n), rng.uniform(0, H - 1, n)]).tolist(),
            "sigma": (rng.uniform(0.08, 0.16, n) * min(H, W)).tolist(),
            "color": rng.uniform(-1, 1, size=(n, 3)).tolist(),
        }
    return {
        "period": float(rng.uniform(10, 16)),
        "angle": float(rng.uniform(0, np.pi / 4)),
        "tint": rng.uniform(0.6, 1.0, size=3).tolist(),
    }


def _square_wave(s):
    # first three odd harmonics of a unit square wave; peak magnitude < 1.1
    return (4 / np.pi) * (np.sin(s) + np.sin(3 * s) / 3 + np.sin(5 * s) / 5)


def evaluate_pattern(pattern: str, params: dict, xs, ys) -> np.ndarray:
    """Smooth RGB pattern in [0, 1] built only from analytic functions.

    No clipping is involved, so complex-step differentiation is exact.
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if pattern == "texture":
        freq = np.asarray(params["freq"])
        phase = np.asarray(params["phase"])
        chans = []
        for c in range(3):
            s = sum(np.sin(freq[c, k, 0] * xs + freq[c, k, 1] * ys + phase[c, k])
                    for k in range(freq.shape[1]))
            chans.append(0.5 + 0.45 * s / freq.shape[1])
        return np.stack(chans, axis=-1)
    if pattern == "blobs":
        acc = 0
        for (cx, cy), sig, col in zip(params["center"], params["sigma"], params["color"]):
            g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig ** 2))
            acc = acc + g[..., None] * np.asarray(col)
        return 0.5 + 0.45 * np.tanh(acc)
    if pattern == "checker":
        a = params["angle"]
        k = 2 * np.pi / params["period"]
        xr = np.cos(a) * xs + np.sin(a) * ys
        yr = -np.sin(a) * xs + np.cos(a) * ys
        sq = _square_wave(k * xr) * _square_wave(k * yr) / 1.2 ** 2
        return 0.5 + 0.45 * sq[..., None] * np.asarray(params["tint"])
    raise ValueError(f"unknown pattern {pattern!r}")


def synth_scene(spec: SceneSpec, fps: float | None = None) -> tuple[VideoTensor, SceneSpec]:
    T = spec.dims[0]
    frames = np.stack([spec.render(k) for k in range(T)])
    return VideoTensor(frames, fps=fps), spec


# --- rendering ---------------------------------------------------------------

def render_frames(model, time_indices, dims: tuple[int, int, int], chunk: int = 16384,
                  out_dir=None) -> VideoTensor:
    """Evaluate the model on the full pixel grid at each (fractional) frame time.

    ``dims`` is (T, H, W) of the fitted video, which fixes the time
    normalization.  Outputs are mapped from [-1, 1] back to [0, 1] and clamped.
    """
    T, H, W = dims
    times = np.atleast_1d(np.asarray(time_indices, dtype=np.float64))
    coords = torch.from_numpy(grid_coords(times, H, W, T)).to(model.dtype)
    out = torch.empty(coords.shape[0], 3, dtype=model.dtype)
    with torch.no_grad():
        for s in range(0, coords.shape[0], chunk):
            out[s:s + chunk] = forward(model, coords[s:s + chunk])
    frames = ((out.numpy().astype(np.float64) + 1.0) / 2.0).clip(0.0, 1.0)
    video = VideoTensor(frames.reshape(len(times), H, W, 3))
    if out_dir is not None:
        save_frames(video.frames, out_dir, [time_name(t) for t in times])
    return video


def time_name(t: float) -> str:
    """File name for a render at frame time t; integer times match source numbering."""
    if float(t).is_integer():
        return f"frame_{int(t):04d}.png"
    return f"frame_{t:09.4f}".replace(".", "p") + ".png"
