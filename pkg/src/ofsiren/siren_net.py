"""Sine-activated coordinate network mapping (x, y, t) to RGB.

Besides plain evaluation, the module exposes the exact input Jacobian of
the network, obtained by pushing the three coordinate tangents through
every sine layer alongside the values.  The tangent path is built from
ordinary differentiable tensor ops, so a loss that depends on the
Jacobian can itself be differentiated with respect to the parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

IN_DIM = 3
OUT_DIM = 3

MAGIC = b"FSIR"
FORMAT_VERSION = 1
# magic, version, depth, width, omega, seed
_HEADER = struct.Struct("<4sIIIdq")


class ModelFileError(ValueError):
    """Base class for checkpoint decoding failures."""


class NotAModelFile(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class TruncatedModelFile(ModelFileError):
    pass


class ModelShapeMismatch(ModelFileError):
    pass


@dataclass(frozen=True)
class SirenConfig:
    depth: int = 9
    width: int = 512
    omega: float = 30.0
    in_dim: int = IN_DIM
    out_dim: int = OUT_DIM

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 2:
            raise ValueError(f"depth must be an integer >= 2, got {self.depth}")
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"width must be an integer >= 1, got {self.width}")
        if not (math.isfinite(self.omega) and self.omega > 0):
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.in_dim != IN_DIM or self.out_dim != OUT_DIM:
            raise ValueError("in_dim and out_dim are fixed to 3")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each layer, input to output."""
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class JacobianResult:
    """Network output and its partial derivatives, batched.

    Every field has shape (N, 3); column c of ``d_dx`` is the derivative of
    output channel c with respect to x, and so on.
    """

    value: torch.Tensor
    d_dx: torch.Tensor
    d_dy: torch.Tensor
    d_dt: torch.Tensor

    def stacked(self) -> torch.Tensor:
        """Derivatives as one (N, 3, 3) tensor indexed [sample, axis, channel]."""
        return torch.stack([self.d_dx, self.d_dy, self.d_dt], dim=1)

    def __getitem__(self, i):
        return JacobianResult(self.value[i], self.d_dx[i], self.d_dy[i], self.d_dt[i])

    def __len__(self):
        return self.value.shape[0]


class SirenModel(nn.Module):
    """Stack of affine layers; all but the last are followed by sin(omega * u)."""

    def __init__(self, config: SirenConfig, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in config.layer_dims():
            self.weights.append(nn.Parameter(torch.zeros(fan_out, fan_in, dtype=dtype)))
            self.biases.append(nn.Parameter(torch.zeros(fan_out, dtype=dtype)))

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def omega(self) -> float:
        return self.config.omega

    @property
    def dtype(self):
        return self.weights[0].dtype

    def layers(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return list(zip(self.weights, self.biases))

    def parameter_list(self) -> list[torch.Tensor]:
        """Parameters in layer-major order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in self.layers():
            out.extend((w, b))
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(self.depth):
            names.extend((f"layer{i}.weight", f"layer{i}.bias"))
        return names

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return forward(self, coords)


def init_siren(config: SirenConfig, seed: int, dtype=torch.float64) -> SirenModel:
    """Build a model with the usual sine-network initialization.

    First-layer weights are uniform in +-1/in_dim, later weights uniform in
    +-sqrt(6/fan_in)/omega, biases zero.  Sampling uses a numpy generator
    seeded with ``seed`` so the draw is platform independent.
    """
    model = SirenModel(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for i, (fan_in, fan_out) in enumerate(config.layer_dims()):
            if i == 0:
                bound = 1.0 / fan_in
            else:
                bound = math.sqrt(6.0 / fan_in) / config.omega
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            model.weights[i].copy_(torch.from_numpy(w))
    return model


def _check_coords(model: SirenModel, coords) -> torch.Tensor:
    coords = torch.as_tensor(coords, dtype=model.dtype)
    if coords.ndim != 2 or coords.shape[1] != IN_DIM:
        raise ValueError(f"coords must have shape (N, 3), got {tuple(coords.shape)}")
    finite = torch.isfinite(coords).all(dim=1)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite)[0, 0])
        raise ValueError(f"non-finite coordinate at batch index {bad}")
    return coords


def forward(model: SirenModel, coords) -> torch.Tensor:
    """Evaluate the network on an (N, 3) batch of normalized coordinates."""
    h = _check_coords(model, coords)
    omega = model.omega
    layers = model.layers()
    for w, b in layers[:-1]:
        h = torch.sin(omega * (h @ w.T + b))
    w, b = layers[-1]
    return h @ w.T + b


def forward_with_jacobian(model: SirenModel, coords) -> JacobianResult:
    """Evaluate the network and its exact derivatives w.r.t. (x, y, t).

    Forward-mode propagation: alongside each activation h (N, d) we carry
    its tangent dh (N, 3, d), one row per input axis.  For a sine layer
    z = W h + b, the tangent becomes omega * cos(omega z) * (dh W^T).
    """
    h = _check_coords(model, coords)
    n = h.shape[0]
    omega = model.omega
    dh = torch.eye(IN_DIM, dtype=h.dtype).expand(n, IN_DIM, IN_DIM)
    layers = model.layers()
    for w, b in layers[:-1]:
        z = omega * (h @ w.T + b)
        dz = dh @ w.T
        h = torch.sin(z)
        dh = omega * torch.cos(z).unsqueeze(1) * dz
    w, b = layers[-1]
    value = h @ w.T + b
    jac = dh @ w.T
    return JacobianResult(value, jac[:, 0], jac[:, 1], jac[:, 2])


def parameter_gradients(model: SirenModel, loss: torch.Tensor) -> list[torch.Tensor]:
    """Gradient of a scalar loss w.r.t. every weight and bias, layer-major.

    The loss may depend on the input Jacobian; the returned gradients then
    include the second-order path through the derivative computation.
    Parameters the loss does not touch receive zero gradients.
    """
    if not torch.is_tensor(loss) or loss.numel() != 1 or loss.ndim != 0:
        shape = tuple(loss.shape) if torch.is_tensor(loss) else type(loss).__name__
        raise ValueError(f"loss must be a scalar tensor, got {shape}")
    params = model.parameter_list()
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def save_model(model: SirenModel, path) -> None:
    cfg = model.config
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, cfg.depth, cfg.width, float(cfg.omega), model.seed)
    chunks = [header]
    for p in model.parameter_list():
        chunks.append(p.detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path, expect: SirenConfig | None = None, dtype=torch.float64) -> SirenModel:
    """Read a checkpoint written by :func:`save_model`.

    If ``expect`` is given, the stored architecture must match it.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotAModelFile(f"{path}: not a model file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedModelFile(f"{path}: truncated header ({len(data)} bytes)")
    _, version, depth, width, omega, seed = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        config = SirenConfig(depth=depth, width=width, omega=omega)
    except ValueError as exc:
        raise NotAModelFile(f"{path}: invalid header ({exc})") from None
    if expect is not None and (expect.depth, expect.width) != (depth, width):
        raise ModelShapeMismatch(
            f"{path}: shape mismatch, file has depth {depth} width {width}, "
            f"expected depth {expect.depth} width {expect.width}"
        )
    n_values = sum(fo * fi + fo for fi, fo in config.layer_dims())
    payload = data[_HEADER.size:]
    if len(payload) < 8 * n_values:
        raise TruncatedModelFile(f"{path}: truncated payload, {len(payload)} of {8 * n_values} bytes")
    if len(payload) > 8 * n_values:
        raise ModelShapeMismatch(
            f"{path}: payload has {len(payload) // 8} values, header implies {n_values}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    model = SirenModel(config, seed=seed, dtype=dtype)
    offset = 0
    with torch.no_grad():
        for p in model.parameter_list():
            k = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + k].reshape(p.shape).copy()))
            offset += k
    return model
