import numpy as np
import pytest
import torch

from ofsiren.siren_net import SirenConfig, init_siren
from ofsiren.video_store import SceneSpec, split_observed, synth_scene

torch.set_num_threads(1)


def central_jacobian(fn, coords, h=1e-3):
    """(N, 3 axes, 3 channels) sixth-order central differences of ``fn`` at ``coords``.

    The wide stencil keeps truncation error near 1e-8 even at omega 30, so
    entries can be compared one by one in relative terms.
    """
    cols = []
    for a in range(3):
        e = torch.zeros(3, dtype=coords.dtype)
        e[a] = h
        f = lambda k: fn(coords + k * e)
        cols.append((45 * (f(1) - f(-1)) - 9 * (f(2) - f(-2)) + (f(3) - f(-3))) / (60 * h))
    return torch.stack(cols, dim=1)


def param_fd(loss_fn, model, h=1e-5):
    """Per-parameter central differences of a scalar loss, layer-major."""
    out = []
    with torch.no_grad():
        for p in model.parameter_list():
            flat = p.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                fd[i] = (lp - lm) / (2 * h)
            out.append(fd.view(p.shape))
    return out


def randomize_biases(model, rng, scale=0.1):
    with torch.no_grad():
        for b in model.biases:
            b.copy_(torch.from_numpy(rng.uniform(-scale, scale, b.shape)))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_siren(SirenConfig(depth=3, width=8, omega=30.0), seed=7)


@pytest.fixture(scope="session")
def translating_scene():
    spec = SceneSpec(pattern="texture", motion="translate", velocity=(1.0, 0.5),
                     dims=(16, 48, 48), seed=0)
    video, spec = synth_scene(spec)
    split_observed(video, 2)
    return video, spec
