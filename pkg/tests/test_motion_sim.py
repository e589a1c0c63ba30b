"""Motion artefact simulator: identity at zero severity, monotone degradation."""

import numpy as np
import pytest

from lodseg.errors import ConfigError, ContractError
from lodseg.motion_sim import MotionSpec, simulate_motion
from lodseg.synth import image_from_labels, shell_labels
from lodseg.volume_io import Volume, get_scheme


def make_volume(shape=(48, 48, 48), seed=3):
    labels = shell_labels(shape, get_scheme("ss4"))
    return image_from_labels(labels, seed=seed)


def test_zero_alpha_is_identity():
    vol = make_volume((32, 40, 24))
    for seed in range(5):
        out = simulate_motion(vol, MotionSpec(alpha=0.0, seed=seed))
        assert np.abs(out.data - vol.data).max() < 1e-5


def test_mse_strictly_increases_with_alpha():
    vol = make_volume()
    mean_mse = {}
    for alpha in (0.5, 1.0, 2.0):
        vals = [
            np.mean((simulate_motion(vol, MotionSpec(alpha=alpha, seed=s)).data
                     - vol.data) ** 2)
            for s in range(20)
        ]
        mean_mse[alpha] = float(np.mean(vals))
    assert mean_mse[0.5] < mean_mse[1.0] < mean_mse[2.0]


def test_deterministic_per_seed():
    vol = make_volume()
    a = simulate_motion(vol, MotionSpec(alpha=1.0, seed=7))
    b = simulate_motion(vol, MotionSpec(alpha=1.0, seed=7))
    c = simulate_motion(vol, MotionSpec(alpha=1.0, seed=8))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_output_contracts():
    vol = make_volume((32, 40, 24))
    out = simulate_motion(vol, MotionSpec(alpha=1.5, seed=1))
    assert out.data.shape == vol.data.shape
    assert out.data.dtype == np.float32
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert np.array_equal(out.affine, vol.affine)
    # corruption actually happened at this severity
    assert np.abs(out.data - vol.data).max() > 1e-4


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        MotionSpec(alpha=-0.1)
    with pytest.raises(ConfigError):
        MotionSpec(alpha=float("nan"))
    with pytest.raises(ConfigError):
        MotionSpec(alpha=1.0, num_events=0)


def test_unnormalized_input_rejected():
    vol = make_volume((24, 24, 24))
    bad = Volume(vol.data * 3.0, vol.affine)
    with pytest.raises(ContractError):
        simulate_motion(bad, MotionSpec(alpha=1.0))
