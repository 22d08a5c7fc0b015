import numpy as np
import pytest

from highway_events.clips import Clip, MalformedInputError
from highway_events.flow import FlowField, FlowParams, estimate_flow, flow_for_clip, polynomial_expansion
from oracles import interior_epe, shifted, textured_frame


def test_expansion_constant_frame():
    r = polynomial_expansion(np.full((20, 24), 0.4))
    assert np.allclose(r[..., 0], 0.4)
    assert np.allclose(r[..., 1:], 0.0, atol=1e-12)


def test_expansion_linear_ramp():
    alpha = 0.03
    xs = np.arange(30, dtype=np.float64)
    f = np.tile(alpha * xs, (20, 1))
    r = polynomial_expansion(f)[5:-5, 5:-5]
    assert np.allclose(r[..., 1], alpha)
    assert np.allclose(r[..., [2, 3, 4, 5]], 0.0, atol=1e-12)
    assert np.allclose(r[..., 0], f[5:-5, 5:-5])


def test_expansion_pure_quadratic():
    xs = np.arange(21, dtype=np.float64) - 10
    f = np.tile(xs**2, (21, 1))
    r = polynomial_expansion(f)[10, 10]
    assert r[3] == pytest.approx(1.0)
    assert r[4] == pytest.approx(0.0, abs=1e-10)
    assert r[0] == pytest.approx(0.0, abs=1e-10)


def test_identical_frames_zero_flow():
    a = textured_frame(0)
    flow = estimate_flow(a, a)
    assert np.abs(flow.vx).max() < 1e-6 and np.abs(flow.vy).max() < 1e-6


@pytest.mark.parametrize("dx,dy", [(3, 0), (0, -2)])
def test_translation_examples(dx, dy):
    a = textured_frame(1)
    assert interior_epe(estimate_flow(a, shifted(a, dx, dy)), dx, dy) < 0.3


def test_uint8_frames_are_normalised():
    a = np.rint(textured_frame(2)).astype(np.uint8)
    b = shifted(a, 2, 0)
    f_int = estimate_flow(a, b)
    f_float = estimate_flow(a / 255.0, b / 255.0)
    assert np.allclose(f_int.vx, f_float.vx) and np.allclose(f_int.vy, f_float.vy)


def test_approximate_antisymmetry():
    a = textured_frame(3)
    b = shifted(a, -2, 1)
    fwd, bwd = estimate_flow(a, b), estimate_flow(b, a)
    s = slice(16, -16)
    gap = np.hypot(fwd.vx[s, s] + bwd.vx[s, s], fwd.vy[s, s] + bwd.vy[s, s])
    assert gap.mean() < 0.5


def test_shape_mismatch():
    with pytest.raises(MalformedInputError):
        estimate_flow(np.zeros((10, 10)), np.zeros((10, 12)))
    with pytest.raises(MalformedInputError):
        estimate_flow(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


def test_flow_for_clip_contract():
    a = np.rint(textured_frame(4)).astype(np.uint8)
    frames = np.stack([a, shifted(a, 1, 0), shifted(a, 1, 0)])
    out = flow_for_clip(Clip(frames, np.zeros((3, 4), bool), "f"))
    assert len(out) == 3
    assert not out[0].vx.any() and not out[0].vy.any()
    pair = estimate_flow(frames[0], frames[1])
    assert np.array_equal(out[1].vx, pair.vx) and np.array_equal(out[1].vy, pair.vy)
    assert np.abs(out[2].vx).max() < 1e-6
    assert out[1].shape == (120, 160)


def test_flow_dump_layout():
    f = FlowField(np.array([[1.0, 2.0]]), np.array([[-1.0, 0.5]]))
    assert np.array_equal(np.frombuffer(f.to_bytes(), "<f4"), [1, 2, -1, 0.5])


def test_params_validation():
    for bad in ({"window_size": 4}, {"pyramid_scale": 1.0}, {"poly_n": 4}, {"iterations": 0}, {"poly_sigma": 0}):
        with pytest.raises(ValueError):
            FlowParams(**bad)
