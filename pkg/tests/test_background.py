import numpy as np
import pytest

from highway_events.background import BackgroundParams, bg_init, bg_update, foreground_masks
from highway_events.clips import MalformedInputError
from oracles import textured_frame


def static_scene():
    return np.rint(textured_frame(0)).astype(np.float64)


def test_init_examples():
    st = bg_init(np.full((4, 5), 100.0))
    assert np.all(st.mean[..., 0] == 100) and np.all(st.var[..., 0] == 225) and np.all(st.weight[..., 0] == 1)
    assert not st.weight[..., 1:].any()
    st = bg_init(np.array([[10.0, 20.0]]))
    assert st.mean[0, 0, 0] == 10 and st.mean[0, 1, 0] == 20


@pytest.mark.parametrize("bad", [{"learning_rate": 0.0}, {"match_threshold": 0}, {"background_ratio": 1.0},
                                 {"variance_floor": 0}, {"n_components": 0}])
def test_params_validation(bad):
    with pytest.raises(ValueError):
        BackgroundParams(**bad)


def test_single_pixel_match_rule():
    p = BackgroundParams(n_components=1, initial_variance=25.0, variance_floor=1.0)
    st = bg_init(np.array([[100.0]]), p)
    assert bg_update(st, np.array([[105.0]]))[0, 0] == 0
    st = bg_init(np.array([[100.0]]), p)
    assert bg_update(st, np.array([[113.0]]))[0, 0] == 1


def test_static_scene_becomes_background():
    bg = static_scene()
    st = bg_init(bg)
    masks = [bg_update(st, bg) for _ in range(50)]
    assert masks[-1].mean() < 0.005
    fractions = [m.mean() for m in masks]
    assert all(b <= a for a, b in zip(fractions, fractions[1:]))


def test_stationary_rectangle_stays_foreground():
    bg = static_scene()
    st = bg_init(bg)
    for _ in range(50):
        bg_update(st, bg)
    scene = bg.copy()
    scene[40:60, 50:90] = 250.0
    rect = (slice(40, 60), slice(50, 90))
    masks = [bg_update(st, scene) for _ in range(61)]
    assert masks[4][rect].mean() >= 0.9
    assert masks[60][rect].mean() >= 0.7


def test_weight_and_variance_invariants():
    rng = np.random.default_rng(1)
    frames = rng.integers(0, 256, (20, 12, 14)).astype(np.float64)
    p = BackgroundParams()
    st = bg_init(frames[0], p)
    for f in frames:
        bg_update(st, f)
        assert np.allclose(st.weight.sum(-1), 1.0)
        assert st.weight.min() >= 0 and st.weight.max() <= 1
        assert st.var.min() >= p.variance_floor


def test_determinism_and_shape_check():
    rng = np.random.default_rng(2)
    frames = rng.integers(0, 256, (10, 8, 9)).astype(np.uint8)
    assert np.array_equal(foreground_masks(frames), foreground_masks(frames))
    st = bg_init(frames[0])
    with pytest.raises(MalformedInputError):
        bg_update(st, np.zeros((8, 10)))
    with pytest.raises(MalformedInputError):
        bg_init(np.zeros((2, 2, 2)))
