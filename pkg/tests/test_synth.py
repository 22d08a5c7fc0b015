import numpy as np
import pytest

from highway_events.clips import EventClass, encode_clip
from highway_events.synth import (
    DatasetMix,
    Perturbations,
    ScenarioConfig,
    ScenarioKind,
    VehicleTrack,
    background_texture,
    build_scenario,
    default_lane_mask,
    derive_seed,
    generate_clip,
    generate_dataset,
    random_config,
    render_frame,
    road_to_row,
    row_scale,
)

EVENT_KINDS = [k for k in ScenarioKind if k.event is not None]


def test_no_event_all_false():
    for seed in range(5):
        clip = generate_clip(ScenarioConfig(seed, ScenarioKind.NO_EVENT, 3))
        assert len(clip) == 125 and not clip.labels.any()


def test_wrong_way_seed_7():
    clip = generate_clip(ScenarioConfig(7, ScenarioKind.WRONG_WAY))
    ww = EventClass.WRONG_WAY.index
    assert clip.labels[:, ww].any()
    others = np.delete(clip.labels, ww, axis=1)
    assert not others.any()


def test_generation_is_deterministic():
    a = generate_clip(ScenarioConfig(3, ScenarioKind.STATIONARY))
    b = generate_clip(ScenarioConfig(3, ScenarioKind.STATIONARY))
    assert encode_clip(a) == encode_clip(b)
    cfg = random_config(11, ScenarioKind.CAR_CRASH)
    assert encode_clip(generate_clip(cfg)) == encode_clip(generate_clip(cfg))


@pytest.mark.parametrize("kind", EVENT_KINDS, ids=lambda k: k.value)
def test_label_sanity(kind):
    h = kind.event.index
    for seed in range(25):
        labels = build_scenario(random_config(seed, kind)).labels
        col = labels[:, h]
        assert col[10:].any(), f"seed {seed}: no labelled frame"
        assert not col[:10].any(), f"seed {seed}: event begins before frame 10"
        assert not np.delete(labels, h, axis=1).any()


def test_stationary_and_crash_labels_run_to_end():
    for seed in range(10):
        for kind in (ScenarioKind.STATIONARY, ScenarioKind.CAR_CRASH):
            col = build_scenario(ScenarioConfig(seed, kind)).labels[:, kind.event.index]
            first = int(np.argmax(col))
            assert col[first:].all()


def test_stationary_vehicle_pixels_frozen():
    for seed in range(5):
        sc = build_scenario(ScenarioConfig(seed, ScenarioKind.STATIONARY, 0))
        tr = sc.tracks[sc.target[0]]
        col = sc.labels[:, EventClass.STATIONARY.index]
        frames = [t for t in range(125) if col[t]]
        rects = {tr.rect(t) for t in frames}
        assert len(rects) == 1
        r0, r1, c0, c1 = rects.pop()
        imgs = [render_frame(sc.background, [tr], Perturbations(), t)[r0:r1, c0:c1] for t in frames[:3]]
        assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_departing_label_is_ramp():
    for seed in range(5):
        sc = build_scenario(ScenarioConfig(seed, ScenarioKind.DEPARTING))
        tr = sc.tracks[sc.target[0]]
        col = sc.labels[:, EventClass.DEPARTING.index]
        assert tr.speed[0] == 0.0
        assert np.array_equal(col, (tr.speed > 0.1) & (tr.speed < tr.speed.max()))


def test_wrong_way_speed_negative():
    sc = build_scenario(ScenarioConfig(2, ScenarioKind.WRONG_WAY))
    assert np.all(sc.tracks[sc.target[0]].speed < 0)


def test_default_mix_counts():
    mix = DatasetMix()
    assert list(mix.counts().values()) == [281, 111, 56, 131, 16] and mix.total == 595
    small = DatasetMix.proportional(200)
    assert small.total == 200
    assert list(small.counts().values()) == [95, 37, 19, 44, 5]


def test_dataset_counts_and_seeds():
    assert generate_dataset(DatasetMix(0, 0, 0, 0, 0), 1) == []
    clips = generate_dataset(DatasetMix(0, 0, 0, 0, 2), 1)
    assert len(clips) == 2
    assert clips[0].provenance["seed"] != clips[1].provenance["seed"]
    assert not np.array_equal(clips[0].frames, clips[1].frames)
    assert derive_seed(1, 0) == clips[0].provenance["seed"]
    mix = DatasetMix(2, 1, 1, 1, 1)
    kinds = [c.provenance["scenario_kind"] for c in generate_dataset(mix, 3)]
    assert {k: kinds.count(k.value) for k in ScenarioKind} == mix.counts()


def test_render_background_only():
    bg = background_texture(4)
    assert np.array_equal(render_frame(bg, [], Perturbations(), 0), bg)


def test_render_vehicle_at_rest_identical():
    n = 3
    tr = VehicleTrack(np.full(n, 60.0), np.full(n, -30.0), np.zeros(n), 40)
    bg = background_texture(1)
    assert np.array_equal(render_frame(bg, [tr], Perturbations(), 0), render_frame(bg, [tr], Perturbations(), 1))


def test_render_fog():
    bg = background_texture(9)
    mu = bg.mean()
    out = render_frame(bg, [], Perturbations(fog_contrast=0.5), 0)
    assert np.array_equal(out, np.clip(np.rint(mu + 0.5 * (bg - mu)), 0, 255).astype(np.uint8))


def test_perspective_scale():
    assert row_scale(0) == pytest.approx(0.5)
    assert row_scale(119) == pytest.approx(1.5)
    assert road_to_row(0.0) == pytest.approx(0.0)
    mask = default_lane_mask()
    assert mask.shape == (120, 160) and mask.any()


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(-1, ScenarioKind.NO_EVENT)
    with pytest.raises(ValueError):
        ScenarioConfig(0, ScenarioKind.NO_EVENT, 4)
    with pytest.raises(ValueError):
        Perturbations(fog_contrast=0.0)
    with pytest.raises(ValueError):
        DatasetMix(-1)
