"""Deterministic synthetic highway scenes with per-frame event labels.

The camera looks along the carriageway: the top image row is far away and
the bottom row is close. Positions along the road are kept in a *road
coordinate* ``u`` measured in unit-scale pixels; the image row of a vehicle
follows from ``dy/du = scale(y)``, with ``scale`` running linearly from 0.5
on the top row to 1.5 on the bottom row. Legal traffic moves down the image
(positive speed).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .clips import CLIP_FPS, CLIP_LENGTH, FRAME_HEIGHT, FRAME_WIDTH, Clip, EventClass, N_EVENTS

X_ORIGIN = 84.0
LANE_OFFSETS = {"emergency": -44.0, "lane1": -30.0, "lane2": -16.0}
TRAVEL_LANES = ("lane1", "lane2")
OPPOSITE_OFFSETS = (16.0, 30.0)
MASK_OFFSETS = (-52.0, -8.0)
VEHICLE_WIDTH = 10.0
VEHICLE_LENGTH = 14.0
CRUISE_RANGE = (2.0, 8.0)
RAMP_FRAMES = (10, 20)
ONSET_RANGE = (10, 110)
STOP_SPEED = 0.1

U_BOTTOM = (FRAME_HEIGHT - 1) * math.log(3.0)


class ScenarioKind(str, enum.Enum):
    NO_EVENT = "no_event"
    STATIONARY = "stationary"
    DEPARTING = "departing"
    WRONG_WAY = "wrong_way"
    CAR_CRASH = "car_crash"

    @property
    def event(self) -> EventClass | None:
        return {
            ScenarioKind.STATIONARY: EventClass.STATIONARY,
            ScenarioKind.DEPARTING: EventClass.DEPARTING,
            ScenarioKind.WRONG_WAY: EventClass.WRONG_WAY,
            ScenarioKind.CAR_CRASH: EventClass.CAR_CRASH,
        }.get(self)


@dataclass(frozen=True)
class Perturbations:
    noise_sigma: float = 0.0
    brightness_drift: float = 0.0
    fog_contrast: float = 1.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.fog_contrast <= 1.0:
            raise ValueError("fog_contrast must lie in (0, 1]")

    @property
    def is_clean(self) -> bool:
        return self.noise_sigma == 0 and self.brightness_drift == 0 and self.fog_contrast == 1


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    kind: ScenarioKind
    n_background_vehicles: int = 1
    perturbations: Perturbations = field(default_factory=Perturbations)

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 <= self.n_background_vehicles <= 3:
            raise ValueError("n_background_vehicles must lie in [0, 3]")


@dataclass
class VehicleTrack:
    """Per-frame kinematics of one vehicle in road coordinates."""

    u: np.ndarray  # road position per frame
    offset: np.ndarray  # lateral offset from X_ORIGIN at unit scale
    speed: np.ndarray  # signed, unit-scale px/frame
    intensity: int
    jitter: np.ndarray | None = None  # (T, 2) extra (dx, dy) render offsets

    def center(self, t: int) -> tuple[float, float]:
        y = road_to_row(self.u[t])
        x = X_ORIGIN + self.offset[t] * row_scale(y)
        if self.jitter is not None:
            x += self.jitter[t, 0]
            y += self.jitter[t, 1]
        return x, y

    def rect(self, t: int) -> tuple[int, int, int, int]:
        """Integer ``(row0, row1, col0, col1)`` half-open rectangle at frame t."""
        x, y = self.center(t)
        s = row_scale(road_to_row(self.u[t]))
        half_h = VEHICLE_LENGTH * s / 2
        half_w = VEHICLE_WIDTH * s / 2
        return (
            int(math.floor(y - half_h + 0.5)),
            int(math.floor(y + half_h + 0.5)),
            int(math.floor(x - half_w + 0.5)),
            int(math.floor(x + half_w + 0.5)),
        )


@dataclass(frozen=True)
class DatasetMix:
    no_event: int = 281
    stationary: int = 111
    departing: int = 56
    wrong_way: int = 131
    car_crash: int = 16

    def __post_init__(self):
        if min(self.counts().values()) < 0:
            raise ValueError("dataset counts must be >= 0")

    def counts(self) -> dict[ScenarioKind, int]:
        return {
            ScenarioKind.NO_EVENT: self.no_event,
            ScenarioKind.STATIONARY: self.stationary,
            ScenarioKind.DEPARTING: self.departing,
            ScenarioKind.WRONG_WAY: self.wrong_way,
            ScenarioKind.CAR_CRASH: self.car_crash,
        }

    @property
    def total(self) -> int:
        return sum(self.counts().values())

    @classmethod
    def proportional(cls, total: int, reference: "DatasetMix | None" = None) -> "DatasetMix":
        """Scale ``reference`` (default: the full mix) to ``total`` clips by largest remainder."""
        ref = list((reference or cls()).counts().values())
        exact = [c * total / sum(ref) for c in ref]
        counts = [int(math.floor(e)) for e in exact]
        order = sorted(range(len(ref)), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[: total - sum(counts)]:
            counts[i] += 1
        return cls(*counts)


def row_scale(y):
    return 0.5 + np.asarray(y, dtype=np.float64) / (FRAME_HEIGHT - 1)


def road_to_row(u):
    return (FRAME_HEIGHT - 1) * (0.5 * np.exp(np.asarray(u) / (FRAME_HEIGHT - 1)) - 0.5)


def default_lane_mask() -> np.ndarray:
    """Monitored carriageway (emergency lane plus two travel lanes)."""
    ys, xs = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)
    s = row_scale(ys)
    left = X_ORIGIN + MASK_OFFSETS[0] * s
    right = X_ORIGIN + MASK_OFFSETS[1] * s
    return ((xs >= left) & (xs <= right)).astype(np.uint8)


def derive_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def background_texture(seed: int) -> np.ndarray:
    """Static road scene: textured asphalt, lane markings, verges, as a uint8 image."""
    rng = np.random.default_rng([seed, 0xB6])
    ys, xs = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)
    s = row_scale(ys)
    lateral = (xs - X_ORIGIN) / s  # unit-scale lateral coordinate

    fine = ndimage.gaussian_filter(rng.normal(0, 1, ys.shape), 1.0)
    coarse = ndimage.gaussian_filter(rng.normal(0, 1, ys.shape), 4.0)
    fine /= fine.std() + 1e-12
    coarse /= coarse.std() + 1e-12

    road_level = rng.uniform(95, 120)
    verge_level = rng.uniform(60, 80)
    img = np.where(
        (lateral > -53) & (lateral < 41),
        road_level + 6 * fine + 3 * coarse,
        verge_level + 12 * fine + 8 * coarse,
    )
    # median strip between carriageways
    img = np.where((lateral >= -3) & (lateral <= 3), verge_level + 10 * fine, img)

    line = lambda at, half=0.8: np.abs(lateral - at) <= half
    u = (FRAME_HEIGHT - 1) * np.log(np.maximum(s / 0.5, 1e-9))
    dashes = (np.floor(u / 9.0) % 2) == 0
    marks = line(-37) | line(-7) | line(7) | line(37) | (line(-23) & dashes) | (line(23) & dashes)
    img = np.where(marks, 205 + 4 * fine, img)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_frame(
    background: np.ndarray,
    tracks: list[VehicleTrack],
    perturbations: Perturbations,
    frame_index: int,
    noise_seed: int = 0,
) -> np.ndarray:
    """Render one uint8 frame: background, vehicles, noise, drift, fog (in that order)."""
    img = background.astype(np.float64).copy()
    h, w = img.shape
    ordered = sorted(tracks, key=lambda tr: tr.center(frame_index)[1])
    for tr in ordered:
        r0, r1, c0, c1 = tr.rect(frame_index)
        r0c, r1c, c0c, c1c = max(r0, 0), min(r1, h), max(c0, 0), min(c1, w)
        if r0c >= r1c or c0c >= c1c:
            continue
        img[r0c:r1c, c0c:c1c] = tr.intensity
        # windshield band near the leading edge gives the body some internal structure
        length = r1 - r0
        band0 = r0 + int(round(0.55 * length))
        band1 = r0 + int(round(0.75 * length))
        shade = tr.intensity + 70 if tr.intensity < 128 else tr.intensity - 90
        b0, b1 = max(band0, 0), min(band1, h)
        if b0 < b1:
            inner0, inner1 = max(c0 + 1, 0), min(c1 - 1, w)
            if inner0 < inner1:
                img[b0:b1, inner0:inner1] = shade

    if perturbations.noise_sigma > 0:
        rng = np.random.default_rng([noise_seed, frame_index, 0x5E])
        img = np.clip(img + rng.normal(0, perturbations.noise_sigma, img.shape), 0, 255)
    if perturbations.brightness_drift:
        img = img + perturbations.brightness_drift * frame_index
    if perturbations.fog_contrast != 1.0:
        mu = float(background.mean())
        img = mu + perturbations.fog_contrast * (img - mu)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _integrate(u0: float, speed: np.ndarray) -> np.ndarray:
    """u[t+1] = u[t] + speed[t]."""
    u = np.empty_like(speed)
    u[0] = u0
    u[1:] = u0 + np.cumsum(speed[:-1])
    return u


def _vehicle_intensity(rng) -> int:
    if rng.random() < 0.5:
        return int(rng.integers(10, 46))
    return int(rng.integers(185, 246))


def _rects_overlap(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]


def _rect_hits_mask(rect, mask) -> bool:
    r0, r1, c0, c1 = rect
    h, w = mask.shape
    r0, r1, c0, c1 = max(r0, 0), min(r1, h), max(c0, 0), min(c1, w)
    return r0 < r1 and c0 < c1 and bool(mask[r0:r1, c0:c1].any())


def _constant_track(u0, offset, speed, n, intensity) -> VehicleTrack:
    sp = np.full(n, float(speed))
    return VehicleTrack(_integrate(u0, sp), np.full(n, float(offset)), sp, intensity)


def _background_tracks(rng, lanes, count, n, direction=1.0, offsets=None) -> list[VehicleTrack]:
    tracks = []
    if not lanes or count == 0:
        return tracks
    lane_speed = {lane: rng.uniform(*CRUISE_RANGE) for lane in lanes}
    lane_next = {lane: rng.uniform(-60.0, U_BOTTOM) for lane in lanes}
    for k in range(count):
        lane = lanes[k % len(lanes)]
        v = lane_speed[lane]
        u0 = lane_next[lane]
        lane_next[lane] = u0 - rng.uniform(45.0, 90.0)  # same speed per lane: spacing is preserved
        offset = offsets[lane] if offsets else LANE_OFFSETS[lane]
        if direction < 0:
            u0 = U_BOTTOM - u0
        tracks.append(_constant_track(u0, offset, direction * v, n, _vehicle_intensity(rng)))
    return tracks


def _row_top(u: float) -> float:
    y = float(road_to_row(u))
    return y - VEHICLE_LENGTH * float(row_scale(y)) / 2


def _entry_position_from_bottom() -> float:
    """Road position at which a vehicle's top edge sits two rows above the bottom."""
    lo, hi = 0.0, U_BOTTOM + 40.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _row_top(mid) < FRAME_HEIGHT - 2:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class Scenario:
    config: ScenarioConfig
    background: np.ndarray
    tracks: list[VehicleTrack]
    target: list[int]  # indices of event vehicles in ``tracks``
    labels: np.ndarray
    onset: int | None


def build_scenario(config: ScenarioConfig, n_frames: int = CLIP_LENGTH) -> Scenario:
    rng = np.random.default_rng([config.seed, 0x7A])
    mask = default_lane_mask()
    kind = config.kind
    labels = np.zeros((n_frames, N_EVENTS), dtype=bool)
    event_tracks: list[VehicleTrack] = []
    used_lanes: set[str] = set()
    onset = None
    t = np.arange(n_frames, dtype=np.float64)

    if kind is not ScenarioKind.NO_EVENT:
        onset = int(rng.integers(ONSET_RANGE[0], ONSET_RANGE[1] + 1))
        v_c = rng.uniform(*CRUISE_RANGE)
        ramp = int(rng.integers(RAMP_FRAMES[0], RAMP_FRAMES[1] + 1))

    if kind is ScenarioKind.STATIONARY:
        lane = "emergency" if rng.random() < 0.7 else str(rng.choice(TRAVEL_LANES))
        used_lanes.add(lane)
        speed = np.clip(v_c * (onset - t) / ramp, 0.0, v_c)
        u = _integrate(0.0, speed)
        u += rng.uniform(35.0, 115.0) - u[onset]
        tr = VehicleTrack(u, np.full(n_frames, LANE_OFFSETS[lane]), speed, _vehicle_intensity(rng))
        event_tracks.append(tr)
        first = int(np.argmax(speed < STOP_SPEED))
        labels[first:, EventClass.STATIONARY.index] = True
        onset = first

    elif kind is ScenarioKind.DEPARTING:
        lane = "emergency" if rng.random() < 0.8 else str(rng.choice(TRAVEL_LANES))
        used_lanes.add(lane)
        speed = np.clip(v_c * (t - onset) / ramp, 0.0, v_c)
        u = _integrate(rng.uniform(12.0, 45.0), speed)
        tr = VehicleTrack(u, np.full(n_frames, LANE_OFFSETS[lane]), speed, _vehicle_intensity(rng))
        event_tracks.append(tr)
        labels[:, EventClass.DEPARTING.index] = (speed > STOP_SPEED) & (speed < v_c)

    elif kind is ScenarioKind.WRONG_WAY:
        lane = str(rng.choice(TRAVEL_LANES))
        used_lanes.add(lane)
        speed = np.full(n_frames, -v_c)
        u = _entry_position_from_bottom() - v_c * (t - onset)
        tr = VehicleTrack(u, np.full(n_frames, LANE_OFFSETS[lane]), speed, _vehicle_intensity(rng))
        event_tracks.append(tr)
        labels[:, EventClass.WRONG_WAY.index] = [_rect_hits_mask(tr.rect(i), mask) for i in range(n_frames)]
        onset = int(np.argmax(labels[:, EventClass.WRONG_WAY.index]))

    elif kind is ScenarioKind.CAR_CRASH:
        lane = str(rng.choice(TRAVEL_LANES))
        used_lanes.add(lane)
        v_lead = rng.uniform(2.0, 5.0)
        v_rear = v_lead + rng.uniform(2.0, 3.0)
        u_impact = rng.uniform(50.0, 115.0)
        # rear vehicle converges laterally into the lead vehicle's lane over the last frames
        lateral = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 6.0)
        speeds = []
        for v, u_at in ((v_lead, u_impact), (v_rear, u_impact - VEHICLE_LENGTH + 2.0)):
            sp = np.where(t < onset, v, 0.0)
            u = u_at + np.where(t < onset, -v * (onset - t), 0.0)
            speeds.append((u, sp))
        drift = np.clip((onset - t) / 8.0, 0.0, 1.0) * lateral
        base = LANE_OFFSETS[lane]
        lead = VehicleTrack(speeds[0][0], np.full(n_frames, base), speeds[0][1], _vehicle_intensity(rng))
        rear = VehicleTrack(speeds[1][0], base + drift, speeds[1][1], _vehicle_intensity(rng))
        for tr in (lead, rear):
            tr.jitter = np.zeros((n_frames, 2))
            for k in (onset, onset + 1):
                if k < n_frames:
                    tr.jitter[k] = rng.choice([-1.0, 1.0], size=2)
        event_tracks.extend([lead, rear])
        hit = [_rects_overlap(lead.rect(i), rear.rect(i)) for i in range(n_frames)]
        first = int(np.argmax(hit)) if any(hit) else onset
        labels[first:, EventClass.CAR_CRASH.index] = True
        onset = first

    free = [lane for lane in TRAVEL_LANES if lane not in used_lanes]
    tracks = list(event_tracks)
    tracks += _background_tracks(rng, free, config.n_background_vehicles, n_frames)
    n_opposite = int(rng.integers(0, 3))
    opposite = {"o1": OPPOSITE_OFFSETS[0], "o2": OPPOSITE_OFFSETS[1]}
    tracks += _background_tracks(rng, list(opposite), n_opposite, n_frames, direction=-1.0, offsets=opposite)

    return Scenario(config, background_texture(config.seed), tracks, list(range(len(event_tracks))), labels, onset)


def generate_clip(config: ScenarioConfig, clip_id: str | None = None, n_frames: int = CLIP_LENGTH) -> Clip:
    scenario = build_scenario(config, n_frames)
    frames = np.stack(
        [
            render_frame(scenario.background, scenario.tracks, config.perturbations, i, noise_seed=config.seed)
            for i in range(n_frames)
        ]
    )
    if clip_id is None:
        clip_id = f"{config.kind.value}-{config.seed:016x}"
    provenance = {"seed": config.seed, "scenario_kind": config.kind.value, "event_onset_frame": scenario.onset}
    return Clip(frames, scenario.labels, clip_id, CLIP_FPS, provenance)


def random_config(seed: int, kind: ScenarioKind) -> ScenarioConfig:
    """Per-clip config with mild, seed-derived weather/lighting perturbations."""
    rng = np.random.default_rng([seed, 0xC0])
    perturbations = Perturbations(
        noise_sigma=round(float(rng.uniform(0.0, 3.0)), 3),
        brightness_drift=round(float(rng.uniform(-0.05, 0.05)), 4),
        fog_contrast=round(float(rng.uniform(0.75, 1.0)), 3),
    )
    return ScenarioConfig(seed, kind, int(rng.integers(0, 4)), perturbations)


def generate_dataset(mix: DatasetMix, master_seed: int) -> list[Clip]:
    """One clip per requested unit; clip ``k`` is seeded from ``(master_seed, k)``."""
    clips = []
    k = 0
    for kind, count in mix.counts().items():
        for _ in range(count):
            seed = derive_seed(master_seed, k)
            clips.append(generate_clip(random_config(seed, kind), clip_id=f"{kind.value}-{k:04d}"))
            k += 1
    return clips
