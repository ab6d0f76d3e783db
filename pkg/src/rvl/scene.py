"""Randomized point-scatterer scenes and their low-fidelity visual render.

Geometry: sensor at the origin, +y forward, azimuth measured from +y and
positive to the right.  One moving target drives through a central band
while stationary clutter occupies parking rows above and below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from rvl import radio

# Scene layout constants.  Fractions of extent_y; the target band sits in the
# middle with a parking strip either side of it.
BAND_LO = 0.40
BAND_HI = 0.60
PARKING_ROWS = (0.125, 0.275, 0.725, 0.875)
SLOT_PITCH_M = 2.33   # parking slot spacing along x
TARGET_X_SPAN = 0.45  # target x drawn uniformly in +-TARGET_X_SPAN * extent_x


@dataclass
class SceneConfig:
    extent_x: float = 7.0     # metres, scene is x in [-extent_x/2, extent_x/2]
    extent_y: float = 10.0    # metres, y in [0, extent_y]
    n_clutter: int = 6
    clutter_amp_range: tuple[float, float] = (0.3, 0.8)
    target_amp: float = 1.0
    target_speed_range: tuple[float, float] = (0.5, 2.0)  # m/s
    placement_sigma: float = 0.10  # metres, jitter of parked clutter
    amp_ref_range_m: float | None = 5.0  # inverse-square path loss reference; None disables
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ValueError(f"extents must be > 0, got {self.extent_x}, {self.extent_y}")
        if self.n_clutter < 0:
            raise ValueError(f"n_clutter must be >= 0, got {self.n_clutter}")
        if self.clutter_amp_range[0] < 0 or self.target_amp < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.clutter_amp_range[1] < self.clutter_amp_range[0]:
            raise ValueError(f"bad clutter_amp_range {self.clutter_amp_range}")
        if self.target_speed_range[1] < self.target_speed_range[0]:
            raise ValueError(f"bad target_speed_range {self.target_speed_range}")
        if self.placement_sigma < 0:
            raise ValueError("placement_sigma must be >= 0")
        if self.amp_ref_range_m is not None and self.amp_ref_range_m <= 0:
            raise ValueError("amp_ref_range_m must be > 0 or None")


@dataclass
class Scatterer:
    x: float
    y: float
    amplitude: float
    radial_speed: float = 0.0  # m/s along the line of sight, positive away
    is_target: bool = False

    @property
    def range_m(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def azimuth_deg(self) -> float:
        return math.degrees(math.atan2(self.x, self.y))


@dataclass
class Scene:
    scatterers: list[Scatterer]
    config: SceneConfig
    seed: int

    @property
    def target(self) -> Scatterer:
        targets = [s for s in self.scatterers if s.is_target]
        if len(targets) != 1:
            raise ValueError(f"scene must have exactly one target, found {len(targets)}")
        return targets[0]


def parking_slots(config: SceneConfig) -> np.ndarray:
    """Grid nodes (x, y) available for parked clutter, shape (n_slots, 2)."""
    per_row = int(config.extent_x / SLOT_PITCH_M)
    if per_row < 1:
        return np.zeros((0, 2))
    xs = (np.arange(per_row) - (per_row - 1) / 2.0) * SLOT_PITCH_M
    nodes = [(x, fy * config.extent_y) for fy in PARKING_ROWS for x in xs]
    return np.array(nodes)


def path_gain(config: SceneConfig, range_m: float) -> float:
    """Two-way spreading loss on the amplitude, unity at the reference range."""
    if config.amp_ref_range_m is None:
        return 1.0
    return (config.amp_ref_range_m / max(range_m, 1e-6)) ** 2


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministically sample one scene: jittered parked clutter plus a
    single target driving through the central band.

    Amplitudes house the per-path loss, so drawn reflectivities are scaled
    by the inverse-square path gain at the scatterer's range."""
    config.validate()
    slots = parking_slots(config)
    if config.n_clutter > len(slots):
        raise ValueError(
            f"n_clutter={config.n_clutter} exceeds the {len(slots)} parking slots "
            f"of a {config.extent_x} x {config.extent_y} m scene")

    rs = np.random.RandomState(seed)
    scatterers: list[Scatterer] = []

    order = rs.permutation(len(slots))[:config.n_clutter]
    jitter = rs.normal(0.0, config.placement_sigma, size=(config.n_clutter, 2))
    amps = rs.uniform(*config.clutter_amp_range, size=config.n_clutter)
    half_x = config.extent_x / 2.0
    for i, slot in enumerate(slots[order]):
        x = float(np.clip(slot[0] + jitter[i, 0], -half_x, half_x))
        y = float(np.clip(slot[1] + jitter[i, 1], 0.0, config.extent_y))
        amp = float(amps[i]) * path_gain(config, math.hypot(x, y))
        scatterers.append(Scatterer(x=x, y=y, amplitude=amp))

    tx = rs.uniform(-TARGET_X_SPAN * config.extent_x, TARGET_X_SPAN * config.extent_x)
    ty = rs.uniform(BAND_LO * config.extent_y, BAND_HI * config.extent_y)
    speed = rs.uniform(*config.target_speed_range)
    direction = 1.0 if rs.uniform() < 0.5 else -1.0  # drives along +x or -x
    r = math.hypot(tx, ty)
    radial = direction * speed * tx / r  # projection of (dir*speed, 0) on the LOS
    scatterers.append(Scatterer(
        x=float(tx), y=float(ty),
        amplitude=config.target_amp * path_gain(config, r),
        radial_speed=float(radial), is_target=True))
    return Scene(scatterers=scatterers, config=replace(config), seed=seed)


# ---------------------------------------------------------------------------
# camera and rendering


@dataclass
class CameraModel:
    image_width: int = 48
    image_height: int = 64
    horizontal_fov: float = 90.0        # degrees
    target_pixel_size_at_1m: float = 40.0  # apparent size scales as 1/range

    def __post_init__(self) -> None:
        if not (0.0 < self.horizontal_fov < 180.0):
            raise ValueError(f"horizontal_fov must be in (0, 180), got {self.horizontal_fov}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dims must be positive")
        if self.target_pixel_size_at_1m <= 0:
            raise ValueError("target_pixel_size_at_1m must be > 0")


TARGET_COLOR = (1.0, 0.9, 0.1)  # bright distinct body
CLUTTER_BASE = 0.25             # clutter is dim grey, shade scales with amplitude


def pinhole_column(cam: CameraModel, azimuth_deg: float) -> float:
    """Continuous image column of a ray at the given azimuth."""
    half = math.radians(cam.horizontal_fov / 2.0)
    return cam.image_width / 2.0 * (1.0 + math.tan(math.radians(azimuth_deg)) / math.tan(half))


def column_azimuth(cam: CameraModel, col: float) -> float:
    """Inverse pinhole mapping, degrees of a continuous column."""
    half = math.radians(cam.horizontal_fov / 2.0)
    return math.degrees(math.atan((2.0 * col / cam.image_width - 1.0) * math.tan(half)))


def _scatterer_rect(sc: Scatterer, cam: CameraModel) -> tuple[int, int, int, int]:
    """Inclusive pixel rect (col_min, row_min, col_max, row_max), clipped."""
    az = sc.azimuth_deg
    if abs(az) >= cam.horizontal_fov / 2.0:
        raise ValueError(
            f"scatterer azimuth {az:.2f} deg outside camera fov {cam.horizontal_fov} deg")
    col_c = pinhole_column(cam, az)
    row_c = cam.image_height / 2.0  # horizon line
    half = cam.target_pixel_size_at_1m / sc.range_m / 2.0
    c0 = int(math.floor(col_c - half + 0.5))
    c1 = int(math.floor(col_c + half - 0.5))
    r0 = int(math.floor(row_c - half + 0.5))
    r1 = int(math.floor(row_c + half - 0.5))
    c1 = max(c1, c0)
    r1 = max(r1, r0)
    c0 = min(max(c0, 0), cam.image_width - 1)
    c1 = min(max(c1, 0), cam.image_width - 1)
    r0 = min(max(r0, 0), cam.image_height - 1)
    r1 = min(max(r1, 0), cam.image_height - 1)
    return c0, r0, c1, r1


def render_image(scene: Scene, cam: CameraModel,
                 noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Render the scene as a (3, H, W) float image in [0, 1].

    Flat-shaded rectangles at pinhole-projected columns on a horizon line,
    drawn far to near with the target last; optional additive pixel noise.
    """
    img = np.zeros((3, cam.image_height, cam.image_width))
    clutter = sorted((s for s in scene.scatterers if not s.is_target),
                     key=lambda s: -s.range_m)
    for sc in clutter:
        if abs(sc.azimuth_deg) >= cam.horizontal_fov / 2.0:
            continue  # parked clutter outside the view is simply not drawn
        c0, r0, c1, r1 = _scatterer_rect(sc, cam)
        shade = min(1.0, CLUTTER_BASE + 0.25 * sc.amplitude)
        img[:, r0:r1 + 1, c0:c1 + 1] = shade
    c0, r0, c1, r1 = _scatterer_rect(scene.target, cam)
    for ch in range(3):
        img[ch, r0:r1 + 1, c0:c1 + 1] = TARGET_COLOR[ch]
    if noise_sigma > 0:
        rs = np.random.RandomState(seed)
        img = np.clip(img + rs.normal(0.0, noise_sigma, size=img.shape), 0.0, 1.0)
    return img


# ---------------------------------------------------------------------------
# groundtruth


@dataclass
class GroundTruth:
    range_m: float
    azimuth_deg: float
    bbox: tuple[int, int, int, int]   # (col_min, row_min, col_max, row_max), inclusive
    heatmap_bin: tuple[int, int]      # (row, col)


def groundtruth_of(scene: Scene, cam: CameraModel, cfg: radio.RadioConfig) -> GroundTruth:
    """Exact target polar coordinates, image bbox and heatmap bin."""
    t = scene.target
    lo, hi = cfg.range_window
    if not (lo <= t.range_m <= hi):
        raise ValueError(
            f"target range {t.range_m:.3f} m outside radar window {cfg.range_window}")
    bbox = _scatterer_rect(t, cam)
    return GroundTruth(
        range_m=t.range_m,
        azimuth_deg=t.azimuth_deg,
        bbox=bbox,
        heatmap_bin=(radio.range_to_row(cfg, t.range_m),
                     radio.azimuth_to_col(cfg, t.azimuth_deg)),
    )


def mask_from_bbox(bbox: tuple[int, int, int, int], pad_pixels: int,
                   dims: tuple[int, int]) -> np.ndarray:
    """Binary (H, W) mask, 1 on the bbox padded by pad_pixels, clipped.

    bbox is (col_min, row_min, col_max, row_max) inclusive.  Negative pad
    shrinks the box; a box shrunk away entirely is an error.
    """
    h, w = dims
    c0, r0, c1, r1 = bbox
    r0p, r1p = r0 - pad_pixels, r1 + pad_pixels
    c0p, c1p = c0 - pad_pixels, c1 + pad_pixels
    if r0p > r1p or c0p > c1p:
        raise ValueError(f"bbox {bbox} shrunk away by pad_pixels={pad_pixels}")
    mask = np.zeros((h, w), dtype=float)
    mask[max(r0p, 0):min(r1p, h - 1) + 1, max(c0p, 0):min(c1p, w - 1) + 1] = 1.0
    if not mask.any():
        raise ValueError(f"bbox {bbox} with pad_pixels={pad_pixels} leaves an empty mask")
    return mask
