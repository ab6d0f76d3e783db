"""OFDM radar synthesis and heatmap formation.

Channel model: each scatterer contributes one propagation path whose phase
evolves linearly over subcarriers (delay) and symbols (Doppler), plus a
linear phase across the receive array (azimuth).  The range-Doppler
periodogram and the range-angle beamformer both read this phase structure
back out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

C0 = 3.0e8  # propagation speed convention, m/s


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RadioConfig:
    """Radar front-end and heatmap-grid parameters.

    Desk-scale defaults keep heatmap rows aligned with the natural DFT range
    bins (range_window spans exactly the unambiguous range, one row per bin).
    """

    bandwidth_hz: float = 800e6
    carrier_hz: float = 28e9
    n_sub: int = 64              # subcarriers
    n_symb: int = 16             # OFDM symbols
    symbol_duration_s: float | None = None  # defaults to 1/subcarrier spacing
    array_x: int = 8             # azimuth antennas
    array_y: int = 1
    element_spacing: float = 0.5  # in wavelengths
    range_window: tuple[float, float] = (0.0, 12.0)  # metres
    heatmap_dims: tuple[int, int] = (64, 48)         # rows (range) x cols (azimuth)
    azimuth_fov_deg: float = 90.0                    # heatmap spans +-fov/2
    noise_sigma: float = 0.0     # std of the complex noise per entry

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.bandwidth_hz <= 0:
            raise ValueError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        if self.n_sub < 2 or self.n_symb < 2:
            raise ValueError(
                f"n_sub and n_symb must be >= 2, got {self.n_sub}, {self.n_symb}")
        if self.array_x < 1 or self.array_y < 1:
            raise ValueError("array dims must be >= 1")
        if self.heatmap_dims[0] < 1 or self.heatmap_dims[1] < 1:
            raise ValueError(f"heatmap_dims must be positive, got {self.heatmap_dims}")
        if not (0.0 < self.azimuth_fov_deg < 180.0):
            raise ValueError(f"azimuth_fov_deg must be in (0, 180), got {self.azimuth_fov_deg}")
        if self.range_window[1] <= self.range_window[0]:
            raise ValueError(f"range_window must be increasing, got {self.range_window}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def subcarrier_spacing_hz(self) -> float:
        return self.bandwidth_hz / self.n_sub

    @property
    def symbol_duration(self) -> float:
        if self.symbol_duration_s is not None:
            return self.symbol_duration_s
        return 1.0 / self.subcarrier_spacing_hz

    @property
    def n_antennas(self) -> int:
        return self.array_x * self.array_y


def range_resolution(bandwidth_hz: float) -> float:
    """Range resolution c0 / (2 B) in metres."""
    if bandwidth_hz <= 0:
        raise ValueError(f"bandwidth_hz must be > 0, got {bandwidth_hz}")
    return C0 / (2.0 * bandwidth_hz)


def unambiguous_range(cfg: RadioConfig) -> float:
    """Largest unaliased range, n_sub * c0 / (2 B)."""
    return cfg.n_sub * C0 / (2.0 * cfg.bandwidth_hz)


# ---------------------------------------------------------------------------
# heatmap axis contract
#
# Row i samples range   range_min + i * (range_span / H_r).
# Col j samples azimuth -fov/2    + j * (fov / W_a).
# Both are left-edge conventions; *_to_* map a coordinate to the nearest bin.


def row_range(cfg: RadioConfig, row: int | np.ndarray) -> float | np.ndarray:
    lo, hi = cfg.range_window
    return lo + np.asarray(row, dtype=float) * (hi - lo) / cfg.heatmap_dims[0]


def col_azimuth(cfg: RadioConfig, col: int | np.ndarray) -> float | np.ndarray:
    fov = cfg.azimuth_fov_deg
    return -fov / 2.0 + np.asarray(col, dtype=float) * fov / cfg.heatmap_dims[1]


def range_to_row(cfg: RadioConfig, range_m: float) -> int:
    lo, hi = cfg.range_window
    h = cfg.heatmap_dims[0]
    i = int(math.floor((range_m - lo) * h / (hi - lo) + 0.5))
    return min(max(i, 0), h - 1)


def azimuth_to_col(cfg: RadioConfig, azimuth_deg: float) -> int:
    fov = cfg.azimuth_fov_deg
    w = cfg.heatmap_dims[1]
    j = int(math.floor((azimuth_deg + fov / 2.0) * w / fov + 0.5))
    return min(max(j, 0), w - 1)


# ---------------------------------------------------------------------------
# channel synthesis


def synth_channel(scene, cfg: RadioConfig, seed: int) -> np.ndarray:
    """Synthesize the estimated channel for a scene.

    Returns a complex array of shape (n_sub, n_symb, n_antennas).  Entry
    (k, n, a) accumulates, per scatterer, the product of a delay phasor over
    subcarrier index k, a Doppler phasor over symbol index n and a steering
    phasor over the azimuth antenna index, scaled by the scatterer amplitude,
    plus i.i.d. complex Gaussian noise of std noise_sigma.
    """
    cfg.validate()
    k = np.arange(cfg.n_sub)
    n = np.arange(cfg.n_symb)
    ix = np.arange(cfg.n_antennas) % cfg.array_x  # azimuth index per antenna

    h = np.zeros((cfg.n_sub, cfg.n_symb, cfg.n_antennas), dtype=complex)
    r_max = unambiguous_range(cfg)
    lo, hi = cfg.range_window
    for sc in scene.scatterers:
        rng_m = math.hypot(sc.x, sc.y)
        if rng_m > r_max:
            raise ValueError(
                f"scatterer at range {rng_m:.3f} m beyond unambiguous range {r_max:.3f} m")
        if not (lo <= rng_m <= hi):
            raise ValueError(
                f"scatterer at range {rng_m:.3f} m outside range_window {cfg.range_window}")
        az = math.atan2(sc.x, sc.y)  # radians, positive right of boresight
        f_d = 2.0 * sc.radial_speed * cfg.carrier_hz / C0
        d = 2.0 * rng_m  # two-way path length
        p_rng = np.exp(2j * np.pi * k * d * cfg.subcarrier_spacing_hz / C0)
        p_dop = np.exp(2j * np.pi * n * cfg.symbol_duration * f_d)
        p_ant = np.exp(2j * np.pi * cfg.element_spacing * ix * math.sin(az))
        h += sc.amplitude * p_rng[:, None, None] * p_dop[None, :, None] * p_ant[None, None, :]

    if cfg.noise_sigma > 0:
        rs = np.random.RandomState(seed)
        scale = cfg.noise_sigma / math.sqrt(2.0)
        h = h + scale * (rs.standard_normal(h.shape) + 1j * rs.standard_normal(h.shape))
    return h


# ---------------------------------------------------------------------------
# periodogram (range-Doppler)


def _fold(x: np.ndarray, length: int, axis: int) -> np.ndarray:
    # Sum x along `axis` in blocks of `length`; phase factors of the DFT
    # below only depend on the index modulo `length`, so folding first is
    # exact and turns the odd-length sums into standard transforms.
    n = x.shape[axis]
    blocks = -(-n // length)  # ceil
    pad = blocks * length - n
    if pad:
        widths = [(0, 0)] * x.ndim
        widths[axis] = (0, pad)
        x = np.pad(x, widths)
    x = np.moveaxis(x, axis, 0)
    x = x.reshape(blocks, length, *x.shape[1:]).sum(axis=0)
    return np.moveaxis(x, 0, axis)


def periodogram(channel: np.ndarray, antenna_index: int = 0) -> np.ndarray:
    """Range-Doppler periodogram of one antenna's channel matrix.

    P[k, n] = | sum_m ( sum_p H[p, m] e^{-j2pi p n / n_symb} ) e^{+j2pi m k / n_sub} |^2

    computed with fast transforms; agrees with the literal double sum to
    1e-9 relative.  Output shape is (n_sub, n_symb).
    """
    if channel.ndim == 3:
        h = channel[:, :, antenna_index]
    elif channel.ndim == 2:
        h = channel
    else:
        raise ValueError(f"channel must be 2-D or 3-D, got shape {channel.shape}")
    n_sub, n_symb = h.shape

    # inner sum over subcarriers p at frequencies n / n_symb
    g = np.fft.fft(_fold(h, n_symb, axis=0), axis=0)        # g[n, m]
    # outer sum over symbols m at frequencies -k / n_sub
    f = np.fft.ifft(_fold(g, n_sub, axis=1), axis=1) * n_sub  # f[n, k]
    return np.abs(f.T) ** 2


# ---------------------------------------------------------------------------
# range-angle heatmap


def range_angle_heatmap(channel: np.ndarray, cfg: RadioConfig) -> np.ndarray:
    """Beamform a channel into a range-azimuth heatmap.

    Coherent sum over symbols, matched phase over subcarriers evaluated at
    each row's range, steered sum over the azimuth antennas at each column's
    angle, magnitude squared.  Axis contract as in row_range / col_azimuth.
    """
    if cfg.array_x < 2:
        raise ValueError("range_angle_heatmap needs array_x >= 2")
    if channel.shape != (cfg.n_sub, cfg.n_symb, cfg.n_antennas):
        raise ValueError(
            f"channel shape {channel.shape} does not match config "
            f"({cfg.n_sub}, {cfg.n_symb}, {cfg.n_antennas})")
    h_r, w_a = cfg.heatmap_dims

    c = channel.sum(axis=1)  # (n_sub, n_antennas), coherent over symbols
    # collapse the elevation axis; azimuth steering only depends on ix
    c = c.reshape(cfg.n_sub, cfg.array_y, cfg.array_x).sum(axis=1)

    p = np.arange(cfg.n_sub)
    ranges = row_range(cfg, np.arange(h_r))
    e_rng = np.exp(-2j * np.pi * np.outer(ranges, p) * 2.0 * cfg.subcarrier_spacing_hz / C0)

    ix = np.arange(cfg.array_x)
    az = np.deg2rad(col_azimuth(cfg, np.arange(w_a)))
    e_az = np.exp(-2j * np.pi * cfg.element_spacing * np.outer(ix, np.sin(az)))

    a = e_rng @ c @ e_az  # (h_r, w_a)
    return np.abs(a) ** 2


def heatmap_norm(cfg: RadioConfig) -> float:
    """Coherent processing gain; dividing a heatmap by this puts a unit
    scatterer's peak near 1."""
    return float(cfg.n_sub * cfg.n_symb * cfg.n_antennas) ** 2


# ---------------------------------------------------------------------------
# beam blur model


@dataclass
class BeamKernel:
    """Truncated Gaussian antenna-response kernel."""

    kernel: np.ndarray = field(repr=False)
    width_px: float = 0.0     # Gaussian sigma in pixels
    radius_px: int = 0        # truncation radius in pixels


def beam_kernel(beamwidth_deg: float, pixels_per_degree: float) -> BeamKernel:
    """Gaussian blur kernel for a given azimuth beamwidth.

    The beamwidth is read as a full width at half maximum, so the Gaussian
    sigma is beamwidth * pixels_per_degree / 2.355.  Truncated at 3 sigma
    and normalized to unit sum.
    """
    if beamwidth_deg <= 0:
        raise ValueError(f"beamwidth_deg must be > 0, got {beamwidth_deg}")
    if pixels_per_degree <= 0:
        raise ValueError(f"pixels_per_degree must be > 0, got {pixels_per_degree}")
    w = beamwidth_deg * pixels_per_degree / 2.355
    radius = max(1, int(math.ceil(3.0 * w)))
    x = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(x[None, :] ** 2 + x[:, None] ** 2) / (2.0 * w * w))
    return BeamKernel(kernel=g / g.sum(), width_px=w, radius_px=radius)


def blur(image: np.ndarray, kernel: BeamKernel) -> np.ndarray:
    """Convolve an image with a beam kernel, reflect-padded at the borders.

    Accepts (H, W) or (channels, H, W); channels are blurred independently.
    """
    k = kernel.kernel
    if image.ndim == 3:
        return np.stack([blur(ch, kernel) for ch in image])
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D or 3-D, got shape {image.shape}")
    kh, kw = k.shape
    h, w = image.shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {k.shape} larger than image {image.shape}")
    kf = k[::-1, ::-1]  # true convolution flips the kernel
    pad = ((kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2))
    padded = np.pad(image, pad, mode="reflect")
    out = np.zeros_like(image, dtype=float)
    for u in range(kh):
        for v in range(kw):
            out += kf[u, v] * padded[u:u + h, v:v + w]
    return out
