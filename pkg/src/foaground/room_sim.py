"""Shoebox room acoustics: image-source FOA impulse responses and scene sampling.

The world frame matches the camera frame at zero yaw (x right, y up, z
backward) with the room occupying [0, Lx] x [0, Ly] x [0, Lz]. The receiver
yaws about the world up-axis; positive yaw turns left. Reflections use
frequency-independent wall absorption, 1/distance spreading with a 0.1 m
floor, and nearest-sample delays: channel gains, not inter-channel delays,
carry the directional information, so rounded delays keep the direct-path
timing exact under test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import (
    ConfigurationError,
    GeometryError,
    InfeasibleSceneError,
    LengthError,
    RangeError,
)
from .foa_core import FoaSignal
from .spatial_frame import yaw_matrix

#: Spherical-spreading distance floor in meters.
MIN_SPREAD_DISTANCE = 0.1

#: Rejection budget for constrained pose sampling.
MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room: dimensions, wall absorption, and reflection order.

    ``absorption`` is either a scalar in (0, 1] applied to all six walls or a
    6-tuple ordered (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi).
    """

    dims: tuple[float, float, float]
    absorption: float | tuple[float, ...] = 0.7
    speed_of_sound: float = 343.0
    max_order: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise RangeError(f"room dims must be three positive lengths: {self.dims}")
        a = self.absorption_vector()
        if np.any(a <= 0) or np.any(a > 1):
            raise RangeError("absorption must lie in (0, 1]")
        if self.speed_of_sound <= 0:
            raise RangeError("speed of sound must be positive")
        if self.max_order < 0:
            raise RangeError("reflection order must be >= 0")

    def absorption_vector(self) -> np.ndarray:
        a = np.atleast_1d(np.asarray(self.absorption, dtype=np.float64))
        if a.size == 1:
            return np.full(6, float(a[0]))
        if a.size != 6:
            raise RangeError("absorption must be a scalar or 6 per-wall values")
        return a.astype(np.float64)

    def contains(self, p: np.ndarray, clearance: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(
            np.all(p >= clearance) and np.all(p <= np.asarray(self.dims) - clearance)
        )


@dataclass
class ScenePose:
    """Receiver pose plus source positions, all in world meters."""

    source_positions: list[np.ndarray]
    receiver_position: np.ndarray
    receiver_yaw_deg: float


@dataclass(eq=False)
class FoaRir:
    """4-channel room impulse response in W, X, Y, Z order."""

    channels: np.ndarray  # (4, n)
    sample_rate: int

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 4:
            raise RangeError(f"expected (4, n) RIR, got {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise RangeError("RIR contains non-finite samples")


@dataclass(eq=False)
class SourceSignal:
    """Band-limited dry source: a harmonic tone or brick-wall noise, unit RMS."""

    kind: str
    band: tuple[float, float]
    samples: np.ndarray
    sample_rate: int = 16000
    seed: int | None = None


def _axis_images(coord: float, length: float, order: int):
    """1-D image positions with per-wall hit counts (lo, hi), count <= order."""
    out = []
    kmax = order // 2 + 1
    for k in range(-kmax, kmax + 1):
        even = (2 * k * length + coord, abs(k), abs(k))
        if even[1] + even[2] <= order:
            out.append(even)
        if k >= 1:
            odd = (2 * k * length - coord, k - 1, k)
        else:
            odd = (2 * k * length - coord, 1 - k, -k)
        if odd[1] + odd[2] <= order:
            out.append(odd)
    return out


def image_sources(room: RoomSpec, src, order: int):
    """Mirror images of a source across the walls up to ``order`` reflections.

    Returns a list of (position, reflection_count) pairs; order 0 yields only
    the source itself.
    """
    positions, counts, _ = _image_sources_full(room, src, order)
    return [(positions[i], int(counts[i])) for i in range(len(counts))]


def _image_sources_full(room: RoomSpec, src, order: int):
    src = np.asarray(src, dtype=np.float64)
    if not room.contains(src):
        raise GeometryError(f"source {src} lies outside the room {room.dims}")
    if order < 0:
        raise RangeError("order must be >= 0")
    per_axis = [_axis_images(src[a], room.dims[a], order) for a in range(3)]
    positions, counts, wall_hits = [], [], []
    for px, lox, hix in per_axis[0]:
        for py, loy, hiy in per_axis[1]:
            base = lox + hix + loy + hiy
            if base > order:
                continue
            for pz, loz, hiz in per_axis[2]:
                total = base + loz + hiz
                if total > order:
                    continue
                positions.append((px, py, pz))
                counts.append(total)
                wall_hits.append((lox, hix, loy, hiy, loz, hiz))
    return (
        np.asarray(positions, dtype=np.float64),
        np.asarray(counts, dtype=np.int64),
        np.asarray(wall_hits, dtype=np.int64),
    )


def render_foa_rir(
    room: RoomSpec,
    src,
    receiver_pos,
    receiver_yaw_deg: float,
    sample_rate: int = 16000,
    length: int | None = None,
) -> FoaRir:
    """FOA impulse response from a source to a yawed receiver.

    Every image source contributes amplitude beta^hits / max(d, 0.1) at the
    rounded delay round(d / c * fs), scaled by the B-format gains of its
    direction in the receiver frame. beta = sqrt(1 - absorption) per wall.
    With an explicit ``length`` shorter than the furthest image's delay a
    ``LengthError`` reports the required buffer size.
    """
    receiver_pos = np.asarray(receiver_pos, dtype=np.float64)
    if not room.contains(receiver_pos):
        raise GeometryError(f"receiver {receiver_pos} lies outside the room")
    positions, _, wall_hits = _image_sources_full(room, src, room.max_order)
    rel = positions - receiver_pos
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist < 1e-9):
        raise GeometryError("source coincides with the receiver")
    dirs_cam = (yaw_matrix(receiver_yaw_deg).T @ (rel / dist[:, None]).T).T
    # Gains per image: (W, X, Y, Z) = (1, -z, -x, y) for unit direction (x, y, z).
    gains = np.stack(
        [
            np.ones(len(dist)),
            -dirs_cam[:, 2],
            -dirs_cam[:, 0],
            dirs_cam[:, 1],
        ],
        axis=1,
    )
    betas = np.sqrt(1.0 - room.absorption_vector())
    amp = np.prod(betas[None, :] ** wall_hits, axis=1) / np.maximum(
        dist, MIN_SPREAD_DISTANCE
    )
    delays = np.round(dist / room.speed_of_sound * sample_rate).astype(np.int64)
    needed = int(delays.max()) + 1
    if length is None:
        length = needed
    elif length < needed:
        raise LengthError(
            f"RIR length {length} cannot hold a delay of {needed - 1} samples",
            required=needed,
        )
    rir = np.zeros((4, length))
    contrib = gains * amp[:, None]
    for c in range(4):
        np.add.at(rir[c], delays, contrib[:, c])
    return FoaRir(rir, sample_rate)


def render_foa(rir: FoaRir, dry: SourceSignal) -> FoaSignal:
    """Convolve a dry source with a 4-channel RIR (full linear convolution)."""
    if rir.sample_rate != dry.sample_rate:
        raise ConfigurationError(
            f"RIR rate {rir.sample_rate} != source rate {dry.sample_rate}"
        )
    x = np.asarray(dry.samples, dtype=np.float64)
    out = np.stack([fftconvolve(x, ch) for ch in rir.channels])
    return FoaSignal(out, rir.sample_rate)


def render_scene(
    room: RoomSpec,
    pose: ScenePose,
    sources: list[SourceSignal],
    sample_rate: int = 16000,
) -> FoaSignal:
    """Render and sum every source of a scene at the receiver."""
    if len(sources) != len(pose.source_positions):
        raise ConfigurationError(
            f"{len(sources)} signals for {len(pose.source_positions)} positions"
        )
    rendered = []
    for src_pos, sig in zip(pose.source_positions, sources):
        rir = render_foa_rir(
            room, src_pos, pose.receiver_position, pose.receiver_yaw_deg, sample_rate
        )
        rendered.append(render_foa(rir, sig).channels)
    n = max(ch.shape[1] for ch in rendered)
    total = np.zeros((4, n))
    for ch in rendered:
        total[:, : ch.shape[1]] += ch
    return FoaSignal(total, sample_rate)


def source_doa(pose: ScenePose, index: int = 0):
    """Ground-truth receiver-frame DoA of one source of a scene."""
    from .spatial_frame import angles_from_dir, world_to_camera

    rel = pose.source_positions[index] - pose.receiver_position
    return angles_from_dir(world_to_camera(rel, pose.receiver_yaw_deg))


def sample_scene(
    room: RoomSpec,
    n_sources: int,
    rng: np.random.Generator,
    clearance: float = 0.5,
    distance_range: tuple[float, float] = (1.0, 4.0),
) -> ScenePose:
    """Rejection-sample a receiver pose and sources around it.

    The receiver is uniform in the room with the wall clearance and a uniform
    yaw; each source is uniform (by volume) in the spherical shell
    ``distance_range`` around the receiver, clipped to the cleared room. The
    geodesic-vs-Euclidean path ratio check always passes in a convex shoebox,
    so no path test is run; dataset records mark it as such.
    """
    dims = np.asarray(room.dims, dtype=np.float64)
    lo = np.full(3, clearance)
    hi = dims - clearance
    if np.any(lo >= hi):
        raise InfeasibleSceneError(
            f"room {room.dims} leaves no space at clearance {clearance}"
        )
    d_lo, d_hi = distance_range
    rejections = 0
    receiver = lo + rng.uniform(size=3) * (hi - lo)
    yaw = float(rng.uniform(-180.0, 180.0))
    sources: list[np.ndarray] = []
    while len(sources) < n_sources:
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm < 1e-9:
            continue
        radius = (rng.uniform() * (d_hi**3 - d_lo**3) + d_lo**3) ** (1.0 / 3.0)
        candidate = receiver + direction / norm * radius
        if np.all(candidate >= lo) and np.all(candidate <= hi):
            sources.append(candidate)
            continue
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise InfeasibleSceneError(
                f"no source position found after {MAX_REJECTIONS} rejections"
            )
    return ScenePose(sources, receiver, yaw)


def synth_source(
    kind: str,
    band: tuple[float, float],
    duration_s: float,
    rng: np.random.Generator,
    sample_rate: int = 16000,
    n_harmonics: int = 8,
    seed: int | None = None,
) -> SourceSignal:
    """Synthesize a unit-RMS dry source confined to a frequency band.

    ``harmonic_tone`` sums ``n_harmonics`` equal-amplitude harmonics of a
    fundamental drawn uniformly from the bin grid of the signal's own DFT so
    that every harmonic lies inside the band (this keeps the in-band energy
    exact). ``band_noise`` brick-wall filters white noise in the frequency
    domain. The band must fit under Nyquist.
    """
    f_lo, f_hi = band
    nyquist = sample_rate / 2.0
    if not (0.0 <= f_lo < f_hi <= nyquist):
        raise RangeError(f"band [{f_lo}, {f_hi}] must satisfy 0 <= lo < hi <= Nyquist")
    n = int(round(duration_s * sample_rate))
    if n <= 0:
        raise ConfigurationError("duration must produce a non-empty signal")
    if kind == "harmonic_tone":
        bin_hz = sample_rate / n
        k_lo = int(np.ceil(f_lo / bin_hz))
        k_hi = int(np.floor(f_hi / n_harmonics / bin_hz))
        if k_lo < 1 or k_lo > k_hi:
            raise ConfigurationError(
                f"band [{f_lo}, {f_hi}] admits no fundamental with "
                f"{n_harmonics} harmonics"
            )
        f0 = int(rng.integers(k_lo, k_hi + 1)) * bin_hz
        t = np.arange(n) / sample_rate
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harmonics)
        samples = np.zeros(n)
        for m in range(1, n_harmonics + 1):
            samples += np.sin(2.0 * np.pi * m * f0 * t + phases[m - 1])
    elif kind == "band_noise":
        white = rng.normal(size=n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum[(freqs < f_lo) | (freqs > f_hi)] = 0.0
        samples = np.fft.irfft(spectrum, n=n)
    else:
        raise ConfigurationError(f"unknown source kind {kind!r}")
    rms = np.sqrt(np.mean(samples**2))
    if rms < 1e-12:
        raise ConfigurationError("synthesized signal is silent; widen the band")
    return SourceSignal(
        kind=kind,
        band=(float(f_lo), float(f_hi)),
        samples=samples / rms,
        sample_rate=sample_rate,
        seed=seed,
    )


def band_energy_fraction(signal: np.ndarray, band, sample_rate: int) -> float:
    """Fraction of spectral energy inside [band] measured on the full DFT."""
    spectrum = np.abs(np.fft.rfft(np.asarray(signal, dtype=np.float64))) ** 2
    freqs = np.fft.rfftfreq(len(signal), 1.0 / sample_rate)
    total = spectrum.sum()
    if total <= 0:
        return 0.0
    inside = spectrum[(freqs >= band[0]) & (freqs <= band[1])].sum()
    return float(inside / total)
