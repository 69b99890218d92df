"""First-order ambisonics: B-format encoding, STFT, and intensity-vector DoA.

The toolkit's canonical B-format keeps the omnidirectional W channel at unit
gain and points the three dipoles forward (X), left (Y), and up (Z), so a
plane wave from (azimuth, elevation) carries the channel gains
(1, cos el cos az, cos el sin az, sin el). With that convention the active
intensity vector built from W recovers the source direction directly:
azimuth = atan2(I_Y, I_X), elevation = atan2(I_Z, hypot(I_X, I_Y)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import (
    ConfigurationError,
    EstimationError,
    FormatError,
    LengthError,
    RangeError,
    ShapeError,
)
from .spatial_frame import DoA, angles_from_dir

#: Guard on ||I||_2 below which an intensity bin is treated as silent.
IV_NORM_EPS = 1e-12


@dataclass(frozen=True)
class StftConfig:
    """Analysis front-end: 25 ms Hann windows, 10 ms hop, 512-point FFT at 16 kHz."""

    window_length: int = 400
    hop: int = 160
    fft_size: int = 512
    sample_rate: int = 16000
    window: str = "hann"

    def __post_init__(self):
        if self.window_length <= 0 or self.hop <= 0:
            raise ConfigurationError("window length and hop must be positive")
        if self.fft_size < self.window_length:
            raise ConfigurationError("fft size must be >= window length")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample rate must be positive")
        if self.window not in ("hann", "rect"):
            raise ConfigurationError(f"unknown window kind {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def bin_freqs(self) -> np.ndarray:
        """Center frequency in Hz of each FFT bin."""
        return np.arange(self.freq_bins) * self.sample_rate / self.fft_size

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise LengthError(
                f"signal of {n_samples} samples is shorter than one window",
                required=self.window_length,
            )
        return 1 + (n_samples - self.window_length) // self.hop

    def window_values(self) -> np.ndarray:
        n = self.window_length
        if self.window == "hann":
            return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
        return np.ones(n)


@dataclass(eq=False)
class FoaSignal:
    """4-channel ambisonic time series in W, X, Y, Z order."""

    channels: np.ndarray  # (4, n)
    sample_rate: int = 16000

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 4:
            raise ShapeError(f"expected (4, n) channels, got {self.channels.shape}")
        if self.sample_rate <= 0:
            raise RangeError("sample rate must be positive")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    def scaled(self, gain: float) -> "FoaSignal":
        return FoaSignal(self.channels * gain, self.sample_rate)


@dataclass(eq=False)
class Spectrogram:
    """Complex STFT frames for each FOA channel, shape (4, frames, freq_bins)."""

    bins: np.ndarray
    cfg: StftConfig


@dataclass(eq=False)
class IvFeature:
    """Per-bin intensity unit vectors (frames, bins, 3) plus W-channel energy.

    Vector components follow the dipole order X (forward), Y (left), Z (up).
    Bins whose raw intensity norm falls below ``IV_NORM_EPS`` are stored as
    exact zero vectors.
    """

    vectors: np.ndarray  # (frames, bins, 3), unit or zero rows
    energy: np.ndarray  # (frames, bins), |F_W|^2
    cfg: StftConfig


def encode_gains(doa: DoA) -> np.ndarray:
    """B-format channel gains (W, X, Y, Z) for a plane wave from ``doa``."""
    az = math.radians(doa.azimuth_deg)
    el = math.radians(doa.elevation_deg)
    return np.array(
        [1.0, math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )


def gains_for_direction(d: np.ndarray) -> np.ndarray:
    """Channel gains for a unit camera-frame direction; equals ``encode_gains``."""
    x, y, z = np.asarray(d, dtype=np.float64)
    return np.array([1.0, -z, -x, y])


def iv_to_direction(v: np.ndarray) -> np.ndarray:
    """Map an intensity vector (X, Y, Z dipole order) to a camera-frame direction."""
    return np.array([-v[1], v[2], -v[0]])


def stft(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed, hop-strided complex DFT frames of a single channel.

    Returns an array of shape (frames, freq_bins). The signal must cover at
    least one analysis window; no padding is applied.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("stft expects a single-channel 1-D signal")
    n_frames = cfg.n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[:: cfg.hop]
    frames = frames[:n_frames] * cfg.window_values()
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def stft_foa(foa: FoaSignal, cfg: StftConfig) -> Spectrogram:
    if foa.sample_rate != cfg.sample_rate:
        raise ConfigurationError(
            f"signal rate {foa.sample_rate} != stft rate {cfg.sample_rate}"
        )
    return Spectrogram(np.stack([stft(ch, cfg) for ch in foa.channels]), cfg)


def classical_iv(foa: FoaSignal, cfg: StftConfig | None = None) -> IvFeature:
    """Active intensity features from the cross-spectra of W with X, Y, Z.

    Per time-frequency bin the three real parts of conj(F_W) * F_C are
    stacked and L2-normalized; bins below the silence guard become zero
    vectors. Energy is |F_W|^2.
    """
    cfg = cfg or StftConfig(sample_rate=foa.sample_rate)
    spec = stft_foa(foa, cfg).bins
    cross = np.conj(spec[0])[..., None] * np.moveaxis(spec[1:4], 0, -1)
    iv = np.real(cross)
    norms = np.linalg.norm(iv, axis=-1, keepdims=True)
    vectors = np.where(norms >= IV_NORM_EPS, iv / np.maximum(norms, IV_NORM_EPS), 0.0)
    energy = np.abs(spec[0]) ** 2
    return IvFeature(vectors=vectors, energy=energy, cfg=cfg)


def band_mask(cfg: StftConfig, f_lo: float, f_hi: float) -> np.ndarray:
    """Boolean mask over FFT bins whose center frequency lies in [f_lo, f_hi]."""
    nyquist = cfg.sample_rate / 2.0
    if not (0.0 <= f_lo < f_hi <= nyquist):
        raise RangeError(
            f"band [{f_lo}, {f_hi}] must satisfy 0 <= lo < hi <= {nyquist}"
        )
    freqs = cfg.bin_freqs()
    return (freqs >= f_lo) & (freqs <= f_hi)


def doa_from_iv(iv: IvFeature, mask: np.ndarray | None = None) -> DoA:
    """Single DoA from intensity features: energy-weighted mean of bin vectors.

    ``mask`` optionally restricts aggregation to a set of frequency bins (see
    ``band_mask``). Raises ``EstimationError`` when no unmasked bin carries a
    usable intensity vector.
    """
    nonzero = np.any(iv.vectors != 0.0, axis=-1)
    weights = iv.energy * nonzero
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (iv.cfg.freq_bins,):
            raise ShapeError(
                f"mask must have {iv.cfg.freq_bins} bins, got {mask.shape}"
            )
        weights = weights * mask[None, :]
    total = weights.sum()
    if total <= 0.0:
        raise EstimationError("no energetic bins available for DoA estimation")
    mean_vec = np.einsum("tf,tfc->c", weights, iv.vectors) / total
    if np.linalg.norm(mean_vec) < IV_NORM_EPS:
        raise EstimationError("intensity vectors cancel; direction undefined")
    return angles_from_dir(iv_to_direction(mean_vec))


# FoaSignal file format: 4-channel RIFF/WAV with IEEE-754 single-precision
# samples, channel order W, X, Y, Z.

def write_foa_wav(foa: FoaSignal, path) -> None:
    wavfile.write(str(path), foa.sample_rate, foa.channels.T.astype(np.float32))


def read_foa_wav(path) -> FoaSignal:
    rate, data = wavfile.read(str(path))
    if data.ndim != 2 or data.shape[1] != 4:
        raise FormatError(f"{path}: expected 4 channels, got shape {data.shape}")
    if data.dtype != np.float32:
        raise FormatError(f"{path}: expected float32 samples, got {data.dtype}")
    return FoaSignal(data.T.astype(np.float64), sample_rate=int(rate))
