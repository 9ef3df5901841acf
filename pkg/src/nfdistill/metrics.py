"""Evaluation metrics: PSNR, condition round-trip consistency, diversity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SynthParams
from .losses import DEFAULT_RESOLUTIONS, multires_stft_loss
from .tensor import ShapeError, Tensor

# sentinel for identical inputs ("capped +infinity" in dB)
PSNR_SENTINEL_DB = 1e9


def psnr(x_ref: np.ndarray, x_gen: np.ndarray, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs return the capped sentinel."""
    x_ref = np.asarray(x_ref, dtype=np.float64)
    x_gen = np.asarray(x_gen, dtype=np.float64)
    if x_ref.shape != x_gen.shape:
        raise ShapeError(f"psnr: shapes differ, {x_ref.shape} vs {x_gen.shape}")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((x_ref - x_gen) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_SENTINEL_DB)


def extract_condition(x: np.ndarray, params: SynthParams,
                      analysis_win: int = 384) -> np.ndarray:
    """Re-estimate (log f0, amplitude) per frame from a waveform.

    Frequency: the dominant bin of a Hann-windowed rFFT centered on each
    frame (reflect-padded at the edges, restricted to the configured f0
    band), refined by the phase advance between two transforms one sample
    apart — this reads the instantaneous frequency at the peak rather than
    the bin grid. Short windows beat long ones here: the controls drift, so
    chirp smear costs more than bin resolution.
    Amplitude: frame RMS divided by the RMS gain of the harmonic stack.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.length:
        raise ShapeError(f"extract_condition: expected length {params.length}, got {x.shape[0]}")
    frames = params.frames
    win = min(analysis_win, params.length - 1)
    half = win // 2
    xp = np.pad(x, (half, half + 1), mode="reflect")

    starts = ((np.arange(frames) + 0.5) * params.hop).astype(np.int64)
    segs0 = np.stack([xp[s:s + win] for s in starts])
    segs1 = np.stack([xp[s + 1:s + 1 + win] for s in starts])
    window = np.hanning(win)
    spec0 = np.fft.rfft(segs0 * window, axis=1)
    spec1 = np.fft.rfft(segs1 * window, axis=1)

    freqs = np.fft.rfftfreq(win, d=1.0)
    lo = max(1, np.searchsorted(freqs, params.f0_min * 0.75))
    hi = max(lo + 1, np.searchsorted(freqs, params.f0_max * 1.5))
    band = np.abs(spec0[:, lo:hi])
    peak = lo + np.argmax(band, axis=1)

    rows = np.arange(frames)
    rotation = spec1[rows, peak] * np.conj(spec0[rows, peak])
    f0_est = np.abs(np.angle(rotation)) / (2.0 * np.pi)
    f0_est = np.clip(f0_est, 1.0 / (4.0 * win), 0.5)

    frame_rms = np.sqrt(np.mean(x.reshape(frames, params.hop) ** 2, axis=1))
    amp_est = frame_rms / params.rms_gain
    return np.stack([np.log(f0_est), amp_est]).astype(np.float32)


@dataclass
class ConsistencyResult:
    overall_db: float
    log_f0_db: float
    amplitude_db: float


def consistency_metric(x_gen: np.ndarray, c: np.ndarray,
                       params: SynthParams) -> ConsistencyResult:
    """PSNR between re-extracted conditioning and the target conditioning.

    Features are normalized by their configured ranges before the PSNR, so
    both rows weigh equally; peak is 1 in normalized units.
    """
    c = np.asarray(c, dtype=np.float64)
    c_hat = extract_condition(x_gen, params).astype(np.float64)
    if c.shape != c_hat.shape:
        raise ShapeError(f"consistency: conditioning shape {c.shape}, expected {c_hat.shape}")
    scale = np.array([
        math.log(params.f0_max) - math.log(params.f0_min),
        params.amp_max - params.amp_min,
    ])[:, None]
    err = (c_hat - c) / scale
    zero = np.zeros_like(err)
    return ConsistencyResult(
        overall_db=psnr(err, zero, peak=1.0),
        log_f0_db=psnr(err[0], zero[0], peak=1.0),
        amplitude_db=psnr(err[1], zero[1], peak=1.0),
    )


def stft_distance(x_a: np.ndarray, x_b: np.ndarray,
                  resolutions=DEFAULT_RESOLUTIONS, log_floor: float = 1e-7) -> float:
    """Spectral distance between two waveforms (multi-resolution STFT loss).

    The perceptual stand-in for pairwise sample distance on 1-D signals.
    """
    ta = Tensor(np.asarray(x_a, dtype=np.float32).reshape(1, -1))
    tb = Tensor(np.asarray(x_b, dtype=np.float32).reshape(1, -1))
    return multires_stft_loss(ta, tb, resolutions, log_floor).item()


def diversity_score(sample_fn, z_list, c: Tensor, distance=None) -> float:
    """Mean pairwise distance between K samples drawn for one condition.

    sample_fn(z, c) -> (B, 1, T) Tensor; z_list holds K latent tensors
    (batch 1). Larger values mean more varied outputs.
    """
    k = len(z_list)
    if k < 2:
        raise ValueError(f"diversity needs K >= 2 samples, got {k}")
    distance = distance or stft_distance
    outs = [np.asarray(sample_fn(z, c).data).reshape(-1) for z in z_list]
    total = 0.0
    pairs = 0
    for i in range(k):
        for j in range(i + 1, k):
            total += distance(outs[i], outs[j])
            pairs += 1
    return total / pairs
