"""Distillation objective: L1 reconstruction plus multi-resolution STFT loss.

Single-resolution STFT loss = spectral convergence + log-magnitude L1:
    SC(x, y)  = ||S_x - S_y||_F / ||S_x||_F            (per example, averaged)
    LM(x, y)  = mean |log max(S_x, floor) - log max(S_y, floor)|
with S the Hann-windowed magnitude spectrogram. The multi-resolution loss
averages SC + LM over the configured (fft, win, hop) triples; a flag
switches to plain summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class STFTConfig:
    fft_size: int
    win_size: int
    hop: int

    def validate(self) -> "STFTConfig":
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1) != 0:
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not (0 < self.hop <= self.win_size <= self.fft_size):
            raise ValueError(
                f"need 0 < hop <= win_size <= fft_size, got "
                f"hop={self.hop} win={self.win_size} fft={self.fft_size}"
            )
        return self

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1


DEFAULT_RESOLUTIONS = (
    STFTConfig(256, 256, 64),
    STFTConfig(512, 512, 128),
    STFTConfig(1024, 1024, 256),
)


@dataclass
class LossConfig:
    alpha: float = 1e-2
    resolutions: tuple[STFTConfig, ...] = DEFAULT_RESOLUTIONS
    log_floor: float = 1e-7
    average_resolutions: bool = True

    def validate(self) -> "LossConfig":
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if len(self.resolutions) < 1:
            raise ValueError("need at least one STFT resolution")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        for r in self.resolutions:
            r.validate()
        return self


_dft_cache: dict = {}


def _dft_tables(cfg: STFTConfig, dtype) -> tuple[Tensor, Tensor, Tensor]:
    key = (cfg.fft_size, cfg.win_size, np.dtype(dtype).name)
    if key not in _dft_cache:
        n = np.arange(cfg.win_size)[:, None]
        k = np.arange(cfg.bins)[None, :]
        angle = 2.0 * math.pi * n * k / cfg.fft_size
        window = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(cfg.win_size) / cfg.win_size)
        _dft_cache[key] = (
            Tensor(window.astype(dtype)),
            Tensor(np.cos(angle).astype(dtype)),
            Tensor((-np.sin(angle)).astype(dtype)),
        )
    return _dft_cache[key]


def _as_signal(x: Tensor) -> Tensor:
    """Accept (T,), (B, T) or (B, 1, T); return (B, T)."""
    if x.data.ndim == 1:
        return T.reshape(x, (1, x.shape[0]))
    if x.data.ndim == 3 and x.shape[1] == 1:
        return T.reshape(x, (x.shape[0], x.shape[2]))
    if x.data.ndim == 2:
        return x
    raise T.ShapeError(f"expected waveform of shape (T,), (B,T) or (B,1,T), got {x.shape}")


def stft_magnitude(x: Tensor, cfg: STFTConfig) -> Tensor:
    """Magnitude spectrogram (B, frames, fft_size/2 + 1), Hann window."""
    cfg.validate()
    x = _as_signal(x)
    if x.shape[1] < cfg.win_size:
        raise T.ShapeError(
            f"signal length {x.shape[1]} shorter than window {cfg.win_size}"
        )
    window, cos_t, sin_t = _dft_tables(cfg, x.dtype)
    frames = T.frame_signal(x, cfg.win_size, cfg.hop)
    tapered = T.mul(frames, window)
    re = T.matmul(tapered, cos_t)
    im = T.matmul(tapered, sin_t)
    return T.sqrt(T.add(T.square(re), T.square(im)))


def _check_equal_lengths(x_ref: Tensor, x_gen: Tensor) -> None:
    if x_ref.shape != x_gen.shape:
        raise T.ShapeError(f"signal shapes differ: {x_ref.shape} vs {x_gen.shape}")


def spectral_convergence(x_ref: Tensor, x_gen: Tensor, cfg: STFTConfig) -> Tensor:
    """Frobenius-normalized magnitude difference, averaged over the batch."""
    _check_equal_lengths(x_ref, x_gen)
    s_ref = stft_magnitude(x_ref, cfg)
    s_gen = stft_magnitude(x_gen, cfg)
    diff = T.sub(s_ref, s_gen)
    num = T.sqrt(T.tensor_sum(T.square(diff), axis=(1, 2)))
    den = T.sqrt(T.tensor_sum(T.square(s_ref), axis=(1, 2)))
    if np.any(den.data <= 0):
        raise T.TensorError("spectral_convergence: reference signal is identically zero")
    return T.mean(T.div(num, den))


def log_stft_magnitude(x_ref: Tensor, x_gen: Tensor, cfg: STFTConfig,
                       log_floor: float = 1e-7) -> Tensor:
    """Mean L1 distance between floor-clamped log magnitude spectrograms."""
    _check_equal_lengths(x_ref, x_gen)
    s_ref = stft_magnitude(x_ref, cfg)
    s_gen = stft_magnitude(x_gen, cfg)
    l_ref = T.log(T.clamp_min(s_ref, log_floor))
    l_gen = T.log(T.clamp_min(s_gen, log_floor))
    return T.mean(T.absolute(T.sub(l_ref, l_gen)))


def multires_stft_loss(x_ref: Tensor, x_gen: Tensor,
                       resolutions=DEFAULT_RESOLUTIONS, log_floor: float = 1e-7,
                       average: bool = True) -> Tensor:
    resolutions = tuple(resolutions)
    if len(resolutions) < 1:
        raise ValueError("need at least one STFT resolution")
    total = None
    for r in resolutions:
        term = T.add(spectral_convergence(x_ref, x_gen, r),
                     log_stft_magnitude(x_ref, x_gen, r, log_floor))
        total = term if total is None else T.add(total, term)
    if average:
        total = T.mul(total, 1.0 / len(resolutions))
    return total


def l1_reconstruction(x_ref: Tensor, x_gen: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if x_ref.shape != x_gen.shape:
        raise T.ShapeError(f"l1: shapes differ, {x_ref.shape} vs {x_gen.shape}")
    return T.mean(T.absolute(T.sub(x_ref, x_gen)))


def total_distill_loss(x_teacher: Tensor, x_student: Tensor,
                       cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, l1 term, stft term); total = l1 + alpha * stft."""
    cfg.validate()
    rec = l1_reconstruction(x_teacher, x_student)
    feat = multires_stft_loss(x_teacher, x_student, cfg.resolutions,
                              cfg.log_floor, cfg.average_resolutions)
    total = T.add(rec, T.mul(feat, cfg.alpha))
    return total, rec, feat
