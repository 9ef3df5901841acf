"""Conditional flow teacher: squeeze, Glow-style steps, exact log-det, NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ActNorm, AffineCoupling, Inv1x1, Layer, _prefixed
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    squeeze: int = 8
    steps: int = 8
    early_every: int = 0          # 0 disables early latent emission
    early_size: int = 0
    sigma: float = 1.0
    cond_features: int = 2
    frame_hop: int = 64           # waveform samples per conditioning frame
    wn_width: int = 64
    wn_layers: int = 4
    wn_kernel: int = 3
    weight_norm: bool = True

    def validate(self) -> "FlowConfig":
        if self.squeeze < 2 or self.squeeze % 2 != 0:
            raise ValueError(f"squeeze must be even and >= 2, got {self.squeeze}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.frame_hop % self.squeeze != 0:
            raise ValueError("frame_hop must be divisible by squeeze")
        if self.early_every > 0:
            if self.early_size < 2 or self.early_size % 2 != 0:
                raise ValueError("early_size must be even and >= 2 when early output is on")
        return self


def emission_schedule(cfg: FlowConfig) -> tuple[list[int], list[int], list[int]]:
    """Per-step channel counts, steps followed by an emission, z piece sizes."""
    channels = []
    emit_after = []
    pieces = []
    ch = cfg.squeeze
    for k in range(1, cfg.steps + 1):
        channels.append(ch)
        if cfg.early_every > 0 and k % cfg.early_every == 0 and ch - cfg.early_size >= 2:
            emit_after.append(k)
            pieces.append(cfg.early_size)
            ch -= cfg.early_size
    pieces.append(ch)
    return channels, emit_after, pieces


class FlowStep(Layer):
    """actnorm -> invertible 1x1 -> affine coupling (or a fused affine 1x1)."""

    def __init__(self, channels: int, cond_ch: int, cfg: FlowConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.actnorm = ActNorm(channels, dtype=dtype)
        self.mix = Inv1x1(channels, rng=rng, dtype=dtype)
        self.fused_mix = None  # set by the fusion pass, replaces actnorm+mix
        self.coupling = AffineCoupling(channels, cond_ch, width=cfg.wn_width,
                                       layers=cfg.wn_layers, kernel=cfg.wn_kernel,
                                       weight_norm=cfg.weight_norm, rng=rng, dtype=dtype)

    @property
    def is_fused(self) -> bool:
        return self.fused_mix is not None

    def forward(self, h: Tensor, cond: Tensor, init_actnorm: bool = False,
                init_stats: list | None = None) -> tuple[Tensor, Tensor]:
        if self.is_fused:
            h, ld = self.fused_mix.forward(h)
        else:
            if init_actnorm:
                self.actnorm.initialize_from(h.data)
            elif not self.actnorm.initialized:
                raise T.TensorError("flow step: actnorm not initialized; run actnorm_init first")
            h, ld = self.actnorm.forward(h)
            if init_stats is not None:
                init_stats.append((h.data.mean(axis=(0, 2)), h.data.var(axis=(0, 2))))
            h, ld2 = self.mix.forward(h)
            ld = T.add(ld, ld2)
        h, ld3 = self.coupling.forward(h, cond)
        return h, T.add(ld, ld3)

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        h = self.coupling.inverse(y, cond)
        if self.is_fused:
            return self.fused_mix.inverse(h)
        h = self.mix.inverse(h)
        if not self.actnorm.initialized:
            raise T.TensorError("flow step: actnorm not initialized; run actnorm_init first")
        return self.actnorm.inverse(h)

    def named_params(self):
        if self.is_fused:
            out = _prefixed("fused_mix", self.fused_mix)
        else:
            out = _prefixed("actnorm", self.actnorm) + _prefixed("mix", self.mix)
        return out + _prefixed("coupling", self.coupling)


class FlowModel(Layer):
    """The teacher: bijection between waveform x and latent z given cond c."""

    def __init__(self, cfg: FlowConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(np.random.Philox(key=seed))
        self.step_channels, self.emit_after, self.z_pieces = emission_schedule(cfg)
        self.steps = [FlowStep(ch, cfg.cond_features, cfg, rng, dtype=dtype)
                      for ch in self.step_channels]

    @property
    def latent_channels(self) -> int:
        return self.cfg.squeeze

    @property
    def initialized(self) -> bool:
        return all(s.is_fused or s.actnorm.initialized for s in self.steps)

    def _prepare_cond(self, c: Tensor) -> Tensor:
        factor = self.cfg.frame_hop // self.cfg.squeeze
        return T.repeat_time(c, factor)

    def _validate_shapes(self, tlen: int, c: Tensor) -> None:
        g = self.cfg.squeeze
        if tlen % g != 0:
            raise T.ShapeError(f"flow: time length {tlen} not divisible by squeeze {g}")
        if tlen % self.cfg.frame_hop != 0:
            raise T.ShapeError(f"flow: time length {tlen} not divisible by frame hop "
                               f"{self.cfg.frame_hop}")
        frames = tlen // self.cfg.frame_hop
        if c.data.ndim != 3 or c.shape[1] != self.cfg.cond_features or c.shape[2] != frames:
            raise T.ShapeError(f"flow: conditioning shape {c.shape} does not match "
                               f"({self.cfg.cond_features}, {frames}) for length {tlen}")

    def forward(self, x: Tensor, c: Tensor, init_actnorm: bool = False,
                init_stats: list | None = None) -> tuple[Tensor, Tensor]:
        """x (B, 1, T), c (B, F, T/hop) -> (z (B, squeeze, T/squeeze), logdet (B,))."""
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise T.ShapeError(f"flow: expected x of shape (B, 1, T), got {x.shape}")
        self._validate_shapes(x.shape[2], c)
        cond = self._prepare_cond(c)
        h = T.squeeze_time(x, self.cfg.squeeze)
        logdet = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
        pieces = []
        for k, step in enumerate(self.steps, start=1):
            h, ld = step.forward(h, cond, init_actnorm=init_actnorm, init_stats=init_stats)
            logdet = T.add(logdet, ld)
            if k in self.emit_after:
                piece, h = T.split_channels(h, (self.cfg.early_size,
                                                h.shape[1] - self.cfg.early_size))
                pieces.append(piece)
        pieces.append(h)
        return T.concat(pieces), logdet

    def sample(self, z: Tensor, c: Tensor) -> Tensor:
        """Deterministic inverse pass: latent z plus conditioning -> waveform."""
        g = self.cfg.squeeze
        if z.data.ndim != 3 or z.shape[1] != g:
            raise T.ShapeError(f"flow: expected z of shape (B, {g}, T/{g}), got {z.shape}")
        self._validate_shapes(z.shape[2] * g, c)
        cond = self._prepare_cond(c)
        pieces = T.split_channels(z, tuple(self.z_pieces))
        h = pieces[-1]
        pi = len(self.emit_after) - 1
        for k in range(len(self.steps), 0, -1):
            if pi >= 0 and self.emit_after[pi] == k:
                h = T.concat((pieces[pi], h))
                pi -= 1
            h = self.steps[k - 1].inverse(h, cond)
        return T.unsqueeze_time(h, g)

    def nll(self, x: Tensor, c: Tensor) -> Tensor:
        """Mean per-dimension negative log-likelihood under z ~ N(0, sigma^2 I)."""
        z, logdet = self.forward(x, c)
        dim = z.shape[1] * z.shape[2]
        sigma = self.cfg.sigma
        z2 = T.tensor_sum(T.square(z), axis=(1, 2))
        const = dim * (0.5 * LOG_2PI + math.log(sigma))
        per_example = T.sub(T.add(T.mul(z2, 1.0 / (2.0 * sigma * sigma)), const), logdet)
        return T.mul(T.mean(per_example), 1.0 / dim)

    def draw_latent(self, rng: np.random.Generator, batch: int, tlen: int,
                    dtype=np.float32) -> Tensor:
        g = self.cfg.squeeze
        if tlen % g != 0:
            raise T.ShapeError(f"flow: time length {tlen} not divisible by squeeze {g}")
        z = rng.normal(scale=self.cfg.sigma, size=(batch, g, tlen // g))
        return Tensor(z.astype(dtype))

    def named_params(self):
        out = []
        for i, step in enumerate(self.steps):
            out += _prefixed(f"step.{i}", step)
        return out


def actnorm_init(model: FlowModel, x: Tensor, c: Tensor) -> list:
    """Data-dependent actnorm initialization on one batch (>= 16 examples).

    Returns per-step (mean, variance) of the post-actnorm activations so the
    calibration can be verified directly.
    """
    if x.shape[0] < 16:
        raise T.TensorError(f"actnorm init needs a batch of >= 16 examples, got {x.shape[0]}")
    stats: list = []
    with T.finite_checks(True):
        model.forward(x.detach(), c.detach(), init_actnorm=True, init_stats=stats)
    return stats
