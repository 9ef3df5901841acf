"""Student zoo: three designs mapping (z, c) -> waveform without flow limits.

a) "flow": a genuine (smaller) flow run in the inverse direction. Inner
   width is pinned to the latent channel count by invertibility.
b) "wide_flow": the same step anatomy widened to an arbitrary inner width;
   the channel-mixing 1x1 convs become free (non-invertible) matrices.
c) "feedforward": stacked non-causal gated residual conv blocks.

All variants consume the entire latent z at the entry conv and read the
conditioning per layer; nothing is sampled inside the network.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import FlowConfig, FlowModel
from .layers import AffineCoupling, Conv1d, GatedResidualNet, Layer, _prefixed, parameter
from .tensor import Tensor

VARIANTS = ("flow", "wide_flow", "feedforward")


@dataclass
class StudentConfig:
    variant: str = "feedforward"
    blocks: int = 2               # flow steps for (a)/(b), WaveNet blocks for (c)
    inner_width: int = 64         # inner channel width; (a) requires == latent channels
    wn_width: int = 64            # conditioner width inside (a)/(b) couplings
    wn_layers: int = 4
    wn_kernel: int = 3

    def validate(self) -> "StudentConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown student variant {self.variant!r}; expected one of {VARIANTS}")
        if self.blocks < 1 or self.inner_width < 1:
            raise ValueError("blocks and inner_width must be >= 1")
        return self


class ChannelAffine(Layer):
    """Per-channel y = s * x + b; the student-side analog of actnorm."""

    def __init__(self, channels: int, dtype=np.float32):
        self.s = parameter(np.ones((channels, 1)), "s", dtype=dtype)
        self.b = parameter(np.zeros((channels, 1)), "b", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(x, self.s), self.b)

    __call__ = forward

    def named_params(self):
        return [("s", self.s), ("b", self.b)]


class Mixing1x1(Layer):
    """Free channel-mixing matrix; no invertibility or log-det bookkeeping."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        self.weight = parameter(q, "weight", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(self.weight, x)

    __call__ = forward

    def named_params(self):
        return [("weight", self.weight)]


class WideFlowStep(Layer):
    """Inverse-shaped flow step at a free inner width.

    Applies the coupling in its inverse form, then a free 1x1 mix, then a
    per-channel affine: step-for-step the anatomy of a flow inverse pass,
    minus the invertibility constraints.
    """

    def __init__(self, channels: int, cond_ch: int, cfg: StudentConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.coupling = AffineCoupling(channels, cond_ch, width=cfg.wn_width,
                                       layers=cfg.wn_layers, kernel=cfg.wn_kernel,
                                       weight_norm=False, rng=rng, dtype=dtype)
        self.mix = Mixing1x1(channels, rng, dtype=dtype)
        self.affine = ChannelAffine(channels, dtype=dtype)

    def forward(self, h: Tensor, cond: Tensor) -> Tensor:
        h = self.coupling.inverse(h, cond)
        h = self.mix(h)
        return self.affine(h)

    def named_params(self):
        return (_prefixed("coupling", self.coupling) + _prefixed("mix", self.mix)
                + _prefixed("affine", self.affine))


class StudentModel(Layer):
    """One of the three student designs, shaped to a given teacher geometry."""

    def __init__(self, teacher_cfg: FlowConfig, cfg: StudentConfig, seed: int = 0,
                 dtype=np.float32):
        cfg.validate()
        teacher_cfg.validate()
        self.cfg = cfg
        self.teacher_cfg = teacher_cfg
        self.latent_channels = teacher_cfg.squeeze
        rng = np.random.default_rng(np.random.Philox(key=seed))
        cz = self.latent_channels
        cond_ch = teacher_cfg.cond_features
        if cfg.variant == "flow":
            if cfg.inner_width != cz:
                raise ValueError(
                    f"flow student inner width must equal the latent channel count "
                    f"{cz} (invertibility bound), got {cfg.inner_width}"
                )
            flow_cfg = FlowConfig(
                squeeze=teacher_cfg.squeeze, steps=cfg.blocks,
                sigma=teacher_cfg.sigma, cond_features=cond_ch,
                frame_hop=teacher_cfg.frame_hop, wn_width=cfg.wn_width,
                wn_layers=cfg.wn_layers, wn_kernel=cfg.wn_kernel, weight_norm=False,
            )
            self.body = FlowModel(flow_cfg, seed=seed, dtype=dtype)
            for step in self.body.steps:
                step.actnorm.initialized = True  # trained by regression, not likelihood
            self.entry = None
            self.exit = None
        elif cfg.variant == "wide_flow":
            self.entry = Conv1d(cz, cfg.inner_width, 1, rng=rng, dtype=dtype)
            self.body = [WideFlowStep(cfg.inner_width, cond_ch, cfg, rng, dtype=dtype)
                         for _ in range(cfg.blocks)]
            self.exit = Conv1d(cfg.inner_width, cz, 1, zero_init=True, dtype=dtype)
        else:
            self.entry = Conv1d(cz, cfg.inner_width, 1, rng=rng, dtype=dtype)
            self.body = [GatedResidualNet(cfg.inner_width, cond_ch, cfg.inner_width,
                                          width=cfg.inner_width, layers=cfg.wn_layers,
                                          kernel=cfg.wn_kernel, weight_norm=False,
                                          zero_exit=False, rng=rng, dtype=dtype)
                         for _ in range(cfg.blocks)]
            self.exit = Conv1d(cfg.inner_width, cz, 1, zero_init=True, dtype=dtype)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def _check_inputs(self, z: Tensor, c: Tensor) -> None:
        g = self.latent_channels
        if z.data.ndim != 3 or z.shape[1] != g:
            raise T.ShapeError(f"student: expected z of shape (B, {g}, T/{g}), got {z.shape}")
        frames = z.shape[2] * g // self.teacher_cfg.frame_hop
        if c.data.ndim != 3 or c.shape[1] != self.teacher_cfg.cond_features \
                or c.shape[2] != frames:
            raise T.ShapeError(f"student: conditioning shape {c.shape} does not match "
                               f"({self.teacher_cfg.cond_features}, {frames})")

    def forward(self, z: Tensor, c: Tensor) -> Tensor:
        """(B, Cz, T/g) latent + (B, F, T/hop) conditioning -> (B, 1, T)."""
        self._check_inputs(z, c)
        if self.variant == "flow":
            return self.body.sample(z, c)
        factor = self.teacher_cfg.frame_hop // self.teacher_cfg.squeeze
        cond = T.repeat_time(c, factor)
        h = self.entry(z)
        for block in self.body:
            h = block.forward(h, cond)
        h = self.exit(h)
        return T.unsqueeze_time(h, self.teacher_cfg.squeeze)

    __call__ = forward

    def named_params(self):
        if self.variant == "flow":
            return _prefixed("body", self.body)
        out = _prefixed("entry", self.entry)
        for i, block in enumerate(self.body):
            out += _prefixed(f"block.{i}", block)
        out += _prefixed("exit", self.exit)
        return out


def build_student(variant: str, teacher_cfg: FlowConfig, cfg: StudentConfig,
                  seed: int = 0, dtype=np.float32) -> StudentModel:
    cfg = StudentConfig(**{**cfg.__dict__, "variant": variant})
    return StudentModel(teacher_cfg, cfg, seed=seed, dtype=dtype)


def clone_flow_student(teacher: FlowModel, seed: int = 0) -> StudentModel:
    """Variant (a) initialized to reproduce the teacher's inverse pass exactly."""
    if teacher.cfg.early_every > 0:
        raise ValueError("clone_flow_student supports teachers without early outputs")
    cfg = StudentConfig(variant="flow", blocks=teacher.cfg.steps,
                        inner_width=teacher.cfg.squeeze, wn_width=teacher.cfg.wn_width,
                        wn_layers=teacher.cfg.wn_layers, wn_kernel=teacher.cfg.wn_kernel)
    student = StudentModel(teacher.cfg, cfg, seed=seed)
    student.body = copy.deepcopy(teacher)
    student.body.freeze_(True)
    return student


def _conv_count(in_ch: int, out_ch: int, kernel: int = 1, bias: bool = True) -> int:
    return in_ch * out_ch * kernel + (out_ch if bias else 0)


def _gated_net_count(in_ch: int, cond_ch: int, out_ch: int, width: int,
                     layers: int, kernel: int) -> int:
    n = _conv_count(in_ch, width)
    for l in range(layers):
        n += _conv_count(width, 2 * width, kernel)
        n += _conv_count(cond_ch, 2 * width)
        n += _conv_count(width, 2 * width if l < layers - 1 else width)
    return n + _conv_count(width, out_ch)


def count_student_params(teacher_cfg: FlowConfig, cfg: StudentConfig) -> int:
    """Closed-form parameter count, mirroring the constructors exactly."""
    cz = teacher_cfg.squeeze
    f = teacher_cfg.cond_features
    if cfg.variant == "feedforward":
        w = cfg.inner_width
        body = cfg.blocks * _gated_net_count(w, f, w, w, cfg.wn_layers, cfg.wn_kernel)
        return _conv_count(cz, w) + body + _conv_count(w, cz)
    ch = cz if cfg.variant == "flow" else cfg.inner_width
    half_a = (ch + 1) // 2
    half_b = ch - half_a
    coupling = _gated_net_count(half_a, f, 2 * half_b, cfg.wn_width,
                                cfg.wn_layers, cfg.wn_kernel)
    step = coupling + ch * ch + 2 * ch  # mix matrix + per-channel affine
    body = cfg.blocks * step
    if cfg.variant == "flow":
        return body
    return _conv_count(cz, ch) + body + _conv_count(ch, cz)


def match_capacity(teacher_cfg: FlowConfig, reference: StudentConfig,
                   tolerance: float = 0.05, seed: int = 0) -> dict[str, StudentModel]:
    """Build all three variants with parameter counts within +-tolerance.

    The feed-forward config is the reference; the conditioner widths of the
    flow and wide-flow variants are searched to match its parameter count.
    """
    reference = StudentConfig(**{**reference.__dict__, "variant": "feedforward"})
    target = count_student_params(teacher_cfg, reference)

    def matched_config(variant: str, inner_width: int) -> StudentConfig:
        def cfg_for(width: int) -> StudentConfig:
            return StudentConfig(variant=variant, blocks=reference.blocks,
                                 inner_width=inner_width, wn_width=width,
                                 wn_layers=reference.wn_layers,
                                 wn_kernel=reference.wn_kernel)

        best, best_err = None, None
        for width in range(2, 4096):
            n = count_student_params(teacher_cfg, cfg_for(width))
            err = abs(n - target)
            if best is None or err < best_err:
                best, best_err = cfg_for(width), err
            if n > target:
                break
        return best

    models = {"feedforward": StudentModel(teacher_cfg, reference, seed=seed)}
    models["flow"] = StudentModel(
        teacher_cfg, matched_config("flow", teacher_cfg.squeeze), seed=seed)
    models["wide_flow"] = StudentModel(
        teacher_cfg, matched_config("wide_flow", reference.inner_width), seed=seed)
    counts = {name: m.n_params() for name, m in models.items()}
    for name, n in counts.items():
        if abs(n - target) > tolerance * target:
            raise ValueError(
                f"capacity matching failed: counts {counts} not within "
                f"{tolerance:.0%} of the reference {target}"
            )
    return models
