"""Training loops: teacher likelihood training, distillation, the ablation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .flow import FlowModel, actnorm_init
from .losses import LossConfig, total_distill_loss
from .optim import Adam, AdamConfig, OneCycleSchedule
from .students import StudentConfig, StudentModel, match_capacity
from .tensor import GradTape, Tensor, backward


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the model holds the last snapshot."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    crop: int = 1024
    max_lr: float = 1e-4
    warmup: int = 200
    floor_frac: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    snapshot_every: int = 500
    val_every: int = 100
    val_batch: int = 16

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch < 1 or self.crop < 1:
            raise ValueError("steps must be >= 0, batch and crop >= 1")
        if self.warmup > max(self.steps, 1):
            raise ValueError("warmup cannot exceed the step budget")
        return self


@dataclass
class TrainRun:
    seed: int
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    diverged_at: int | None = None

    def to_csv(self, path: str) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join("" if v is None else repr(float(v)) for v in row))
        from .report import atomic_write_text
        atomic_write_text(path, "\n".join(lines) + "\n")

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


def param_checksum(model) -> str:
    """Order-stable digest of all parameter buffers."""
    h = hashlib.sha256()
    for name, p in model.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def sample_batch(ds: Dataset, rng: np.random.Generator, batch: int,
                 crop: int) -> tuple[Tensor, Tensor]:
    """Random examples with random frame-aligned crops of `crop` samples."""
    hop = ds.params.hop
    if crop % hop != 0 or crop > ds.params.length:
        raise ValueError(f"crop {crop} must be a multiple of hop {hop} and fit the "
                         f"example length {ds.params.length}")
    crop_frames = crop // hop
    idx = rng.integers(0, len(ds), size=batch)
    frame_off = rng.integers(0, ds.params.frames - crop_frames + 1, size=batch)
    x = np.empty((batch, 1, crop), dtype=np.float32)
    c = np.empty((batch, 2, crop_frames), dtype=np.float32)
    for i, (j, fo) in enumerate(zip(idx, frame_off)):
        so = fo * hop
        x[i, 0] = ds.x[j, so:so + crop]
        c[i] = ds.c[j, :, fo:fo + crop_frames]
    return Tensor(x), Tensor(c)


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_params()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_params():
        p.data = snap[name].copy()


def train_teacher(model: FlowModel, ds: Dataset, cfg: TrainConfig,
                  stop_fn=None) -> TrainRun:
    """Likelihood training. Logged columns: step, lr, nll per dimension.

    Deterministic for a fixed seed; aborts on non-finite loss, restoring the
    most recent snapshot into the model.
    """
    cfg.validate()
    rng = _rng_stream(cfg.seed, 0)
    run = TrainRun(seed=cfg.seed, columns=["step", "lr", "nll_per_dim"])
    if not model.initialized:
        x0, c0 = sample_batch(ds, rng, max(cfg.batch, 16), cfg.crop)
        actnorm_init(model, x0, c0)
    if cfg.steps == 0:
        return run
    sched = OneCycleSchedule(cfg.max_lr, cfg.warmup, cfg.steps,
                             cfg.floor_frac).validate()
    adam = Adam(model.named_params(),
                AdamConfig(lr=cfg.max_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps))
    snap = _snapshot(model)
    for step in range(1, cfg.steps + 1):
        x, c = sample_batch(ds, rng, cfg.batch, cfg.crop)
        lr = sched.lr(step)
        try:
            with GradTape() as tape:
                loss = model.nll(x, c)
            value = loss.item()
            if not np.isfinite(value):
                raise T.NonFiniteError("nll is non-finite")
            backward(loss, tape)
            adam.step(lr=lr)
        except T.NonFiniteError as e:
            _restore(model, snap)
            run.diverged_at = step
            raise TrainingDiverged(step, str(e))
        finally:
            adam.zero_grads()
        run.rows.append([step, lr, value])
        if step % cfg.snapshot_every == 0:
            snap = _snapshot(model)
        if stop_fn is not None and stop_fn(run):
            break
    return run


def _check_student_compat(teacher: FlowModel, student: StudentModel) -> None:
    t, s = teacher.cfg, student.teacher_cfg
    mismatches = [k for k in ("squeeze", "cond_features", "frame_hop")
                  if getattr(t, k) != getattr(s, k)]
    if mismatches:
        raise T.ShapeError(f"teacher/student geometry mismatch on {mismatches}: "
                           f"teacher {t} vs student {s}")


def distill(teacher: FlowModel, student: StudentModel, train_ds: Dataset,
            val_ds: Dataset, loss_cfg: LossConfig, cfg: TrainConfig,
            stop_fn=None) -> TrainRun:
    """Teacher -> student regression on (z, c) pairs; teacher stays frozen.

    Per batch: c comes from the dataset, z is drawn fresh from N(0, sigma^2),
    the teacher synthesizes the target, and the student fits it under the
    combined L1 + alpha * multi-resolution-STFT objective. Validation uses a
    fixed (z, c) set drawn once from the held-out data.
    """
    cfg.validate()
    loss_cfg.validate()
    _check_student_compat(teacher, student)
    max_win = max(r.win_size for r in loss_cfg.resolutions)
    if cfg.crop < max_win:
        raise ValueError(f"crop {cfg.crop} shorter than the largest STFT window {max_win}")
    teacher.freeze_()
    before = param_checksum(teacher)

    data_rng = _rng_stream(cfg.seed, 0)
    z_rng = _rng_stream(cfg.seed, 1)
    val_rng = _rng_stream(cfg.seed, 2)

    run = TrainRun(seed=cfg.seed,
                   columns=["step", "lr", "loss_total", "loss_l1", "loss_stft", "val_total"])
    if cfg.steps == 0:
        return run
    sched = OneCycleSchedule(cfg.max_lr, cfg.warmup, cfg.steps,
                             cfg.floor_frac).validate()
    adam = Adam(student.named_params(),
                AdamConfig(lr=cfg.max_lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps))

    _, val_c = sample_batch(val_ds, val_rng, cfg.val_batch, cfg.crop)
    val_z = teacher.draw_latent(val_rng, cfg.val_batch, cfg.crop)
    val_xt = teacher.sample(val_z, val_c).detach()

    def validation_loss() -> float:
        xs = student.forward(val_z, val_c)
        total, _, _ = total_distill_loss(val_xt, xs, loss_cfg)
        return total.item()

    snap = _snapshot(student)
    for step in range(1, cfg.steps + 1):
        _, c = sample_batch(train_ds, data_rng, cfg.batch, cfg.crop)
        z = teacher.draw_latent(z_rng, cfg.batch, cfg.crop)
        lr = sched.lr(step)
        try:
            x_t = teacher.sample(z, c).detach()
            with GradTape() as tape:
                x_s = student.forward(z, c)
                total, rec, feat = total_distill_loss(x_t, x_s, loss_cfg)
            value = total.item()
            if not np.isfinite(value):
                raise T.NonFiniteError("distillation loss is non-finite")
            backward(total, tape)
            adam.step(lr=lr)
        except T.NonFiniteError as e:
            _restore(student, snap)
            run.diverged_at = step
            raise TrainingDiverged(step, str(e))
        finally:
            adam.zero_grads()
        val = validation_loss() if (step % cfg.val_every == 0 or step == cfg.steps) else None
        run.rows.append([step, lr, value, rec.item(), feat.item(), val])
        if step % cfg.snapshot_every == 0:
            snap = _snapshot(student)
        if stop_fn is not None and stop_fn(run):
            break

    after = param_checksum(teacher)
    if before != after:
        raise T.TensorError("teacher parameters changed during distillation")
    return run


@dataclass
class AblationEntry:
    variant: str
    n_params: int
    final_val_loss: float
    run: TrainRun


def run_ablation(teacher: FlowModel, train_ds: Dataset, val_ds: Dataset,
                 reference: StudentConfig, loss_cfg: LossConfig, cfg: TrainConfig,
                 tolerance: float = 0.05,
                 student_seed: int = 1) -> dict[str, AblationEntry]:
    """Train the three student designs under identical budgets and seeds.

    Students are built at matched parameter counts (within `tolerance`); each
    sees the same data order and the same latent draws.
    """
    students = match_capacity(teacher.cfg, reference, tolerance=tolerance,
                              seed=student_seed)
    out: dict[str, AblationEntry] = {}
    for variant in ("flow", "wide_flow", "feedforward"):
        student = students[variant]
        run = distill(teacher, student, train_ds, val_ds, loss_cfg, cfg)
        vals = [v for v in run.column("val_total") if v is not None]
        out[variant] = AblationEntry(
            variant=variant,
            n_params=student.n_params(),
            final_val_loss=vals[-1] if vals else float("nan"),
            run=run,
        )
        out[variant].student = student  # type: ignore[attr-defined]
    return out
