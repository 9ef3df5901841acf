"""Deterministic synthetic conditional-waveform dataset.

Each example is a harmonic tone with piecewise-smooth per-frame controls:
fundamental frequency f0 (cycles/sample) and amplitude envelope a. The
waveform is a(t) * sum_p w_p sin(2*pi*p*phi(t)) + noise, with phi the
running sum of the per-sample f0. Conditioning c carries (log f0, a) per
frame. Generation is counter-based (Philox keyed by the example seed), so
example i never depends on example i-1 and any subset can be produced in
parallel.

Dataset file layout ("NFDS"):
    magic 4s | version u32 | params-JSON length u32 | params JSON (utf-8)
    | example count u64 | records.
Record: seed u64 | x as length*f32 | c as 2*frames*f32, all little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"NFDS"
VERSION = 1


@dataclass(frozen=True)
class SynthParams:
    length: int = 4096
    hop: int = 64
    f0_min: float = 0.004
    f0_max: float = 0.05
    amp_min: float = 0.05
    amp_max: float = 0.5
    partials: tuple[float, ...] = (1.0, 0.5, 0.25)
    noise_floor: float = 0.003
    control_anchors: int = 8

    def validate(self) -> "SynthParams":
        if self.length <= 0 or self.hop <= 0 or self.length % self.hop != 0:
            raise ValueError(f"length {self.length} must be a positive multiple of hop {self.hop}")
        if not (0.0 < self.f0_min < self.f0_max < 0.5):
            raise ValueError("need 0 < f0_min < f0_max < 0.5 cycles/sample")
        if not (0.0 <= self.amp_min < self.amp_max):
            raise ValueError("need 0 <= amp_min < amp_max")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be nonnegative")
        if len(self.partials) < 1 or any(w < 0 for w in self.partials):
            raise ValueError("partials must be nonempty with nonnegative weights")
        peak = self.amp_max * sum(self.partials) + self.noise_floor
        if peak > 1.0:
            raise ValueError(f"configured peak {peak:.3f} exceeds 1; shrink amp or noise")
        if self.f0_max * len(self.partials) >= 0.5:
            raise ValueError("highest partial would alias above half the sample rate")
        if self.control_anchors < 2:
            raise ValueError("need at least 2 control anchors")
        return self

    @property
    def frames(self) -> int:
        return self.length // self.hop

    @property
    def rms_gain(self) -> float:
        """RMS of the unit-amplitude harmonic stack (amplitude estimator scale)."""
        return float(np.sqrt(sum(w * w for w in self.partials) / 2.0))


@dataclass
class Example:
    x: np.ndarray       # (length,) float32 in [-1, 1]
    c: np.ndarray       # (2, frames) float32: log f0, amplitude
    seed: int


def _smooth_controls(anchors: np.ndarray, frames: int) -> np.ndarray:
    """Cosine-interpolate anchor values onto the frame grid."""
    n = anchors.shape[0]
    pos = np.linspace(0.0, n - 1.0, frames)
    i0 = np.minimum(pos.astype(np.int64), n - 2)
    frac = pos - i0
    w = 0.5 - 0.5 * np.cos(np.pi * frac)
    return anchors[i0] * (1.0 - w) + anchors[i0 + 1] * w


def gen_example(seed: int, params: SynthParams) -> Example:
    params.validate()
    rng = np.random.Generator(np.random.Philox(key=seed))
    frames = params.frames
    log_f0 = _smooth_controls(
        rng.uniform(np.log(params.f0_min), np.log(params.f0_max), size=params.control_anchors),
        frames,
    )
    amp = _smooth_controls(
        rng.uniform(params.amp_min, params.amp_max, size=params.control_anchors),
        frames,
    )
    f0_samp = np.repeat(np.exp(log_f0), params.hop)
    # amplitude interpolated to sample rate for a click-free envelope
    centers = (np.arange(frames) + 0.5) * params.hop
    amp_samp = np.interp(np.arange(params.length), centers, amp)
    phase = rng.uniform(0.0, 1.0) + np.cumsum(f0_samp)
    wave = np.zeros(params.length)
    for p, weight in enumerate(params.partials, start=1):
        wave += weight * np.sin(2.0 * np.pi * p * phase)
    x = amp_samp * wave
    if params.noise_floor > 0:
        x = x + params.noise_floor * rng.uniform(-1.0, 1.0, size=params.length)
    c = np.stack([log_f0, amp]).astype(np.float32)
    return Example(x=x.astype(np.float32), c=c, seed=int(seed))


class Dataset:
    """In-memory stack of examples with their generating parameters."""

    def __init__(self, params: SynthParams, seeds: np.ndarray,
                 x: np.ndarray, c: np.ndarray):
        self.params = params
        self.seeds = seeds
        self.x = x          # (N, length) float32
        self.c = c          # (N, 2, frames) float32

    def __len__(self) -> int:
        return self.x.shape[0]


def gen_dataset(seed_start: int, count: int, params: SynthParams) -> Dataset:
    params.validate()
    seeds = np.arange(seed_start, seed_start + count, dtype=np.uint64)
    x = np.empty((count, params.length), dtype=np.float32)
    c = np.empty((count, 2, params.frames), dtype=np.float32)
    for i, seed in enumerate(seeds):
        ex = gen_example(int(seed), params)
        x[i] = ex.x
        c[i] = ex.c
    return Dataset(params, seeds, x, c)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".nfds-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def record_size(params: SynthParams) -> int:
    return 8 + 4 * params.length + 4 * 2 * params.frames


def save_dataset(ds: Dataset, path: str) -> None:
    params_json = json.dumps(asdict(ds.params), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(params_json)),
             params_json, struct.pack("<Q", len(ds))]
    for i in range(len(ds)):
        parts.append(struct.pack("<Q", int(ds.seeds[i])))
        parts.append(ds.x[i].astype("<f4").tobytes())
        parts.append(ds.c[i].astype("<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, plen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 12
    params_dict = json.loads(raw[off:off + plen].decode("utf-8"))
    params_dict["partials"] = tuple(params_dict["partials"])
    params = SynthParams(**params_dict).validate()
    off += plen
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    rec = record_size(params)
    if len(raw) - off != count * rec:
        raise ValueError(f"{path}: payload is {len(raw) - off} bytes, "
                         f"expected {count * rec} for {count} records")
    seeds = np.empty(count, dtype=np.uint64)
    x = np.empty((count, params.length), dtype=np.float32)
    c = np.empty((count, 2, params.frames), dtype=np.float32)
    for i in range(count):
        (seeds[i],) = struct.unpack_from("<Q", raw, off)
        off += 8
        x[i] = np.frombuffer(raw, dtype="<f4", count=params.length, offset=off)
        off += 4 * params.length
        c[i] = np.frombuffer(raw, dtype="<f4", count=2 * params.frames,
                             offset=off).reshape(2, params.frames)
        off += 4 * 2 * params.frames
    return Dataset(params, seeds, x, c)
