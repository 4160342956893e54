"""Adversarial training: non-saturating logistic losses, lazy R1, Adam, EMA,
deterministic data/latent draws, and binary checkpoints.

One train_step runs one discriminator update (with the gradient penalty folded
in every r1_interval steps, scaled by the interval to preserve its
expectation) followed by one generator update with probabilistic style mixing,
then refreshes the EMA copy of the generator weights. All randomness flows
through one generator whose 32-byte state lives in the checkpoint, so
(seed, config, data) fixes the whole trajectory bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Tensor
from .network import Discriminator, Generator, GeneratorConfig, init_params
from .rng import Xoshiro256StarStar, mix64


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 16
    r1_gamma: float = 10.0
    r1_interval: int = 16
    ema_decay: float = 0.999
    style_mix_prob: float = 0.9
    total_steps: int = 5000
    seed: int = 0

    def validate(self) -> None:
        for name in ("learning_rate", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.r1_interval < 1:
            raise ValueError(f"r1_interval must be >= 1, got {self.r1_interval}")
        if self.r1_gamma < 0:
            raise ValueError(f"r1_gamma must be >= 0, got {self.r1_gamma}")
        for name in ("beta1", "beta2", "ema_decay", "style_mix_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the diagnostic record."""

    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")
        self.record = record


# -- losses --------------------------------------------------------------------


def g_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss: mean softplus(-D(G(z)))."""
    return eng.tmean(eng.softplus(-fake_logits))


def d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Logistic discriminator loss: mean softplus(-real) + mean softplus(fake)."""
    return eng.tmean(eng.softplus(-real_logits)) + eng.tmean(eng.softplus(fake_logits))


def r1_penalty(disc: Discriminator, real_images: np.ndarray, r1_gamma: float) -> Tensor:
    """(r1_gamma / 2) * batch-mean squared norm of d logit / d pixels.

    Built with create_graph so the result is differentiable through the
    discriminator parameters (the gradient of a gradient)."""
    x = eng.param(np.ascontiguousarray(real_images))
    logits = disc.forward(x)
    grads = eng.backward(eng.tsum(logits), wrt=[x], create_graph=True)
    g = grads[x]
    n = real_images.shape[0]
    return eng.tsum(g * g) * (0.5 * r1_gamma / n)


# -- optimizer -----------------------------------------------------------------


def adam_step(param, grad, m, v, t, config: TrainConfig):
    """One bias-corrected Adam update; pure function over numpy arrays."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    if t < 1:
        raise ValueError(f"adam step count must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_param = param - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new_param.astype(param.dtype), m.astype(param.dtype), v.astype(param.dtype)


class Adam:
    """In-place Adam over a named parameter dict; moments keyed by name."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = dict(params)
        self.config = config
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def apply(self, grads: dict[Tensor, Tensor], t: int) -> float:
        """Update parameters whose gradient is present; returns the global
        gradient norm."""
        sq = 0.0
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            gd = g.data
            sq += float(np.sum(gd.astype(np.float64) ** 2))
            p.data[...], self.m[name], self.v[name] = adam_step(
                p.data, gd, self.m[name], self.v[name], t, self.config
            )
        return math.sqrt(sq)


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor], decay: float) -> dict:
    """ema <- decay * ema + (1 - decay) * params, elementwise."""
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.data.shape:
            raise ValueError(f"ema shape mismatch for {name}: {e.shape} vs {p.data.shape}")
        e *= decay
        e += (1.0 - decay) * p.data
    return ema


# -- train state and step --------------------------------------------------------


@dataclass
class TrainState:
    gen: Generator
    disc: Discriminator
    config: TrainConfig
    opt_g: Adam
    opt_d: Adam
    ema: dict[str, np.ndarray]
    step: int
    rng: Xoshiro256StarStar

    def ema_generator(self) -> Generator:
        """A generator wired to the EMA weights (copies the averaged data in)."""
        gen = Generator(self.gen.config, Xoshiro256StarStar(0), dtype=self.gen.dtype)
        named = gen.named_params()
        for name, arr in self.ema.items():
            named[name].data[...] = arr
        return gen


def init_train_state(gen_config: GeneratorConfig, config: TrainConfig) -> TrainState:
    config.validate()
    gen, disc = init_params(gen_config, config.seed)
    ema = {n: t.data.copy() for n, t in gen.named_params().items()}
    return TrainState(
        gen=gen,
        disc=disc,
        config=config,
        opt_g=Adam(gen.named_params(), config),
        opt_d=Adam(disc.named_params(), config),
        ema=ema,
        step=0,
        rng=Xoshiro256StarStar(mix64(config.seed ^ 0x545249)),
    )


def train_step(state: TrainState, images: np.ndarray) -> dict:
    """One D update, one G update, one EMA blend; returns the log record.

    Draw order from state.rng (fixed for reproducibility): D-step latents,
    real-batch indices, G-step latents, style-mix coin (+ second latents and
    crossover level when it fires).
    """
    cfg = state.config
    gen, disc = state.gen, state.disc
    n = cfg.batch_size
    zdim = gen.config.k * gen.config.latent_dim
    dtype = gen.dtype
    t = state.step + 1

    # ---- discriminator update ----
    z_d = state.rng.normals((n, zdim), dtype=dtype)
    idx = [state.rng.randint(images.shape[0]) for _ in range(n)]
    real = np.ascontiguousarray(images[idx])
    with eng.no_grad():
        fake_d, _ = gen.forward(Tensor(z_d))
    real_logits = disc.forward(eng.tensor(real))
    fake_logits = disc.forward(fake_d.detach())
    loss_d = d_loss(real_logits, fake_logits)
    r1_value = 0.0
    if cfg.r1_gamma > 0.0 and state.step % cfg.r1_interval == 0:
        penalty = r1_penalty(disc, real, cfg.r1_gamma) * float(cfg.r1_interval)
        r1_value = float(penalty.data) / cfg.r1_interval
        loss_d_total = loss_d + penalty
    else:
        loss_d_total = loss_d
    d_params = list(state.opt_d.params.values())
    d_grads = eng.backward(loss_d_total, wrt=d_params)
    d_grad_norm = state.opt_d.apply(d_grads, t)

    # ---- generator update ----
    z_g = state.rng.normals((n, zdim), dtype=dtype)
    levels = gen.config.num_levels
    if state.rng.uniform() < cfg.style_mix_prob and levels > 1:
        z_b = state.rng.normals((n, zdim), dtype=dtype)
        crossover = 1 + state.rng.randint(levels - 1)
        per_level = gen.style_mix(Tensor(z_g), Tensor(z_b), crossover)
    else:
        mapped = gen.mapping_forward(Tensor(z_g))
        per_level = [mapped] * levels
    fake_g, _ = gen.synthesize(per_level)
    loss_g = g_loss(disc.forward(fake_g))
    g_params = list(state.opt_g.params.values())
    g_grads = eng.backward(loss_g, wrt=g_params)
    g_grad_norm = state.opt_g.apply(g_grads, t)

    ema_update(state.ema, state.opt_g.params, cfg.ema_decay)
    state.step += 1

    record = {
        "step": state.step,
        "g_loss": float(loss_g.data),
        "d_loss": float(loss_d.data),
        "r1": r1_value,
        "g_grad": g_grad_norm,
        "d_grad": d_grad_norm,
    }
    for key in ("g_loss", "d_loss", "r1", "g_grad", "d_grad"):
        if not math.isfinite(record[key]):
            raise TrainingDiverged(record)
    return record


def run_training(
    state: TrainState,
    images: np.ndarray,
    total_steps: int,
    log_path: str | None = None,
    checkpoint_dir: str | None = None,
    checkpoint_interval: int = 0,
    log_every: int = 1,
) -> list[dict]:
    """Drive train_step to total_steps, appending JSONL records and writing
    periodic checkpoints (plus one at the end)."""
    records = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < total_steps:
            try:
                record = train_step(state, images)
            except TrainingDiverged as exc:
                if log_f is not None:
                    log_f.write(json.dumps({**exc.record, "aborted": True}) + "\n")
                    log_f.flush()
                raise
            records.append(record)
            if log_f is not None and (
                state.step % log_every == 0 or state.step == total_steps
            ):
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
            if (
                checkpoint_dir
                and checkpoint_interval
                and state.step % checkpoint_interval == 0
                and state.step < total_steps
            ):
                checkpoint_save(state, os.path.join(checkpoint_dir, f"step{state.step}.ckpt"))
        if checkpoint_dir:
            checkpoint_save(state, os.path.join(checkpoint_dir, f"step{state.step}.ckpt"))
    finally:
        if log_f is not None:
            log_f.close()
    return records


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"GNFR"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, t in state.gen.named_params().items():
        out[name] = t.data
    for name, t in state.disc.named_params().items():
        out[name] = t.data
    for opt, tag in ((state.opt_g, "opt_g"), (state.opt_d, "opt_d")):
        for name in opt.params:
            out[f"{tag}.m.{name}"] = opt.m[name]
            out[f"{tag}.v.{name}"] = opt.v[name]
    for name, arr in state.ema.items():
        out[f"ema.{name}"] = arr
    return out


def checkpoint_save(state: TrainState, path: str) -> None:
    """Write every parameter, Adam moment, EMA copy, the step counter, and
    the RNG state in the little-endian binary format. Atomic via rename."""
    tensors = _state_tensors(state)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint tensors must be float32, {name} is {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", state.step))
    parts.append(state.rng.state_bytes())
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def checkpoint_read(path: str) -> tuple[dict[str, np.ndarray], int, bytes]:
    """Parse a checkpoint file into (tensors, step, rng state bytes).

    Malformed files raise CheckpointFormatError naming the byte offset."""
    with open(path, "rb") as f:
        buf = f.read()
    off = 0

    def take(count: int, what: str) -> bytes:
        nonlocal off
        if off + count > len(buf):
            raise CheckpointFormatError(
                f"{path}: truncated reading {what} at offset {off} "
                f"(need {count} bytes, have {len(buf) - off})"
            )
        chunk = buf[off : off + count]
        off += count
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 4")
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = struct.unpack("<I", take(4, f"name length of tensor {i}"))[0]
        name = take(name_len, f"name of tensor {i}").decode("utf-8")
        dtype_off = off
        dtype_code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name}"))
        if dtype_code != 0:
            raise CheckpointFormatError(
                f"{path}: unknown dtype code {dtype_code} at offset {dtype_off}"
            )
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    step = struct.unpack("<Q", take(8, "step counter"))[0]
    rng_state = take(32, "rng state")
    if off != len(buf):
        raise CheckpointFormatError(
            f"{path}: {len(buf) - off} unexpected trailing bytes at offset {off}"
        )
    return tensors, step, rng_state


def checkpoint_load(path: str, gen_config: GeneratorConfig, config: TrainConfig) -> TrainState:
    """Rebuild a full TrainState from a checkpoint (lossless resume)."""
    tensors, step, rng_state = checkpoint_read(path)
    state = init_train_state(gen_config, config)
    expected = _state_tensors(state)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointFormatError(
            f"{path}: tensor names do not match the model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, arr in expected.items():
        if arr.shape != tensors[name].shape:
            raise CheckpointFormatError(
                f"{path}: shape mismatch for {name}: "
                f"file {tensors[name].shape} vs model {arr.shape}"
            )
        arr[...] = tensors[name]
    state.step = step
    state.rng = Xoshiro256StarStar.from_state_bytes(rng_state)
    return state
