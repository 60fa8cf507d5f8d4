"""Two-phase training: autoregressive pretraining and instruction fine-tuning.

AdamW with decoupled weight decay (applied before the moment update, norm
weights exempt), linear warmup followed by cosine decay to 10% of the peak
rate, gradient accumulation, global-norm clipping, and checkpoints written at
configured fractions of the run. Checkpoints use a small binary container:
magic "RLML", u32 version, u64 JSON-header length, JSON header with configs
and a tensor manifest, then raw little-endian float32 tensor data.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import InstructionExample, format_instruction
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import (
    ModelConfig,
    ModelParams,
    expected_shapes,
    init_model,
    loss_and_grad,
)
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenizerModel, encode

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RLML"
CHECKPOINT_VERSION = 1
FINETUNE_LR = 1e-5

DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters for both phases."""

    peak_lr: float = 2e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 0.07
    per_device_batch: int = 8
    grad_accum_steps: int = 2
    seed: int = 0
    epochs: int = 1
    checkpoint_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        problems = []
        if not 0.0 < self.warmup_ratio < 1.0:
            problems.append(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.peak_lr <= 0:
            problems.append(f"peak_lr must be positive, got {self.peak_lr}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.per_device_batch < 1:
            problems.append("per_device_batch must be >= 1")
        if self.grad_accum_steps < 1:
            problems.append("grad_accum_steps must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        fracs = tuple(self.checkpoint_fractions)
        object.__setattr__(self, "checkpoint_fractions", fracs)
        if any(not 0.0 < f <= 1.0 for f in fracs):
            problems.append("checkpoint fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            problems.append("checkpoint fractions must be strictly increasing")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            problems.append("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            problems.append("adam_eps must be positive")
        if self.grad_clip_norm <= 0:
            problems.append(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def effective_batch(self) -> int:
        return self.per_device_batch * self.grad_accum_steps


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


@dataclass(frozen=True)
class LossPoint:
    step: int
    loss: float
    lr: float


@dataclass
class LossTrace:
    points: list[LossPoint] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float) -> None:
        if self.points and step <= self.points[-1].step:
            raise ConfigError("loss trace steps must be strictly increasing")
        self.points.append(LossPoint(step, loss, lr))

    def to_csv(self) -> str:
        lines = ["step,loss,lr"]
        lines += [f"{p.step},{p.loss:.10g},{p.lr:.10g}" for p in self.points]
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tokenizer_fingerprint: str
    fraction: float
    step: int
    tokens_seen: int
    params: ModelParams
    optimizer: OptimizerState | None = None
    phase: str = "pretrain"


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    trace: LossTrace
    used_examples: int
    skipped_examples: int


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at an optimizer step: linear warmup, then cosine decay.

    Warmup covers round(warmup_ratio * total_steps) steps (at least one) and
    ends exactly at peak_lr; the cosine tail ends exactly at 0.1 * peak_lr.
    """
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, round(cfg.warmup_ratio * total_steps))
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.peak_lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


def _decays(name: str) -> bool:
    return not name.endswith("norm")


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """One AdamW update, in place on params and state.

    Decoupled weight decay scales each decayed tensor by (1 - lr * decay)
    before the moment update; normalization weights are never decayed.
    """
    if set(grads.keys()) != set(params.tensors.keys()):
        raise ConfigError("gradient names do not match parameter names")
    step_no = state.t + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"divergence at step {step_no}: non-finite gradient in '{name}'"
            )
    dtype = params.dtype
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**step_no
    bc2 = 1.0 - b2**step_no
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient '{name}' shape {g.shape} != {p.shape}")
        if cfg.weight_decay > 0.0 and lr > 0.0 and _decays(name):
            p *= dtype.type(1.0 - lr * cfg.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= dtype.type(b1)
        m += dtype.type(1.0 - b1) * g
        v *= dtype.type(b2)
        v += dtype.type(1.0 - b2) * np.square(g)
        m_hat = m / dtype.type(bc1)
        v_hat = v / dtype.type(bc2)
        p -= dtype.type(lr) * m_hat / (np.sqrt(v_hat) + dtype.type(cfg.adam_eps))
    state.t = step_no
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.square(g), dtype=np.float64))
    norm = math.sqrt(sq)
    if norm > max_norm:
        for g in grads.values():
            g *= g.dtype.type(max_norm / norm)
    return norm


def _accumulate_step(params, micro_batches, clip_norm):
    """Mean loss and clipped mean gradient over one effective batch."""
    acc: dict[str, np.ndarray] | None = None
    losses = []
    for tokens, targets in micro_batches:
        loss, grads = loss_and_grad(params, tokens, targets)
        losses.append(loss)
        if acc is None:
            acc = grads
        else:
            for name in acc:
                acc[name] += grads[name]
    n = len(losses)
    if n > 1:
        for name in acc:
            acc[name] /= acc[name].dtype.type(n)
    loss = float(np.mean(losses))
    clip_gradients(acc, clip_norm)
    return loss, acc


def _checkpoint_steps(fractions, total_steps) -> dict[int, list[float]]:
    targets: dict[int, list[float]] = {}
    for f in fractions:
        step = min(total_steps, max(1, round(f * total_steps)))
        targets.setdefault(step, []).append(f)
    return targets


def checkpoint_filename(fraction: float, phase: str = "pretrain") -> str:
    if phase == "finetune":
        return "checkpoint_finetuned.rlml"
    return f"checkpoint_{fraction:.4f}.rlml"


def pretrain(
    model_config: ModelConfig,
    tcfg: TrainConfig,
    blocks: np.ndarray,
    out_dir,
    tokenizer_fingerprint: str,
) -> tuple[list[Checkpoint], LossTrace]:
    """Autoregressive pretraining over fixed-length blocks in stream order.

    Targets are the inputs shifted left by one with the last position masked.
    A checkpoint is emitted at step 0 (fraction 0.0, initial weights) and at
    every configured fraction of the total optimizer steps. When out_dir is
    not None each checkpoint is also written there.
    """
    blocks = np.asarray(blocks, dtype=np.int32)
    if blocks.ndim != 2 or blocks.shape[0] == 0:
        raise DataError("blocks must be a non-empty [n_blocks, context_len] array")
    n_blocks, ctx = blocks.shape
    if ctx > model_config.context_len:
        raise DataError(
            f"block length {ctx} exceeds model context_len {model_config.context_len}"
        )
    effective = tcfg.effective_batch
    total_steps = (n_blocks * tcfg.epochs) // effective
    if total_steps == 0:
        raise DataError(
            f"insufficient blocks: {n_blocks} blocks x {tcfg.epochs} epochs "
            f"< one effective batch of {effective}"
        )

    params = init_model(model_config, tcfg.seed)
    state = OptimizerState.zeros_like(params)
    trace = LossTrace()
    checkpoints: list[Checkpoint] = []
    targets_at = _checkpoint_steps(tcfg.checkpoint_fractions, total_steps)

    def emit(fraction: float, step: int) -> None:
        ckpt = Checkpoint(
            model_config=model_config,
            train_config=tcfg,
            tokenizer_fingerprint=tokenizer_fingerprint,
            fraction=fraction,
            step=step,
            tokens_seen=step * effective * ctx,
            params=params.copy(),
        )
        checkpoints.append(ckpt)
        if out_dir is not None:
            save_checkpoint(ckpt, os.path.join(out_dir, checkpoint_filename(fraction)))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    emit(0.0, 0)

    pdb = tcfg.per_device_batch
    for step in range(1, total_steps + 1):
        base = (step - 1) * effective
        micro = []
        for a in range(tcfg.grad_accum_steps):
            idx = [(base + a * pdb + j) % n_blocks for j in range(pdb)]
            batch = blocks[idx]
            tgt = np.full_like(batch, PAD_ID)
            tgt[:, :-1] = batch[:, 1:]
            micro.append((batch, tgt))
        loss, grads = _accumulate_step(params, micro, tcfg.grad_clip_norm)
        if not math.isfinite(loss):
            raise DivergenceError(f"divergence at step {step}: non-finite loss")
        lr = lr_at(step, total_steps, tcfg)
        adamw_step(params, grads, state, lr, tcfg)
        trace.append(step, loss, lr)
        for fraction in targets_at.get(step, ()):
            emit(fraction, step)

    return checkpoints, trace


def _render_example(ex: InstructionExample, tok: TokenizerModel, context_len: int):
    """Token ids and first response-token index for one example, or None to skip."""
    text, offset = format_instruction(ex)
    ids = [BOS_ID] + encode(tok, text) + [EOS_ID]
    ids = ids[:context_len]
    n_prompt = 1 + len(encode(tok, text[:offset]))
    if n_prompt >= len(ids):
        return None
    return ids, n_prompt


def finetune(
    ckpt: Checkpoint,
    examples: list[InstructionExample],
    tcfg: TrainConfig,
    tok: TokenizerModel,
) -> FinetuneResult:
    """Instruction fine-tuning from a checkpoint.

    Each example is rendered through the instruction template, BOS-prefixed,
    EOS-terminated and truncated to the context; loss is computed only over
    response-region tokens (prompt positions get PAD targets). The optimizer
    restarts from zero and the peak learning rate is pinned to 1e-5.
    """
    if tok.fingerprint != ckpt.tokenizer_fingerprint:
        raise DataError(
            "tokenizer fingerprint does not match checkpoint "
            f"({tok.fingerprint[:12]}... vs {ckpt.tokenizer_fingerprint[:12]}...)"
        )
    if not examples:
        raise DataError("no examples to fine-tune on")
    cfg = ckpt.model_config
    rendered = []
    skipped = 0
    for i, ex in enumerate(examples):
        r = _render_example(ex, tok, cfg.context_len)
        if r is None:
            skipped += 1
            log.warning("skipping example %d: prompt fills the whole context", i)
            continue
        rendered.append(r)
    if not rendered:
        raise DataError("all examples skipped: prompts fill the whole context")

    ft_cfg = replace(tcfg, peak_lr=FINETUNE_LR)
    effective = ft_cfg.effective_batch
    n = len(rendered)
    total_steps = (n * ft_cfg.epochs) // effective
    if total_steps == 0:
        raise DataError(
            f"insufficient examples: {n} x {ft_cfg.epochs} epochs "
            f"< one effective batch of {effective}"
        )

    params = ckpt.params.copy()
    state = OptimizerState.zeros_like(params)
    trace = LossTrace()
    tokens_seen = ckpt.tokens_seen
    pdb = ft_cfg.per_device_batch

    for step in range(1, total_steps + 1):
        base = (step - 1) * effective
        micro = []
        for a in range(ft_cfg.grad_accum_steps):
            group = [rendered[(base + a * pdb + j) % n] for j in range(pdb)]
            width = max(len(ids) for ids, _ in group) - 1
            tokens = np.full((len(group), width), PAD_ID, dtype=np.int32)
            targets = np.full((len(group), width), PAD_ID, dtype=np.int32)
            for row, (ids, n_prompt) in enumerate(group):
                m = len(ids)
                tokens[row, : m - 1] = ids[:-1]
                targets[row, n_prompt - 1 : m - 1] = ids[n_prompt:]
                tokens_seen += m
            micro.append((tokens, targets))
        loss, grads = _accumulate_step(params, micro, ft_cfg.grad_clip_norm)
        if not math.isfinite(loss):
            raise DivergenceError(f"divergence at step {step}: non-finite loss")
        lr = lr_at(step, total_steps, ft_cfg)
        adamw_step(params, grads, state, lr, ft_cfg)
        trace.append(step, loss, lr)

    out = Checkpoint(
        model_config=cfg,
        train_config=ft_cfg,
        tokenizer_fingerprint=ckpt.tokenizer_fingerprint,
        fraction=1.0,
        step=total_steps,
        tokens_seen=tokens_seen,
        params=params,
        phase="finetune",
    )
    return FinetuneResult(out, trace, len(rendered), skipped)


# --- checkpoint serialization ---------------------------------------------


def _manifest_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = list(ckpt.params.tensors.items())
    if ckpt.optimizer is not None:
        arrays += [(f"optimizer.m.{k}", a) for k, a in ckpt.optimizer.m.items()]
        arrays += [(f"optimizer.v.{k}", a) for k, a in ckpt.optimizer.v.items()]
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint atomically (temp file in place, then rename)."""
    arrays = _manifest_arrays(ckpt)
    manifest = []
    offset = 0
    for name, arr in arrays:
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"tensor '{name}' has dtype {arr.dtype}; checkpoints store float32"
            )
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "tokenizer_fingerprint": ckpt.tokenizer_fingerprint,
        "fraction": ckpt.fraction,
        "step": ckpt.step,
        "tokens_seen": ckpt.tokens_seen,
        "phase": ckpt.phase,
        "optimizer": None if ckpt.optimizer is None else {"t": ckpt.optimizer.t},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            for _, arr in arrays:
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _header_field(header: dict, name: str):
    if name not in header:
        raise CheckpointError(f"checkpoint header missing field '{name}'")
    return header[name]


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    """Read a checkpoint; validates header, shapes and sizes before tensors."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    if len(blob) < 16 + header_len:
        raise CheckpointError("checkpoint header truncated")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from exc

    try:
        model_config = ModelConfig(**_header_field(header, "model_config"))
    except TypeError as exc:
        raise CheckpointError(f"bad field 'model_config': {exc}") from exc
    tc = dict(_header_field(header, "train_config"))
    tc["checkpoint_fractions"] = tuple(tc.get("checkpoint_fractions", ()))
    try:
        train_config = TrainConfig(**tc)
    except TypeError as exc:
        raise CheckpointError(f"bad field 'train_config': {exc}") from exc

    fingerprint = _header_field(header, "tokenizer_fingerprint")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"tokenizer fingerprint mismatch: checkpoint has {fingerprint[:12]}..., "
            f"expected {expected_fingerprint[:12]}..."
        )

    opt_header = _header_field(header, "optimizer")
    expect = dict(expected_shapes(model_config))
    if opt_header is not None:
        for prefix in ("optimizer.m.", "optimizer.v."):
            for name, shape in expected_shapes(model_config).items():
                expect[prefix + name] = shape

    manifest = _header_field(header, "tensors")
    names = [entry.get("name") for entry in manifest]
    if names != list(expect.keys()):
        raise CheckpointError("tensor manifest does not match the architecture")
    offset = 0
    for entry in manifest:
        shape = tuple(entry.get("shape", ()))
        if shape != expect[entry["name"]]:
            raise CheckpointError(
                f"tensor '{entry['name']}' has shape {list(shape)}, "
                f"expected {list(expect[entry['name']])}"
            )
        if entry.get("offset") != offset:
            raise CheckpointError(f"tensor '{entry['name']}' has a bad offset")
        offset += int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4

    section = blob[16 + header_len :]
    if len(section) < offset:
        raise CheckpointError("tensor section truncated")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(
            section, dtype="<f4", count=count, offset=entry["offset"]
        )
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float32)

    params = ModelParams(
        model_config, {k: arrays[k] for k in expected_shapes(model_config)}
    )
    params.validate_shapes()
    optimizer = None
    if opt_header is not None:
        optimizer = OptimizerState(
            m={k: arrays[f"optimizer.m.{k}"] for k in params.tensors},
            v={k: arrays[f"optimizer.v.{k}"] for k in params.tensors},
            t=int(opt_header.get("t", 0)),
        )
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        tokenizer_fingerprint=fingerprint,
        fraction=float(_header_field(header, "fraction")),
        step=int(_header_field(header, "step")),
        tokens_seen=int(_header_field(header, "tokens_seen")),
        params=params,
        optimizer=optimizer,
        phase=str(header.get("phase", "pretrain")),
    )
