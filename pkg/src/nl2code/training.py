"""Teacher-forced seq2seq training.

Covers batching with PAD alignment and a right-shifted decoder input, Adam
with a constant learning rate and global-norm gradient clipping, the
interleaved gold/noisy batch schedule, dev-BLEU model selection with
patience, and bit-exact checkpointing.

The batch schedule is a pure function of (ids, seed, batch size), so a
resumed run regenerates it and skips the first `step` batches instead of
serializing scheduler state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import bpe
from . import tensor as T
from .bpe import EOS_ID, PAD_ID, Vocabulary
from .data import Example
from .errors import DataError, NumericsError
from .rng import derive_seed, fisher_yates
from .tensor import Tensor
from .transformer import ModelConfig, decode_logits, encode_source, forward_dropout_seed, init_params

START_ID = PAD_ID  # decoder start-of-sequence token


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_src_len: int = 32
    max_tgt_len: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 30
    interleave_gold: int = 1
    interleave_noisy: int = 0
    seed: int = 0
    eval_every: int = 200
    patience: int = 5
    clip_norm: float = 1.0
    weighted_loss: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.interleave_gold < 0 or self.interleave_noisy < 0:
            raise ValueError("interleave ratio components must be >= 0")
        if self.interleave_gold == 0 and self.interleave_noisy == 0:
            raise ValueError("interleave ratio (0, 0) schedules nothing")

    @property
    def interleave_ratio(self) -> tuple[int, int]:
        return (self.interleave_gold, self.interleave_noisy)


@dataclass
class Batch:
    src: np.ndarray        # [B, S] int64
    src_mask: np.ndarray   # [B, S] bool
    decoder_in: np.ndarray  # [B, T] int64
    targets: np.ndarray    # [B, T] int64, PAD at unused positions
    loss_mask: np.ndarray  # [B, T] bool
    example_ids: list[int]
    weights: np.ndarray    # [B] float32


def make_batch(examples: Sequence[Example], vocab: Vocabulary, max_src_len: int, max_tgt_len: int) -> Batch:
    """Encode and PAD-align a batch; decoder input is the target shifted
    right behind a start token (= PAD)."""
    if not examples:
        raise ValueError("make_batch requires a non-empty batch")
    srcs = [bpe.encode(vocab, e.intent, max_len=max_src_len).ids for e in examples]
    tgts = [bpe.encode(vocab, e.snippet, max_len=max_tgt_len).ids for e in examples]
    s = max(len(x) for x in srcs)
    t = max(len(x) for x in tgts)
    b = len(examples)
    src = np.full((b, s), PAD_ID, dtype=np.int64)
    tgt = np.full((b, t), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(srcs):
        src[i, : len(ids)] = ids
    for i, ids in enumerate(tgts):
        tgt[i, : len(ids)] = ids
    dec_in = np.full((b, t), PAD_ID, dtype=np.int64)
    dec_in[:, 0] = START_ID
    dec_in[:, 1:] = tgt[:, :-1]
    return Batch(
        src=src,
        src_mask=src != PAD_ID,
        decoder_in=dec_in,
        targets=tgt,
        loss_mask=tgt != PAD_ID,
        example_ids=[e.id for e in examples],
        weights=np.array([e.weight for e in examples], dtype=np.float32),
    )


@dataclass
class BatchSpec:
    tag: str                # "gold" | "noisy"
    example_ids: list[int]
    gold_epoch: int         # epochs of the gold stream completed before this batch


class EpochStream:
    """Infinite stream of example-id batches; epoch e is a fresh
    Fisher-Yates shuffle seeded by derive_seed(seed, e)."""

    def __init__(self, ids: Sequence[int], batch_size: int, seed: int):
        if not ids:
            raise ValueError("EpochStream requires a non-empty id list")
        self.ids = list(ids)
        self.batch_size = batch_size
        self.seed = seed

    def batches(self) -> Iterator[tuple[int, list[int]]]:
        epoch = 0
        while True:
            order = fisher_yates(self.ids, derive_seed(self.seed, epoch))
            for lo in range(0, len(order), self.batch_size):
                yield epoch, order[lo : lo + self.batch_size]
            epoch += 1


def interleave(gold_stream: EpochStream | None, noisy_stream: EpochStream | None,
               ratio: tuple[int, int]) -> Iterator[BatchSpec]:
    """Cyclic schedule: g gold batches then n noisy batches, repeating.

    Epoch accounting follows the gold stream (the noisy pool is typically
    far larger). With ratio (g, 0) this degenerates to a gold-only regime.
    """
    g, n = ratio
    if g == 0 and n == 0:
        raise ValueError("interleave ratio (0, 0) schedules nothing")
    if g > 0 and gold_stream is None:
        raise ValueError("gold ratio > 0 but no gold stream")
    if n > 0 and noisy_stream is None:
        raise ValueError("noisy ratio > 0 but no noisy stream")
    gold_iter = gold_stream.batches() if g > 0 else None
    noisy_iter = noisy_stream.batches() if n > 0 else None
    gold_epoch = 0
    noisy_epoch = 0
    while True:
        for _ in range(g):
            gold_epoch, ids = next(gold_iter)
            yield BatchSpec("gold", ids, gold_epoch)
        for _ in range(n):
            noisy_epoch, ids = next(noisy_iter)
            # without gold, the noisy stream governs epoch accounting
            yield BatchSpec("noisy", ids, noisy_epoch if g == 0 else gold_epoch)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_update(params: dict[str, Tensor], opt: OptimizerState, lr: float, clip_norm: float = 1.0) -> float:
    """Clip gradients to a global norm, then apply one Adam step with bias
    correction. Returns the pre-clip gradient norm."""
    norm = T.global_grad_norm(params.values())
    scale = clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad * scale if scale != 1.0 else p.grad
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return norm


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def seq2seq_loss(params: dict[str, Tensor], cfg: ModelConfig, batch: Batch,
                 weighted: bool = False, dropout_seed: int | None = None) -> Tensor:
    memory = encode_source(params, cfg, batch.src, batch.src_mask, dropout_seed=dropout_seed)
    logits = decode_logits(params, cfg, memory, batch.decoder_in, batch.src_mask, dropout_seed=dropout_seed)
    b, t, v = logits.shape
    flat = T.reshape(logits, (b * t, v))
    weights = None
    if weighted:
        weights = np.repeat(batch.weights.astype(np.float64), t)
    return T.cross_entropy(flat, batch.targets.reshape(-1), ignore_id=PAD_ID, position_weights=weights)


def train_step(params: dict[str, Tensor], cfg: ModelConfig, opt: OptimizerState, batch: Batch,
               train_cfg: TrainConfig, step: int | None = None) -> float:
    """One forward/backward/Adam update; returns the pre-update loss."""
    seed = None
    if cfg.dropout_rate > 0 and step is not None:
        seed = forward_dropout_seed(train_cfg.seed, step)
    loss = seq2seq_loss(params, cfg, batch, weighted=train_cfg.weighted_loss, dropout_seed=seed)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericsError(f"non-finite loss {value} at step {step}, batch ids {batch.example_ids}")
    T.backward(loss)
    adam_update(params, opt, train_cfg.learning_rate, train_cfg.clip_norm)
    zero_grads(params)
    return value


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"NLCK"
_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    step: int
    best_dev_bleu: float
    vocab_sha256: str
    prng: dict
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    def make_params(self, best: bool = False) -> dict[str, Tensor]:
        source = self.best_params if best and self.best_params else self.params
        return {k: Tensor(a.copy(), requires_grad=True) for k, a in source.items()}

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(
            m={k: a.copy() for k, a in self.opt_m.items()},
            v={k: a.copy() for k, a in self.opt_v.items()},
            step=self.opt_step,
        )


def _array_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{k}", a) for k, a in ckpt.params.items()]
    entries += [(f"adam_m/{k}", a) for k, a in ckpt.opt_m.items()]
    entries += [(f"adam_v/{k}", a) for k, a in ckpt.opt_v.items()]
    entries += [(f"best/{k}", a) for k, a in ckpt.best_params.items()]
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Canonical JSON header plus concatenated little-endian float32 arrays,
    in header order; identical state serializes to identical bytes."""
    entries = _array_entries(ckpt)
    payloads = []
    arrays_meta = []
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payloads.append(raw)
        arrays_meta.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    header = {
        "format_version": _FORMAT_VERSION,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "step": ckpt.step,
        "opt_step": ckpt.opt_step,
        "best_dev_bleu": ckpt.best_dev_bleu,
        "vocab_sha256": ckpt.vocab_sha256,
        "prng": ckpt.prng,
        "arrays": arrays_meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path, vocab: Vocabulary | None = None) -> Checkpoint:
    """Load and verify a checkpoint. Array corruption names the bad section;
    a vocabulary hash mismatch is refused outright."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint: {e}") from e
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != _FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e.msg}") from e

    if vocab is not None and header["vocab_sha256"] != vocab.sha256():
        raise DataError(
            f"{path}: checkpoint was trained with a different vocabulary "
            f"(hash {header['vocab_sha256'][:12]}..., current {vocab.sha256()[:12]}...); "
            "re-train or supply the original vocabulary file"
        )

    offset = 16 + header_len
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "best": {}}
    for meta in header["arrays"]:
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = 4 * n
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated in section {meta['name']}")
        if hashlib.sha256(chunk).hexdigest() != meta["sha256"]:
            raise DataError(f"{path}: corrupt section {meta['name']} (checksum mismatch)")
        offset += nbytes
        group, _, name = meta["name"].partition("/")
        if group not in groups:
            raise DataError(f"{path}: unknown array group {group}")
        groups[group][name] = np.frombuffer(chunk, dtype="<f4").reshape(meta["shape"]).copy()

    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**header["train_config"]),
        params=groups["param"],
        opt_m=groups["adam_m"],
        opt_v=groups["adam_v"],
        opt_step=header["opt_step"],
        step=header["step"],
        best_dev_bleu=header["best_dev_bleu"],
        vocab_sha256=header["vocab_sha256"],
        prng=header["prng"],
        best_params=groups["best"],
    )


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    step: int
    train_loss: float
    dev_bleu: float | None = None


def write_history_csv(rows: Sequence[HistoryRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,train_loss,dev_bleu\n")
        for r in rows:
            bleu = "" if r.dev_bleu is None else f"{r.dev_bleu:.4f}"
            fh.write(f"{r.step},{r.train_loss:.6f},{bleu}\n")


@dataclass
class FitResult:
    checkpoint: Checkpoint          # parameters of the best dev-BLEU model
    history: list[HistoryRow]
    best_dev_bleu: float
    best_step: int
    steps_run: int


def fit(params: dict[str, Tensor], cfg: ModelConfig, vocab: Vocabulary,
        gold_examples: Sequence[Example], dev_examples: Sequence[Example],
        train_cfg: TrainConfig, noisy_examples: Sequence[Example] = (),
        checkpoint_dir: str | Path | None = None,
        resume_from: str | Path | None = None,
        max_steps: int | None = None,
        log=None) -> FitResult:
    """Train until max_epochs over the gold stream, early-stopping on dev BLEU.

    Every eval_every steps the dev set is decoded greedily and scored; the
    best parameters are retained and training stops after `patience`
    consecutive evaluations without improvement.
    """
    from .metrics import evaluate  # local import: metrics pulls in decoding

    if not dev_examples:
        raise ValueError("fit requires a non-empty dev set for model selection")
    by_id = {e.id: e for e in gold_examples}
    noisy_by_id = {e.id: e for e in noisy_examples}

    g, n = train_cfg.interleave_ratio
    gold_stream = EpochStream([e.id for e in gold_examples], train_cfg.batch_size,
                              derive_seed(train_cfg.seed, 0x601D)) if gold_examples else None
    noisy_stream = EpochStream([e.id for e in noisy_examples], train_cfg.batch_size,
                               derive_seed(train_cfg.seed, 0x0150)) if noisy_examples else None
    schedule = interleave(gold_stream, noisy_stream, (g, n))

    opt = init_optimizer(params)
    step = 0
    best_bleu = -1.0
    best_step = -1
    best_params: dict[str, np.ndarray] = {}
    evals_without_improvement = 0
    history: list[HistoryRow] = []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, vocab)
        for k, p in params.items():
            p.data = ckpt.params[k].copy()
        opt = ckpt.make_optimizer()
        step = ckpt.step
        best_bleu = ckpt.best_dev_bleu
        best_params = {k: a.copy() for k, a in ckpt.best_params.items()}
        for _ in range(step):
            next(schedule)

    def snapshot() -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in params.items()}

    def current_checkpoint() -> Checkpoint:
        return Checkpoint(
            model_config=cfg,
            train_config=train_cfg,
            params=snapshot(),
            opt_m={k: a.copy() for k, a in opt.m.items()},
            opt_v={k: a.copy() for k, a in opt.v.items()},
            opt_step=opt.step,
            step=step,
            best_dev_bleu=best_bleu,
            vocab_sha256=vocab.sha256(),
            prng={"algorithm": "splitmix64", "seed": train_cfg.seed, "step": step},
            best_params={k: a.copy() for k, a in best_params.items()},
        )

    def eval_dev() -> float:
        report = evaluate(params, cfg, vocab, dev_examples,
                          max_src_len=train_cfg.max_src_len, max_len=train_cfg.max_tgt_len)
        return report.bleu

    stopped = False
    for spec in schedule:
        if spec.gold_epoch >= train_cfg.max_epochs or (max_steps is not None and step >= max_steps):
            break
        pool = by_id if spec.tag == "gold" else noisy_by_id
        batch = make_batch([pool[i] for i in spec.example_ids], vocab,
                           train_cfg.max_src_len, train_cfg.max_tgt_len)
        loss = train_step(params, cfg, opt, batch, train_cfg, step=step)
        step += 1
        row = HistoryRow(step=step, train_loss=loss)
        history.append(row)
        if step % train_cfg.eval_every == 0:
            bleu = eval_dev()
            row.dev_bleu = bleu
            if log:
                log(f"step {step}: loss {loss:.4f} dev_bleu {bleu:.2f}")
            if bleu > best_bleu:
                best_bleu = bleu
                best_step = step
                best_params = snapshot()
                evals_without_improvement = 0
            else:
                evals_without_improvement += 1
            if checkpoint_dir is not None:
                save_checkpoint(current_checkpoint(), Path(checkpoint_dir) / "latest.ckpt")
            if evals_without_improvement > train_cfg.patience:
                stopped = True
        if stopped:
            break

    if best_step < 0:  # run ended before the first scheduled evaluation
        bleu = eval_dev()
        if history:
            history[-1].dev_bleu = bleu
        best_bleu = bleu
        best_step = step
        best_params = snapshot()

    best_ckpt = Checkpoint(
        model_config=cfg,
        train_config=train_cfg,
        params={k: a.copy() for k, a in best_params.items()},
        opt_m={k: a.copy() for k, a in opt.m.items()},
        opt_v={k: a.copy() for k, a in opt.v.items()},
        opt_step=opt.step,
        step=best_step,
        best_dev_bleu=best_bleu,
        vocab_sha256=vocab.sha256(),
        prng={"algorithm": "splitmix64", "seed": train_cfg.seed, "step": step},
        best_params={},
    )
    if checkpoint_dir is not None:
        save_checkpoint(current_checkpoint(), Path(checkpoint_dir) / "latest.ckpt")
        save_checkpoint(best_ckpt, Path(checkpoint_dir) / "best.ckpt")
    return FitResult(checkpoint=best_ckpt, history=history,
                     best_dev_bleu=best_bleu, best_step=best_step, steps_run=step)
