"""Losses, RMSprop and the training/cross-validation drivers."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FoldPlan, SubmissionRecord, class_weights, stack_examples, to_example
from .model import GraderNet, ModelConfig, Prediction, build
from .tensor import DTYPE, SeededRng, ShapeError
from .tokenizer import LexError, Vocabulary, build_vocab, lex

CLIP = 1e-7


class TrainingError(RuntimeError):
    pass


# -- losses --------------------------------------------------------------------


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: prediction shape {a.shape} does not match target shape {b.shape}")


def bce_loss(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None):
    """Mean binary cross entropy over every element, predictions clipped to [1e-7, 1-1e-7]."""
    _check_same_shape(pred, target, "bce_loss")
    w = np.ones_like(pred) if weights is None else np.broadcast_to(weights, pred.shape)
    p = np.clip(pred, CLIP, 1.0 - CLIP)
    elem = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    loss = float((w * elem).sum() / pred.size)
    inside = (pred > CLIP) & (pred < 1.0 - CLIP)
    grad = w * (p - target) / (p * (1.0 - p)) * inside / pred.size
    return loss, grad


def cce_loss(probs: np.ndarray, one_hot: np.ndarray, weights: np.ndarray | None = None):
    """Mean categorical cross entropy over rows; ``weights`` is one value per row."""
    _check_same_shape(probs, one_hot, "cce_loss")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("cce_loss expects probability rows that sum to 1")
    B = probs.shape[0]
    w = np.ones((B, 1)) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(B, 1)
    p = np.clip(probs, CLIP, 1.0 - CLIP)
    loss = float(-(w * one_hot * np.log(p)).sum() / B)
    inside = (probs > CLIP) & (probs < 1.0 - CLIP)
    grad = -w * one_hot / p * inside / B
    return loss, grad


def mse_loss(pred: np.ndarray, target: np.ndarray):
    _check_same_shape(pred, target, "mse_loss")
    diff = pred - target
    return float((diff**2).mean()), 2.0 * diff / diff.size


# -- optimizer -----------------------------------------------------------------


@dataclass
class RMSprop:
    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place; every key in ``grads`` must name a parameter."""
        for name, g in grads.items():
            theta = params[name]
            if g.shape != theta.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} vs parameter shape {theta.shape}")
            acc = self.accumulators.get(name)
            if acc is None:
                acc = np.zeros_like(theta)
            acc = self.rho * acc + (1.0 - self.rho) * g * g
            self.accumulators[name] = acc
            theta -= self.learning_rate * g / (np.sqrt(acc) + self.epsilon)


def rmsprop_step(params, grads, state: RMSprop):
    state.step(params, grads)
    return params, state


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    class_weighting: bool = False
    shuffle_each_epoch: bool = True
    iterative_schedule: str = "per_epoch_round_robin"

    def validate(self) -> None:
        if self.mode not in ("joint", "iterative"):
            raise ValueError(f"mode must be joint or iterative, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batchnorm)")
        if self.iterative_schedule != "per_epoch_round_robin":
            raise ValueError(f"unknown iterative schedule {self.iterative_schedule!r}")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    final_checksum: str = ""

    def losses(self, objective: str | None = None) -> list[float]:
        return [r["loss"] for r in self.records if objective is None or r["objective"] == objective]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a lone trailing example cannot be batch-normalized; fold it into the previous batch
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _sample_weights(arrays: dict, weights: dict | None) -> dict[str, np.ndarray | None]:
    if weights is None:
        return {"C": None, "R": None}
    return {
        "C": weights["correct"][arrays["y_correct"][:, 0].astype(int)][:, None],
        "R": weights["remark"][arrays["y_remark"].argmax(axis=1)][:, None],
    }


def _guard(loss: float, grads: dict[str, np.ndarray], epoch: int, batch: int) -> None:
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        finite = [np.abs(g[np.isfinite(g)]) for g in grads.values()]
        gmax = max((float(f.max()) for f in finite if f.size), default=float("nan"))
        raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {batch} (max |grad| {gmax})")


def _joint_step(net: GraderNet, arrays, idx, sw, rng: SeededRng) -> tuple[float, dict]:
    target = np.concatenate([arrays["y_correct"][idx], arrays["y_remark"][idx], arrays["y_grade"][idx]], axis=1)
    weights = None
    if sw["C"] is not None:
        weights = np.concatenate([sw["C"][idx], np.repeat(sw["R"][idx], arrays["y_remark"].shape[1], axis=1), np.ones((len(idx), 1))], axis=1)
    net.zero_grad()
    out = net.forward_joint(arrays["x"][idx], training=True, rng=rng)
    loss, dout = bce_loss(out, target, weights)
    net.backward_joint(dout)
    return loss, net.gradients()


def _head_step(net: GraderNet, head: str, arrays, idx, sw, rng: SeededRng) -> tuple[float, dict]:
    net.zero_grad()
    z = net.forward_trunk(arrays["x"][idx], training=True, rng=rng)
    out = net.forward_heads(z, training=True, heads=(head,))[head]
    if head == "C":
        loss, dout = bce_loss(out, arrays["y_correct"][idx], None if sw["C"] is None else sw["C"][idx])
    elif head == "R":
        loss, dout = cce_loss(out, arrays["y_remark"][idx], None if sw["R"] is None else sw["R"][idx])
    else:
        loss, dout = mse_loss(out, arrays["y_grade"][idx])
    net.backward_trunk(net.backward_heads({head: dout}))
    return loss, net.gradients(heads=(head,))


def train(net: GraderNet, examples, config: TrainConfig, rng: SeededRng, optimizer: RMSprop | None = None, on_epoch=None) -> TrainHistory:
    """Run ``config.epochs`` epochs of joint or round-robin per-head training.

    In iterative mode epoch ``3t`` trains head C, ``3t+1`` head R and ``3t+2``
    head G; the trunk moves in every phase. ``on_epoch(epoch, record)`` is
    called after each epoch and may return True to stop early.
    """
    config.validate()
    examples = list(examples)
    history = TrainHistory()
    if config.epochs == 0:
        history.final_checksum = net.checksum()
        return history
    if len(examples) < 2:
        raise TrainingError("training needs at least 2 examples")
    arrays = stack_examples(examples)
    sw = _sample_weights(arrays, class_weights(examples) if config.class_weighting else None)
    opt = optimizer or RMSprop(learning_rate=config.learning_rate)
    n = len(examples)
    order = np.arange(n)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        objective = "joint" if config.mode == "joint" else "CRG"[epoch % 3]
        if config.shuffle_each_epoch:
            order = rng.permutation(n)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(n, config.batch_size, order)):
            if objective == "joint":
                loss, grads = _joint_step(net, arrays, idx, sw, rng)
                params = net.parameters()
            else:
                loss, grads = _head_step(net, objective, arrays, idx, sw, rng)
                params = net.parameters(heads=(objective,))
            _guard(loss, grads, epoch, b)
            opt.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        record = {"epoch": epoch, "objective": objective, "loss": total / count, "seconds": time.perf_counter() - t0}
        history.records.append(record)
        if on_epoch is not None and on_epoch(epoch, record):
            break
    history.final_checksum = net.checksum()
    return history


def train_joint(net, examples, config: TrainConfig, rng: SeededRng, **kw) -> TrainHistory:
    return train(net, examples, replace(config, mode="joint"), rng, **kw)


def train_iterative(net, examples, config: TrainConfig, rng: SeededRng, **kw) -> TrainHistory:
    return train(net, examples, replace(config, mode="iterative"), rng, **kw)


# -- cross-validation ----------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]
    predictions: list[Prediction]
    history: TrainHistory
    vocab_size: int


@dataclass
class CVResult:
    folds: list[FoldResult]
    n: int

    def out_of_fold(self) -> list[tuple[int, Prediction]]:
        """(fold id, prediction) for every example index, in index order."""
        slots: list = [None] * self.n
        for fr in self.folds:
            for i, p in zip(fr.val_indices, fr.predictions):
                if slots[i] is not None:
                    raise RuntimeError(f"example {i} predicted by more than one fold")
                slots[i] = (fr.fold, p)
        if any(s is None for s in slots):
            raise RuntimeError("some examples received no out-of-fold prediction")
        return slots


def fit_vocab(records, fold_literals: bool = True, min_count: int = 1) -> Vocabulary:
    return build_vocab([lex(r.submitted_answer, fold_literals) for r in records], min_count)


def fit(records, model_config: ModelConfig, train_config: TrainConfig, seed: int, on_epoch=None):
    """Vocabulary from ``records``, fresh network, trained. Returns (net, config, vocab, history)."""
    vocab = fit_vocab(records, model_config.fold_literals)
    config = replace(model_config, vocab_size=len(vocab), seed=seed)
    rng = SeededRng(seed)
    net = build(config, rng.child(0))
    examples = [to_example(r, vocab, config.seq_len, config.fold_literals) for r in records]
    history = train(net, examples, train_config, rng.child(1), on_epoch=on_epoch)
    return net, config, vocab, history


def fold_seed(master_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(entropy=master_seed, spawn_key=(fold,)).generate_state(2, np.uint32).view(np.uint64)[0])


def run_fold(records, fold: int, train_idx, val_idx, model_config: ModelConfig, train_config: TrainConfig, master_seed: int) -> FoldResult:
    if set(train_idx) & set(val_idx):
        raise ValueError(f"fold {fold}: training and validation indices overlap")
    train_recs = [records[i] for i in train_idx]
    try:
        net, config, vocab, history = fit(train_recs, model_config, train_config, fold_seed(master_seed, fold))
    except LexError as exc:
        raise LexError(f"fold {fold}: {exc}", exc.offset) from exc
    except (TrainingError, ValueError, FloatingPointError) as exc:
        raise TrainingError(f"fold {fold}: {exc}") from exc
    ids = np.stack([to_example(records[i], vocab, config.seq_len, config.fold_literals).x for i in val_idx])
    return FoldResult(fold, tuple(train_idx), tuple(val_idx), net.predict_batch(ids), history, len(vocab))


def _run_fold_args(args):
    return run_fold(*args)


def cross_validate(records: list[SubmissionRecord], plan: FoldPlan, model_config: ModelConfig, train_config: TrainConfig, seed: int, jobs: int = 1, fold_order=None) -> CVResult:
    """Train one fresh network per fold and predict its held-out records.

    Each fold builds its own vocabulary from its training split. The fold's
    seed depends only on ``seed`` and the fold index, so results do not
    depend on ``jobs`` or on ``fold_order``.
    """
    records = list(records)
    if plan.n != len(records):
        raise ValueError(f"fold plan covers {plan.n} examples but {len(records)} records were given")
    order = list(range(len(plan.folds))) if fold_order is None else list(fold_order)
    tasks = [(records, f, plan.folds[f][0], plan.folds[f][1], model_config, train_config, seed) for f in order]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_args, tasks))
    else:
        results = [_run_fold_args(t) for t in tasks]
    results.sort(key=lambda r: r.fold)
    return CVResult(results, len(records))
