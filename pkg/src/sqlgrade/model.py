"""The multi-task grader: one shared trunk, three heads.

Trunk::

    ids -> embedding -> conv_q ─┬─> attention(q, v) -> avg pool ─┐
                     └> conv_v ─┘                                 ├─ concat(200)
                        conv_q ──────────────────────> avg pool ──┘
    -> dropout -> batchnorm -> dense(2, tanh)          (the bottleneck)

Heads C (correctness), R (remark) and G (grade) each apply batchnorm and a
dense layer to the same bottleneck activations.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .layers import BatchNorm, ConvEncoder, Dense, DotProductAttention, Dropout, Embedding, GlobalAvgPool
from .tensor import DTYPE, SeededRng, ShapeError
from .tokenizer import SEQ_LEN, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1
REMARK_NAMES = ("Correct", "PartiallyCorrect", "Uninterpretable", "Cheating")
HEADS = ("C", "R", "G")


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int = SEQ_LEN
    embed_dim: int = 64
    conv_filters: int = 100
    conv_kernel: int = 3
    dropout_rate: float = 0.25
    bottleneck_dim: int = 2
    remark_classes: int = 4
    attention_scaled: bool = False
    fold_literals: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        for name in ("seq_len", "embed_dim", "conv_filters", "conv_kernel", "bottleneck_dim", "remark_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd (same padding)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class Prediction:
    p_correct: float
    remark_probs: tuple[float, ...]
    grade_hat: float
    bottleneck_xy: tuple[float, ...]

    @property
    def remark_argmax(self) -> str:
        return REMARK_NAMES[int(np.argmax(self.remark_probs))]


class Head:
    def __init__(self, in_dim: int, out_dim: int, activation: str, rng: SeededRng):
        self.bn = BatchNorm(in_dim)
        self.dense = Dense(in_dim, out_dim, activation, rng)

    @property
    def layers(self):
        return {"bn": self.bn, "dense": self.dense}

    def forward(self, z: np.ndarray, training: bool, activation: str | None = None) -> np.ndarray:
        return self.dense.forward(self.bn.forward(z, training), activation)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.bn.backward(self.dense.backward(dout))


class GraderNet:
    def __init__(self, config: ModelConfig, rng: SeededRng):
        config.validate()
        self.config = config
        c = config
        self.embedding = Embedding(c.vocab_size, c.embed_dim, rng)
        self.conv_q = ConvEncoder(c.embed_dim, c.conv_filters, c.conv_kernel, rng)
        self.conv_v = ConvEncoder(c.embed_dim, c.conv_filters, c.conv_kernel, rng)
        self.attention = DotProductAttention(scaled=c.attention_scaled)
        self.pool_a = GlobalAvgPool()
        self.pool_q = GlobalAvgPool()
        self.dropout = Dropout(c.dropout_rate)
        self.trunk_bn = BatchNorm(2 * c.conv_filters)
        self.bottleneck = Dense(2 * c.conv_filters, c.bottleneck_dim, "tanh", rng)
        self.heads = {
            "C": Head(c.bottleneck_dim, 1, "sigmoid", rng),
            "R": Head(c.bottleneck_dim, c.remark_classes, "softmax", rng),
            "G": Head(c.bottleneck_dim, 1, "sigmoid", rng),
        }

    # -- parameter bookkeeping -------------------------------------------------

    def trunk_layers(self) -> dict:
        return {
            "embedding": self.embedding,
            "conv_q": self.conv_q,
            "conv_v": self.conv_v,
            "trunk_bn": self.trunk_bn,
            "bottleneck": self.bottleneck,
        }

    def head_layers(self, head: str) -> dict:
        return {f"head_{head.lower()}.{k}": layer for k, layer in self.heads[head].layers.items()}

    def named_layers(self, heads=HEADS) -> dict:
        out = dict(self.trunk_layers())
        for h in heads:
            out.update(self.head_layers(h))
        return out

    def parameters(self, heads=HEADS) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``layer.param``."""
        return {f"{ln}.{pn}": arr for ln, layer in self.named_layers(heads).items() for pn, arr in layer.params.items()}

    def gradients(self, heads=HEADS) -> dict[str, np.ndarray]:
        out = {}
        for ln, layer in self.named_layers(heads).items():
            for pn, arr in layer.params.items():
                out[f"{ln}.{pn}"] = layer.grads.get(pn, np.zeros_like(arr))
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        ln, pn = name.rsplit(".", 1)
        layer = self.named_layers()[ln]
        if pn in layer.params:
            target = layer.params
        elif pn in layer.state:
            target = layer.state
        else:
            raise KeyError(name)
        if target[pn].shape != value.shape:
            raise ShapeError(f"{name}: expected {target[pn].shape}, got {value.shape}")
        target[pn] = np.array(value, dtype=DTYPE)

    def arrays(self) -> dict[str, np.ndarray]:
        """Every array, trainable or not, in a fixed order."""
        out = {}
        for ln, layer in self.named_layers().items():
            for pn, arr in layer.params.items():
                out[f"{ln}.{pn}"] = arr
            for pn, arr in layer.state.items():
                out[f"{ln}.{pn}"] = arr
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=DTYPE).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for layer in self.named_layers().values():
            layer.zero_grad()

    # -- forward / backward ----------------------------------------------------

    def _check_batch(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[0] == 0 or ids.shape[1] != self.config.seq_len:
            raise ShapeError(f"expected a nonempty batch of shape [B, {self.config.seq_len}], got {ids.shape}")
        return ids

    def forward_trunk(self, ids, training: bool = False, rng: SeededRng | None = None) -> np.ndarray:
        ids = self._check_batch(ids)
        if training and ids.shape[0] < 2:
            raise ValueError("training needs a batch of at least 2 statements (batchnorm)")
        e = self.embedding.forward(ids)
        q = self.conv_q.forward(e)
        v = self.conv_v.forward(e)
        a = self.attention.forward(q, v)
        pooled = np.concatenate([self.pool_q.forward(q), self.pool_a.forward(a)], axis=1)
        h = self.dropout.forward(pooled, training, rng)
        h = self.trunk_bn.forward(h, training)
        return self.bottleneck.forward(h)

    def backward_trunk(self, dz: np.ndarray) -> None:
        dh = self.bottleneck.backward(dz)
        dh = self.trunk_bn.backward(dh)
        dpooled = self.dropout.backward(dh)
        F = self.config.conv_filters
        dq = self.pool_q.backward(dpooled[:, :F])
        da = self.pool_a.backward(dpooled[:, F:])
        dq_att, dv = self.attention.backward(da)
        de = self.conv_q.backward(dq + dq_att) + self.conv_v.backward(dv)
        self.embedding.backward(de)

    def forward_heads(self, z: np.ndarray, training: bool, heads=HEADS, joint: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for h in heads:
            act = "sigmoid" if joint else None
            out[h] = self.heads[h].forward(z, training, act)
        return out

    def backward_heads(self, douts: dict[str, np.ndarray]) -> np.ndarray:
        dz = None
        for h, d in douts.items():
            g = self.heads[h].backward(d)
            dz = g if dz is None else dz + g
        return dz

    def forward_joint(self, ids, training: bool = False, rng: SeededRng | None = None) -> np.ndarray:
        """[C | R(4) | G] with every unit passed through a sigmoid."""
        z = self.forward_trunk(ids, training, rng)
        out = self.forward_heads(z, training, joint=True)
        return np.concatenate([out["C"], out["R"], out["G"]], axis=1)

    def backward_joint(self, dout: np.ndarray) -> None:
        k = self.config.remark_classes
        dz = self.backward_heads({"C": dout[:, :1], "R": dout[:, 1 : 1 + k], "G": dout[:, 1 + k :]})
        self.backward_trunk(dz)

    # -- inference -------------------------------------------------------------

    def predict_batch(self, ids) -> list[Prediction]:
        z = self.forward_trunk(ids, training=False)
        out = self.forward_heads(z, training=False)
        return [
            Prediction(
                p_correct=float(out["C"][i, 0]),
                remark_probs=tuple(float(p) for p in out["R"][i]),
                grade_hat=float(out["G"][i, 0]),
                bottleneck_xy=tuple(float(t) for t in z[i]),
            )
            for i in range(z.shape[0])
        ]

    def predict(self, ids) -> Prediction:
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise ShapeError(f"predict takes one encoded statement, got shape {ids.shape}")
        return self.predict_batch(ids[None, :])[0]


def build(config: ModelConfig, rng: SeededRng) -> GraderNet:
    return GraderNet(config, rng)


# -- checkpoints ---------------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(net: GraderNet, config: ModelConfig, vocab: Vocabulary, path) -> None:
    tensors = {name: {"shape": list(arr.shape), "data": arr.tolist()} for name, arr in net.arrays().items()}
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(config),
        "vocabulary": vocab.to_json(),
        "tensors": tensors,
        "crc32": zlib.crc32(_canonical(tensors)),
    }
    Path(path).write_bytes(_canonical(doc) + b"\n")


def load_checkpoint(path) -> tuple[GraderNet, ModelConfig, Vocabulary]:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise TruncatedCheckpointError(f"{path}: not a complete checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise TruncatedCheckpointError(f"{path}: missing format_version")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint format_version {doc['format_version']!r}")
    missing = {"config", "vocabulary", "tensors", "crc32"} - doc.keys()
    if missing:
        raise TruncatedCheckpointError(f"{path}: missing sections {sorted(missing)}")
    if zlib.crc32(_canonical(doc["tensors"])) != doc["crc32"]:
        raise ChecksumError(f"{path}: tensor payload fails its CRC-32 check")

    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    vocab = Vocabulary.from_json(doc["vocabulary"])
    net = GraderNet(config, SeededRng(config.seed))
    expected = net.arrays()
    if set(expected) != set(doc["tensors"]):
        raise TruncatedCheckpointError(f"{path}: tensor set does not match the configured architecture")
    for name, entry in doc["tensors"].items():
        arr = np.array(entry["data"], dtype=DTYPE).reshape(entry["shape"])
        net.set_parameter(name, arr)
    return net, config, vocab
