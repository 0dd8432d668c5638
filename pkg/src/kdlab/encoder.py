"""Small transformer encoder that exposes every intermediate hidden state.

The same backbone serves as teacher and student; only the config differs.
Layer outputs are indexed 1-based (per_layer[i-1] is the output of block i),
and the embedding output is not part of per_layer, so distillation candidates
are blocks 1..num_layers-1 with the final block reserved for the task head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .tensor import Tensor

CHECKPOINT_VERSION = 1

TASK_KINDS = ("classification", "regression")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ff_dim: int
    vocab_size: int
    max_len: int
    num_classes: int
    task_kind: str = "classification"

    def __post_init__(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ff_dim",
                     "vocab_size", "max_len", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2 (one intermediate plus the output layer)")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.task_kind == "regression" and self.num_classes != 1:
            raise ConfigError("regression encoders use num_classes == 1")


def count_intermediate(config: EncoderConfig) -> int:
    """Number of distillation-candidate layers: all blocks except the last."""
    return config.num_layers - 1


class EncoderParams:
    """Named parameter tensors for one encoder, in a stable insertion order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def named_trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def freeze(self) -> None:
        """Detach every tensor from future graphs (frozen teacher)."""
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def assert_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise NumericError(f"parameter {name} contains non-finite values")


@dataclass
class HiddenStates:
    """Output of one forward pass: all block outputs plus classifier logits.

    per_layer[i-1] is H_i, the output of transformer block i (1-based), shaped
    [L x hidden_dim] for a single sequence or [B x L x hidden_dim] for a batch.
    """

    per_layer: list = field(default_factory=list)
    logits: Tensor = None


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Fresh parameters with normal(0, 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d, ff = config.hidden_dim, config.ff_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    tensors: dict[str, Tensor] = {
        "tok_emb": w(config.vocab_size, d),
        "pos_emb": w(config.max_len, d),
    }
    for i in range(1, config.num_layers + 1):
        p = f"block{i}"
        for mat in ("wq", "wk", "wv", "wo"):
            tensors[f"{p}.attn.{mat}"] = w(d, d)
        for vec in ("bq", "bk", "bv", "bo"):
            tensors[f"{p}.attn.{vec}"] = zeros(d)
        tensors[f"{p}.ln1.g"] = ones(d)
        tensors[f"{p}.ln1.b"] = zeros(d)
        tensors[f"{p}.ff.w1"] = w(d, ff)
        tensors[f"{p}.ff.b1"] = zeros(ff)
        tensors[f"{p}.ff.w2"] = w(ff, d)
        tensors[f"{p}.ff.b2"] = zeros(d)
        tensors[f"{p}.ln2.g"] = ones(d)
        tensors[f"{p}.ln2.b"] = zeros(d)
    tensors["head.w"] = w(d, config.num_classes)
    tensors["head.b"] = zeros(config.num_classes)
    return EncoderParams(tensors)


def _attention(x: Tensor, params: EncoderParams, prefix: str, config: EncoderConfig) -> Tensor:
    batch, length, d = x.data.shape
    heads = config.num_heads
    dh = d // heads

    def proj(mat: str, vec: str) -> Tensor:
        y = T.matmul(x, params[f"{prefix}.{mat}"]) + params[f"{prefix}.{vec}"]
        return y.reshape((batch, length, heads, dh)).transpose((0, 2, 1, 3))

    q = proj("wq", "bq")
    k = proj("wk", "bk")
    v = proj("wv", "bv")
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    ctx = T.matmul(T.softmax(scores), v)
    merged = ctx.transpose((0, 2, 1, 3)).reshape((batch, length, d))
    return T.matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def forward(params: EncoderParams, tokens, config: EncoderConfig) -> HiddenStates:
    """Run the encoder, returning every block output plus classifier logits.

    tokens: int array [L] or [B x L]. Deterministic given params and tokens.
    """
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"tokens must be an int sequence or batch, got shape {ids.shape}")
    batch, length = ids.shape
    if length > config.max_len:
        raise DataError(f"sequence length {length} exceeds max_len {config.max_len}")
    if length == 0:
        raise DataError("empty token sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError(
            f"token id out of range [0, {config.vocab_size}): "
            f"min {ids.min()}, max {ids.max()}"
        )

    x = T.embedding(params["tok_emb"], ids) + T.embedding(params["pos_emb"], np.arange(length))
    per_layer: list[Tensor] = []
    for i in range(1, config.num_layers + 1):
        p = f"block{i}"
        attn = _attention(x, params, f"{p}.attn", config)
        x = T.layer_norm(x + attn, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        hidden = T.gelu(T.matmul(x, params[f"{p}.ff.w1"]) + params[f"{p}.ff.b1"])
        ff = T.matmul(hidden, params[f"{p}.ff.w2"]) + params[f"{p}.ff.b2"]
        x = T.layer_norm(x + ff, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        per_layer.append(x)

    pooled = x.mean(axis=1)
    logits = T.matmul(pooled, params["head.w"]) + params["head.b"]
    if single:
        per_layer = [h.reshape((length, config.hidden_dim)) for h in per_layer]
        logits = logits.reshape((config.num_classes,))
    return HiddenStates(per_layer=per_layer, logits=logits)


def save_checkpoint(path, params: EncoderParams, config: EncoderConfig) -> None:
    """Write a versioned .npz of named float64 tensors; round-trips bit-exactly."""
    meta = json.dumps({"format_version": CHECKPOINT_VERSION, "config": asdict(config)})
    arrays = {name: t.data for name, t in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_checkpoint(path) -> tuple[EncoderConfig, EncoderParams]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__meta__" not in archive.files:
            raise DataError(f"{path} is not an encoder checkpoint (missing meta entry)")
        meta = json.loads(archive["__meta__"].item())
        version = meta.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise DataError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        config = EncoderConfig(**meta["config"])
        tensors = {
            name: Tensor(archive[name], requires_grad=True)
            for name in archive.files
            if name != "__meta__"
        }
    return config, EncoderParams(tensors)
