"""Distillation objectives.

All losses are built from tensor-core ops so gradients flow to the student
and to the projection heads. Batch reduction is a mean, not the sum written
in the layer-wise/concatenated formulas: averaging keeps the lambda weights
scale-free across batch sizes, and the deviation is recorded in every run
manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError, ShapeError
from .mapping import AlpWeights, FixedMapping
from .tensor import Tensor, as_tensor

METHODS = ("none", "vanilla", "pkd_skip", "pkd_last", "alp", "rail_l", "rail_c")

LAMBDA_TOL = 1e-9


@dataclass
class ProjectionHead:
    """Linear maps taking pooled teacher/student states into a shared width u.

    Layer-wise variants share one head pair across all mapped layers; the
    concatenated variant uses maps sized for the joined representation.
    """

    teacher_map: Tensor
    student_map: Tensor
    trainable: bool = True

    def __post_init__(self) -> None:
        tw, sw = self.teacher_map.shape[-1], self.student_map.shape[-1]
        if tw != sw:
            raise ShapeError(f"head output widths disagree: teacher {tw} vs student {sw}")

    def parameters(self) -> list:
        return [self.teacher_map, self.student_map] if self.trainable else []


def init_projection_head(
    d_teacher: int, d_student: int, u: int, seed: int, trainable: bool = True
) -> ProjectionHead:
    rng = np.random.default_rng(seed)
    return ProjectionHead(
        teacher_map=Tensor(rng.normal(0.0, 0.02, size=(d_teacher, u)), requires_grad=trainable),
        student_map=Tensor(rng.normal(0.0, 0.02, size=(d_student, u)), requires_grad=trainable),
        trainable=trainable,
    )


HEADS_VERSION = 1


def save_heads(path, heads) -> None:
    """Write a ProjectionHead or list of heads as a versioned .npz."""
    head_list = [heads] if isinstance(heads, ProjectionHead) else list(heads)
    if not head_list:
        raise ConfigError("nothing to save: empty head list")
    meta = json.dumps({
        "format_version": HEADS_VERSION,
        "shared": isinstance(heads, ProjectionHead),
        "count": len(head_list),
        "trainable": [h.trainable for h in head_list],
    })
    arrays = {}
    for i, h in enumerate(head_list):
        arrays[f"teacher_map_{i}"] = h.teacher_map.data
        arrays[f"student_map_{i}"] = h.student_map.data
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_heads(path):
    """Inverse of save_heads; returns a ProjectionHead or list of heads."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise DataError(f"{path} is not a projection-head file (missing meta entry)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != HEADS_VERSION:
            raise DataError(
                f"unsupported head-file version {meta.get('format_version')!r}"
            )
        out = []
        for i in range(meta["count"]):
            trainable = bool(meta["trainable"][i])
            out.append(ProjectionHead(
                teacher_map=Tensor(data[f"teacher_map_{i}"], requires_grad=trainable),
                student_map=Tensor(data[f"student_map_{i}"], requires_grad=trainable),
                trainable=trainable,
            ))
    return out[0] if meta["shared"] else out


@dataclass(frozen=True)
class DistillConfig:
    method: str = "rail_l"
    lambda1: float = 1 / 3
    lambda2: float = 1 / 3
    lambda3: float = 1 / 3
    alpha: tuple = (1.0,)
    proj_dim: int = 128
    temperature: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    per_layer_heads: bool = False
    rail_per_batch: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if any(l < 0 for l in lams):
            raise ConfigError(f"lambda weights must be non-negative, got {lams}")
        if abs(sum(lams) - 1.0) > LAMBDA_TOL:
            raise ConfigError(f"lambda weights must sum to 1, got {lams} (sum {sum(lams)})")
        alpha = tuple(float(a) for a in self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if not alpha or any(a <= 0 for a in alpha):
            raise ConfigError(f"alpha entries must be > 0, got {alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.proj_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("proj_dim, epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


def effective_lambdas(config: DistillConfig) -> tuple:
    """Per-method lambda masking: none trains on CE alone, vanilla drops ILD."""
    if config.method == "none":
        return (1.0, 0.0, 0.0)
    if config.method == "vanilla":
        return (config.lambda1, config.lambda2, 0.0)
    return (config.lambda1, config.lambda2, config.lambda3)


def resolve_alpha(alpha, k: int) -> tuple:
    """Expand a length-1 alpha to k layers; a length-k alpha passes through."""
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) == 1:
        return alpha * k
    if len(alpha) != k:
        raise ConfigError(f"alpha has {len(alpha)} entries but {k} layers are mapped")
    return alpha


# ---------------------------------------------------------------------------
# Pooling and projection


def mean_pool(layer_states: Tensor) -> Tensor:
    """Row-wise average over the token axis: [L x d] -> [d], [B x L x d] -> [B x d]."""
    layer_states = as_tensor(layer_states)
    if layer_states.ndim < 2:
        raise ShapeError(f"mean_pool needs token x feature input, got shape {layer_states.shape}")
    if layer_states.shape[-2] == 0:
        raise DataError("mean_pool received an empty sequence")
    return layer_states.mean(axis=-2)


def project_normalize(pooled: Tensor, pmap: Tensor, layer=None) -> Tensor:
    """Project pooled states to width u and L2-normalize: h -> h.W / ||h.W||."""
    pooled = as_tensor(pooled)
    single = pooled.ndim == 1
    if single:
        pooled = pooled.reshape((1, pooled.shape[0]))
    projected = T.matmul(pooled, pmap)
    try:
        normed = T.l2_normalize(projected)
    except NumericError as exc:
        where = f" at layer {layer}" if layer is not None else ""
        raise NumericError(f"degenerate projection{where}: {exc}") from exc
    if single:
        normed = normed.reshape((normed.shape[-1],))
    return normed


def _project(pooled: Tensor, pmap: Tensor) -> Tensor:
    """Unnormalized projection, accepting 1-d pooled input."""
    pooled = as_tensor(pooled)
    if pooled.ndim == 1:
        out = T.matmul(pooled.reshape((1, pooled.shape[0])), pmap)
        return out.reshape((out.shape[-1],))
    return T.matmul(pooled, pmap)


def stack_pooled(per_layer: list) -> Tensor:
    """Mean-pool every candidate layer (all but the last) and stack them.

    [B x L x d] states -> [B x k x d]; single-sequence states -> [k x d].
    """
    if len(per_layer) < 2:
        raise ShapeError("need at least two layers (one candidate plus the final layer)")
    pooled = [mean_pool(h) for h in per_layer[:-1]]
    axis = 0 if pooled[0].ndim == 1 else 1
    expanded = []
    for p in pooled:
        shape = list(p.shape)
        shape.insert(axis, 1)
        expanded.append(p.reshape(tuple(shape)))
    return T.concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# Intermediate-layer losses


def _batch_mean(per_sample: Tensor) -> Tensor:
    # 0-d input is a single sample; mean is then the identity
    return per_sample.mean() if per_sample.ndim > 0 else per_sample


def rail_layerwise_loss(teacher_proj: list, student_proj: list, alpha) -> Tensor:
    """Sum over layers of alpha_i * ||t_i - s_i||^2 on unit vectors, batch-meaned.

    Inputs are lists of projected, L2-normalized representations, one entry
    per mapped layer, each [u] or [B x u]. Every term is bounded by 4*alpha_i.
    """
    if len(teacher_proj) != len(student_proj):
        raise ShapeError(
            f"layer list lengths disagree: teacher {len(teacher_proj)} "
            f"vs student {len(student_proj)}"
        )
    if not teacher_proj:
        raise ShapeError("need at least one mapped layer")
    alphas = resolve_alpha(alpha, len(teacher_proj))
    total = None
    for a, t, s in zip(alphas, teacher_proj, student_proj):
        diff = as_tensor(t) - as_tensor(s)
        term = (diff * diff).sum(axis=-1) * a
        total = term if total is None else total + term
    return _batch_mean(total)


def rail_concat_loss(teacher_pooled: list, student_pooled: list, heads: ProjectionHead) -> Tensor:
    """Concatenate pooled layers, project both sides to u, normalize, squared distance."""
    if len(teacher_pooled) != len(student_pooled):
        raise ShapeError(
            f"layer list lengths disagree: teacher {len(teacher_pooled)} "
            f"vs student {len(student_pooled)}"
        )
    if not teacher_pooled:
        raise ShapeError("need at least one mapped layer")
    tcat = T.concat([as_tensor(t) for t in teacher_pooled], axis=-1)
    scat = T.concat([as_tensor(s) for s in student_pooled], axis=-1)
    if tcat.shape[-1] != heads.teacher_map.shape[0]:
        raise ShapeError(
            f"concatenated teacher width {tcat.shape[-1]} does not match "
            f"head input {heads.teacher_map.shape[0]}"
        )
    if scat.shape[-1] != heads.student_map.shape[0]:
        raise ShapeError(
            f"concatenated student width {scat.shape[-1]} does not match "
            f"head input {heads.student_map.shape[0]}"
        )
    t = project_normalize(tcat, heads.teacher_map, layer="concat")
    s = project_normalize(scat, heads.student_map, layer="concat")
    diff = t - s
    return _batch_mean((diff * diff).sum(axis=-1))


def _head_for(heads, i: int) -> ProjectionHead:
    if isinstance(heads, ProjectionHead):
        return heads
    return heads[i]


def layerwise_pooled_loss(teacher_pooled: list, student_pooled: list, heads, alpha,
                          teacher_layers=None, student_layers=None) -> Tensor:
    """Project+normalize pooled pairs and take the layer-wise distance loss.

    The shared arithmetic core behind pkd_loss and the rail_l training path;
    layer index lists only label degenerate-projection errors.
    """
    if len(teacher_pooled) != len(student_pooled):
        raise ShapeError(
            f"layer list lengths disagree: teacher {len(teacher_pooled)} "
            f"vs student {len(student_pooled)}"
        )
    tproj, sproj = [], []
    for idx, (t, s) in enumerate(zip(teacher_pooled, student_pooled)):
        head = _head_for(heads, idx)
        t_label = teacher_layers[idx] if teacher_layers else idx + 1
        s_label = student_layers[idx] if student_layers else idx + 1
        tproj.append(project_normalize(t, head.teacher_map, layer=t_label))
        sproj.append(project_normalize(s, head.student_map, layer=s_label))
    return rail_layerwise_loss(tproj, sproj, alpha)


def pkd_loss(mapping: FixedMapping, teacher_states: list, student_states: list,
             heads, alpha) -> Tensor:
    """Layer-wise normalized squared distance over a fixed teacher mapping.

    teacher_states/student_states are the full per-layer lists; each model's
    final layer is excluded from the mappable range.
    """
    n_avail = len(teacher_states) - 1
    m_avail = len(student_states) - 1
    teacher_pooled, student_pooled = [], []
    for s_i, t_j in mapping.pairs:
        if not 1 <= t_j <= n_avail:
            raise ConfigError(f"teacher layer {t_j} outside intermediate range [1, {n_avail}]")
        if not 1 <= s_i <= m_avail:
            raise ConfigError(f"student layer {s_i} outside intermediate range [1, {m_avail}]")
        teacher_pooled.append(mean_pool(teacher_states[t_j - 1]))
        student_pooled.append(mean_pool(student_states[s_i - 1]))
    return layerwise_pooled_loss(
        teacher_pooled, student_pooled, heads, alpha,
        teacher_layers=[t for _, t in mapping.pairs],
        student_layers=[s for s, _ in mapping.pairs],
    )


def _swap_last2(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(tuple(axes))


def alp_attention_tensor(student_proj: Tensor, teacher_proj: Tensor) -> Tensor:
    """Differentiable dot-product attention of student layers over teacher layers."""
    student_proj, teacher_proj = as_tensor(student_proj), as_tensor(teacher_proj)
    if student_proj.shape[-1] != teacher_proj.shape[-1]:
        raise ShapeError(
            f"projection widths disagree: student {student_proj.shape[-1]} "
            f"vs teacher {teacher_proj.shape[-1]}"
        )
    scores = T.matmul(student_proj, _swap_last2(teacher_proj))
    return T.softmax(scores)


def alp_loss(weights, teacher_proj: Tensor, student_proj: Tensor) -> Tensor:
    """Squared distance between each student layer and its attention-weighted target.

    weights may be a validated AlpWeights container (constant) or a Tensor
    (differentiable, e.g. from alp_attention_tensor).
    """
    if isinstance(weights, AlpWeights):
        w = as_tensor(weights.weights)
    else:
        w = as_tensor(weights)
        sums = w.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6 or (w.data < 0).any():
            raise ConfigError("attention weight rows must be non-negative and sum to 1")
    teacher_proj, student_proj = as_tensor(teacher_proj), as_tensor(student_proj)
    targets = T.matmul(w, teacher_proj)
    diff = targets - student_proj
    per_sample = (diff * diff).sum(axis=-1).sum(axis=-1)
    return _batch_mean(per_sample)


def alp_pooled_loss(teacher_pooled: Tensor, student_pooled: Tensor,
                    heads: ProjectionHead) -> tuple:
    """Attention-mapped loss from stacked pooled states [.. x k x d].

    Projects both sides, L2-normalizes per layer (scores are then cosines in
    [-1, 1] and targets stay bounded, which keeps training stable), attends
    each student layer over all teacher layers, and returns
    (loss, attention weights tensor).
    """
    tproj = T.l2_normalize(_project(teacher_pooled, heads.teacher_map))
    sproj = T.l2_normalize(_project(student_pooled, heads.student_map))
    weights = alp_attention_tensor(sproj, tproj)
    return alp_loss(weights, tproj, sproj), weights


def alp_distill_loss(teacher_states: list, student_states: list,
                     heads: ProjectionHead) -> tuple:
    """Full attention-mapped layer loss from raw hidden states."""
    return alp_pooled_loss(stack_pooled(teacher_states), stack_pooled(student_states), heads)


# ---------------------------------------------------------------------------
# Output losses


def kd_logits_loss(teacher_logits, student_logits, temperature: float) -> Tensor:
    """Temperature-scaled KL(teacher || student) on softened logits, batch-meaned."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    t, s = as_tensor(teacher_logits), as_tensor(student_logits)
    if t.shape != s.shape:
        raise ShapeError(f"logit shapes disagree: teacher {t.shape} vs student {s.shape}")
    inv = 1.0 / temperature
    p = T.softmax(t * inv)
    log_p = T.log_softmax(t * inv)
    log_q = T.log_softmax(s * inv)
    kl = (p * (log_p - log_q)).sum(axis=-1)
    return _batch_mean(kl) * (temperature * temperature)


def ce_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmaxed logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"label out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}"
        )
    onehot = np.zeros(logits.shape)
    np.put_along_axis(
        onehot.reshape(-1, num_classes),
        np.asarray(labels).reshape(-1, 1),
        1.0,
        axis=-1,
    )
    nll = -(T.log_softmax(logits) * Tensor(onehot)).sum(axis=-1)
    return _batch_mean(nll)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error; accepts [B x 1] predictions against [B] targets."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if not np.isfinite(target).all():
        raise DataError("regression target contains non-finite values")
    if pred.ndim == target.ndim + 1 and pred.shape[-1] == 1:
        target = target[..., None]
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {target.shape}")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def total_loss(ce, kd, ild, config: DistillConfig) -> Tensor:
    """Convex combination lambda1*CE + lambda2*KD + lambda3*ILD per the method mask."""
    lams = (config.lambda1, config.lambda2, config.lambda3)
    if abs(sum(lams) - 1.0) > LAMBDA_TOL or any(l < 0 for l in lams):
        raise ConfigError(f"lambda weights must be a convex combination, got {lams}")
    lam1, lam2, lam3 = effective_lambdas(config)
    if config.method == "none":
        return as_tensor(ce)
    out = as_tensor(ce) * lam1 + as_tensor(kd) * lam2
    if lam3 > 0:
        if ild is None:
            raise ConfigError(f"method {config.method!r} requires an intermediate-layer term")
        out = out + as_tensor(ild) * lam3
    return out
