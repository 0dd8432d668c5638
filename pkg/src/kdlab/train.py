"""Teacher training, the distillation loop, and multi-seed experiment running.

A run is deterministic given its seed: batch order, student initialization,
projection heads, and per-epoch layer selections all derive from it. The only
nondeterministic manifest fields are wall-clock timings, which are excluded
by ``manifest_fingerprint`` when comparing runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, EncoderParams, count_intermediate, forward, init_params
from .errors import ConfigError, NumericError
from .losses import (
    DistillConfig,
    ProjectionHead,
    alp_pooled_loss,
    ce_loss,
    init_projection_head,
    kd_logits_loss,
    layerwise_pooled_loss,
    mean_pool,
    mse_loss,
    rail_concat_loss,
    total_loss,
)
from .mapping import fixed_mapping, select_for_epoch, selection_rng, random_select
from .tensor import Tensor, backward, zero_grads

_SALT_STUDENT = 101
_SALT_HEADS = 102
_SALT_BATCH = 103

WALL_CLOCK_FIELDS = ("seconds", "cumulative_seconds")


class Adam:
    """Adam with fixed betas (0.9, 0.999) and eps 1e-8."""

    def __init__(self, params: list, learning_rate: float):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= self.learning_rate * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


@dataclass
class RunManifest:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)  # one record per completed epoch
    step_losses: list = field(default_factory=list)  # rows: step, ce, kd, ild, total
    final_dev_metric: float = 0.0
    final_test_metric: float = 0.0
    best_epoch: int = 0
    notes: tuple = ("batch losses are means, not sums over the batch",)

    def to_json(self) -> str:
        payload = dict(self.__dict__)
        payload["notes"] = list(self.notes)
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "RunManifest":
        payload = json.loads(text)
        payload["notes"] = tuple(payload.get("notes", ()))
        return RunManifest(**payload)


def manifest_fingerprint(manifest: RunManifest) -> str:
    """Canonical JSON with wall-clock fields stripped, for determinism checks."""
    payload = json.loads(manifest.to_json())
    for record in payload.get("epochs", []):
        for name in WALL_CLOCK_FIELDS:
            record.pop(name, None)
    return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# Batching and metrics


def _as_arrays(examples) -> tuple:
    tokens = np.array([ex.tokens for ex in examples], dtype=np.int64)
    labels = np.array([ex.label for ex in examples])
    return tokens, labels


def _batches(n: int, batch_size: int, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def evaluate(params: EncoderParams, config: EncoderConfig, examples,
             batch_size: int = 64) -> float:
    """Task metric as a percentage: accuracy, or Pearson r for regression."""
    tokens, labels = _as_arrays(examples)
    preds = []
    for idx in _batches(len(examples), batch_size):
        logits = forward(params, tokens[idx], config).logits.data
        if config.task_kind == "regression":
            preds.extend(logits[:, 0].tolist())
        else:
            preds.extend(np.argmax(logits, axis=1).tolist())
    if config.task_kind == "regression":
        return 100.0 * pearson(preds, labels)
    return 100.0 * float(np.mean(np.asarray(preds) == labels))


def _snapshot(params_list: list) -> list:
    return [p.data.copy() for p in params_list]


def _restore(params_list: list, snapshot: list) -> None:
    for p, data in zip(params_list, snapshot):
        p.data = data.copy()


# ---------------------------------------------------------------------------
# Teacher training


@dataclass
class TeacherResult:
    params: EncoderParams
    dev_metric: float
    manifest: RunManifest


def train_teacher(splits, encoder_config: EncoderConfig, config: DistillConfig,
                  patience: int = 5) -> TeacherResult:
    """Fit the teacher on ground-truth labels only, with dev early stopping."""
    train, dev = splits[0], splits[1]
    params = init_params(encoder_config, seed=config.seed)
    optimizer = Adam(params.trainable(), config.learning_rate)
    tokens, labels = _as_arrays(train)
    manifest = RunManifest(
        config={"role": "teacher", "encoder": encoder_config.__dict__,
                "epochs": config.epochs, "batch_size": config.batch_size,
                "learning_rate": config.learning_rate, "patience": patience},
        seed=config.seed,
    )
    best = -np.inf
    best_snapshot = None
    stale = 0
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        rng = np.random.default_rng([config.seed, _SALT_BATCH, epoch])
        epoch_losses = []
        for idx in _batches(len(train), config.batch_size, rng):
            out = forward(params, tokens[idx], encoder_config)
            if encoder_config.task_kind == "regression":
                loss = mse_loss(out.logits, labels[idx])
            else:
                loss = ce_loss(out.logits, labels[idx].astype(np.int64))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"teacher training diverged at epoch {epoch} (loss {value})"
                )
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            step += 1
            epoch_losses.append(value)
            manifest.step_losses.append(
                {"step": step, "ce": value, "kd": 0.0, "ild": 0.0, "total": value}
            )
        params.assert_finite()
        dev_metric = evaluate(params, encoder_config, dev)
        now = time.perf_counter()
        manifest.epochs.append({
            "epoch": epoch, "selection": None,
            "ce": float(np.mean(epoch_losses)), "kd": 0.0, "ild": 0.0,
            "total": float(np.mean(epoch_losses)),
            "dev_metric": dev_metric,
            "seconds": now - epoch_start,
            "cumulative_seconds": now - start,
        })
        if dev_metric > best:
            best = dev_metric
            best_snapshot = _snapshot(optimizer.params)
            manifest.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > patience:
                break
    if best_snapshot is not None:
        _restore(optimizer.params, best_snapshot)
    manifest.final_dev_metric = best
    return TeacherResult(params=params, dev_metric=best, manifest=manifest)


# ---------------------------------------------------------------------------
# Distillation


@dataclass
class DistillResult:
    manifest: RunManifest
    student: EncoderParams
    heads: object  # ProjectionHead, list of heads, or None


def _build_heads(method: str, teacher_config: EncoderConfig, student_config: EncoderConfig,
                 config: DistillConfig):
    k = count_intermediate(student_config)
    d1, d2 = teacher_config.hidden_dim, student_config.hidden_dim
    seed = np.random.SeedSequence([config.seed, _SALT_HEADS]).generate_state(1)[0]
    if method in ("none", "vanilla"):
        return None
    if method == "rail_c":
        return init_projection_head(k * d1, k * d2, config.proj_dim, seed=seed)
    if config.per_layer_heads:
        return [
            init_projection_head(d1, d2, config.proj_dim, seed=seed + i) for i in range(k)
        ]
    return init_projection_head(d1, d2, config.proj_dim, seed=seed)


def _head_parameters(heads) -> list:
    if heads is None:
        return []
    if isinstance(heads, ProjectionHead):
        return heads.parameters()
    out = []
    for h in heads:
        out.extend(h.parameters())
    return out


def _shared_head(heads) -> ProjectionHead:
    return heads if isinstance(heads, ProjectionHead) else heads[0]


@dataclass
class TeacherCache:
    """Frozen-teacher outputs for a fixed example set, computed once per run."""

    pooled: np.ndarray  # [N x num_layers x d1] mean-pooled block outputs
    logits: np.ndarray  # [N x num_classes]


def build_teacher_cache(params: EncoderParams, config: EncoderConfig, tokens,
                        batch_size: int = 64) -> TeacherCache:
    pooled_parts, logit_parts = [], []
    for start in range(0, len(tokens), batch_size):
        out = forward(params, tokens[start : start + batch_size], config)
        pooled_parts.append(np.stack([h.data.mean(axis=1) for h in out.per_layer], axis=1))
        logit_parts.append(out.logits.data)
    return TeacherCache(np.concatenate(pooled_parts), np.concatenate(logit_parts))


def _ild_loss(method: str, selection, teacher_pooled: np.ndarray, student_states,
              heads, config: DistillConfig, mapping=None):
    """Method dispatch for the intermediate-layer term. Returns a Tensor or None.

    teacher_pooled is the cached [B x num_layers x d1] slice for this batch;
    student_states is the live per-layer list from the student forward pass.
    """
    if method in ("none", "vanilla"):
        return None
    if method in ("pkd_skip", "pkd_last"):
        pairs = mapping.pairs
        return layerwise_pooled_loss(
            [Tensor(teacher_pooled[:, t_j - 1]) for _, t_j in pairs],
            [mean_pool(student_states[s_i - 1]) for s_i, _ in pairs],
            heads, config.alpha,
            teacher_layers=[t for _, t in pairs],
            student_layers=[s for s, _ in pairs],
        )
    n_candidates = teacher_pooled.shape[1] - 1
    k = len(student_states) - 1
    if method == "alp":
        spooled = [mean_pool(student_states[i]) for i in range(k)]
        stacked_s = T.concat(
            [p.reshape((p.shape[0], 1, p.shape[1])) for p in spooled], axis=1
        )
        loss, _ = alp_pooled_loss(
            Tensor(teacher_pooled[:, :n_candidates]), stacked_s, _shared_head(heads)
        )
        return loss
    if method == "rail_l":
        return layerwise_pooled_loss(
            [Tensor(teacher_pooled[:, t_j - 1]) for t_j in selection.teacher_indices],
            [mean_pool(student_states[i]) for i in range(k)],
            heads, config.alpha,
            teacher_layers=list(selection.teacher_indices),
            student_layers=list(range(1, k + 1)),
        )
    if method == "rail_c":
        tpooled = [Tensor(teacher_pooled[:, t_j - 1]) for t_j in selection.teacher_indices]
        spooled = [mean_pool(student_states[i]) for i in range(k)]
        return rail_concat_loss(tpooled, spooled, heads)
    raise ConfigError(f"unknown method {method!r}")


def distill(teacher_params: EncoderParams, teacher_config: EncoderConfig,
            student_config: EncoderConfig, config: DistillConfig, splits,
            patience: int = 5) -> DistillResult:
    """Train a student against a frozen teacher; returns manifest + artifacts."""
    if teacher_config.num_classes != student_config.num_classes:
        raise ConfigError("teacher and student disagree on num_classes")
    if teacher_config.task_kind != student_config.task_kind:
        raise ConfigError("teacher and student disagree on task_kind")
    n_int = count_intermediate(teacher_config)
    m_int = count_intermediate(student_config)
    if config.method in ("pkd_skip", "pkd_last", "alp", "rail_l", "rail_c") and m_int > n_int:
        raise ConfigError(
            f"student has {m_int} intermediate layers but teacher only {n_int}"
        )
    teacher_params.freeze()
    train, dev, test = splits[0], splits[1], splits[2]
    tokens, labels = _as_arrays(train)
    int_labels = labels.astype(np.int64) if student_config.task_kind != "regression" else labels
    cache = build_teacher_cache(teacher_params, teacher_config, tokens)

    student_seed = np.random.SeedSequence([config.seed, _SALT_STUDENT]).generate_state(1)[0]
    student = init_params(student_config, seed=student_seed)
    heads = _build_heads(config.method, teacher_config, student_config, config)
    trainables = student.trainable() + _head_parameters(heads)
    optimizer = Adam(trainables, config.learning_rate)

    mapping = None
    if config.method in ("pkd_skip", "pkd_last"):
        mapping = fixed_mapping(n_int, m_int, config.method.removeprefix("pkd_"))

    manifest = RunManifest(
        config={
            "role": "student",
            "method": config.method,
            "teacher": teacher_config.__dict__,
            "student": student_config.__dict__,
            "distill": {**config.__dict__, "alpha": list(config.alpha)},
            "patience": patience,
        },
        seed=config.seed,
    )
    best = -np.inf
    best_snapshot = None
    stale = 0
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        selection = None
        if config.method in ("rail_l", "rail_c"):
            selection = select_for_epoch(n_int, m_int, seed=config.seed, epoch=epoch)
        batch_rng = np.random.default_rng([config.seed, _SALT_BATCH, epoch])
        draw_rng = selection_rng(config.seed, epoch) if config.rail_per_batch else None
        sums = {"ce": 0.0, "kd": 0.0, "ild": 0.0, "total": 0.0}
        count = 0
        epoch_selections = []
        for idx in _batches(len(train), config.batch_size, batch_rng):
            if draw_rng is not None and config.method in ("rail_l", "rail_c"):
                selection = random_select(
                    n_int, m_int, draw_rng, epoch=epoch, seed=config.seed
                )
            if selection is not None and (not epoch_selections or config.rail_per_batch):
                epoch_selections.append(selection.to_record())
            student_out = forward(student, tokens[idx], student_config)
            if student_config.task_kind == "regression":
                ce = mse_loss(student_out.logits, int_labels[idx])
                kd = mse_loss(student_out.logits, cache.logits[idx])
            else:
                ce = ce_loss(student_out.logits, int_labels[idx])
                kd = kd_logits_loss(
                    Tensor(cache.logits[idx]), student_out.logits, config.temperature
                )
            ild = _ild_loss(
                config.method, selection, cache.pooled[idx], student_out.per_layer,
                heads, config, mapping=mapping,
            )
            loss = total_loss(ce, kd, ild, config)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"distillation diverged at epoch {epoch} (loss {value})")
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            step += 1
            count += 1
            row = {
                "step": step,
                "ce": ce.item(),
                "kd": 0.0 if config.method == "none" else kd.item(),
                "ild": 0.0 if ild is None else ild.item(),
                "total": value,
            }
            manifest.step_losses.append(row)
            for name in sums:
                sums[name] += row[name] if name != "total" else value
        student.assert_finite()
        dev_metric = evaluate(student, student_config, dev)
        now = time.perf_counter()
        if mapping is not None:
            recorded = [{"epoch": epoch, "indices": list(mapping.teacher_indices()),
                         "seed": config.seed}]
        else:
            recorded = epoch_selections
        manifest.epochs.append({
            "epoch": epoch,
            "selection": recorded or None,
            "ce": sums["ce"] / count, "kd": sums["kd"] / count,
            "ild": sums["ild"] / count, "total": sums["total"] / count,
            "dev_metric": dev_metric,
            "seconds": now - epoch_start,
            "cumulative_seconds": now - start,
        })
        if dev_metric > best:
            best = dev_metric
            best_snapshot = _snapshot(trainables)
            manifest.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > patience:
                break
    if best_snapshot is not None:
        _restore(trainables, best_snapshot)
    manifest.final_dev_metric = best
    manifest.final_test_metric = evaluate(student, student_config, test)
    return DistillResult(manifest=manifest, student=student, heads=heads)


# ---------------------------------------------------------------------------
# Multi-seed experiments


@dataclass
class SeedSummary:
    seeds: list
    dev_metrics: list
    test_metrics: list

    @property
    def dev_mean(self) -> float:
        return float(np.mean(self.dev_metrics))

    @property
    def dev_std(self) -> float:
        return float(np.std(self.dev_metrics, ddof=1))

    @property
    def test_mean(self) -> float:
        return float(np.mean(self.test_metrics))

    @property
    def test_std(self) -> float:
        return float(np.std(self.test_metrics, ddof=1))


def run_seeds(experiment, seeds) -> SeedSummary:
    """Run ``experiment(seed) -> RunManifest`` per seed; mean and sample stddev."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError("run_seeds needs at least 2 seeds for a sample stddev")
    devs, tests = [], []
    for seed in seeds:
        manifest = experiment(seed)
        devs.append(manifest.final_dev_metric)
        tests.append(manifest.final_test_metric)
    return SeedSummary(seeds=seeds, dev_metrics=devs, test_metrics=tests)
