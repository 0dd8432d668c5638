"""Post-training diagnostics: layer similarity, attention maps, timing tables.

Everything here is read-only over trained parameters and run manifests, so the
functions take plain numpy views of the data and never build autodiff graphs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderParams, forward
from .errors import ConfigError, MeasurementError, ShapeError
from .losses import ProjectionHead

_COSINE_EPS = 1e-12


def _safe_norm(x: np.ndarray) -> np.ndarray:
    """Last-axis norms with zeros replaced by 1, so 0-vectors divide to 0."""
    norm = np.linalg.norm(x, axis=-1)
    return np.where(norm < _COSINE_EPS, 1.0, norm)


# ---------------------------------------------------------------------------
# Pooled-state extraction


def pooled_intermediates(params: EncoderParams, config: EncoderConfig, tokens,
                         batch_size: int = 64) -> np.ndarray:
    """Mean-pooled candidate-layer states for N sequences: [N x (layers-1) x d].

    The final block feeds the task head and is excluded, matching the set of
    layers eligible for intermediate distillation.
    """
    parts = []
    for start in range(0, len(tokens), batch_size):
        out = forward(params, tokens[start : start + batch_size], config)
        parts.append(
            np.stack([h.data.mean(axis=1) for h in out.per_layer[:-1]], axis=1)
        )
    return np.concatenate(parts)


def _head_for_row(heads, i: int) -> ProjectionHead:
    if isinstance(heads, ProjectionHead):
        return heads
    return heads[i]


# ---------------------------------------------------------------------------
# Layer cosine similarity


def cosine_from_pooled(teacher_pooled: np.ndarray, student_pooled: np.ndarray,
                       heads) -> np.ndarray:
    """Mean-over-samples cosine between projected layer pairs.

    teacher_pooled [N x (n-1) x d1], student_pooled [N x (m-1) x d2];
    returns [(m-1) x (n-1)] with entry (i, j) the mean cosine between the
    projections of student layer i+1 and teacher layer j+1. Cosine divides
    by the norms, so any positive rescaling of the raw states cancels.
    """
    if heads is None:
        raise ConfigError("cosine analysis needs the run's projection heads")
    teacher_pooled = np.asarray(teacher_pooled, dtype=np.float64)
    student_pooled = np.asarray(student_pooled, dtype=np.float64)
    if teacher_pooled.ndim != 3 or student_pooled.ndim != 3:
        raise ShapeError(
            f"pooled states must be [N x layers x d], got "
            f"{teacher_pooled.shape} and {student_pooled.shape}"
        )
    if teacher_pooled.shape[0] != student_pooled.shape[0]:
        raise ShapeError(
            f"sample counts disagree: teacher {teacher_pooled.shape[0]} "
            f"vs student {student_pooled.shape[0]}"
        )
    m = student_pooled.shape[1]
    n = teacher_pooled.shape[1]
    matrix = np.zeros((m, n))
    for i in range(m):
        head = _head_for_row(heads, i)
        s = student_pooled[:, i] @ head.student_map.data  # [N x u]
        t = teacher_pooled @ head.teacher_map.data  # [N x n x u]
        s_norm = _safe_norm(s)
        t_norm = _safe_norm(t)
        dots = np.einsum("nju,nu->nj", t, s)
        matrix[i] = (dots / (t_norm * s_norm[:, None])).mean(axis=0)
    return matrix


def layer_cosine_matrix(teacher_params: EncoderParams, teacher_config: EncoderConfig,
                        student_params: EncoderParams, student_config: EncoderConfig,
                        heads, tokens, batch_size: int = 64) -> np.ndarray:
    """Cosine similarity between every (student layer, teacher layer) pair.

    Uses the run's trained projection heads to bring both sides into the
    shared width before measuring. tokens is an [N x L] int array, N >= 1.
    """
    if len(tokens) < 1:
        raise ShapeError("need at least one sample sequence")
    tp = pooled_intermediates(teacher_params, teacher_config, tokens, batch_size)
    sp = pooled_intermediates(student_params, student_config, tokens, batch_size)
    return cosine_from_pooled(tp, sp, heads)


def mapped_mean_cosine(matrix: np.ndarray, pairs) -> float:
    """Mean cosine over (student_layer, teacher_layer) 1-based index pairs."""
    matrix = np.asarray(matrix)
    vals = []
    for s_i, t_j in pairs:
        if not (1 <= s_i <= matrix.shape[0] and 1 <= t_j <= matrix.shape[1]):
            raise ConfigError(
                f"mapped pair ({s_i}, {t_j}) outside matrix {matrix.shape}"
            )
        vals.append(matrix[s_i - 1, t_j - 1])
    if not vals:
        raise ConfigError("need at least one mapped pair")
    return float(np.mean(vals))


def filtered_view(matrix: np.ndarray, student_layers, teacher_layers) -> np.ndarray:
    """Submatrix restricted to the given 1-based layer indices."""
    matrix = np.asarray(matrix)
    rows = [i - 1 for i in student_layers]
    cols = [j - 1 for j in teacher_layers]
    if any(not 0 <= r < matrix.shape[0] for r in rows) or any(
        not 0 <= c < matrix.shape[1] for c in cols
    ):
        raise ConfigError(
            f"layer indices {list(student_layers)} x {list(teacher_layers)} "
            f"outside matrix {matrix.shape}"
        )
    return matrix[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# Attention heatmap


def attention_heatmap(manifest_config: dict, teacher_pooled: np.ndarray,
                      student_pooled: np.ndarray, heads: ProjectionHead) -> np.ndarray:
    """Attention weights of an attention-mapped run, averaged over all samples.

    Returns [(m-1) x (n-1)]; every row is a softmax over teacher layers, so
    rows of the average sum to 1 as well.
    """
    method = manifest_config.get("method")
    if method != "alp":
        raise ConfigError(
            f"attention heatmap requires an attention-mapped run, got method {method!r}"
        )
    if not isinstance(heads, ProjectionHead):
        raise ConfigError("attention heatmap needs the run's shared projection head")
    # mirror the training path: L2-normalized projections, cosine scores
    t = np.asarray(teacher_pooled, dtype=np.float64) @ heads.teacher_map.data
    s = np.asarray(student_pooled, dtype=np.float64) @ heads.student_map.data
    t /= _safe_norm(t)[..., None]
    s /= _safe_norm(s)[..., None]
    scores = np.einsum("niu,nju->nij", s, t)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)
    return weights.mean(axis=0)


def max_column_mass(heatmap: np.ndarray) -> float:
    """Largest share of total attention mass landing on a single teacher layer."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    total = heatmap.sum()
    if heatmap.ndim != 2 or total <= 0:
        raise ShapeError("heatmap must be a 2-d nonnegative matrix with positive mass")
    return float(heatmap.sum(axis=0).max() / total)


# ---------------------------------------------------------------------------
# Timing


@dataclass
class TimingReport:
    """Median per-epoch seconds per method, with ratios against a baseline.

    The first epoch of every run is discarded as warm-up (allocator and cache
    effects); medians over the rest keep a single slow epoch from moving any
    ratio on its own.
    """

    baseline: str
    rows: list = field(default_factory=list)  # {method, epochs_measured, median_seconds, ratio}
    note: str = "first epoch discarded as warm-up; medians over the rest"

    def median_for(self, method: str) -> float:
        for row in self.rows:
            if row["method"] == method:
                return row["median_seconds"]
        raise ConfigError(f"no timing row for method {method!r}")

    def ratio_for(self, method: str) -> float:
        for row in self.rows:
            if row["method"] == method:
                return row["ratio_vs_baseline"]
        raise ConfigError(f"no timing row for method {method!r}")


def epoch_seconds(manifest) -> list:
    """Per-epoch wall times from a run manifest, warm-up epoch dropped."""
    times = [rec["seconds"] for rec in manifest.epochs]
    return times[1:]


def timing_report(manifests: dict, baseline: str = "vanilla") -> TimingReport:
    """Build the per-method timing table from {method: RunManifest}.

    Needs at least two methods, at least three measured epochs each (so at
    least two survive the warm-up discard), and the baseline present.
    """
    if len(manifests) < 2:
        raise MeasurementError(
            f"timing comparison needs at least 2 methods, got {len(manifests)}"
        )
    if baseline not in manifests:
        raise ConfigError(
            f"baseline method {baseline!r} missing from manifests "
            f"({sorted(manifests)})"
        )
    medians = {}
    counts = {}
    for method, manifest in manifests.items():
        times = epoch_seconds(manifest)
        if len(times) < 2:
            raise MeasurementError(
                f"method {method!r} has {len(manifest.epochs)} measured epochs; "
                "need at least 3 (first is discarded as warm-up)"
            )
        medians[method] = float(np.median(times))
        counts[method] = len(times)
    base = medians[baseline]
    report = TimingReport(baseline=baseline)
    for method in sorted(manifests):
        report.rows.append({
            "method": method,
            "epochs_measured": counts[method],
            "median_seconds": medians[method],
            "ratio_vs_baseline": medians[method] / base,
        })
    return report


# ---------------------------------------------------------------------------
# CSV / image emission


def export_csv(path, header, rows) -> None:
    """Write header + rows with RFC-4180 quoting and a fixed column order."""
    header = list(header)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            row = list(row)
            if len(row) != len(header):
                raise ShapeError(
                    f"row width {len(row)} does not match header width {len(header)}"
                )
            writer.writerow(row)


def read_csv(path) -> tuple:
    """Read back (header, rows) as lists of strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return [], []
    return rows[0], rows[1:]


def export_matrix_csv(path, matrix: np.ndarray, row_name: str = "student_layer",
                      col_name: str = "teacher_layer") -> None:
    """Matrix as CSV with 1-based labeled rows and columns, full float repr."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"need a 2-d matrix, got shape {matrix.shape}")
    header = [row_name] + [f"{col_name}_{j + 1}" for j in range(matrix.shape[1])]
    rows = [
        [f"{row_name}_{i + 1}"] + [repr(float(v)) for v in matrix[i]]
        for i in range(matrix.shape[0])
    ]
    export_csv(path, header, rows)


def export_timing_csv(path, report: TimingReport) -> None:
    header = ["method", "epochs_measured", "median_seconds", "ratio_vs_baseline"]
    rows = [
        [r["method"], r["epochs_measured"], repr(r["median_seconds"]),
         repr(r["ratio_vs_baseline"])]
        for r in report.rows
    ]
    export_csv(path, header, rows)


def write_pgm(path, matrix: np.ndarray) -> None:
    """Plain-text PGM (P2) render of a matrix, min-max scaled to 0..255.

    A constant matrix renders mid-gray. Self-contained by design: no image
    libraries, viewable with any netpbm-aware tool.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ShapeError(f"need a non-empty 2-d matrix, got shape {matrix.shape}")
    lo, hi = matrix.min(), matrix.max()
    if hi - lo < 1e-300:
        pixels = np.full(matrix.shape, 128, dtype=np.int64)
    else:
        pixels = np.rint((matrix - lo) / (hi - lo) * 255.0).astype(np.int64)
    lines = [f"P2\n{matrix.shape[1]} {matrix.shape[0]}\n255\n"]
    for row in pixels:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    with open(path, "w") as fh:
        fh.writelines(lines)
