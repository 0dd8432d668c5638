"""Tests for the diagnostics: cosine matrices, heatmaps, timing, CSV export."""

import csv

import numpy as np
import pytest

from kdlab.analysis import (
    TimingReport,
    attention_heatmap,
    cosine_from_pooled,
    epoch_seconds,
    export_csv,
    export_matrix_csv,
    export_timing_csv,
    filtered_view,
    layer_cosine_matrix,
    mapped_mean_cosine,
    max_column_mass,
    pooled_intermediates,
    read_csv,
    timing_report,
    write_pgm,
)
from kdlab.encoder import EncoderConfig, init_params
from kdlab.errors import ConfigError, MeasurementError, ShapeError
from kdlab.losses import ProjectionHead, alp_pooled_loss, init_projection_head
from kdlab.tensor import Tensor
from kdlab.train import RunManifest


def identity_head(d: int) -> ProjectionHead:
    return ProjectionHead(
        teacher_map=Tensor(np.eye(d)), student_map=Tensor(np.eye(d)), trainable=False
    )


def manifest_with_seconds(seconds) -> RunManifest:
    return RunManifest(
        config={}, seed=0,
        epochs=[{"epoch": i + 1, "seconds": s} for i, s in enumerate(seconds)],
    )


# --- cosine matrices ----------------------------------------------------------


def test_self_comparison_with_identity_heads_has_unit_diagonal():
    rng = np.random.default_rng(0)
    pooled = rng.normal(size=(5, 3, 4))
    matrix = cosine_from_pooled(pooled, pooled.copy(), identity_head(4))
    assert matrix.shape == (3, 3)
    assert np.abs(np.diag(matrix) - 1.0).max() < 1e-12


def test_cosine_entries_within_unit_interval():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(8, 7, 6))
    s = rng.normal(size=(8, 3, 5))
    heads = init_projection_head(6, 5, 4, seed=3)
    matrix = cosine_from_pooled(t, s, heads)
    assert matrix.shape == (3, 7)
    assert matrix.min() >= -1.0 - 1e-12
    assert matrix.max() <= 1.0 + 1e-12


def test_cosine_invariant_to_positive_rescaling_of_states():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(6, 4, 5))
    s = rng.normal(size=(6, 2, 3))
    heads = init_projection_head(5, 3, 8, seed=4)
    base = cosine_from_pooled(t, s, heads)
    scaled = cosine_from_pooled(t * 37.5, s * 0.004, heads)
    assert np.abs(base - scaled).max() < 1e-9


def test_cosine_requires_heads():
    rng = np.random.default_rng(3)
    pooled = rng.normal(size=(2, 2, 3))
    with pytest.raises(ConfigError, match="projection heads"):
        cosine_from_pooled(pooled, pooled, None)


def test_cosine_rejects_mismatched_sample_counts():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeError, match="sample counts"):
        cosine_from_pooled(
            rng.normal(size=(3, 2, 4)), rng.normal(size=(2, 2, 4)), identity_head(4)
        )


def test_layer_cosine_matrix_end_to_end_shapes():
    config = EncoderConfig(num_layers=4, hidden_dim=8, num_heads=2, ff_dim=16,
                           vocab_size=11, max_len=6, num_classes=2)
    small = EncoderConfig(num_layers=3, hidden_dim=8, num_heads=2, ff_dim=16,
                          vocab_size=11, max_len=6, num_classes=2)
    teacher = init_params(config, seed=0)
    student = init_params(small, seed=1)
    tokens = np.random.default_rng(5).integers(0, 11, size=(9, 6))
    heads = init_projection_head(8, 8, 4, seed=6)
    matrix = layer_cosine_matrix(teacher, config, student, small, heads, tokens)
    assert matrix.shape == (2, 3)
    with pytest.raises(ShapeError, match="at least one sample"):
        layer_cosine_matrix(teacher, config, student, small, heads, tokens[:0])


def test_pooled_intermediates_excludes_final_layer_and_matches_manual():
    config = EncoderConfig(num_layers=3, hidden_dim=8, num_heads=2, ff_dim=16,
                           vocab_size=9, max_len=5, num_classes=2)
    params = init_params(config, seed=7)
    tokens = np.random.default_rng(8).integers(0, 9, size=(4, 5))
    pooled = pooled_intermediates(params, config, tokens, batch_size=3)
    assert pooled.shape == (4, 2, 8)
    from kdlab.encoder import forward

    out = forward(params, tokens, config)
    manual = np.stack([h.data.mean(axis=1) for h in out.per_layer[:-1]], axis=1)
    assert np.abs(pooled - manual).max() < 1e-12


def test_mapped_mean_cosine_arithmetic_and_bounds():
    matrix = np.array([[0.2, 0.4, 0.6], [0.1, 0.3, 0.5]])
    assert abs(mapped_mean_cosine(matrix, [(1, 2), (2, 3)]) - 0.45) < 1e-12
    with pytest.raises(ConfigError, match="outside matrix"):
        mapped_mean_cosine(matrix, [(3, 1)])
    with pytest.raises(ConfigError, match="at least one"):
        mapped_mean_cosine(matrix, [])


def test_filtered_view_selects_requested_layers():
    matrix = np.arange(12, dtype=np.float64).reshape(3, 4)
    view = filtered_view(matrix, [1, 3], [2, 4])
    assert view.shape == (2, 2)
    assert view.tolist() == [[1.0, 3.0], [9.0, 11.0]]
    with pytest.raises(ConfigError, match="outside matrix"):
        filtered_view(matrix, [4], [1])


# --- attention heatmaps ---------------------------------------------------------


def test_heatmap_rows_sum_to_one():
    rng = np.random.default_rng(9)
    t = rng.normal(size=(12, 5, 6))
    s = rng.normal(size=(12, 3, 4))
    heads = init_projection_head(6, 4, 8, seed=10)
    hm = attention_heatmap({"method": "alp"}, t, s, heads)
    assert hm.shape == (3, 5)
    assert np.abs(hm.sum(axis=-1) - 1.0).max() < 1e-6


def test_heatmap_single_teacher_layer_takes_all_mass():
    rng = np.random.default_rng(11)
    t = rng.normal(size=(6, 1, 5))
    s = rng.normal(size=(6, 2, 4))
    heads = init_projection_head(5, 4, 3, seed=12)
    hm = attention_heatmap({"method": "alp"}, t, s, heads)
    assert hm.shape == (2, 1)
    assert np.abs(hm - 1.0).max() < 1e-12


def test_heatmap_rejects_non_alp_run():
    rng = np.random.default_rng(13)
    t = rng.normal(size=(2, 3, 4))
    s = rng.normal(size=(2, 2, 4))
    heads = init_projection_head(4, 4, 3, seed=14)
    with pytest.raises(ConfigError, match="method 'rail_l'"):
        attention_heatmap({"method": "rail_l"}, t, s, heads)


def test_heatmap_matches_training_attention_weights():
    rng = np.random.default_rng(15)
    t = rng.normal(size=(7, 4, 6))
    s = rng.normal(size=(7, 2, 5))
    heads = init_projection_head(6, 5, 8, seed=16)
    _, weights = alp_pooled_loss(Tensor(t), Tensor(s), heads)
    hm = attention_heatmap({"method": "alp"}, t, s, heads)
    assert np.abs(hm - weights.data.mean(axis=0)).max() < 1e-9


def test_max_column_mass_hand_case():
    hm = np.array([[0.8, 0.2], [0.6, 0.4]])
    assert abs(max_column_mass(hm) - 0.7) < 1e-12
    assert abs(max_column_mass(np.array([[1.0], [1.0]])) - 1.0) < 1e-12
    with pytest.raises(ShapeError):
        max_column_mass(np.zeros((2, 2)))


# --- timing ---------------------------------------------------------------------


def test_epoch_seconds_discards_warmup_epoch():
    manifest = manifest_with_seconds([9.0, 1.0, 2.0, 3.0])
    assert epoch_seconds(manifest) == [1.0, 2.0, 3.0]


def test_timing_report_medians_and_ratios():
    manifests = {
        "vanilla": manifest_with_seconds([5.0, 1.0, 1.0, 1.0, 1.0]),
        "alp": manifest_with_seconds([5.0, 2.0, 2.0, 2.0, 2.0]),
    }
    report = timing_report(manifests)
    assert report.ratio_for("vanilla") == 1.0
    assert report.median_for("alp") == 2.0
    assert abs(report.ratio_for("alp") - 2.0) < 1e-12


def test_timing_single_slow_epoch_cannot_move_the_median():
    clean = manifest_with_seconds([1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    spiked = manifest_with_seconds([1.0, 1.0, 1.0, 500.0, 1.0, 1.0])
    report = timing_report({"vanilla": clean, "rail_l": spiked})
    assert report.median_for("rail_l") == 1.0
    assert report.ratio_for("rail_l") == 1.0


def test_timing_report_rejects_thin_measurements():
    good = manifest_with_seconds([1.0, 1.0, 1.0])
    with pytest.raises(MeasurementError, match="at least 2 methods"):
        timing_report({"vanilla": good})
    with pytest.raises(MeasurementError, match="at least 3"):
        timing_report({"vanilla": good, "alp": manifest_with_seconds([1.0, 1.0])})
    with pytest.raises(ConfigError, match="baseline"):
        timing_report({"alp": good, "rail_l": good}, baseline="vanilla")


def test_timing_report_missing_method_lookup_fails():
    report = TimingReport(baseline="vanilla")
    with pytest.raises(ConfigError, match="no timing row"):
        report.median_for("alp")


# --- CSV / PGM ------------------------------------------------------------------


def test_csv_round_trip_preserves_cells(tmp_path):
    path = tmp_path / "report.csv"
    header = ["method", "value", "note"]
    rows = [["rail_l", repr(0.123456789012345), 'has,comma and "quote"'],
            ["alp", repr(2.5), "line\nbreak"]]
    export_csv(path, header, rows)
    got_header, got_rows = read_csv(path)
    assert got_header == header
    assert got_rows == rows
    assert abs(float(got_rows[0][1]) - 0.123456789012345) < 1e-9


def test_csv_empty_report_writes_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    export_csv(path, ["a", "b"], [])
    header, rows = read_csv(path)
    assert header == ["a", "b"]
    assert rows == []


def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ShapeError, match="row width"):
        export_csv(tmp_path / "bad.csv", ["a", "b"], [["only-one"]])


def test_matrix_csv_layout_and_numeric_fidelity(tmp_path):
    path = tmp_path / "matrix.csv"
    matrix = np.array([[0.25, -1.0 / 3.0], [1e-9, 4.0]])
    export_matrix_csv(path, matrix)
    header, rows = read_csv(path)
    assert header == ["student_layer", "teacher_layer_1", "teacher_layer_2"]
    assert [r[0] for r in rows] == ["student_layer_1", "student_layer_2"]
    parsed = np.array([[float(v) for v in r[1:]] for r in rows])
    assert np.abs(parsed - matrix).max() < 1e-9


def test_timing_csv_is_parseable(tmp_path):
    report = timing_report({
        "vanilla": manifest_with_seconds([3.0, 1.0, 1.0, 1.0]),
        "rail_l": manifest_with_seconds([3.0, 1.1, 1.1, 1.1]),
    })
    path = tmp_path / "timing.csv"
    export_timing_csv(path, report)
    header, rows = read_csv(path)
    assert header[0] == "method"
    by_method = {r[0]: r for r in rows}
    assert abs(float(by_method["rail_l"][3]) - 1.1) < 1e-9


def test_pgm_writer_scales_to_full_range(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
    text = path.read_text().split()
    assert text[0] == "P2"
    assert text[1:4] == ["2", "2", "255"]
    pixels = [int(v) for v in text[4:]]
    assert min(pixels) == 0 and max(pixels) == 255
    write_pgm(path, np.ones((2, 3)))
    flat = path.read_text().split()
    assert flat[1:4] == ["3", "2", "255"]
    assert set(flat[4:]) == {"128"}
    with pytest.raises(ShapeError):
        write_pgm(path, np.ones((0, 2)))
