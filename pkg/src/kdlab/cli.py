"""Command-line entry point: data generation, training, timing, diagnostics.

Commands form a pipeline (gen-data -> train-teacher -> distill -> analyze /
benchmark); every command is deterministic given its seed and config, and the
effective configuration lands in the run manifest. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, presets
from .data import TaskSpec, gen_ood_variant, gen_task, load_jsonl, save_jsonl
from .encoder import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, KdlabError, NumericError, ShapeError
from .losses import METHODS, DistillConfig, ProjectionHead, load_heads, save_heads
from .mapping import fixed_mapping
from .train import RunManifest, distill, evaluate, train_teacher

CLI_METHODS = tuple(m.replace("_", "-") for m in METHODS)


def _method_internal(name: str) -> str:
    method = name.replace("-", "_")
    if method not in METHODS:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(CLI_METHODS)}")
    return method


def parse_lambdas(text: str) -> tuple:
    """Parse '1/3,1/3,1/3' (fractions or decimals) into three floats."""
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--lambda needs three comma-separated values, got {text!r}")
    try:
        return tuple(float(Fraction(p.strip())) for p in parts)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse --lambda {text!r}: {exc}") from exc


def parse_alpha(text: str) -> tuple:
    try:
        return tuple(float(Fraction(p.strip())) for p in text.split(","))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse --alpha {text!r}: {exc}") from exc


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _pick(cli_value, file_config: dict, key: str, default):
    """Config precedence: explicit CLI flag > config file entry > default."""
    if cli_value is not None:
        return cli_value
    if key in file_config:
        return file_config[key]
    return default


def _guard_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _task_spec_from(args, file_config: dict) -> TaskSpec:
    spec = presets.task_spec(args.task)
    seed = _pick(getattr(args, "seed", None), file_config, "seed", None)
    if seed is not None:
        spec = replace(spec, seed=int(seed))
    return spec


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    file_config = _load_config_file(args.config)
    spec = _task_spec_from(args, file_config)
    out = _out_dir(args)
    names = ["train", "dev", "test"] + (["ood"] if args.ood else [])
    for name in names:
        _guard_overwrite(out / f"{name}.jsonl", args.force)
    splits = gen_task(spec)
    for name, examples in zip(("train", "dev", "test"), splits):
        save_jsonl(out / f"{name}.jsonl", examples)
    if args.ood:
        save_jsonl(out / "ood.jsonl", gen_ood_variant(spec))
    (out / "task.json").write_text(spec.to_json() + "\n")
    counts = {
        "train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size,
    }
    print(f"wrote {', '.join(names)} under {out} ({json.dumps(counts)})")
    return 0


# ---------------------------------------------------------------------------
# train-teacher


def _splits_for(spec: TaskSpec, data_dir) -> tuple:
    if data_dir is None:
        return gen_task(spec)
    base = Path(data_dir)
    return tuple(
        load_jsonl(base / f"{name}.jsonl", spec) for name in ("train", "dev", "test")
    )


def cmd_train_teacher(args) -> int:
    file_config = _load_config_file(args.config)
    spec = _task_spec_from(args, file_config)
    out = _out_dir(args)
    ckpt_path = out / "teacher.npz"
    manifest_path = out / "teacher_manifest.json"
    _guard_overwrite(ckpt_path, args.force)
    _guard_overwrite(manifest_path, args.force)

    layers = int(_pick(args.layers, file_config, "layers", presets.TEACHER_LAYERS))
    base = presets.teacher_train_config(spec, seed=spec.seed)
    config = replace(
        base,
        epochs=int(_pick(args.epochs, file_config, "epochs", base.epochs)),
        learning_rate=float(
            _pick(args.learning_rate, file_config, "learning_rate", base.learning_rate)
        ),
        batch_size=int(_pick(args.batch_size, file_config, "batch_size", base.batch_size)),
    )
    encoder_config = presets.teacher_encoder(spec, num_layers=layers)
    splits = _splits_for(spec, args.data_dir)
    result = train_teacher(splits, encoder_config, config,
                           patience=presets.teacher_patience(spec))
    save_checkpoint(ckpt_path, result.params, encoder_config)
    manifest_path.write_text(result.manifest.to_json() + "\n")
    (out / "task.json").write_text(spec.to_json() + "\n")
    print(f"teacher dev metric {result.dev_metric:.2f} "
          f"(best epoch {result.manifest.best_epoch}); checkpoint {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# distill


def _student_config_for(spec: TaskSpec, args, file_config: dict) -> EncoderConfig:
    config = presets.student_encoder(spec)
    layers = _pick(args.student_layers, file_config, "student_layers", None)
    if layers is not None:
        config = replace(config, num_layers=int(layers))
    return config


def _distill_config(spec: TaskSpec, method: str, seed: int, args,
                    file_config: dict) -> DistillConfig:
    lambdas = _pick(args.lambdas, file_config, "lambda", None)
    if isinstance(lambdas, str):
        lambdas = parse_lambdas(lambdas)
    alpha = _pick(args.alpha, file_config, "alpha", None)
    if isinstance(alpha, str):
        alpha = parse_alpha(alpha)
    overrides = {}
    if lambdas is not None:
        overrides.update(lambda1=lambdas[0], lambda2=lambdas[1], lambda3=lambdas[2])
    if alpha is not None:
        overrides["alpha"] = tuple(alpha)
    for key, flag in (
        ("proj_dim", args.proj_dim), ("temperature", args.temperature),
        ("epochs", args.epochs), ("batch_size", args.batch_size),
        ("learning_rate", args.learning_rate),
    ):
        value = _pick(flag, file_config, key, None)
        if value is not None:
            overrides[key] = type(DistillConfig.__dataclass_fields__[key].default)(value)
    return presets.distill_config(spec, method, seed, **overrides)


def cmd_distill(args) -> int:
    file_config = _load_config_file(args.config)
    method = _method_internal(args.method)
    spec = _task_spec_from(args, file_config)
    out = _out_dir(args)

    teacher_config, teacher_params = load_checkpoint(args.teacher)
    student_config = _student_config_for(spec, args, file_config)
    splits = _splits_for(spec, args.data_dir)

    seeds = list(range(1, args.seeds + 1)) if args.seeds else [
        int(_pick(args.seed, file_config, "seed", 1))
    ]
    # constructing the configs up front rejects bad lambdas before any training
    configs = {
        seed: _distill_config(spec, method, seed, args, file_config) for seed in seeds
    }
    for seed in seeds:
        _guard_overwrite(out / f"manifest_seed{seed}.json", args.force)

    shutil.copyfile(args.teacher, out / "teacher.npz")
    (out / "task.json").write_text(spec.to_json() + "\n")
    rows = []
    for seed in seeds:
        result = distill(teacher_params, teacher_config, student_config,
                         configs[seed], splits, patience=presets.DISTILL_PATIENCE)
        save_checkpoint(out / f"student_seed{seed}.npz", result.student, student_config)
        if result.heads is not None:
            save_heads(out / f"heads_seed{seed}.npz", result.heads)
        (out / f"manifest_seed{seed}.json").write_text(result.manifest.to_json() + "\n")
        rows.append((seed, result.manifest.final_dev_metric,
                     result.manifest.final_test_metric))
        print(f"seed {seed}: dev {rows[-1][1]:.2f} test {rows[-1][2]:.2f}")
    if len(rows) > 1:
        devs = [r[1] for r in rows]
        tests = [r[2] for r in rows]
        analysis.export_csv(
            out / "summary.csv",
            ["seed", "dev_metric", "test_metric"],
            [[s, repr(d), repr(t)] for s, d, t in rows],
        )
        print(f"{method} over {len(rows)} seeds: "
              f"dev {np.mean(devs):.2f}±{np.std(devs, ddof=1):.2f} "
              f"test {np.mean(tests):.2f}±{np.std(tests, ddof=1):.2f} "
              f"-> {out / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# benchmark (timing matrix)


def cmd_benchmark(args) -> int:
    file_config = _load_config_file(args.config)
    methods = [
        _method_internal(m.strip())
        for m in _pick(args.methods, file_config, "methods",
                       "vanilla,pkd-skip,alp,rail-l").split(",")
    ]
    if len(methods) < 2:
        raise ConfigError("benchmark needs at least 2 methods to compare")
    depths = [int(d) for d in _pick(args.depths, file_config, "depths", "8,24").split(",")]
    epochs = int(_pick(args.epochs, file_config, "epochs", 6))
    if epochs < 3:
        raise ConfigError("benchmark needs at least 3 epochs (first is warm-up)")
    seed = int(_pick(args.seed, file_config, "seed", 1))
    spec = _task_spec_from(args, file_config)
    out = _out_dir(args)
    csv_path = out / "timing.csv"
    _guard_overwrite(csv_path, args.force)

    splits = gen_task(spec)
    student_config = presets.student_encoder(spec)
    header = ["teacher_layers", "method", "epochs_measured", "median_seconds",
              "ratio_vs_vanilla"]
    all_rows = []
    reports = {}
    for depth in depths:
        teacher_config = presets.teacher_encoder(spec, num_layers=depth)
        # timing depends on shapes, not on fit, so an untrained teacher serves
        teacher_params = init_params(teacher_config, seed=0)
        manifests = {}
        for method in methods:
            config = presets.distill_config(
                spec, method, seed, epochs=epochs, learning_rate=1e-3
            )
            result = distill(teacher_params, teacher_config, student_config,
                             config, splits, patience=epochs + 1)
            manifests[method] = result.manifest
        report = analysis.timing_report(manifests, baseline="vanilla")
        reports[depth] = report
        for row in report.rows:
            all_rows.append([
                depth, row["method"], row["epochs_measured"],
                repr(row["median_seconds"]), repr(row["ratio_vs_baseline"]),
            ])
        print(f"teacher depth {depth}: " + "  ".join(
            f"{r['method']}={r['median_seconds'] * 1e3:.0f}ms"
            f" (x{r['ratio_vs_baseline']:.2f})"
            for r in report.rows
        ))
    analysis.export_csv(csv_path, header, all_rows)
    print(f"note: {reports[depths[0]].note}")
    if "alp" in methods and "rail_l" in methods and len(depths) >= 2:
        shallow, deep = depths[0], depths[-1]
        r_shallow = reports[shallow].median_for("alp") / reports[shallow].median_for("rail_l")
        r_deep = reports[deep].median_for("alp") / reports[deep].median_for("rail_l")
        print(f"alp/rail-l ratio: {r_shallow:.3f} at {shallow} layers, "
              f"{r_deep:.3f} at {deep} layers")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def _load_run(run_dir: Path, seed: int):
    task_path = run_dir / "task.json"
    if not task_path.exists():
        raise DataError(f"{run_dir} has no task.json; point --run at a distill output")
    spec = TaskSpec.from_json(task_path.read_text())
    teacher_config, teacher_params = load_checkpoint(run_dir / "teacher.npz")
    student_config, student_params = load_checkpoint(run_dir / f"student_seed{seed}.npz")
    manifest = RunManifest.from_json(
        (run_dir / f"manifest_seed{seed}.json").read_text()
    )
    heads_path = run_dir / f"heads_seed{seed}.npz"
    heads = load_heads(heads_path) if heads_path.exists() else None
    return spec, teacher_config, teacher_params, student_config, student_params, manifest, heads


def _tokens_from(examples, limit: int) -> np.ndarray:
    picked = examples[:limit]
    return np.array([ex.tokens for ex in picked], dtype=np.int64)


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    out = _out_dir(args)
    (spec, teacher_config, teacher_params, student_config, student_params,
     manifest, heads) = _load_run(run_dir, args.seed)
    splits = gen_task(spec)

    if args.cosine:
        if heads is None:
            raise ConfigError(
                "cosine analysis needs a run with projection heads "
                "(methods pkd-skip, pkd-last, alp, rail-l)"
            )
        sample_head = heads if isinstance(heads, ProjectionHead) else heads[0]
        if sample_head.teacher_map.shape[0] != teacher_config.hidden_dim:
            raise ConfigError(
                "cosine analysis needs layer-wise heads; this run used "
                "concatenated projections"
            )
        full_path = out / "cosine_full.csv"
        _guard_overwrite(full_path, args.force)
        tokens = _tokens_from(splits[1], args.samples)
        matrix = analysis.layer_cosine_matrix(
            teacher_params, teacher_config, student_params, student_config,
            heads, tokens,
        )
        analysis.export_matrix_csv(full_path, matrix)
        analysis.write_pgm(out / "cosine_full.pgm", matrix)
        mapping = fixed_mapping(
            teacher_config.num_layers - 1, student_config.num_layers - 1, "skip"
        )
        mean_cos = analysis.mapped_mean_cosine(matrix, mapping.pairs)
        filt_students = [i for i in (1, 2, 3) if i <= matrix.shape[0]]
        filt_teachers = [j for j in (2, 4, 6) if j <= matrix.shape[1]]
        view = analysis.filtered_view(matrix, filt_students, filt_teachers)
        view_path = out / "cosine_filtered.csv"
        analysis.export_matrix_csv(view_path, view)
        print(f"mapped-layer mean cosine {mean_cos:.4f} "
              f"(skip mapping {list(mapping.teacher_indices())})")
        print(f"wrote {full_path}, {view_path}, {out / 'cosine_full.pgm'}")
        return 0

    # --alp-heatmap
    method = manifest.config.get("method")
    if method != "alp":
        raise ConfigError(
            f"--alp-heatmap needs an alp run, got method {method!r}"
        )
    hm_path = out / "alp_heatmap.csv"
    _guard_overwrite(hm_path, args.force)
    tokens = _tokens_from(splits[0], len(splits[0]))  # all training samples
    teacher_pooled = analysis.pooled_intermediates(teacher_params, teacher_config, tokens)
    student_pooled = analysis.pooled_intermediates(student_params, student_config, tokens)
    heatmap = analysis.attention_heatmap(
        manifest.config, teacher_pooled, student_pooled, heads
    )
    analysis.export_matrix_csv(hm_path, heatmap)
    analysis.write_pgm(out / "alp_heatmap.pgm", heatmap)
    print(f"max column mass {analysis.max_column_mass(heatmap):.4f} "
          f"(rows sum to 1 within {np.abs(heatmap.sum(axis=1) - 1).max():.2e})")
    print(f"wrote {hm_path}, {out / 'alp_heatmap.pgm'}")
    return 0


# ---------------------------------------------------------------------------
# parser plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdlab",
        description="Layer-to-layer knowledge distillation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="write JSONL splits for a task")
    p.add_argument("--task", required=True, help=f"one of {', '.join(sorted(presets.TASKS))}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--ood", action="store_true",
                   help="also write the shifted-distribution split")
    add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="fit and checkpoint a teacher")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir", help="read splits from gen-data output instead of regenerating")
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint (.npz)")
    p.add_argument("--task", required=True)
    p.add_argument("--method", required=True, help=f"one of {', '.join(CLI_METHODS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--lambda", dest="lambdas", metavar="L1,L2,L3",
                   help="loss weights, e.g. 1/3,1/3,1/3")
    p.add_argument("--alpha", help="per-layer weights, e.g. 1 or 1,2,1")
    p.add_argument("--proj-dim", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--student-layers", type=int)
    p.add_argument("--seed", type=int, help="single run with this seed")
    p.add_argument("--seeds", type=int,
                   help="run seeds 1..K and report mean±std")
    add_common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("benchmark", help="per-epoch timing across methods and depths")
    p.add_argument("--task", default="motif")
    p.add_argument("--methods", metavar="M1,M2,...",
                   help="default vanilla,pkd-skip,alp,rail-l")
    p.add_argument("--depths", metavar="D1,D2", help="teacher depths, default 8,24")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("analyze", help="layer-similarity and attention diagnostics")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--cosine", action="store_true",
                       help="layer cosine-similarity matrix")
    group.add_argument("--alp-heatmap", action="store_true",
                       help="attention heatmap of an alp run")
    p.add_argument("--run", required=True, help="distill output directory")
    p.add_argument("--seed", type=int, default=1, help="which seed's artifacts to read")
    p.add_argument("--samples", type=int, default=100,
                   help="dev samples for the cosine matrix")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
