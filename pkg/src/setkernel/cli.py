"""Command-line pipeline: synth, featurize, herd, train, predict, crossval,
herd-bench, interpret, stats.

Every command takes --config/--seed/--threads/--out plus per-key flags;
flags override config-file values override defaults. Runs are deterministic:
identical inputs, config, and seed produce byte-identical output files.
Exit codes: 0 ok, 2 config/validation, 3 data/IO, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import interpret as itp
from .classifier import (
    apply_model,
    cross_validate,
    fit_pipeline,
    load_model,
    model_config,
    save_model,
)
from .config import (
    PipelineConfig,
    build_config,
    coerce_setting,
    derive_seed,
    parse_config_file,
)
from .data import FLOAT_FMT, LabeledDataset, load_manifest, load_sample_set, save_sample_set
from .embedding import embed_matrix
from .errors import ConfigError, DataError, NumericalError
from .herding import herd, subset, uniform_subsample
from .rff import philox_rng, sample_frequencies
from .synth import generate_files, load_spec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_CONFIG_FLAGS = ("gamma", "D", "m", "folds", "runs", "reg_c", "subsample_method",
                 "preprocessing", "clusters_C", "features")


def _fmt(v) -> str:
    return format(float(v), FLOAT_FMT)


def _effective_config(args) -> PipelineConfig:
    file_settings = parse_config_file(args.config) if args.config else None
    overrides = {}
    for key in _CONFIG_FLAGS:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = coerce_setting(key, str(raw))
    if args.seed is not None:
        overrides["seed"] = int(args.seed)
    if args.threads is not None:
        overrides["threads"] = int(args.threads)
    return build_config(file_settings, overrides)


def _config_comment(cfg: PipelineConfig) -> str:
    return "# config: " + " ".join(f"{k}={v}" for k, v in cfg.as_dict().items())


def _write_meta(out_dir: Path, cfg: PipelineConfig, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"setkernel_version={__version__}",
             f"numpy_version={np.__version__}"]
    lines += [f"{k}={v}" for k, v in cfg.as_dict().items()]
    (out_dir / "meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows, comment: str | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    if comment:
        out.append(comment)
    out.append(",".join(header))
    for row in rows:
        out.append(",".join(row))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def _prepared_samples(dataset: LabeledDataset, cfg: PipelineConfig):
    """Preprocessed samples per config (standardizer fit on the whole manifest)."""
    from .classifier import _preprocess

    samples, std = _preprocess(dataset.samples, cfg)
    return samples, std


def _align_to_model(sample, model):
    """Permute sample columns into the model's training marker order."""
    expected = model.train_meta.get("marker_names", "")
    if not expected:
        return sample
    expected = tuple(expected.split(","))
    if sample.marker_names == expected:
        return sample
    if sorted(sample.marker_names) != sorted(expected):
        raise DataError(
            f"sample {sample.sample_id!r} markers {sample.marker_names} do not "
            f"match the model's markers {expected}"
        )
    perm = [sample.marker_names.index(m) for m in expected]
    from .data import SampleSet

    return SampleSet(cells=sample.cells[:, perm], sample_id=sample.sample_id,
                     marker_names=expected)


def cmd_synth(args) -> int:
    cfg = _effective_config(args)
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=int(args.seed))
    out_dir = Path(args.out)
    manifest = generate_files(spec, out_dir)
    _write_meta(out_dir, cfg, "synth")
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    samples, _ = _prepared_samples(dataset, cfg)
    rmap = sample_frequencies(dataset.d, cfg.D, cfg.gamma, derive_seed(cfg.seed, "rff"))
    out_dir = Path(args.out)
    rows = []
    for s in samples:
        mu = embed_matrix(rmap, s.cells)
        rows.append([s.sample_id] + [_fmt(v) for v in mu])
    header = ["sample_id"] + [f"mu_{j}" for j in range(cfg.D)]
    _write_csv(out_dir / "embeddings.csv", header, rows, _config_comment(cfg))
    _write_meta(out_dir, cfg, "featurize")
    print(f"wrote {out_dir / 'embeddings.csv'}")
    return EXIT_OK


def cmd_herd(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    prepared, _ = _prepared_samples(dataset, cfg)
    rmap = sample_frequencies(dataset.d, cfg.D, cfg.gamma, derive_seed(cfg.seed, "rff"))
    out_dir = Path(args.out)
    index_rows = []
    for raw, prep in zip(dataset.samples, prepared):
        m = prep.n if cfg.m is None else min(cfg.m, prep.n)
        if cfg.subsample_method == "uniform":
            res = uniform_subsample(prep, m, derive_seed(cfg.seed, f"uniform:{prep.sample_id}"))
        else:
            res = herd(rmap, prep, m)
        save_sample_set(subset(raw, res), out_dir / "cells" / f"{raw.sample_id}.csv")
        for rank, idx in enumerate(res.selected_indices):
            index_rows.append([raw.sample_id, str(rank), str(idx)])
    _write_csv(out_dir / "indices.csv", ["sample_id", "selection_order", "row_index"],
               index_rows, _config_comment(cfg))
    _write_meta(out_dir, cfg, "herd")
    print(f"wrote {out_dir / 'indices.csv'}")
    return EXIT_OK


def cmd_herd_bench(args) -> int:
    cfg = _effective_config(args)
    spec = load_spec(args.spec)
    try:
        m_values = sorted({int(v) for v in args.m_list.split(",")})
    except ValueError:
        raise ConfigError(f"bad m list {args.m_list!r}; expected comma-separated ints") from None
    if any(m < 1 for m in m_values):
        raise ConfigError("m values must be positive")
    if any(m > spec.cells_per_set for m in m_values):
        raise ConfigError(f"m values must not exceed cells_per_set={spec.cells_per_set}")
    n_seeds = int(args.bench_seeds)
    if n_seeds < 1:
        raise ConfigError("bench-seeds must be >= 1")
    from .synth import _draw_sample

    errors = {("herding", m): [] for m in m_values}
    errors.update({("uniform", m): [] for m in m_values})
    m_max = max(m_values)
    for si in range(n_seeds):
        sample = _draw_sample(spec, spec.weights_neg,
                              derive_seed(spec.seed, f"bench:{si}"), f"bench_{si:03d}")
        rmap = sample_frequencies(spec.d, cfg.D, cfg.gamma,
                                  derive_seed(cfg.seed, f"bench-rff:{si}"))
        mu_full = embed_matrix(rmap, sample.cells)
        order = np.asarray(herd(rmap, sample, m_max).selected_indices)
        for m in m_values:
            mu_h = embed_matrix(rmap, sample.cells[order[:m]])
            errors[("herding", m)].append(float(np.linalg.norm(mu_h - mu_full)))
            res = uniform_subsample(sample, m,
                                    derive_seed(cfg.seed, f"bench-unif:{si}:{m}"))
            mu_u = embed_matrix(rmap, sample.cells[np.asarray(res.selected_indices)])
            errors[("uniform", m)].append(float(np.linalg.norm(mu_u - mu_full)))
    rows = [[method, str(m), _fmt(np.mean(errors[(method, m)]))]
            for method in ("herding", "uniform") for m in m_values]
    out_dir = Path(args.out)
    _write_csv(out_dir / "herd_bench.csv", ["method", "m", "embedding_error"],
               rows, _config_comment(cfg))
    _write_meta(out_dir, cfg, "herd-bench")
    print(f"wrote {out_dir / 'herd_bench.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    model = fit_pipeline(dataset, cfg)
    save_model(model, args.model)
    out_dir = Path(args.out)
    _write_meta(out_dir, cfg, "train")
    print(f"wrote {args.model}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _effective_config(args)
    model = load_model(args.model)
    expected = model.train_meta.get("marker_names", "")
    expected_markers = expected.split(",") if expected else None
    samples = []
    if args.manifest:
        dataset = load_manifest(args.manifest)
        samples = list(dataset.samples)
    for path in args.samples:
        samples.append(load_sample_set(path, expected_markers=expected_markers))
    if not samples:
        raise ConfigError("predict needs --manifest or at least one sample CSV")
    for s in samples:
        if s.d != model.rff.d:
            raise DataError(
                f"sample {s.sample_id!r} has d={s.d}, model expects d={model.rff.d}"
            )
    samples = [_align_to_model(s, model) for s in samples]
    label_names = {-1: model.train_meta.get("label_neg", "-1"),
                   +1: model.train_meta.get("label_pos", "+1")}
    rows = []
    for s in samples:
        dec = apply_model(model, s)
        rows.append([s.sample_id, _fmt(dec), label_names[-1 if dec < 0 else +1]])
    out_dir = Path(args.out)
    _write_csv(out_dir / "predictions.csv", ["sample_id", "decision", "label"], rows,
               _config_comment(model_config(model)))
    _write_meta(out_dir, cfg, "predict")
    print(f"wrote {out_dir / 'predictions.csv'}")
    return EXIT_OK


def _permuted(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    rng = philox_rng(seed)
    perm = rng.permutation(dataset.N)
    return LabeledDataset(samples=dataset.samples,
                          labels=tuple(dataset.labels[i] for i in perm),
                          label_names=dataset.label_names)


def cmd_crossval(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    if cfg.folds > dataset.N:
        raise ConfigError(f"folds exceeds sample count ({cfg.folds} > {dataset.N})")
    if args.permute_labels is not None:
        dataset = _permuted(dataset, int(args.permute_labels))
    out_dir = Path(args.out)
    sweep_gammas = ([float(v) for v in args.sweep_gamma.split(",")]
                    if args.sweep_gamma else [cfg.gamma])
    sweep_regs = ([float(v) for v in args.sweep_reg_c.split(",")]
                  if args.sweep_reg_c else [cfg.reg_c])
    sweeping = args.sweep_gamma or args.sweep_reg_c
    summary_rows = []
    for gamma in sweep_gammas:
        for reg_c in sweep_regs:
            sub_cfg = replace(cfg, gamma=gamma, reg_c=reg_c)
            sub_cfg.validate()
            report = cross_validate(dataset, sub_cfg)
            rows = [[str(r), str(f), _fmt(acc)]
                    for r, accs in enumerate(report.accuracies)
                    for f, acc in enumerate(accs)]
            name = (f"report_gamma{gamma:g}_c{reg_c:g}.csv" if sweeping else "report.csv")
            _write_csv(out_dir / name, ["run", "fold", "accuracy"], rows,
                       _config_comment(sub_cfg))
            line = f"{report.mean * 100:.2f} ± {report.std * 100:.2f}"
            summary_rows.append([_fmt(gamma), _fmt(reg_c), _fmt(report.mean), _fmt(report.std)])
            prefix = f"gamma={gamma:g} reg_c={reg_c:g} " if sweeping else ""
            print(f"{prefix}accuracy {line}")
    if sweeping:
        _write_csv(out_dir / "sweep.csv", ["gamma", "reg_c", "mean", "std"],
                   summary_rows, _config_comment(cfg))
    _write_meta(out_dir, cfg, "crossval")
    return EXIT_OK


def _interpret_pipeline(dataset: LabeledDataset, model, cfg: PipelineConfig):
    """Sub-select every sample through the model's pipeline and pool the cells.

    Clustering runs in the same feature space the model consumes (after the
    model's stored preprocessing), which is recorded in the outputs.
    """
    mcfg = model_config(model)
    cofactor = mcfg.arcsinh_cofactor()
    prepared = []
    for s in dataset.samples:
        if s.d != model.rff.d:
            raise DataError(f"sample {s.sample_id!r} has d={s.d}, model expects d={model.rff.d}")
        s = _align_to_model(s, model)
        if cofactor is not None:
            from .data import arcsinh_transform

            s = arcsinh_transform(s, cofactor)
        std = model.train_meta.get("standardizer")
        if std is not None:
            from .data import apply_standardizer

            s = apply_standardizer(std, s)
        prepared.append(s)
    subs, index_map = [], []
    for s in prepared:
        m = s.n if mcfg.m is None else min(mcfg.m, s.n)
        if mcfg.subsample_method == "uniform":
            res = uniform_subsample(s, m, derive_seed(mcfg.seed, f"uniform:{s.sample_id}"))
        else:
            res = herd(model.rff, s, m)
        subs.append(subset(s, res))
        index_map.append(res.selected_indices)
    pooled = np.concatenate([s.cells for s in subs], axis=0)
    return subs, index_map, pooled


def cmd_interpret(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    model = load_model(args.model)
    subs, index_map, pooled = _interpret_pipeline(dataset, model, cfg)
    clusters = itp.kmeans(pooled, cfg.clusters_C, derive_seed(cfg.seed, "kmeans"))
    region = itp.region_scores(model, clusters, pooled, subs)
    out_dir = Path(args.out)
    comment = _config_comment(cfg)

    score_rows = []
    offset = 0
    for s, indices in zip(subs, index_map):
        scores = itp.cell_scores(model, s.cells)
        ids = clusters.assignments[offset:offset + s.n]
        for k, (orig_idx, sc, cid) in enumerate(zip(indices, scores, ids)):
            score_rows.append([s.sample_id, str(orig_idx), _fmt(sc), str(cid)])
        offset += s.n
    _write_csv(out_dir / "scores.csv", ["sample_id", "cell_index", "score", "cluster_id"],
               score_rows, comment)

    d = clusters.d
    header = (["cluster_id", "size", "centroid_score", "average_score"]
              + [f"centroid_{j}" for j in range(d)] + [f"gradient_{j}" for j in range(d)])
    cluster_rows = []
    sizes = np.bincount(clusters.assignments, minlength=clusters.C)
    for c in range(clusters.C):
        grad = itp.score_gradient(model, clusters.centroids[c])
        cluster_rows.append(
            [str(c), str(int(sizes[c])), _fmt(region.centroid_scores[c]),
             _fmt(region.average_scores[c])]
            + [_fmt(v) for v in clusters.centroids[c]]
            + [_fmt(v) for v in grad]
        )
    _write_csv(out_dir / "clusters.csv", header, cluster_rows, comment)

    freq_header = ["sample_id", "label"] + [f"freq_{c}" for c in range(clusters.C)]
    freq_rows = [
        [sid, dataset.label_names[lab]] + [_fmt(v) for v in freqs]
        for sid, lab, freqs in zip(region.sample_ids, dataset.labels, region.frequencies)
    ]
    _write_csv(out_dir / "frequencies.csv", freq_header, freq_rows, comment)

    y = np.asarray(dataset.labels)
    stat_rows = []
    for c in range(clusters.C):
        f_neg = region.frequencies[y == -1, c]
        f_pos = region.frequencies[y == +1, c]
        p = itp.rank_sum_test(f_neg, f_pos)
        stat_rows.append([str(c), _fmt(p)])
    _write_csv(out_dir / "stats.csv", ["cluster_id", "rank_sum_p"], stat_rows, comment)

    try:
        r = itp.pearson(region.centroid_scores, region.average_scores)
        pearson_line = f"pearson_centroid_vs_average={_fmt(r)}"
    except ValueError:
        pearson_line = "pearson_centroid_vs_average=n/a: zero variance"
    space_line = ("clustering_space=model feature space (preprocessing="
                  f"{model.train_meta.get('preprocessing', 'none')})")
    (out_dir / "summary.txt").write_text(
        comment + "\n" + pearson_line + "\n" + space_line + "\n", encoding="utf-8"
    )
    _write_meta(out_dir, cfg, "interpret")
    print(pearson_line)
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _effective_config(args)
    dataset = load_manifest(args.manifest)
    labels_by_id = {s.sample_id: y for s, y in zip(dataset.samples, dataset.labels)}
    freq_path = Path(args.frequencies)
    try:
        lines = [ln for ln in freq_path.read_text(encoding="utf-8").splitlines()
                 if ln and not ln.startswith("#")]
    except OSError as e:
        raise DataError(f"cannot read frequencies file {freq_path}: {e}") from e
    header = lines[0].split(",")
    col = f"freq_{args.cluster}"
    if col not in header:
        raise ConfigError(f"cluster {args.cluster} not present in {freq_path}")
    ci = header.index(col)
    neg, pos = [], []
    for ln in lines[1:]:
        fields = ln.split(",")
        sid = fields[0]
        if sid not in labels_by_id:
            raise DataError(f"sample {sid!r} in frequencies file missing from manifest")
        (neg if labels_by_id[sid] == -1 else pos).append(float(fields[ci]))
    if not neg or not pos:
        raise DataError("both labels required to run the rank-sum test")
    p = itp.rank_sum_test(neg, pos)
    _write_meta(Path(args.out), cfg, "stats")
    print(f"cluster {args.cluster} rank_sum_p {_fmt(p)}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    parser.add_argument("--out", default="out", help="output directory")
    for key in _CONFIG_FLAGS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            help=f"config key {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setkernel",
        description="Set-level classification with random-feature mean embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--spec", required=True, help="JSON mixture spec")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write one embedding row per sample")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("herd", help="sub-select cells per sample")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_herd)

    p = sub.add_parser("herd-bench", help="embedding error vs m for both methods")
    p.add_argument("--spec", required=True, help="JSON mixture spec")
    p.add_argument("--m-list", default="25,50,100,200")
    p.add_argument("--bench-seeds", default="20")
    _add_common(p)
    p.set_defaults(func=cmd_herd_bench)

    p = sub.add_parser("train", help="train a model on every manifest sample")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="output model path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decision values for samples")
    p.add_argument("--manifest")
    p.add_argument("samples", nargs="*", help="sample CSV paths")
    p.add_argument("--model", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("crossval", help="repeated stratified K-fold evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--permute-labels", default=None,
                   help="permute labels with this seed (null control)")
    p.add_argument("--sweep-gamma", default=None, help="comma list of gamma values")
    p.add_argument("--sweep-reg-c", default=None, help="comma list of reg_c values")
    _add_common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("interpret", help="scores, clusters, frequencies, stats CSVs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("stats", help="rank-sum p for one cluster's frequencies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frequencies", required=True, help="frequencies.csv from interpret")
    p.add_argument("--cluster", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
