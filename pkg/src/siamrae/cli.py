"""Command line: ``siamrae {synth,train,embed,score,evaluate}``.

Settings resolve as built-in defaults, then ``--config FILE`` (JSON with
optional sections ``synth``, ``model``, ``train``, ``fbank``, ``eval``), then
explicit flags; the last source wins. Each command writes the resolved
settings to ``run_config.json`` in its output directory.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path


from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .detection import build_reference_pool, classify, load_pool, save_pool, score_segments
from .errors import DataError, NumericFailure
from .evaluation import (
    ScoredPair,
    artificial_error_experiment,
    average_precision,
    pr_curve,
    real_error_experiment,
    write_pr_data,
)
from .features import (
    FbankConfig,
    FeatureStore,
    ManifestRow,
    SynthConfig,
    apply_normalizer,
    fit_normalizer,
    load_manifest,
    read_manifest,
    synth_corpus,
    write_feature_cache,
    write_manifest,
)
from .rae import ModelConfig, embed_all, init_model
from .siamese import TrainConfig, train

log = logging.getLogger("siamrae")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _resolve(cls, file_section: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(file_section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys in config file: {sorted(unknown)}")
    values = dict(file_section)
    values.update({k: v for k, v in overrides.items() if v is not None and k in names})
    if "length_range" in values:
        values["length_range"] = tuple(values["length_range"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def _write_run_config(out: Path, command: str, sections: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "toolkit_version": __version__, **sections}
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _normalized(segments, normalizer):
    if normalizer is None:
        return list(segments)
    return [apply_normalizer(normalizer, s) for s in segments]


def _load_segments(manifest, features, fbank: FbankConfig):
    return load_manifest(manifest, FeatureStore(features, fbank), fbank.hop_s)


# --- commands --------------------------------------------------------------


def cmd_synth(args, conf) -> None:
    cfg = _resolve(
        SynthConfig,
        conf.get("synth", {}),
        {
            "n_classes": args.n_classes,
            "segments_per_class": args.segments_per_class,
            "feature_dim": args.feature_dim,
            "length_range": None if args.length_range is None else tuple(args.length_range),
            "class_separation": args.class_separation,
            "noise_std": args.noise_std,
            "seed": args.seed,
        },
    )
    fractions = [float(x) for x in args.splits.split(",")]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError("--splits needs three non-negative fractions summing to 1")
    out = Path(args.out)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(cfg)
    hop = FbankConfig().hop_s
    rows = []
    for seg in corpus.segments:
        write_feature_cache(feat_dir / f"{seg.segment_id}.feat", [seg])
        rows.append(ManifestRow(seg.segment_id, seg.segment_id, seg.speaker_id, seg.label, 0.0, round(seg.num_frames * hop, 6)))
    write_manifest(out / "manifest.tsv", rows)
    n_train = int(round(fractions[0] * cfg.segments_per_class))
    n_ref = int(round(fractions[1] * cfg.segments_per_class))
    splits = {"train": [], "reference": [], "eval": []}
    for k, row in enumerate(rows):
        i = k % cfg.segments_per_class
        key = "train" if i < n_train else "reference" if i < n_train + n_ref else "eval"
        splits[key].append(row)
    for name, part in splits.items():
        write_manifest(out / f"{name}.tsv", part)
    _write_run_config(out, "synth", {"synth": asdict(cfg), "splits": fractions})
    print(f"wrote {len(rows)} segments to {feat_dir}")


def cmd_train(args, conf) -> None:
    if args.correspondence and not args.warm_start:
        raise UsageError("--correspondence requires --warm-start (a pre-trained Siamese RAE checkpoint)")
    fbank = _resolve(FbankConfig, conf.get("fbank", {}), {})
    tcfg = _resolve(
        TrainConfig,
        conf.get("train", {}),
        {
            "loss_kind": args.loss,
            "margin": args.margin,
            "loss_weight": args.loss_weight,
            "pairs_per_segment": args.pairs_per_segment,
            "batch_size": args.batch_size,
            "learning_rate": args.lr,
            "weight_decay": args.weight_decay,
            "epochs": args.epochs,
            "correspondence": args.correspondence or None,
            "warm_start_checkpoint": args.warm_start,
            "seed": args.seed,
        },
    )
    segments = _load_segments(args.manifest, args.features, fbank)
    normalizer = fit_normalizer(segments)
    data = _normalized(segments, normalizer)
    mcfg = _resolve(
        ModelConfig,
        conf.get("model", {}),
        {
            "feature_dim": data[0].feature_dim,
            "hidden_units": args.hidden_units,
            "num_layers": args.num_layers,
            "embedding_dim": args.embedding_dim,
            "bidirectional": args.bidirectional,
            "dtype": args.dtype,
        },
    )
    init_seed = args.init_seed if args.init_seed is not None else tcfg.seed
    out = Path(args.out)
    _write_run_config(
        out, "train", {"model": asdict(mcfg), "train": asdict(tcfg), "fbank": asdict(fbank), "init_seed": init_seed,
                       "manifest": str(args.manifest), "features": str(args.features)}
    )
    model, history = train(init_model(mcfg, init_seed), data, tcfg, out_dir=out, normalizer=normalizer)
    save_checkpoint(out / "model.ckpt", model, normalizer, {"train_config": tcfg.to_dict(), "epochs": len(history)})
    print(f"final loss {history[-1]['loss_total']:.6f}; checkpoint {out / 'model.ckpt'}")


def _model_and_data(args, manifest, fbank):
    ck = load_checkpoint(args.checkpoint)
    segments = _normalized(_load_segments(manifest, args.features, fbank), ck.normalizer)
    return ck, segments


def cmd_embed(args, conf) -> None:
    fbank = _resolve(FbankConfig, conf.get("fbank", {}), {})
    ck, segments = _model_and_data(args, args.manifest, fbank)
    z = embed_all(ck.model, segments)
    out = Path(args.out)
    _write_run_config(out, "embed", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "fbank": asdict(fbank)})
    with open(out / "embeddings.tsv", "w") as fh:
        for seg, row in zip(segments, z):
            fh.write("\t".join([seg.segment_id, seg.label] + [repr(float(v)) for v in row]) + "\n")
    print(f"wrote {len(segments)} embeddings to {out / 'embeddings.tsv'}")


def _pool(args, ck, fbank):
    if args.pool:
        return load_pool(args.pool)
    if not args.reference_manifest:
        raise UsageError("give --pool or --reference-manifest")
    refs = _normalized(_load_segments(args.reference_manifest, args.features, fbank), ck.normalizer)
    return build_reference_pool(ck.model, refs)


def cmd_score(args, conf) -> None:
    if not -1.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [-1, 1]")
    fbank = _resolve(FbankConfig, conf.get("fbank", {}), {})
    ck, segments = _model_and_data(args, args.manifest, fbank)
    pool = _pool(args, ck, fbank)
    out = Path(args.out)
    _write_run_config(out, "score", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                                     "threshold": args.threshold, "fbank": asdict(fbank)})
    if not args.pool:
        save_pool(out / "pool.bin", pool)
    results = [classify(r, args.threshold) for r in score_segments(ck.model, segments, pool)]
    with open(out / "detections.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict()) + "\n")
    n_typ = sum(r.decision == "typical" for r in results)
    print(f"{len(results)} segments scored: {n_typ} typical, {len(results) - n_typ} disordered")


def _read_scores(path) -> list[ScoredPair]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected pair_id, score, label")
            try:
                out.append(ScoredPair(parts[0], float(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def cmd_evaluate(args, conf) -> None:
    fbank = _resolve(FbankConfig, conf.get("fbank", {}), {})
    seed = args.seed if args.seed is not None else conf.get("eval", {}).get("seed", 0)
    out = Path(args.out)
    if args.scores:
        scored = _read_scores(args.scores)
        report = {"mode": "scores", "pooled_ap": average_precision(scored), "n_pairs": len(scored)}
        points = pr_curve(scored)
    elif args.test_manifest:
        ck = load_checkpoint(args.checkpoint) if args.checkpoint else None
        if ck is None:
            raise UsageError("--test-manifest needs --checkpoint")
        rows = read_manifest(args.test_manifest)
        if any(r.status is None for r in rows):
            raise DataError("test manifest needs a status column (typical/disordered) on every row")
        tests = _normalized(_load_segments(args.test_manifest, args.features, fbank), ck.normalizer)
        table = real_error_experiment(ck.model, tests, [r.status == "typical" for r in rows], _pool(args, ck, fbank))
        report = {"mode": "real_errors", **table.to_dict()}
        points = pr_curve(table.scored) if any(p.label for p in table.scored) else []
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table.format() + "\n")
    elif args.eval_manifest and args.reference_manifest and args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        ev = _normalized(_load_segments(args.eval_manifest, args.features, fbank), ck.normalizer)
        ref = _normalized(_load_segments(args.reference_manifest, args.features, fbank), ck.normalizer)
        rep = artificial_error_experiment(ck.model, ev, ref, seed)
        report = {"mode": "artificial_errors", "seed": seed, **rep.to_dict()}
        points = pr_curve(rep.scored)
    else:
        raise UsageError("evaluate needs --scores, or --checkpoint with --eval-manifest/--reference-manifest or --test-manifest")
    _write_run_config(out, "evaluate", {"args": {k: v for k, v in vars(args).items() if k != "func"}, "fbank": asdict(fbank)})
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_pr_data(out / "pr_curve.tsv", points)
    print(f"AP {report['pooled_ap']:.4f}")


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamrae", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON settings file; explicit flags override it")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-classes", type=int)
    s.add_argument("--segments-per-class", type=int)
    s.add_argument("--feature-dim", type=int)
    s.add_argument("--length-range", type=int, nargs=2, metavar=("T_MIN", "T_MAX"))
    s.add_argument("--class-separation", type=float)
    s.add_argument("--noise-std", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--splits", default="0.6,0.2,0.2", help="train,reference,eval fractions per class")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a Siamese RAE")
    t.add_argument("--manifest", required=True)
    t.add_argument("--features", required=True, help="directory of <audio_id>.feat or .wav files")
    t.add_argument("--out", required=True)
    t.add_argument("--loss", choices=["contrastive", "triplet"])
    t.add_argument("--bidirectional", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--correspondence", action="store_true")
    t.add_argument("--warm-start")
    t.add_argument("--pairs-per-segment", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--loss-weight", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--hidden-units", type=int)
    t.add_argument("--num-layers", type=int)
    t.add_argument("--embedding-dim", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--seed", type=int)
    t.add_argument("--init-seed", type=int, help="parameter init seed (default: --seed)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed manifest segments")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    c = sub.add_parser("score", help="typical/disordered decisions against a reference pool")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True, help="test segments; phone_label is the expected consonant")
    c.add_argument("--features", required=True)
    c.add_argument("--pool")
    c.add_argument("--reference-manifest")
    c.add_argument("--threshold", type=float, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_score)

    v = sub.add_parser("evaluate", help="AP / PR reports")
    v.add_argument("--out", required=True)
    v.add_argument("--scores", help="TSV of pair_id, score, label")
    v.add_argument("--checkpoint")
    v.add_argument("--features")
    v.add_argument("--eval-manifest")
    v.add_argument("--reference-manifest")
    v.add_argument("--test-manifest", help="manifest with a status column for real-error evaluation")
    v.add_argument("--pool")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = _load_config_file(args.config)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, conf)
        else:
            args.func(args, conf)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"siamrae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"siamrae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"siamrae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
