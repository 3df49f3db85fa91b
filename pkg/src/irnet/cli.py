"""Command-line entry point: ``irnet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import training
from .checkpoint import load_checkpoint
from .config import TrainConfig
from .diagnostics import gradcheck, tiny_config
from .episodes import (EpisodeSampler, default_domain_sizes, generate_synthetic, load_dataset,
                       split_domains)
from .exceptions import IRNetError
from .metrics import write_metrics_jsonl, write_summary_csv

log = logging.getLogger("irnet")

GRADCHECK_THRESHOLD = 1e-3


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    group.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    for f in fields(TrainConfig):
        kind = {bool: _bool, int: int, float: float}.get(type(f.default), str)
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config_from(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    if args.config is not None:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


def _add_data_flags(parser: argparse.ArgumentParser, split: bool = True) -> None:
    parser.add_argument("--data", type=Path, help="JSONL dataset (default: built-in synthetic corpus)")
    parser.add_argument("--catalog", type=Path, help="class-description catalog JSON")
    parser.add_argument("--synthetic-seed", type=int, default=0)
    if split:
        parser.add_argument("--val-domains", nargs="+")
        parser.add_argument("--test-domains", nargs="+")


def _load_data(args):
    if args.data is None:
        return generate_synthetic(seed=args.synthetic_seed)
    return load_dataset(args.data, args.catalog)


def _split(args, dataset):
    domains = dataset.domains
    if args.val_domains is None and args.test_domains is None:
        if len(domains) < 3:
            return None
        return split_domains(domains, [domains[-2]], [domains[-1]])
    return split_domains(domains, args.val_domains or [], args.test_domains or [])


def cmd_train(args) -> int:
    config = _config_from(args)
    dataset = _load_data(args)
    split = _split(args, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    streams = training.rng_streams(config.seed)
    model = training.build_model(dataset, config, streams["init"])
    result = training.fit(model, dataset, split, checkpoint_dir=out, streams=streams)
    (out / "history.json").write_text(json.dumps(result.history, indent=1) + "\n")
    if result.test is not None:
        write_metrics_jsonl(out / "test_metrics.jsonl", result.test_episodes, result.test)
        write_summary_csv(out / "summary.csv", [{"split": "val", **asdict(result.best_val)},
                                                {"split": "test", **asdict(result.test)}])
        print(f"best epoch {result.best_epoch}: test AUC {result.test.auc_mean:.4f} "
              f"Macro-F1 {result.test.macro_f1_mean:.4f}")
    else:
        print(f"trained {config.epochs} epochs; final loss {result.history[-1]['loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = _load_data(args)
    rng = np.random.default_rng(args.seed) if args.seed is not None else None
    summary, per_episode = training.evaluate(model, dataset, args.domains, episodes=args.episodes,
                                             seed=rng)
    if args.metrics_out:
        write_metrics_jsonl(args.metrics_out, per_episode, summary)
    if args.summary_out:
        write_summary_csv(args.summary_out, [{"domains": " ".join(args.domains), **asdict(summary)}])
    print(json.dumps(asdict(summary)))
    return 0


def cmd_synth_gen(args) -> int:
    sizes = tuple(args.domain_sizes) if args.domain_sizes else default_domain_sizes(args.n_classes)
    dataset = generate_synthetic(n_classes=args.n_classes, vocab_size=args.vocab_size,
                                 tokens_per_class=args.tokens_per_class,
                                 multi_label_rate=args.multi_label_rate, n_instances=args.n_instances,
                                 domain_sizes=sizes, seed=args.seed, noise_rate=args.noise_rate,
                                 length=tuple(args.length))
    out = Path(args.out)
    catalog = Path(args.catalog_out) if args.catalog_out else out.with_name(out.stem + ".catalog.json")
    dataset.save(out, catalog)
    print(json.dumps(dataset.report(), sort_keys=True))
    return 0


def cmd_sample_episodes(args) -> int:
    config = _config_from(args)
    dataset = _load_data(args)
    domains = args.domains or dataset.domains
    sampler = EpisodeSampler(dataset, domains, training.episode_spec(config), config.seed)
    lines = [json.dumps(ep.to_dict()) for ep in sampler.take(args.count)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for mode in args.aggregation:
        report = gradcheck(tiny_config(aggregation=mode), seed=args.seed, step=args.step)
        passed = report.max_rel_error <= args.threshold
        ok &= passed
        print(f"{mode}: max relative error {report.max_rel_error:.3e} over {report.n_checked} entries "
              f"({report.n_excluded} relu-kink entries excluded) {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_shot_sweep(args) -> int:
    base = _config_from(args)
    dataset = _load_data(args)
    split = _split(args, dataset)
    if split is None:
        raise IRNetError("shot-sweep needs separate validation and test domains")
    rows = []
    for k in range(args.k_min, args.k_max + 1):
        config = base.replace(k_shot=k)
        streams = training.rng_streams(config.seed)
        model = training.build_model(dataset, config, streams["init"])
        result = training.fit(model, dataset, split, streams=streams)
        rows.append({"k_shot": k, "best_epoch": result.best_epoch,
                     "auc_mean": result.test.auc_mean, "auc_std": result.test.auc_std,
                     "macro_f1_mean": result.test.macro_f1_mean,
                     "macro_f1_std": result.test.macro_f1_std})
        print(f"K={k}: AUC {result.test.auc_mean:.4f} Macro-F1 {result.test.macro_f1_mean:.4f}",
              flush=True)
    write_summary_csv(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irnet", description="Few-shot multi-label intent detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training with best-validation selection")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="directory for checkpoints and metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on some domains")
    p.add_argument("checkpoint", type=Path)
    _add_data_flags(p, split=False)
    p.add_argument("--domains", nargs="+", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics-out", type=Path, help="per-episode JSONL")
    p.add_argument("--summary-out", type=Path, help="summary CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset and catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--catalog-out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=20)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--tokens-per-class", type=int, default=2)
    p.add_argument("--multi-label-rate", type=float, default=0.4)
    p.add_argument("--n-instances", type=int, default=4000)
    p.add_argument("--noise-rate", type=float, default=0.1)
    p.add_argument("--length", type=int, nargs=2, default=(8, 12), metavar=("MIN", "MAX"))
    p.add_argument("--domain-sizes", type=int, nargs="+")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("sample-episodes", help="dump sampled episodes as JSON lines")
    _add_config_flags(p)
    _add_data_flags(p, split=False)
    p.add_argument("--domains", nargs="+")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_episodes)

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny episode")
    p.add_argument("--aggregation", nargs="+", default=["masked-softmax", "raw-sum"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("shot-sweep", help="train and test for each K, write a CSV")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=11)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_shot_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IRNetError, OSError, ValueError, KeyError) as exc:
        print(f"irnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
