"""Command-line pipeline: corpus synthesis, ingestion, correlation, training,
evaluation, ablations, sweeps, fingerprint export, and gradient checking.

One subcommand per process. Settings resolve in three layers — built-in
defaults, then the YAML config file, then explicit flags — and the fully
resolved snapshot is written into a ``manifest.json`` beside every run's
outputs together with SHA-256 digests of all inputs and outputs, so any
artifact can be regenerated from its manifest alone. Nothing in an output
file or manifest depends on wall-clock time.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import __version__
from .evaluate import (
    DEFAULT_BUCKET_EDGES,
    MetricsReport,
    bucketed_eval,
    evaluate_pairs,
    export_fingerprints,
)
from .flows import FlowKind
from .ingest import (
    CorrelationConfig,
    apply_truth_labels,
    correlate,
    read_dataset_with_n,
    read_mapping,
    read_packets,
    reassemble,
    write_dataset,
)
from .model import NetConfig, load_checkpoint, save_checkpoint
from .simulate import (
    generate_corpus,
    make_stock_apps,
    read_profiles,
    stock_profiles,
)
from .training import (
    ABLATIONS,
    LossWeights,
    TrainConfig,
    ablate,
    finite_difference_check,
    grl_negation_check,
    sequence_length_sweep,
    train,
    train_tunnel_only,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4

DEFAULTS: dict = {
    "seed": 7,
    "threads": 1,
    "corpus": {
        "apps": 10,
        "profiles": None,  # null -> the five stock profiles; or a profiles YAML path
        "pairs_per_app_per_profile": 200,
        "templates_per_app": 256,
        "template_len": 48,
        "flow_len": [24, 48],
        "jitter": [-1, 1],
        "port_reuse_fraction": 0.0,
        "reuse_spacing": 10.0,
        "pair_spacing": 0.5,
    },
    "correlation": {
        "epsilon": 1.0,
        "n": 200,
    },
    "net": {
        "d": 12,
        "hidden": 12,
        "n": 200,
        "vocab": 3001,
        "grl_lambda": 1.0,
    },
    "train": {
        "batch_size": 128,
        "lr": 1.0e-3,
        "max_epochs": 25,
        "patience": 10,
        "val_fraction": 0.1,
        "test_fraction": 0.1,
        "ablation": "full",
        "bucket_pools": 8,
    },
    "weights": {
        "src": 1.0,
        "psm": 1.0,
        "cpd": 1.0,
        "asa": 1.0,
        "asc": 1.0,
    },
    "eval": {
        "bucket_edges": list(DEFAULT_BUCKET_EDGES),
    },
    "ablate": {
        "variants": list(ABLATIONS),
    },
    "sweep": {
        "n_values": [20, 50, 100, 200],
    },
}


# ---------------------------------------------------------------------------
# config resolution

def _merge_into(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ValueError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {dotted} must be a section")
            _merge_into(base[key], value, prefix=f"{dotted}.")
        else:
            base[key] = value


def load_config(path: Optional[str]) -> dict:
    """Defaults overlaid with the YAML file at ``path`` (if given). Any key
    not present in the defaults is rejected by name."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config root must be a mapping, got {type(loaded).__name__}")
        _merge_into(cfg, loaded)
    return cfg


# ---------------------------------------------------------------------------
# manifests

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_inputs(*paths: str | Path) -> list[Path]:
    resolved = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"input path does not exist: {p}")
        resolved.append(p)
    return resolved


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    manifest = {
        "tool": {"name": "tunfp", "version": __version__},
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256_file(p) for p in sorted(set(map(Path, inputs)))},
        "outputs": {p.name: _sha256_file(p) for p in sorted(set(map(Path, outputs)))},
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(arg: str) -> Path:
    d = Path(arg)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_lines(path: Path, lines: Sequence[str]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    return path


# ---------------------------------------------------------------------------
# shared constructors

def _profiles_from(cfg: dict) -> list:
    ref = cfg["corpus"]["profiles"]
    if ref is None:
        return stock_profiles()
    _require_inputs(ref)
    return read_profiles(ref)


def _net_config(cfg: dict, C: int) -> NetConfig:
    net = cfg["net"]
    return NetConfig(C=C, vocab=net["vocab"], d=net["d"], H=net["hidden"],
                     n=net["n"], grl_lambda=net["grl_lambda"])


def _train_config(cfg: dict, ablation: Optional[str] = None) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        batch_size=tr["batch_size"], lr=tr["lr"], max_epochs=tr["max_epochs"],
        patience=tr["patience"], seed=cfg["seed"],
        val_fraction=tr["val_fraction"], test_fraction=tr["test_fraction"],
        weights=LossWeights(**cfg["weights"]),
        ablation=ablation if ablation is not None else tr["ablation"],
        bucket_pools=tr["bucket_pools"],
    )


def _load_pairs(path: str, need_labels: bool = True) -> tuple[list, int, int]:
    """Dataset, its on-disk sequence length, and the class count."""
    _require_inputs(path)
    pairs, n = read_dataset_with_n(path)
    if not pairs:
        raise ValueError(f"dataset {path} is empty")
    labels = [p.label for p in pairs if p.label is not None]
    if need_labels and not labels:
        raise ValueError(f"dataset {path} has no labeled pairs")
    return pairs, n, (max(labels) + 1 if labels else 0)


def _metrics_lines(report: MetricsReport) -> list[str]:
    lines = report.summary_lines()
    lines.append("confusion rows=true cols=predicted")
    for row in report.confusion:
        lines.append(" ".join(str(v) for v in row))
    return lines


def _bucket_lines(buckets) -> list[str]:
    return [
        f"bucket {b.span} support {b.support} correct {b.correct} "
        f"accuracy {b.accuracy!r}"
        for b in buckets
    ]


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args, cfg: dict) -> int:
    co = cfg["corpus"]
    out = _out_dir(args.out)
    apps = make_stock_apps(
        num_apps=co["apps"], seed=cfg["seed"],
        templates_per_app=co["templates_per_app"],
        template_len=co["template_len"],
        flow_len=tuple(co["flow_len"]), jitter=tuple(co["jitter"]),
    )
    profiles = _profiles_from(cfg)
    files = generate_corpus(
        apps, profiles, co["pairs_per_app_per_profile"], seed=cfg["seed"],
        out_dir=out, n=cfg["correlation"]["n"],
        port_reuse_fraction=co["port_reuse_fraction"],
        reuse_spacing=co["reuse_spacing"], pair_spacing=co["pair_spacing"],
    )
    outputs = [files.tls_packets, files.tun_packets, files.mapping,
               files.pairs, files.labels]
    inputs = [] if co["profiles"] is None else [Path(co["profiles"])]
    write_manifest(out, "simulate", cfg, inputs, outputs)
    print(f"simulate: {files.pair_count} pairs "
          f"({co['apps']} apps x {len(profiles)} profiles) -> {out}")
    return 0


def _length_stats(flows) -> dict:
    lens = sorted(f.true_len for f in flows)
    mid = len(lens) // 2
    return {
        "flows": len(lens),
        "len_min": lens[0],
        "len_median": lens[mid],
        "len_max": lens[-1],
    }


def cmd_ingest(args, cfg: dict) -> int:
    _require_inputs(args.tls, args.tun)
    out = _out_dir(args.out)
    n = cfg["correlation"]["n"]
    tls_flows = reassemble(read_packets(args.tls), n=n, kind=FlowKind.TLS)
    tun_flows = reassemble(read_packets(args.tun), n=n, kind=FlowKind.TUNNEL)
    report = {
        "n": n,
        "tls": _length_stats(tls_flows),
        "tun": _length_stats(tun_flows),
    }
    report_path = _write_json(out / "ingest.json", report)
    write_manifest(out, "ingest", cfg, [Path(args.tls), Path(args.tun)],
                   [report_path])
    print(f"ingest: {report['tls']['flows']} tls flows, "
          f"{report['tun']['flows']} tunnel flows -> {out}")
    return 0


def cmd_correlate(args, cfg: dict) -> int:
    _require_inputs(args.tls, args.tun, args.mapping)
    out = _out_dir(args.out)
    ccfg = CorrelationConfig(epsilon=cfg["correlation"]["epsilon"],
                             n=cfg["correlation"]["n"])
    tls_flows = reassemble(read_packets(args.tls), n=ccfg.n, kind=FlowKind.TLS)
    tun_flows = reassemble(read_packets(args.tun), n=ccfg.n, kind=FlowKind.TUNNEL)
    table = read_mapping(args.mapping)
    pairs = correlate(tls_flows, tun_flows, table, ccfg)
    inputs = [Path(args.tls), Path(args.tun), Path(args.mapping)]
    report = {
        "tls_flows": len(tls_flows),
        "tun_flows": len(tun_flows),
        "pairs": len(pairs),
    }
    if args.truth is not None:
        _require_inputs(args.truth)
        truth, _ = read_dataset_with_n(args.truth)
        pairs, rec = apply_truth_labels(pairs, truth)
        inputs.append(Path(args.truth))
        report.update({"recovered": rec.recovered, "missed": rec.missed,
                       "false_pairs": rec.false_pairs})
    elif any(p.label is None for p in pairs):
        raise ValueError(
            "correlated pairs are unlabeled; pass --truth to label them "
            "from a ground-truth dataset")
    dataset_path = out / "pairs.ds"
    write_dataset(pairs, dataset_path, n=ccfg.n)
    report_path = _write_json(out / "correlate.json", report)
    write_manifest(out, "correlate", cfg, inputs, [dataset_path, report_path])
    print(f"correlate: {report}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    pairs, _, C = _load_pairs(args.dataset)
    out = _out_dir(args.out)
    net_cfg = _net_config(cfg, C)
    tcfg = _train_config(cfg)

    def on_epoch(entry: dict) -> None:
        print(f"epoch {entry['epoch']:3d} total {entry['total']:.4f} "
              f"val_macro_f1 {entry['val_macro_f1']:.4f}"
              f"{' *' if entry['best'] else ''}")

    runner = train_tunnel_only if args.baseline else train
    result = runner(pairs, net_cfg, tcfg, on_epoch=on_epoch)

    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(result.model, ckpt_path, extra={
        "train_config": dataclasses.asdict(tcfg),
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_val_macro_f1,
        "split_digest": result.split.digest(),
    })
    history_path = _write_json(out / "history.json", result.history)
    split_path = _write_json(out / "split.json", {
        "train": list(result.split.train),
        "val": list(result.split.val),
        "test": list(result.split.test),
        "digest": result.split.digest(),
    })
    test_report = evaluate_pairs(result.model, [pairs[i] for i in result.split.test])
    metrics_path = _write_lines(out / "metrics.txt", _metrics_lines(test_report))
    write_manifest(out, "train", cfg, [Path(args.dataset)],
                   [ckpt_path, history_path, split_path, metrics_path])
    print(f"train: best epoch {result.best_epoch} "
          f"val_macro_f1 {result.best_val_macro_f1:.4f} "
          f"test_macro_f1 {test_report.macro_f1:.4f} -> {out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    _require_inputs(args.checkpoint)
    pairs, _, C = _load_pairs(args.dataset)
    out = _out_dir(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    if C > model.cfg.C:
        raise ValueError(
            f"checkpoint predicts {model.cfg.C} classes but dataset has {C}")
    report = evaluate_pairs(model, pairs)
    metrics_path = _write_lines(out / "metrics.txt", _metrics_lines(report))
    buckets = bucketed_eval(model, pairs, edges=tuple(cfg["eval"]["bucket_edges"]))
    buckets_path = _write_lines(out / "buckets.txt", _bucket_lines(buckets))
    write_manifest(out, "eval", cfg,
                   [Path(args.checkpoint), Path(args.dataset)],
                   [metrics_path, buckets_path])
    print(f"eval: n {report.n} accuracy {report.accuracy:.4f} "
          f"macro_f1 {report.macro_f1:.4f} -> {out}")
    return 0


def cmd_ablate(args, cfg: dict) -> int:
    pairs, _, C = _load_pairs(args.dataset)
    out = _out_dir(args.out)
    variants = args.variants.split(",") if args.variants else cfg["ablate"]["variants"]
    results = ablate(pairs, _net_config(cfg, C), _train_config(cfg), variants=variants)
    rows = {
        variant: {"macro_f1": r["macro_f1"], "accuracy": r["accuracy"],
                  "best_epoch": r["best_epoch"]}
        for variant, r in results["results"].items()
    }
    path = _write_json(out / "ablation.json", {
        "split_digest": results["split_digest"],
        "results": rows,
    })
    write_manifest(out, "ablate", cfg, [Path(args.dataset)], [path])
    for variant in variants:
        print(f"ablate {variant:8s} test_macro_f1 {rows[variant]['macro_f1']:.4f}")
    return 0


def cmd_sweep(args, cfg: dict) -> int:
    pairs, _, C = _load_pairs(args.dataset)
    out = _out_dir(args.out)
    if args.n_values:
        n_values = [int(v) for v in args.n_values.split(",")]
    else:
        n_values = cfg["sweep"]["n_values"]
    rows = sequence_length_sweep(pairs, n_values, _net_config(cfg, C),
                                 _train_config(cfg))
    path = _write_json(out / "sweep.json", rows)
    write_manifest(out, "sweep", cfg, [Path(args.dataset)], [path])
    for row in rows:
        print(f"sweep n={row['n']:4d} test_macro_f1 {row['macro_f1']:.4f}")
    return 0


def cmd_fingerprint(args, cfg: dict) -> int:
    _require_inputs(args.checkpoint)
    pairs, _, _ = _load_pairs(args.dataset, need_labels=False)
    out = _out_dir(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    path = out / "fingerprints.csv"
    count = export_fingerprints(model, pairs, path)
    write_manifest(out, "fingerprint", cfg,
                   [Path(args.checkpoint), Path(args.dataset)], [path])
    print(f"fingerprint: {count} flows -> {path}")
    return 0


def cmd_gradcheck(args, cfg: dict) -> int:
    tiny = NetConfig(C=3, vocab=40, d=4, H=3, n=6,
                     grl_lambda=cfg["net"]["grl_lambda"])
    report = finite_difference_check(tiny, seed=cfg["seed"])
    for group in sorted(report.groups):
        r = report.groups[group]
        print(f"gradcheck {group:12s} rel_err {r['rel_err']:.3e} "
              f"({r['checked']} entries{', reversed' if r['surrogate'] else ''})")
    print(f"gradcheck worst rel_err {report.max_rel_err:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    neg = grl_negation_check(tiny, seed=cfg["seed"])
    print(f"gradcheck reversal negation exact: {neg['exact']} "
          f"({neg['params']} parameters)")
    ok = report.ok(GRADCHECK_TOLERANCE) and neg["exact"]
    print(f"gradcheck {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tunfp",
        description="app fingerprinting lab for encrypted tunnel traffic",
    )
    parser.add_argument("--version", action="version", version=f"tunfp {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults otherwise)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="intra-op thread cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="synthesize a parallel (TLS, tunnel) corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--apps", type=int, help="override corpus.apps")
    p.add_argument("--pairs", type=int,
                   help="override corpus.pairs_per_app_per_profile")
    p.add_argument("--port-reuse-fraction", type=float,
                   help="override corpus.port_reuse_fraction")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", parents=[common],
                       help="reassemble packet files into flows and report stats")
    p.add_argument("--tls", required=True, help="TLS-side packet CSV")
    p.add_argument("--tun", required=True, help="tunnel-side packet CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("correlate", parents=[common],
                       help="match TLS flows to the tunnel flows that carried them")
    p.add_argument("--tls", required=True, help="TLS-side packet CSV")
    p.add_argument("--tun", required=True, help="tunnel-side packet CSV")
    p.add_argument("--mapping", required=True, help="port mapping table CSV")
    p.add_argument("--truth", help="ground-truth pair dataset for labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("train", parents=[common],
                       help="train the dual-branch model (or the baseline)")
    p.add_argument("--dataset", required=True, help="labeled pair dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablation", choices=ABLATIONS,
                   help="sever one loss term (default: config train.ablation)")
    p.add_argument("--baseline", action="store_true",
                   help="train the tunnel-only supervised baseline instead")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on a labeled pair dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="train every loss-ablation variant on one split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variants", help="comma list (default: all six)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common],
                       help="retrain across sequence-length caps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-values", help="comma list of lengths (default from config)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fingerprint", parents=[common],
                       help="export tunnel-side fingerprint vectors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="verify analytic gradients on a tiny model")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _apply_flag_overrides(args, cfg: dict) -> None:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if getattr(args, "apps", None) is not None:
        cfg["corpus"]["apps"] = args.apps
    if getattr(args, "pairs", None) is not None:
        cfg["corpus"]["pairs_per_app_per_profile"] = args.pairs
    if getattr(args, "port_reuse_fraction", None) is not None:
        cfg["corpus"]["port_reuse_fraction"] = args.port_reuse_fraction
    if getattr(args, "ablation", None) is not None:
        cfg["train"]["ablation"] = args.ablation


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_flag_overrides(args, cfg)
        if cfg["threads"] < 1:
            raise ValueError(f"threads must be >= 1, got {cfg['threads']}")
        import torch

        torch.set_num_threads(cfg["threads"])
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        return args.func(args, cfg)
    except (ValueError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
