"""Command-line entry points.

Subcommands: generate, train-agent, calibrate, evaluate, transfer,
sensitivity-map, serve-toy. Every run logs its resolved configuration and
the config hash into the output directory and writes a machine-readable
summary.json on success; the exit code is 0 only when the subcommand
completed without errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import metrics as metrics_mod
from . import server as server_mod
from .classifier import Classifier, open_victim
from .config import RunConfig, config_hash, dump_config, resolve_config
from .errors import ConfigError, DistortBenchError, InvalidArgumentError
from .filters import calibrate as calibrate_filter
from .filters import FilterParams
from .generator import generate_episodes, train_agent, write_split
from .manifest import load_split
from .sensitivity import EvalCache, scan, sensitivity_rows
from .storage import load_dataset
from .tensor import partition_patches

ENDPOINT_ENV = "DISTORTBENCH_ENDPOINT"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a single config key (repeatable)",
    )
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--endpoint", metavar="HOST:PORT",
        help=f"remote victim endpoint (falls back to ${ENDPOINT_ENV})",
    )
    parser.add_argument(
        "--victim", default=None,
        help="victim descriptor: toy:<weights-file> or remote",
    )


def _parse_endpoint(text: str | None) -> tuple[str, int] | None:
    if text is None:
        text = os.environ.get(ENDPOINT_ENV)
    if not text:
        return None
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"endpoint must be HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad endpoint port in {text!r}: {exc}") from exc


def _resolve(args) -> RunConfig:
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    return resolve_config(args.config, args.set, extra)


def _victim_handle(args, cfg: RunConfig) -> tuple[Classifier, str]:
    if not args.victim:
        raise ConfigError("this subcommand requires --victim")
    handle = open_victim(args.victim, _parse_endpoint(args.endpoint), cfg.max_batch)
    if args.victim.startswith("toy:"):
        victim_id = Path(args.victim[len("toy:"):]).stem
    else:
        host, port = _parse_endpoint(args.endpoint)
        victim_id = f"remote-{host.replace(':', '_')}-{port}"
    return handle, victim_id


def _filter_label(cfg: RunConfig) -> str:
    return cfg.filters[0] if len(cfg.filters) == 1 else "+".join(cfg.filters)


def _log_config(out_dir, cfg: RunConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.txt").write_text(
        f"# config_hash = {config_hash(cfg)}\n" + dump_config(cfg)
    )


def _write_summary(out_dir, payload: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_policy(args, cfg: RunConfig, images, labels, classifier):
    """Agent checkpoint if given, else train in place, else a blank greedy
    net (zero weights make every Q equal, so argmax picks the single-add
    action and the run degenerates to pure sensitivity-greedy search)."""
    if getattr(args, "agent", None):
        learner, _ = agent_mod.load_agent(args.agent)
        return learner.net
    if cfg.train_episodes > 0:
        learner = train_agent(images, labels, cfg, classifier.fork())
        return learner.net
    if classifier.num_classes is None:
        classifier.predict_one(images[0])
    from .sensitivity import state_length

    net = agent_mod.DuelingQNet(
        state_length(classifier.num_classes, cfg.state_top_k),
        len(agent_mod.build_action_space(cfg.filters)),
    )
    for param in net.params():
        param[...] = 0.0
    return net


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    images, labels, indices = load_dataset(args.images)
    classifier, victim_id = _victim_handle(args, cfg)
    policy = _load_policy(args, cfg, images, labels, classifier)
    results = generate_episodes(
        images, labels, cfg, classifier, policy, indices=indices, workers=args.workers
    )
    manifest_path = write_split(
        results, cfg, args.out, victim_id, _filter_label(cfg), classifier
    )
    split_dir = manifest_path.parent
    _log_config(split_dir, cfg)
    split = load_split(manifest_path)
    stats = metrics_mod.attack_stats(split) if split.usable_records() else None
    evals, batches = classifier.counter.snapshot()
    _write_summary(args.out, {
        "command": "generate",
        "manifest": str(manifest_path),
        "config_hash": config_hash(cfg),
        "victim": victim_id,
        "filter": _filter_label(cfg),
        "episodes": len(results),
        "asr": stats.asr if stats else None,
        "avg_l2": stats.avg_l2 if stats else None,
        "max_l2": stats.max_l2 if stats else None,
        "avg_queries_evaluations": stats.avg_evaluations if stats else None,
        "avg_queries_batches": stats.avg_batches if stats else None,
        "total_evaluations": evals,
        "total_batches": batches,
    })
    print(f"wrote {manifest_path}")
    return 0


def cmd_train_agent(args) -> int:
    cfg = _resolve(args)
    images, labels, _ = load_dataset(args.images)
    classifier, victim_id = _victim_handle(args, cfg)
    learner = train_agent(images, labels, cfg, classifier)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "agent.dbagt"
    agent_mod.save_agent(ckpt, learner, config_hash(cfg))
    _log_config(out_dir, cfg)
    _write_summary(args.out, {
        "command": "train-agent",
        "checkpoint": str(ckpt),
        "config_hash": config_hash(cfg),
        "victim": victim_id,
        "episodes": cfg.train_episodes,
        "agent_steps": learner.agent_steps,
        "td_updates": learner.updates,
        "final_epsilon": learner.epsilon(),
    })
    print(f"wrote {ckpt}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _resolve(args)
    images, _, _ = load_dataset(args.images)
    grid = partition_patches(images[0].shape, cfg.patch_size)
    params = cfg.filter_params()
    calibrated: dict[str, FilterParams] = {}
    report = {}
    from .filters import mean_application_l2

    for name in cfg.filters:
        fitted = calibrate_filter(
            name, images, grid, cfg.epsilon0, base_params=params, seed=cfg.seed
        )
        calibrated[name] = fitted
        report[name] = {
            "mean_l2": mean_application_l2(name, fitted, images, grid, seed=cfg.seed),
            "noise_sigma": fitted.noise_sigma,
            "blur_sigma": fitted.blur_sigma,
            "brightness_delta": fitted.brightness_delta,
            "deadpixel_fraction": fitted.deadpixel_fraction,
        }

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = params
    overrides = {}
    for name, fitted in calibrated.items():
        field = {
            "gaussian_noise": "noise_sigma",
            "gaussian_blur": "blur_sigma",
            "brightness": "brightness_delta",
            "dead_pixel": "deadpixel_fraction",
        }[name]
        overrides[field] = getattr(fitted, field)
    lines = [f"{key} = {value!r}" for key, value in sorted(overrides.items())]
    (out_dir / "calibrated.conf").write_text(
        "# calibrated intensities for epsilon0 = " + repr(cfg.epsilon0) + "\n"
        + "\n".join(lines) + "\n"
    )
    _log_config(out_dir, cfg)
    _write_summary(args.out, {
        "command": "calibrate",
        "epsilon0": cfg.epsilon0,
        "filters": report,
        "config_hash": config_hash(cfg),
    })
    for name, info in report.items():
        print(f"{name}: mean per-application L2 {info['mean_l2']:.6f}")
    return 0


def _plot_errors(path, tables: dict[str, "metrics_mod.ErrorTable"]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, table in sorted(tables.items()):
        severities = table.severities()
        ax.plot(severities, [table.corrupt[s] for s in severities], marker="o", label=name)
    if tables:
        first = next(iter(tables.values()))
        ax.axhline(first.clean_error, linestyle="--", color="gray", label="clean")
    ax.set_xlabel("severity level")
    ax.set_ylabel("top-1 error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    classifier, victim_id = _victim_handle(args, cfg)
    tables: dict[str, metrics_mod.ErrorTable] = {}
    splits = {}
    for manifest_arg in args.manifest:
        split = load_split(manifest_arg)
        name = split.header.get("filter", Path(manifest_arg).parent.name)
        splits[name] = split
        tables[name] = metrics_mod.error_rates(split, classifier)

    first_name = sorted(tables)[0]
    summary = metrics_mod.aggregate(
        tables[first_name],
        by_corruption=tables if len(tables) > 1 else None,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["corruption", "severity", "clean_error", "corrupt_error"])
        for name, table in sorted(tables.items()):
            for s in table.severities():
                writer.writerow([name, s, table.clean_error, table.corrupt[s]])
    _plot_errors(out_dir / "errors.png", tables)

    payload = {
        "command": "evaluate",
        "victim": victim_id,
        "per_corruption": {
            name: {
                "clean_error": table.clean_error,
                "corrupt_error_by_severity": {str(s): table.corrupt[s] for s in table.severities()},
                "ce": float(np.mean([table.corrupt[s] for s in table.severities()])),
                "attack": vars(metrics_mod.attack_stats(splits[name])),
            }
            for name, table in sorted(tables.items())
        },
        "ce_corrupt": summary.ce_corrupt,
        "ce_raw_sum": summary.ce_raw_sum,
        "accuracy_corrupt": summary.accuracy_corrupt,
        "degradation": summary.degradation,
        "mce": summary.mce,
    }
    if args.ref_l2:
        from .manifest import mean_l2_by_severity

        reference = {}
        for item in args.ref_l2.split(","):
            s_text, _, value = item.partition("=")
            reference[int(s_text)] = float(value)
        ours = mean_l2_by_severity(splits[first_name])
        verdicts = metrics_mod.l2_match_check(ours, reference)
        payload["l2_match"] = [vars(v) for v in verdicts]
        for v in verdicts:
            print(
                f"sev{v.severity}: ours {v.ours:.3f} vs ref {v.reference:.3f} "
                f"rel_diff {v.rel_diff:.3f} -> {v.verdict}"
            )
    _log_config(out_dir, cfg)
    _write_summary(args.out, payload)
    print(f"CE {summary.ce_corrupt:.4f} accuracy {summary.accuracy_corrupt:.4f}"
          + (f" mCE {summary.mce:.4f}" if summary.mce is not None else ""))
    return 0


def cmd_transfer(args) -> int:
    cfg = _resolve(args)
    splits = {}
    for item in args.split:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--split expects NAME=MANIFEST, got {item!r}")
        splits[name] = load_split(path)
    models = {}
    for item in args.model:
        name, _, descriptor = item.partition("=")
        if not descriptor:
            raise ConfigError(f"--model expects NAME=VICTIM, got {item!r}")
        models[name] = open_victim(
            descriptor, _parse_endpoint(args.endpoint), cfg.max_batch
        )
    victims, model_names, matrix = metrics_mod.transfer_matrix(splits, models)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "transfer.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["victim\\model"] + model_names)
        for i, victim in enumerate(victims):
            writer.writerow([victim] + [f"{matrix[i, j]:.6f}" for j in range(len(model_names))])
    _log_config(out_dir, cfg)
    _write_summary(args.out, {
        "command": "transfer",
        "victims": victims,
        "models": model_names,
        "accuracy_matrix": matrix.tolist(),
    })
    print(f"wrote {out_dir / 'transfer.csv'}")
    return 0


def cmd_sensitivity_map(args) -> int:
    cfg = _resolve(args)
    images, labels, indices = load_dataset(args.images)
    classifier, _ = _victim_handle(args, cfg)
    pos = indices.index(args.index) if args.index is not None else 0
    image, label = images[pos], labels[pos]
    grid = partition_patches(image.shape, cfg.patch_size)
    from .filters import DistortionLedger

    ledger = DistortionLedger(image, grid, cfg.filter_params(), episode_seed=cfg.seed)
    base_probs = classifier.predict_one(image)
    tracked = label if cfg.mode == "untargeted" else cfg.target_class
    lists = scan(
        ledger, cfg.filters, tracked, cfg.mode, classifier, base_probs, EvalCache()
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sensitivity.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_row", "patch_col", "filter", "direction", "delta_p"])
        for row in sensitivity_rows(lists, grid):
            writer.writerow(row)
    _log_config(out_dir, cfg)
    _write_summary(args.out, {
        "command": "sensitivity-map",
        "index": indices[pos],
        "tracked_class": tracked,
        "rows": grid.rows,
        "cols": grid.cols,
    })
    print(f"wrote {out_dir / 'sensitivity.csv'}")
    return 0


def cmd_serve_toy(args) -> int:
    if not args.victim or not args.victim.startswith("toy:"):
        raise ConfigError("serve-toy requires --victim toy:<weights-file>")
    server = server_mod.serve_toy(args.victim[len("toy:"):], args.host, args.port)
    print(f"listening on {server.server_address[0]}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distortbench",
        description="Generate and evaluate minimal-distortion adversarial benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="attack a dataset and write a benchmark split")
    _add_common(p)
    p.add_argument("--images", required=True, help="dataset directory")
    p.add_argument("--agent", help="agent checkpoint (default: train in place)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-agent", help="train a policy against a victim")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("calibrate", help="fit filter intensities to a common L2 impact")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="robustness metrics for generated splits")
    _add_common(p)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--ref-l2", help="reference mean L2 per severity, e.g. 1=99.3,2=120")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", help="cross-model accuracy matrix")
    _add_common(p)
    p.add_argument("--split", action="append", required=True, metavar="NAME=MANIFEST")
    p.add_argument("--model", action="append", required=True, metavar="NAME=VICTIM")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("sensitivity-map", help="per-patch probability sensitivity CSV")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--index", type=int, help="dataset index (default: first)")
    p.set_defaults(func=cmd_sensitivity_map)

    p = sub.add_parser("serve-toy", help="host a toy victim behind the wire protocol")
    p.add_argument("--victim", required=True, help="toy:<weights-file>")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="0 picks a free port")
    p.set_defaults(func=cmd_serve_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvalidArgumentError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return 2
    except DistortBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
