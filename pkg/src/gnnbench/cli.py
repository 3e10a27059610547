"""Command line pipeline: generate -> train/profile -> analyze.

One executable with three subcommands sharing a single --seed.  Every
command writes a run manifest with content hashes of its outputs;
re-running with the same arguments reproduces all non-timing outputs
bit-identically (trace durations and log seconds are host noise and are
listed separately in the manifest).

Exit codes: 0 success, 2 usage/IO/config problems, 3 data or metric
problems (e.g. AUC undefined on single-class labels).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path
from time import perf_counter

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, GnnBenchError, UndefinedMetricError, UsageError
from .graphs import (
    GeneratorConfig,
    PaddingSpec,
    generate_dataset,
    pad_dataset,
    read_dataset,
    size_histogram,
    write_dataset,
)
from .model import (
    ModelConfig,
    init_params,
    parameter_count_report,
    save_checkpoint,
)
from .profiler import (
    Trace,
    TraceRecorder,
    flop_utilization,
    rank_kernels,
    render_kernel_report,
    render_time_breakdown,
    render_utilization,
    render_zero_ai,
    time_breakdown,
    zero_ai_report,
)
from .roofline import (
    DeviceSpec,
    default_catalog,
    economics_table,
    emit_roofline,
    load_catalog,
    render_economics,
    ridge_point,
    write_roofline_csv,
    write_roofline_svg,
    write_zero_ai_csv,
)
from .training import (
    TrainConfig,
    data_parallel_epoch,
    make_optimizer,
    render_scaling_table,
    strong_scaling_report,
    train_epoch,
    write_train_log,
)

CATALOG_ENV = "GNNBENCH_CATALOG"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   inputs: list[str], outputs: list[Path],
                   timing_outputs: list[Path] = ()) -> Path:
    """Record the run: config snapshot, seed, and output content hashes."""
    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(out_dir))
        except ValueError:
            return str(p)

    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": {rel(p): _sha256(Path(p)) for p in sorted(outputs, key=str)},
        "timing_outputs": {rel(p): _sha256(Path(p))
                           for p in sorted(timing_outputs, key=str)},
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    particles = max(1, round(args.particles * args.scale))
    cfg = GeneratorConfig(
        particles_per_event=particles,
        layers=args.layers,
        false_edge_factor=args.false_factor,
        noise=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events = generate_dataset(cfg, args.events)
    files = write_dataset(events, out, cfg)

    stats = size_histogram(events)
    hist_csv = out / "size_histogram.csv"
    stats.to_csv(hist_csv)
    summary = out / "size_summary.txt"
    summary.write_text(stats.render() + "\n", encoding="utf-8")
    print(stats.render())

    outputs = [out / f for f in files] + [out / "dataset.json", hist_csv, summary]
    write_manifest(out, "gen", cfg.to_dict(), args.seed,
                   inputs=[], outputs=outputs)
    print(f"wrote {len(files)} events to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _split_events(events, val_fraction: float, seed: int):
    if val_fraction <= 0:
        return events, []
    order = np.random.default_rng([seed, 987]).permutation(len(events))
    n_val = max(1, round(val_fraction * len(events)))
    if n_val >= len(events):
        raise UsageError("validation fraction leaves no training events")
    val_idx = set(order[:n_val].tolist())
    train = [events[i] for i in range(len(events)) if i not in val_idx]
    val = [events[i] for i in sorted(val_idx)]
    return train, val


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    events, _manifest = read_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out / "trace.json"
    log_path = Path(args.log) if args.log else out / "train_log.jsonl"

    train_events, val_events = _split_events(events, args.val_fraction, args.seed)

    pad_spec = PaddingSpec.from_events(train_events, args.pad_quantile)
    train_events, trunc_n, trunc_e = pad_dataset(train_events, pad_spec)
    if val_events:
        val_events, _, _ = pad_dataset(val_events, pad_spec)
    print(f"pad sizes: {pad_spec.target_nodes} nodes / {pad_spec.target_edges} edges"
          f" (q={args.pad_quantile}); truncated {trunc_n} nodes, {trunc_e} edges")

    model_cfg = ModelConfig(seed=args.seed)
    params = init_params(model_cfg)
    report_text = parameter_count_report(params)
    print(report_text)
    (out / "params_report.txt").write_text(report_text + "\n", encoding="utf-8")

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        workers=args.workers,
        optimizer=args.optimizer,
        seed=args.seed,
        pad_quantile=args.pad_quantile,
        trace_steps=None if args.trace_steps <= 0 else args.trace_steps,
    )
    optimizer = make_optimizer(cfg)

    reports = []
    checkpoints = []
    scaling_rows = []
    epoch_walls = []
    recorders = [TraceRecorder() for _ in range(cfg.workers)]
    start_step = 0
    for epoch in range(cfg.epochs):
        wall0 = perf_counter()
        if cfg.workers == 1:
            _, report = train_epoch(params, train_events, cfg, recorders[0],
                                    optimizer=optimizer, epoch=epoch,
                                    val_events=val_events, start_step=start_step)
            epoch_reports = [report]
        else:
            _, epoch_reports, summary = data_parallel_epoch(
                params, train_events, cfg, recorders, optimizer=optimizer,
                epoch=epoch, val_events=val_events, start_step=start_step)
            scaling_rows.append((epoch, summary))
        epoch_walls.append(perf_counter() - wall0)
        start_step += epoch_reports[0].steps
        reports.append(epoch_reports[0])
        auc_str = "n/a" if epoch_reports[0].auc is None else f"{epoch_reports[0].auc:.4f}"
        print(f"epoch {epoch}: loss {epoch_reports[0].mean_loss:.5f}"
              f" auc {auc_str} ({epoch_reports[0].seconds:.2f}s)")
        if args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
            ck = out / f"checkpoint_epoch_{epoch:04d}.json"
            save_checkpoint(params, ck)
            checkpoints.append(ck)

    final_ck = out / "checkpoint_final.json"
    save_checkpoint(params, final_ck)
    checkpoints.append(final_ck)
    write_train_log(reports, log_path)

    merged = Trace.merge([r.trace() for r in recorders], meta={
        "seed": args.seed,
        "host": f"{platform.platform()} / python {platform.python_version()}",
        "model_config": model_cfg.to_dict(),
        "train_config": {
            "epochs": cfg.epochs, "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate, "workers": cfg.workers,
            "optimizer": cfg.optimizer, "pad_quantile": cfg.pad_quantile,
        },
        "pad_sizes": {"nodes": pad_spec.target_nodes, "edges": pad_spec.target_edges},
        "truncated": {"nodes": trunc_n, "edges": trunc_e},
        "epoch_seconds": epoch_walls,
        "wall_time_s": sum(epoch_walls),
    })
    merged.save(trace_path)

    if scaling_rows:
        lines = [summary.render() for _, summary in scaling_rows]
        (out / "scaling.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(lines[-1])

    write_manifest(
        out, "train",
        config={"train": merged.meta["train_config"], "model": model_cfg.to_dict(),
                "val_fraction": args.val_fraction},
        seed=args.seed,
        inputs=[str(data_dir)],
        outputs=checkpoints + [out / "params_report.txt"],
        timing_outputs=[trace_path, log_path],
    )
    print(f"final checkpoint: {final_ck}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _load_device_catalog(args) -> dict[str, DeviceSpec]:
    path = args.catalog or os.environ.get(CATALOG_ENV)
    if path:
        return load_catalog(path)
    return default_catalog()


def cmd_analyze(args) -> int:
    trace = Trace.load(args.trace)
    if not trace.records:
        raise DataError(f"trace {args.trace} has no records")
    catalog = _load_device_catalog(args)
    if args.device == "all":
        devices = list(catalog.values())
    elif args.device in catalog:
        devices = [catalog[args.device]]
    else:
        raise ConfigError(
            f"unknown device {args.device!r}; catalog has: {', '.join(sorted(catalog))}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    ranks = rank_kernels(trace)
    rank_text = render_kernel_report(ranks)
    breakdown = time_breakdown(trace)
    breakdown_text = render_time_breakdown(breakdown)
    zero = zero_ai_report(trace)
    zero_text = render_zero_ai(zero)

    ranking_csv = out / "kernel_ranking.csv"
    with open(ranking_csv, "w", encoding="utf-8") as f:
        f.write("kernel,calls,total_duration_s,duration_share,total_flops,flops_share\n")
        for k in ranks:
            f.write(f"{k.op},{k.count},{k.total_duration_s!r},{k.duration_share!r},"
                    f"{k.total_flops},{k.flops_share!r}\n")
    outputs.append(ranking_csv)

    breakdown_csv = out / "time_breakdown.csv"
    with open(breakdown_csv, "w", encoding="utf-8") as f:
        f.write("category,fraction\n")
        for cat, frac in breakdown.items():
            f.write(f"{cat},{frac!r}\n")
    outputs.append(breakdown_csv)

    latencies = list(args.latency) if args.latency else \
        list(trace.meta.get("epoch_seconds", [])) or [trace.total_duration_s]
    econ_rows = economics_table(devices, latencies)
    econ_text = render_economics(econ_rows)
    econ_csv = out / "economics.csv"
    with open(econ_csv, "w", encoding="utf-8") as f:
        f.write("device,latency_s,cost_usd,energy_j,energy_kwh\n")
        for r in econ_rows:
            cost = "" if r["cost_usd"] is None else repr(r["cost_usd"])
            f.write(f"{r['device']},{r['latency_s']!r},{cost},"
                    f"{r['energy_j']!r},{r['energy_kwh']!r}\n")
    outputs.append(econ_csv)

    header = [f"trace: {args.trace} ({len(trace)} records,"
              f" {trace.total_flops} FLOPs, {trace.total_duration_s:.4f}s)"]
    sections = []
    for device in devices:
        if device.levels():
            ridge = ridge_point(device, "hbm")
            header.append(f"{device.name}: ridge point {ridge:.2f} FLOPs/byte"
                          f" (peak {device.peak_flops:.3g} FLOPS"
                          f" / hbm {device.bandwidth['hbm']:.3g} B/s)")
            report = emit_roofline(trace, device)
            csv_path = out / f"roofline_{device.name}.csv"
            svg_path = out / f"roofline_{device.name}.svg"
            zero_csv = out / f"roofline_{device.name}_zero_ai.csv"
            write_roofline_csv(report, csv_path)
            write_roofline_svg(report, device, svg_path)
            write_zero_ai_csv(report, zero_csv)
            outputs += [csv_path, svg_path, zero_csv]
            if report.over_roof:
                sections.append(
                    f"{device.name}: kernels above the roof (device spec does not"
                    f" match this host): {', '.join(report.over_roof)}")
        else:
            header.append(f"{device.name}: no memory bandwidth configured;"
                          " roofline skipped")
        sections.append(render_utilization(flop_utilization(trace, device), device))

    report_text = "\n".join(
        header + ["", rank_text, "", breakdown_text, "", zero_text, ""]
        + sections + ["", econ_text]) + "\n"
    report_path = out / "report.txt"
    report_path.write_text(report_text, encoding="utf-8")
    outputs.append(report_path)
    print(report_text)

    write_manifest(out, "analyze",
                   config={"device": args.device, "latencies": latencies},
                   seed=int(trace.meta.get("seed", 0)),
                   inputs=[str(args.trace)], outputs=outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnnbench",
        description="Track-finding GNN benchmark: generate data, train with"
                    " per-op instrumentation, analyze cost and rooflines.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic event dataset")
    gen.add_argument("--events", type=int, default=200)
    gen.add_argument("--particles", type=int, default=10,
                     help="particles per event (desk scale default)")
    gen.add_argument("--layers", type=int, default=10)
    gen.add_argument("--false-factor", type=float, default=4.0)
    gen.add_argument("--noise", type=float, default=1.0)
    gen.add_argument("--scale", type=float, default=1.0,
                     help="multiply particle count; 555 approaches full scale")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train the edge classifier, tracing every op")
    train.add_argument("--data", required=True)
    train.add_argument("--out", default="train_out")
    train.add_argument("--epochs", type=int, default=1)
    train.add_argument("--batch", type=int, default=1)
    train.add_argument("--workers", type=int, default=1)
    train.add_argument("--pad-quantile", type=float, default=0.99)
    train.add_argument("--trace", default=None, help="trace output path")
    train.add_argument("--log", default=None, help="per-epoch log path")
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    train.add_argument("--val-fraction", type=float, default=0.2)
    train.add_argument("--checkpoint-every", type=int, default=0)
    train.add_argument("--trace-steps", type=int, default=200,
                       help="record only the first N steps; 0 records all")
    train.add_argument("--seed", type=int, default=0)
    train.set_defaults(func=cmd_train)

    analyze = sub.add_parser("analyze", help="reports and rooflines from a trace")
    analyze.add_argument("--trace", required=True)
    analyze.add_argument("--device", default="V100",
                         help="catalog device name, or 'all'")
    analyze.add_argument("--catalog", default=None,
                         help=f"device catalog JSON (default ${CATALOG_ENV} or builtin)")
    analyze.add_argument("--latency", type=float, action="append", default=None,
                         help="epoch latency seconds for the cost/energy table;"
                              " repeatable; default: the trace's own epoch times")
    analyze.add_argument("--out", required=True)
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, GnnBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
