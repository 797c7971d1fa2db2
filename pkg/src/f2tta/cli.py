"""``f2tta`` command line: data, source model, streams, adaptation runs, reports, sweeps, plots.

Artifacts live under one root (``--out``, else ``$F2TTA_OUT``, else
``./f2tta_out``)::

    data/                     dataset arrays + manifest
    source/model.pt           source checkpoint (+ .json sidecar)
    streams/delta{d}/seed{s}.json
    runs/{tag}/delta{d}/seed{s}/predictions.csv
    reports/{tag}_delta{d}.json
    sweeps/{param}/results.json
    plots/*.png

Every directory gets ``config.json`` (resolved config) and
``provenance.json`` (digests of the upstream artifacts it was built from).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, load_config, with_method
from .errors import ConfigError, F2TTAError, TrainingError
from .metrics import aggregate, compute_metrics, format_table

logger = logging.getLogger("f2tta")

SWEEP_PARAMS = {
    "mask_ratio": ("method", [round(0.1 * i, 1) for i in range(1, 10)]),
    "bank_size": ("method", [5, 10, 15, 20, 25, 30]),
    "delta": ("stream", [0.01, 0.1, 1.0, 10.0]),
    "gamma": ("method", [0.5, 0.6, 0.7, 0.8, 0.9, 0.99]),
}


class MissingArtifact(F2TTAError):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt_delta(delta: float) -> str:
    return f"delta{delta:g}"


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def source(self) -> Path:
        return self.root / "source" / "model.pt"

    def stream(self, delta: float, seed: int) -> Path:
        return self.root / "streams" / _fmt_delta(delta) / f"seed{seed}.json"

    def run(self, tag: str, delta: float, seed: int) -> Path:
        return self.root / "runs" / tag / _fmt_delta(delta) / f"seed{seed}"

    def report(self, tag: str, delta: float) -> Path:
        return self.root / "reports" / f"{tag}_{_fmt_delta(delta)}.json"

    def sweep(self, param: str) -> Path:
        return self.root / "sweeps" / param

    @property
    def plots(self) -> Path:
        return self.root / "plots"


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}; run `f2tta {hint}` first")
    return path


def write_meta(directory: Path, config: ExperimentConfig, upstream: Dict[str, str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(config.to_json())
    (directory / "provenance.json").write_text(json.dumps(upstream, indent=1, sort_keys=True))


# ---- commands ---------------------------------------------------------------------------


def cmd_make_data(config: ExperimentConfig, layout: Layout, args) -> int:
    from .synth_data import generate_dataset, save_dataset

    ds = config.dataset
    bundle = generate_dataset(ds.n_domains, ds.n_per_domain, ds.image_size, 2, ds.seed, patch_size=ds.patch_size)
    save_dataset(bundle, layout.data)
    write_meta(layout.data, config, {"dataset_config": config.section_digest("dataset")})
    print(f"dataset written to {layout.data}")
    return 0


def _load_data(layout: Layout):
    from .synth_data import load_dataset

    require(layout.data / "manifest.json", "make-data")
    return load_dataset(layout.data)


def cmd_train_source(config: ExperimentConfig, layout: Layout, args) -> int:
    from .vit import save_checkpoint, train_source

    bundle = _load_data(layout)
    m = config.model
    result = train_source(
        bundle,
        m.vit_config(config.dataset),
        epochs=m.epochs,
        lr=m.lr,
        seed=m.seed,
        source_domain=config.run.source_domain,
        batch_size=m.batch_size,
        require_accuracy=m.min_val_accuracy,
        prefix_rows=m.prefix_rows,
        prefix_scale=m.prefix_scale,
    )
    save_checkpoint(result.model, layout.source, seed=m.seed, extra={"val_accuracy": result.val_accuracy, "loss_curve": result.loss_curve})
    write_meta(layout.source.parent, config, {"data": file_digest(layout.data / "manifest.json")})
    print(f"source model written to {layout.source} (val accuracy {100 * result.val_accuracy:.2f}%)")
    return 0


def cmd_make_stream(config: ExperimentConfig, layout: Layout, args) -> int:
    from .streams import make_stream

    bundle = _load_data(layout)
    s = config.stream
    for seed in s.seeds:
        path = layout.stream(s.delta, seed)
        make_stream(bundle.test_splits(), s.fragments_per_domain, s.delta, seed).save(path)
        print(f"stream written to {path}")
    write_meta(layout.stream(s.delta, 0).parent, config, {"data": file_digest(layout.data / "manifest.json")})
    return 0


def run_one(config: ExperimentConfig, root: str, seed: int, tag: str) -> str:
    """Adapt over one stream seed and write the prediction log; returns its path."""
    import torch

    from .engine import AdaptState, baseline_entropy_min, baseline_source_only, run_stream
    from .streams import StreamManifest
    from .vit import load_checkpoint

    torch.set_num_threads(1)
    layout = Layout(root)
    bundle = _load_data(layout)
    src = require(layout.source, "train-source")
    stream_path = require(layout.stream(config.stream.delta, seed), "make-stream")
    manifest = StreamManifest.load(stream_path)
    model = load_checkpoint(src)
    if config.run.dtype == "float64":
        model = model.double()
    method = config.method
    out_dir = layout.run(tag, config.stream.delta, seed)
    state = None
    if method.name == "source_only":
        log = baseline_source_only(model, manifest, bundle)
    elif method.name == "entropy_min":
        log = baseline_entropy_min(model, manifest, bundle, lr=method.entropy_lr)
    else:
        state = AdaptState(model, method.idipt_config(), seed=seed)
        log = run_stream(state, manifest, bundle)
    log.to_csv(out_dir / "predictions.csv")
    extra = {"trainable_parameters": _param_count(config, model, state), "seed": seed}
    if state is not None and state.events:
        extra["events"] = state.events
    (out_dir / "run.json").write_text(json.dumps(extra, indent=1, sort_keys=True))
    write_meta(
        out_dir,
        config,
        {
            "data": file_digest(layout.data / "manifest.json"),
            "source": file_digest(src),
            "stream": file_digest(stream_path),
        },
    )
    return str(out_dir / "predictions.csv")


def _param_count(config: ExperimentConfig, model, state) -> int:
    from .engine import entropy_min_parameter_count

    if config.method.name == "source_only":
        return 0
    if config.method.name == "entropy_min":
        return entropy_min_parameter_count(model)
    return state.trainable_parameter_count()


def run_seeds(config: ExperimentConfig, layout: Layout, tag: str) -> List[str]:
    seeds = list(config.stream.seeds)
    workers = max(1, min(config.run.workers, len(seeds)))
    if workers == 1:
        return [run_one(config, str(layout.root), s, tag) for s in seeds]
    with ProcessPoolExecutor(workers) as pool:
        futures = [pool.submit(run_one, config, str(layout.root), s, tag) for s in seeds]
        return [f.result() for f in futures]


def cmd_adapt(config: ExperimentConfig, layout: Layout, args) -> int:
    tag = args.tag or config.method.tag
    for path in run_seeds(config, layout, tag):
        print(f"predictions written to {path}")
    return 0


def build_report(config: ExperimentConfig, layout: Layout, tag: str) -> dict:
    from .engine import PredictionLog

    reports = []
    for seed in config.stream.seeds:
        run_dir = layout.run(tag, config.stream.delta, seed)
        log = PredictionLog.from_csv(require(run_dir / "predictions.csv", "adapt"))
        meta = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").exists() else {}
        rep = compute_metrics(log, config.run.source_domain, config.run.n_segments, meta.get("trainable_parameters"))
        rep.seeds = [seed]
        rep.config_digest = hashlib.sha256((run_dir / "config.json").read_bytes()).hexdigest()
        rep.save(run_dir / "report.json")
        reports.append(rep)
    agg = aggregate(reports)
    agg["tag"] = tag
    agg["delta"] = config.stream.delta
    agg["seeds"] = list(config.stream.seeds)
    agg["trainable_parameters"] = reports[0].trainable_parameters
    path = layout.report(tag, config.stream.delta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(agg, indent=1, sort_keys=True))
    path.with_suffix(".txt").write_text(format_table({tag: agg}, config.run.source_domain) + "\n")
    return agg


def cmd_report(config: ExperimentConfig, layout: Layout, args) -> int:
    tags = args.tags or [config.method.tag]
    rows = {tag: build_report(config, layout, tag) for tag in tags}
    print(format_table(rows, config.run.source_domain))
    return 0


def cmd_sweep(config: ExperimentConfig, layout: Layout, args) -> int:
    from .synth_data import load_dataset
    from .streams import make_stream

    param = args.param
    section, default_values = SWEEP_PARAMS[param]
    values = [json.loads(v) for v in args.values] if args.values else default_values
    out_dir = layout.sweep(param)
    results = []
    for value in values:
        if section == "stream":
            cfg = replace(config, stream=replace(config.stream, **{param: value})).validate()
            bundle = load_dataset(require(layout.data, "make-data"))
            for seed in cfg.stream.seeds:
                path = layout.stream(cfg.stream.delta, seed)
                if not path.exists():
                    make_stream(bundle.test_splits(), cfg.stream.fragments_per_domain, cfg.stream.delta, seed).save(path)
        else:
            cfg = with_method(config, **{param: value})
        tag = f"sweep-{param}-{value:g}"
        run_seeds(cfg, layout, tag)
        agg = build_report(cfg, layout, tag)
        results.append({"value": value, "accuracy": agg["accuracy"], "target_accuracy": agg["target_accuracy"]})
        print(f"{param}={value:g}: accuracy {agg['accuracy']['mean']:.2f} ± {agg['accuracy']['std']:.2f}")
    write_meta(out_dir, config, {"source": file_digest(require(layout.source, "train-source"))})
    (out_dir / "results.json").write_text(json.dumps({"param": param, "results": results}, indent=1, sort_keys=True))
    return 0


def cmd_plot(config: ExperimentConfig, layout: Layout, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    layout.plots.mkdir(parents=True, exist_ok=True)
    written = []
    for res_path in sorted((layout.root / "sweeps").glob("*/results.json")):
        data = json.loads(res_path.read_text())
        xs = [r["value"] for r in data["results"]]
        ys = [r["accuracy"]["mean"] for r in data["results"]]
        es = [r["accuracy"]["std"] for r in data["results"]]
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
        if data["param"] == "delta":
            ax.set_xscale("log")
        ax.set_xlabel(data["param"])
        ax.set_ylabel("overall accuracy (%)")
        fig.tight_layout()
        out = layout.plots / f"sweep_{data['param']}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    reports = sorted((layout.root / "reports").glob("*.json"))
    curves = {p.stem: json.loads(p.read_text()).get("segment_accuracy") for p in reports}
    curves = {k: v for k, v in curves.items() if v}
    if curves:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        names = list(curves)
        n_seg = len(next(iter(curves.values())))
        width = 0.8 / len(names)
        for i, name in enumerate(names):
            ax.bar(np.arange(n_seg) + i * width, curves[name], width=width, label=name)
        ax.set_xlabel("stream segment")
        ax.set_ylabel("accuracy (%)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        out = layout.plots / "segments.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    if not written:
        raise MissingArtifact(f"nothing to plot under {layout.root}; run `f2tta report` or `f2tta sweep` first")
    for p in written:
        print(f"plot written to {p}")
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train-source": cmd_train_source,
    "make-stream": cmd_make_stream,
    "adapt": cmd_adapt,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="run a single stream seed instead of stream.seeds")
    common.add_argument("--out", help="artifact root (default: $F2TTA_OUT or ./f2tta_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="f2tta", description="Free-form test-time adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-data", "train-source", "make-stream", "plot"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("adapt", parents=[common])
    p.add_argument("--tag", help="run name (default derived from the method section)")
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--tags", nargs="*", help="run names to tabulate (default: current method)")
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", nargs="*", help="grid values (default grid per parameter)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.set)
        if args.seed is not None:
            config = replace(config, stream=replace(config.stream, seeds=[args.seed]))
        root = args.out or os.environ.get("F2TTA_OUT") or "f2tta_out"
        return COMMANDS[args.command](config, Layout(root), args)
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TrainingError, F2TTAError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
