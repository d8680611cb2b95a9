"""``wdnleak`` command line: generate, train, calibrate, evaluate, noise-sweep, cross-network.

Every command reads the same run config and writes under its output directory::

    <out>/config.resolved.json
    <out>/data/manifest.json, data/<split>/<id>.csv + .json
    <out>/model.bin, model.json, train_history.csv
    <out>/calibration.json, fpr_curve.csv
    <out>/eval/      report.csv, report.json, table.txt, results.jsonl, traces/
    <out>/noise/     summary.json, table.txt, snr_<level>/...
    <out>/cross/<network>/  data/, report.*, traces/

Exit codes: 0 success, 2 configuration error, 3 data or artifact error,
4 numerical failure (divergence, solver budget, non-finite values).
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import click

from . import modelfile
from .config import RunConfig, load_config, resolve_topology, write_snapshot
from .detector import CalibrationError, DetectionResult
from .evaluation import EvalReport, cross_network_eval, evaluate, format_table, noise_sweep
from .nn import NonFiniteGradientError
from .ocsvm import SolverError
from .pipeline import calibrate, fit_detector, foreign_generation
from .plots import trace_svg
from .scenario import (
    ConfigError,
    Scenario,
    generate_dataset,
    load_topology,
    read_scenario,
    write_scenario,
)

logger = logging.getLogger("wdnleak")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
SPLITS = ("train", "validation", "test")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FloatingPointError, NonFiniteGradientError, SolverError) as exc:
            _fail(EXIT_NUMERICAL, str(exc))
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (ValueError, OSError, KeyError) as exc:
            _fail(EXIT_DATA, str(exc))

    return wrapper


# -- artifact helpers ----------------------------------------------------------


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint(config: RunConfig) -> dict:
    """Config content that determines results (output location and pool size excluded)."""
    snap = config.snapshot()
    snap.pop("output_dir")
    snap.pop("workers")
    return snap


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_dataset(scenarios, directory: Path, config: RunConfig, topology: str) -> dict:
    entries = []
    for s in sorted(scenarios, key=lambda s: s.id):
        csv_path = write_scenario(s, directory / s.split)
        entries.append({
            "id": s.id,
            "split": s.split,
            "label": s.label,
            "file": str(csv_path.relative_to(directory)),
            "sha256": sha256_bytes(csv_path.read_bytes()),
        })
    manifest = {
        "topology": topology,
        "config": fingerprint(config),
        "splits": {sp: [e["id"] for e in entries if e["split"] == sp] for sp in SPLITS},
        "scenarios": entries,
    }
    write_json(directory / "manifest.json", manifest)
    return manifest


def load_split(directory: Path, split: str) -> list[Scenario]:
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}; run 'generate' first")
    manifest = json.loads(manifest_path.read_text())
    return [read_scenario(directory / e["file"]) for e in manifest["scenarios"] if e["split"] == split]


def load_model(out: Path):
    path = out / "model.bin"
    detector, header = modelfile.load(path)
    return detector, header, modelfile.file_hash(path)


def load_threshold(out: Path, model_hash: str) -> dict:
    path = out / "calibration.json"
    if not path.exists():
        raise FileNotFoundError(f"no calibration record at {path}; run 'calibrate' first")
    record = json.loads(path.read_text())
    if record.get("model_sha256") != model_hash:
        raise ConfigError("calibration record belongs to a different model; re-run 'calibrate'")
    return record


def write_report(directory: Path, report: EvalReport, results: list[DetectionResult] | None,
                 scenarios, threshold: float, extra: dict, plots: bool, title: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.csv").write_text(report.to_csv())
    write_json(directory / "report.json", {**report.summary(), **extra})
    (directory / "table.txt").write_text(format_table([report], title=title))
    if results is None:
        return
    by_id = {s.id: s for s in scenarios}
    ordered = sorted(results, key=lambda r: r.scenario_id)
    with (directory / "results.jsonl").open("w") as fh:
        for r in ordered:
            fh.write(json.dumps({**r.record(), **extra}, sort_keys=True) + "\n")
    traces = directory / "traces"
    traces.mkdir(exist_ok=True)
    for r in ordered:
        (traces / f"{r.scenario_id}.csv").write_text(r.trace.to_csv())
        if plots:
            leak = by_id[r.scenario_id].leak
            svg = trace_svg(r.trace, threshold, leak.onset_sample if leak else None, r.scenario_id)
            (traces / f"{r.scenario_id}.svg").write_text(svg)


# -- commands ------------------------------------------------------------------


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Run config (JSON). Defaults are the desk-scale settings.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key, e.g. --set detector.smoothing=24 (repeatable).")
@click.option("-o", "--output", default=None,
              help="Output directory (else $WDNLEAK_OUTPUT, else the config's output_dir).")
@click.option("--seed", type=int, default=None, help="Master seed.")
@click.option("--workers", type=int, default=None, help="Worker threads for scenario-level work.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config_path, overrides, output, seed, workers, verbose):
    """Leak detection in water distribution networks from node pressure series."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    if workers is not None:
        extra.append(f"workers={workers}")
    try:
        config = load_config(config_path, extra, output)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    ctx.obj = config


def _out(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    write_snapshot(config, out)
    return out


@main.command()
@click.option("--topology", default=None, help="Topology file or bundled name (overrides config).")
@click.pass_obj
@handle_errors
def generate(config: RunConfig, topology):
    """Generate the train/validation/test scenario files and a manifest."""
    if topology:
        config = config.model_copy(update={"topology": topology})
    out = _out(config)
    network = load_topology(resolve_topology(config.topology))
    dataset = generate_dataset(network, config.generation)
    manifest = write_dataset(dataset.scenarios, out / "data", config, config.topology)
    digest = modelfile.file_hash(out / "data" / "manifest.json")
    counts = {sp: len(ids) for sp, ids in manifest["splits"].items()}
    click.echo(f"{len(dataset)} scenarios on {network.name} ({network.n_nodes} nodes): {counts}")
    click.echo(f"manifest sha256 {digest}")


@main.command()
@click.pass_obj
@handle_errors
def train(config: RunConfig):
    """Train the autoencoder and one-class SVM on the no-leak train split."""
    out = _out(config)
    scenarios = load_split(out / "data", "train")
    detector, result = fit_detector(scenarios, config)
    digest = modelfile.save(detector, out / "model.bin", extra={"config": fingerprint(config)})
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{h['epoch']},{h['train_loss']:.8g},{h['val_loss']:.8g}" for h in result.history]
    (out / "train_history.csv").write_text("\n".join(lines) + "\n")
    write_json(out / "model.json", {
        "model_sha256": digest,
        "best_epoch": result.best_epoch,
        "n_support": int(detector.svm.alpha.size),
        "svm_gamma": detector.svm.gamma,
        "svm_rho": detector.svm.rho,
        "config": fingerprint(config),
    })
    click.echo(f"model written to {out / 'model.bin'} (sha256 {digest})")


@main.command("calibrate")
@click.option("--fpr", type=float, default=None, help="Target false-positive rate (overrides config).")
@click.pass_obj
@handle_errors
def calibrate_cmd(config: RunConfig, fpr):
    """Set the alarm threshold on the no-leak validation split."""
    if fpr is not None:
        if not 0 < fpr < 1:
            raise ConfigError(f"target FPR must be in (0, 1), got {fpr}")
        config = config.model_copy(update={"detector": config.detector.model_copy(update={"target_fpr": fpr})})
    out = _out(config)
    detector, _, digest = load_model(out)
    scenarios = load_split(out / "data", "validation")
    if not scenarios:
        raise CalibrationError("validation split is empty")
    cal = calibrate(scenarios, detector, config.detector, config.evaluation.fpr_curve, config.workers)
    write_json(out / "calibration.json", {**cal.record(), "model_sha256": digest,
                                          "config": fingerprint(config)})
    lines = ["target_fpr,threshold"] + [f"{f:.6g},{g:.10g}" for f, g in cal.curve]
    (out / "fpr_curve.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"threshold {cal.threshold:.6g} at FPR {cal.target_fpr} ({cal.mode} mode)")


def _detector_config(config: RunConfig, record: dict):
    return config.detector.model_copy(update={"threshold": float(record["threshold"])})


@main.command("evaluate")
@click.option("--plots", is_flag=True, help="Also write SVG plots of every score trace.")
@click.pass_obj
@handle_errors
def evaluate_cmd(config: RunConfig, plots):
    """Run the calibrated detector on the test split."""
    out = _out(config)
    detector, _, digest = load_model(out)
    record = load_threshold(out, digest)
    scenarios = load_split(out / "data", "test")
    dcfg = _detector_config(config, record)
    report, results = evaluate(scenarios, detector, dcfg, {"network": config.topology},
                               config.workers, config.evaluation.delay_mode)
    extra = {"model_sha256": digest, "threshold": dcfg.threshold, "config": fingerprint(config)}
    write_report(out / "eval", report, results, scenarios, dcfg.threshold, extra, plots,
                 "Detection on the test split")
    click.echo(format_table([report], title="Detection on the test split"), nl=False)


@main.command("noise-sweep")
@click.option("--snr", "snrs", type=float, multiple=True, help="SNR level in dB (repeatable).")
@click.pass_obj
@handle_errors
def noise_sweep_cmd(config: RunConfig, snrs):
    """Test-time white noise at several SNR levels; models stay as trained."""
    levels = list(snrs) or config.evaluation.snr_levels
    out = _out(config)
    detector, _, digest = load_model(out)
    record = load_threshold(out, digest)
    scenarios = load_split(out / "data", "test")
    dcfg = _detector_config(config, record)
    ev = config.evaluation
    reports = noise_sweep(scenarios, detector, dcfg, levels, seed=ev.noise_seed + config.seed,
                          workers=config.workers, delay_mode=ev.delay_mode, reference=ev.snr_reference)
    extra = {"model_sha256": digest, "threshold": dcfg.threshold, "config": fingerprint(config)}
    for rep in reports:
        level = rep.tags["snr_db"]
        name = "inf" if math.isinf(level) else f"{level:g}"
        write_report(out / "noise" / f"snr_{name}", rep, None, scenarios, dcfg.threshold, extra,
                     False, f"SNR {name} dB")
    table = format_table(reports, key="snr_db", title="Test-time noise sweep")
    (out / "noise" / "table.txt").write_text(table)
    write_json(out / "noise" / "summary.json", {"levels": [r.summary() for r in reports], **extra})
    click.echo(table, nl=False)


@main.command("cross-network")
@click.option("--topology", default=None, help="Foreign topology file or bundled name.")
@click.option("--plots", is_flag=True)
@click.pass_obj
@handle_errors
def cross_network_cmd(config: RunConfig, topology, plots):
    """Apply the trained model to a smaller network by replicating its nodes."""
    ev = config.evaluation
    name = topology or ev.foreign_topology
    out = _out(config)
    detector, _, digest = load_model(out)
    record = load_threshold(out, digest)
    network = load_topology(resolve_topology(name))
    if network.n_nodes > detector.n_nodes:
        raise ConfigError(f"{network.name} has {network.n_nodes} nodes; the model takes at most {detector.n_nodes}")
    dataset = generate_dataset(network, foreign_generation(config))
    target = out / "cross" / network.name
    write_dataset(dataset.scenarios, target / "data", config, name)
    reference = load_split(target / "data", "train")
    tests = load_split(target / "data", "test")
    dcfg = _detector_config(config, record)
    report, results = cross_network_eval(tests, detector, dcfg, reference or None, config.workers, ev.delay_mode)
    extra = {"model_sha256": digest, "threshold": dcfg.threshold, "config": fingerprint(config),
             "replicated_to": detector.n_nodes, "standardisation_refit": bool(reference)}
    write_report(target, report, results, tests, dcfg.threshold, extra, plots,
                 f"Cross-network: {network.name}")
    click.echo(format_table([report], key="network", title="Cross-network evaluation"), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
