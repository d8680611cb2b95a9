"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (also repeated in the
terminal summary). The desk-scale experiments for master seeds 0, 1 and 2 are
run once per session and shared.
"""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from wdnleak import ocsvm
from wdnleak.autoencoder import Autoencoder, training_windows
from wdnleak.cli import main
from wdnleak.config import RunConfig, resolve_topology
from wdnleak.detector import calibrate_threshold, realized_fpr
from wdnleak.evaluation import cross_network_eval, noise_sweep, score_traces
from wdnleak.nn import Conv1d, ConvTranspose1d, ReLU, Sequential, mse_loss, mse_loss_grad
from wdnleak.pipeline import foreign_generation, run_experiment
from wdnleak.scenario import GenerationConfig, generate_dataset, load_topology
from wdnleak.windowing import normalize, sliding_windows

from conftest import ACCEPTANCE_LINES
from gradcheck import max_rel_error, numeric_grad
from qp_oracle import solve_projected_gradient

SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


@pytest.fixture(scope="session")
def experiments():
    t0 = time.perf_counter()
    runs = {seed: run_experiment(RunConfig(seed=seed)) for seed in SEEDS}
    return runs, time.perf_counter() - t0


def random_net(rng):
    c = int(rng.integers(1, 4))
    h = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5, 7]))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k // 2 + 1))
    out_pad = int(rng.integers(0, stride))
    length = int(rng.integers(max(k - 2 * pad, 1), 13))
    net = Sequential(
        Conv1d(c, h, k, stride=stride, padding=pad, rng=rng),
        ReLU(),
        ConvTranspose1d(h, c, k, stride=stride, padding=pad, output_padding=out_pad, rng=rng),
    )
    x = rng.normal(size=(int(rng.integers(1, 3)), c, length))
    return net, x


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        net, x = random_net(rng)
        target = rng.normal(size=net.forward(x).shape)

        def loss():
            return mse_loss(net.forward(x), target)

        for g in net.gradients():
            g[...] = 0
        out = net.forward(x)
        dx = net.backward(mse_loss_grad(out, target))
        for p, g in zip(net.parameters(), net.gradients()):
            worst = max(worst, max_rel_error(g, numeric_grad(loss, p)))
        worst = max(worst, max_rel_error(dx, numeric_grad(loss, x)))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-4 and elapsed < 60,
            f"max relative error {worst:.2e} (<= 1e-4) over 20 shapes in {elapsed:.1f} s (< 60 s)")


def test_criterion_2_shapes(verdict):
    shapes = {}
    for k in (16, 268):
        ae = Autoencoder(k, 336, seed=0)
        x = np.random.default_rng(k).normal(size=(1, k, 336)).astype(np.float32)
        z = ae.encoder.infer(x)
        shapes[k] = (z.shape[1:], ae.decoder.infer(z).shape[1:])
    ok = all(enc == (32, 84) and dec == (k, 336) for k, (enc, dec) in shapes.items())
    verdict(2, ok, "; ".join(f"K={k}: (K,336)->{e}->{d}" for k, (e, d) in shapes.items()))


def test_criterion_3_svm_oracle(verdict):
    rng = np.random.default_rng(7)
    worst_obj = worst_sum = worst_kkt = 0.0
    for i in range(25):
        m = int(rng.integers(2, 21))
        x = rng.normal(size=(m, int(rng.integers(1, 6))))
        nu = float(rng.uniform(0.05, 1.0))
        model = ocsvm.fit(x, nu=nu, gamma=float(rng.uniform(0.1, 2.0)), seed=i)
        q = ocsvm.rbf_matrix(x, x, model.gamma)
        _, ref = solve_projected_gradient(q, nu)
        obj = ocsvm.dual_objective(q, ocsvm.full_alpha(model))
        kkt = ocsvm.kkt_report(model, x)
        worst_obj = max(worst_obj, abs(obj - ref) / abs(ref))
        worst_sum = max(worst_sum, abs(kkt["alpha_sum"] - 1))
        worst_kkt = max(worst_kkt, kkt["max_violation"])
    ok = worst_obj <= 1e-4 and worst_sum <= 1e-10 and worst_kkt <= 1e-5
    verdict(3, ok, f"objective rel. gap {worst_obj:.1e}, |sum(alpha)-1| {worst_sum:.1e}, "
                   f"KKT violation {worst_kkt:.1e}")


def test_criterion_4_nu_property(verdict, experiments):
    runs, _ = experiments
    exp = runs[0]
    cfg = exp.config
    windows = training_windows(exp.dataset.split("train"), exp.detector.stats, cfg.window_length, 1)
    pick = np.linspace(0, len(windows) - 1, 500).round().astype(int)
    emb = exp.detector.autoencoder.encode(windows[pick])
    # solver default gamma; at the detector's sharper kernel every support vector
    # is free and sits on the margin, so no point is strictly outside
    model = ocsvm.fit(emb, nu=0.1, seed=0)
    frac = ocsvm.kkt_report(model, emb)["outlier_fraction"]
    synth = np.random.default_rng(0).normal(size=(500, 16))
    frac_synth = ocsvm.kkt_report(ocsvm.fit(synth, nu=0.1), synth)["outlier_fraction"]
    ok = 0.05 <= frac <= 0.15 and 0.05 <= frac_synth <= 0.15
    verdict(4, ok, f"anomalous fraction {frac:.3f} on 500 autoencoder embeddings, "
                   f"{frac_synth:.3f} on 500 Gaussian points (target [0.05, 0.15])")


def test_criterion_5_calibration(verdict, experiments):
    runs, _ = experiments
    exp = runs[0]
    cfg = exp.config
    dcfg = cfg.detector.model_copy(update={"fpr_mode": "sample"})
    val = [r.trace.smoothed for r in score_traces(exp.dataset.split("validation"), exp.detector, dcfg)]
    gamma = calibrate_threshold(val, 0.10, "sample")
    network = load_topology(resolve_topology(cfg.topology))
    fresh_cfg = GenerationConfig(**{**cfg.generation.model_dump(), "n_train": 0, "n_validation": 50,
                                    "n_test": 0, "master_seed": 10_000 + cfg.seed})
    fresh = generate_dataset(network, fresh_cfg).split("validation")
    test = [r.trace.smoothed for r in score_traces(fresh, exp.detector, dcfg)]
    fpr = realized_fpr(test, gamma, "sample")
    verdict(5, 0.08 <= fpr <= 0.12,
            f"per-sample FPR {fpr:.4f} on 50 fresh no-leak scenarios (target [0.08, 0.12]); "
            f"threshold {gamma:.3g} from 50 validation scenarios")


def test_criterion_6_end_to_end(verdict, experiments):
    runs, elapsed = experiments
    accs = [runs[s].report.accuracy for s in SEEDS]
    dds = [runs[s].report.mean_delay for s in SEEDS]
    ok = all(a >= 0.85 for a in accs) and all(d <= 72 for d in dds) and elapsed <= 15 * 60
    per_seed = ", ".join(f"seed {s}: acc {a:.3f} DD {d:.1f} h" for s, a, d in zip(SEEDS, accs, dds))
    counts = [runs[s].report.counts() for s in SEEDS]
    assert all(c["TP"] + c["FN"] + c["early"] == 20 for c in counts)
    verdict(6, ok, f"{per_seed} (need acc >= 0.85, DD <= 72 h); 3 seeds in {elapsed / 60:.1f} min (<= 15)")


def window_mse(ae, stats, pressures, length, start=0, stride=24):
    x = normalize(pressures, stats)[:, start:]
    if x.shape[1] < length:
        return np.empty(0)
    w = np.ascontiguousarray(sliding_windows(x, length, stride), dtype=np.float32)
    r = ae.reconstruct(w)
    return ((r - w) ** 2).mean(axis=(1, 2))


def test_criterion_7_anomaly_gap(verdict, experiments):
    runs, _ = experiments
    ratios = {}
    for seed in SEEDS:
        exp = runs[seed]
        ae, stats, length = exp.detector.autoencoder, exp.detector.stats, exp.config.window_length
        test = exp.dataset.split("test")
        leak = np.concatenate([window_mse(ae, stats, s.pressures, length, s.leak.onset_sample)
                               for s in test if s.label == 1])
        clean = np.concatenate([window_mse(ae, stats, s.pressures, length) for s in test if s.label == 0])
        ratios[seed] = float(leak.mean() / clean.mean())
    ok = all(r >= 1.5 for r in ratios.values())
    verdict(7, ok, "post-onset / no-leak reconstruction MSE: "
                   + ", ".join(f"seed {s} {r:.2f}" for s, r in ratios.items()) + " (need >= 1.5)")


def test_criterion_8_noise_trend(verdict, experiments):
    runs, _ = experiments
    parts, ok = [], True
    for seed in SEEDS:
        exp = runs[seed]
        ev = exp.config.evaluation
        hi, lo = noise_sweep(exp.dataset.split("test"), exp.detector, exp.detector_config, [45.0, 25.0],
                             seed=ev.noise_seed + seed, delay_mode=ev.delay_mode, reference=ev.snr_reference)
        good = hi.accuracy >= lo.accuracy and hi.mean_delay <= lo.mean_delay
        ok &= good
        parts.append(f"seed {seed}: acc {hi.accuracy:.3f}/{lo.accuracy:.3f} "
                     f"DD {hi.mean_delay:.2f}/{lo.mean_delay:.2f} h {'ok' if good else 'violated'}")
    verdict(8, ok, "45 dB / 25 dB: " + "; ".join(parts))


def test_criterion_9_cross_network(verdict, experiments):
    runs, _ = experiments
    exp = runs[0]
    network = load_topology(resolve_topology(exp.config.evaluation.foreign_topology))
    foreign = generate_dataset(network, foreign_generation(exp.config))
    report, results = cross_network_eval(foreign.split("test"), exp.detector, exp.detector_config,
                                         reference=foreign.split("train"))
    assert all(r.metadata["adapted_from_nodes"] == network.n_nodes for r in results)
    verdict(9, report.accuracy >= 0.6,
            f"{network.n_nodes}-node foreign network replicated to 16: accuracy {report.accuracy:.3f} "
            f"(need >= 0.6), DD {report.mean_delay:.1f} h")


def test_criterion_10_determinism(verdict, tiny_config, tmp_path):
    artefacts = ["model.bin", "calibration.json", "fpr_curve.csv", "eval/report.csv",
                 "eval/report.json", "eval/results.jsonl", "data/manifest.json"]
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        for cmd in ("generate", "train", "calibrate", "evaluate"):
            res = CliRunner().invoke(main, ["--config", str(tiny_config), "-o", str(out), cmd])
            assert res.exit_code == 0, res.output
        blobs.append({a: (out / a).read_bytes() for a in artefacts})
    same = [a for a in artefacts if blobs[0][a] == blobs[1][a]]
    sha = json.loads(blobs[0]["calibration.json"])["model_sha256"][:12]
    verdict(10, len(same) == len(artefacts),
            f"{len(same)}/{len(artefacts)} artefacts byte-identical across two runs (model {sha})")


def test_desk_half_magnitude_leak_detected_after_onset(experiments):
    from wdnleak.detector import run_pipeline
    from wdnleak.scenario import LeakSpec, Scenario, inject_leak, make_scenario

    runs, _ = experiments
    exp = runs[0]
    network = load_topology(resolve_topology(exp.config.topology))
    twin = make_scenario(network, exp.config.generation, seed=4242, scenario_id="half", split="test", leak=False)
    leak = LeakSpec(node_index=5, magnitude=0.5, onset_sample=1000)
    scen = Scenario("half", inject_leak(twin.pressures, network, leak), twin.seed, leak)
    res = run_pipeline(scen, exp.detector, exp.detector_config)
    assert res.decision == 1
    assert res.first_alarm_sample >= leak.onset_sample
