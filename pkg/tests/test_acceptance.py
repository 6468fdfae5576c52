"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL: ...`` line to the terminal
(outside pytest's capture) before asserting.  Criteria 6 and 7 train models
and take several minutes.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from ctlmtnet import ops
from ctlmtnet.audio import AudioClip, compute_mfcc, frame_geometry, mel_energies, mel_filterbank
from ctlmtnet.caam import CaamConfig, DomainBatch, caam_train_step, source_only_baseline, train_caam
from ctlmtnet.data import SynthSpec, synth_corpus
from ctlmtnet.experiment import RunConfig, load_run_corpora, replay, run, run_cross_corpus, run_single_corpus, shift_task_config
from ctlmtnet.losses import MddHyper
from ctlmtnet.metrics import evaluate
from ctlmtnet.model import CpacConfig, capsule_self_attention, dynamic_routing
from ctlmtnet.optim import AdamState
from ctlmtnet.tensor import Tensor, backward
from ctlmtnet.train import TrainConfig

from gradient_cases import CASES, run_case
from test_audio import direct_dft_power, oracle_frames


@pytest.fixture
def verdict(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _report


def test_1_gradient_suite(verdict):
    start = time.time()
    worst = {}
    for name in CASES:
        errs = [run_case(name, seed) for seed in range(20)]
        worst[name] = (max(e[0] for e in errs), max(e[1] for e in errs))
    elapsed = time.time() - start
    failing = [n for n, (r, a) in worst.items() if not (r < 1e-5 and a < 1e-7)]
    top = max(worst, key=lambda n: worst[n][0])
    verdict(
        1, not failing and elapsed < 120,
        f"{len(CASES)} operations x 20 seeds, worst rel {worst[top][0]:.2e} ({top}), "
        f"failing {failing}, {elapsed:.1f}s",
    )


def test_2_squash_law(verdict):
    rng = np.random.default_rng(2)
    s = rng.standard_normal((10_000, 8)) * np.exp(rng.uniform(-6, 4, (10_000, 1)))
    n_in = np.linalg.norm(s, axis=1)
    n_out = np.linalg.norm(ops.squash(s).data, axis=1)
    err = np.abs(n_out - n_in**2 / (1 + n_in**2)).max()
    order = np.argsort(n_in)
    monotone = bool(np.all(np.diff(n_out[order]) >= 0))
    in_range = bool(((n_out >= 0) & (n_out < 1)).all())
    verdict(2, err <= 1e-12 and monotone and in_range, f"max norm error {err:.1e}, in [0,1) {in_range}, monotone {monotone}")


def test_3_normalisation(verdict):
    rng = np.random.default_rng(3)
    worst_att = worst_route = 0.0
    for _ in range(20):
        caps = rng.standard_normal((4, 12, 8)) * rng.uniform(0.1, 5)
        proj = [rng.standard_normal((8, 8)) for _ in range(3)]
        _, w = capsule_self_attention(caps, proj, return_weights=True)
        worst_att = max(worst_att, np.abs(w.data.sum(axis=-1) - 1).max())
        _, couplings = dynamic_routing(ops.squash(caps), rng.standard_normal((4, 5, 6, 8)), iters=3, return_couplings=True)
        for c in couplings:
            worst_route = max(worst_route, np.abs(c.sum(axis=2) - 1).max())
    single = rng.standard_normal((3, 1, 8))
    identity = np.array_equal(capsule_self_attention(single, [rng.standard_normal((8, 8)) for _ in range(3)]).data, single)
    verdict(
        3, worst_att <= 1e-9 and worst_route <= 1e-9 and identity,
        f"attention row-sum error {worst_att:.1e}, coupling error {worst_route:.1e}, n=1 identity {identity}",
    )


TINY = CpacConfig(num_classes=3, input_frames=8, conv_filters=4, num_primary_caps=2, primary_dim=4, digit_dim=4)


def _small_pair(per_class, seed=0):
    spec = SynthSpec(num_classes=3, per_class=per_class, frames=8, task_seed=seed, seed=seed)
    return synth_corpus(spec), synth_corpus(spec.target(seed=seed + 100))


def test_4_grl_contract(verdict):
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    g = rng.standard_normal((5, 7))
    lam = 0.7
    y = ops.grl(x, lam)
    forward_ok = np.array_equal(y.data, x.data)
    backward((y * g).sum())
    backward_ok = np.array_equal(x.grad, -lam * g)

    src, tgt = _small_pair(20)
    cfg = CaamConfig(model=TINY, mdd=MddHyper(eta=0.0), epochs=1, batch_size=6, seed=11)  # 10 steps
    adapted, _ = train_caam(src, tgt, cfg)
    baseline, _ = source_only_baseline(src, tgt, replace(cfg, mdd=MddHyper()))
    same = all(
        np.array_equal(adapted[n].data, baseline[n].data) for n in adapted.group("psi") + adapted.group("f")
    )
    verdict(4, forward_ok and backward_ok and same,
            f"forward identity {forward_ok}, backward -lambda*g {backward_ok}, eta=0 bit-identical over 10 steps {same}")


def test_5_minimax_direction(verdict):
    src, tgt = _small_pair(6)
    s = DomainBatch(src.matrix(8), "source", src.labels)
    t = DomainBatch(tgt.matrix(8), "target")
    hyper = MddHyper(gamma=1.5, eta=1.0)
    pretrained, _ = source_only_baseline(src, tgt, CaamConfig(model=TINY, epochs=30, batch_size=6, lr=3e-3))

    params, state = pretrained.copy(), AdamState()
    up = [caam_train_step(s, t, params, state, hyper, lr=1e-4, update=("adv",), mode="eval").mdd for _ in range(100)]
    params, state = pretrained.copy(), AdamState()
    down = [caam_train_step(s, t, params, state, hyper, lr=1e-5, update=("psi",), mode="eval").mdd for _ in range(100)]
    rises = bool(np.all(np.diff(up) >= 0))
    falls = bool(np.all(np.diff(down) <= 0))
    verdict(5, rises and falls,
            f"adversary-only D {up[0]:.5f} -> {up[-1]:.5f} non-decreasing {rises}; "
            f"extractor-only D {down[0]:.5f} -> {down[-1]:.5f} non-increasing {falls}")


@pytest.mark.slow
def test_6_single_corpus_sanity(verdict):
    model = CpacConfig(num_classes=5, input_frames=16, conv_filters=8, num_primary_caps=4, primary_dim=4, digit_dim=4)
    corpus = synth_corpus(SynthSpec(per_class=100, frames=16, separation=3.0, seed=0))
    config = RunConfig(model=model, train=TrainConfig(epochs=6, batch_size=32, lr=3e-3), folds=10)
    start = time.time()
    full = run_single_corpus(config, corpus)
    elapsed = time.time() - start
    ablations = {a: run_single_corpus(config.with_algorithm(a), corpus).war for a in (1, 2, 3)}
    ok = full.war >= 0.95 and elapsed < 600 and all(w <= full.war for w in ablations.values())
    verdict(6, ok, f"CPAC WAR {full.war:.3f} in {elapsed:.0f}s; ablation WARs {ablations}")


@pytest.mark.slow
def test_7_cross_corpus_direction(verdict):
    start = time.time()
    gains, rows = [], []
    for seed in range(5):
        corpora = load_run_corpora(shift_task_config(seed))
        base = run_cross_corpus(shift_task_config(seed, adaptation=False), corpora["source"], corpora["target"])
        adapted = run_cross_corpus(shift_task_config(seed), corpora["source"], corpora["target"])
        gains.append(adapted.report.uar - base.report.uar)
        rows.append(f"{base.report.uar:.3f}->{adapted.report.uar:.3f}")
    elapsed = time.time() - start
    median = float(np.median(gains))
    verdict(7, median >= 0.10 and elapsed < 900,
            f"target UAR per seed {rows}, median gain {median:+.3f}, {elapsed:.0f}s")


def test_8_mfcc(verdict):
    sr = 16000
    t = np.arange(sr) / sr
    frames = compute_mfcc(AudioClip(np.sin(2 * np.pi * 440 * t), sr)).frames
    silent = compute_mfcc(AudioClip(np.zeros(sr), sr)).matrix
    zero_err = np.abs(silent[:, 1:]).max()
    tone = AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), sr)
    frame_len, hop, n_fft = frame_geometry(sr)
    oracle = direct_dft_power(oracle_frames(tone.samples, frame_len, hop), n_fft) @ mel_filterbank(sr, n_fft).T
    agree = bool(np.array_equal(mel_energies(tone).argmax(axis=1), oracle.argmax(axis=1)))
    verdict(8, frames == 77 and zero_err <= 1e-9 and agree,
            f"{frames} frames, silent |c1..c38| max {zero_err:.1e}, 440 Hz argmax matches DFT oracle on every frame {agree}")


def test_9_metrics(verdict):
    r = evaluate([0, 0, 1, 1], [0, 0, 0, 1], 2)
    ok = r.war == 0.75 and r.uar == (2 / 3 + 1) / 2
    verdict(9, ok, f"WAR {r.war!r}, UAR {r.uar!r}")


def test_10_replay(tmp_path, verdict):
    model = {"num_classes": 3, "input_frames": 8, "conv_filters": 4, "num_primary_caps": 2, "primary_dim": 4, "digit_dim": 4}
    synth = {"num_classes": 3, "per_class": 8, "frames": 8}
    single = RunConfig.from_dict({
        "task": "single", "model": model, "train": {"epochs": 2, "batch_size": 8}, "folds": 4,
        "data": {"corpus": {"synth": synth}}, "output_dir": str(tmp_path / "single"),
    })
    cross = RunConfig.from_dict({
        "task": "cross", "model": model, "train": {"epochs": 2, "batch_size": 8}, "grl_lambda": 0.3,
        "grl_schedule": "ramp", "data": {"source": {"synth": synth},
                                         "target": {"synth": dict(synth, rotation_deg=30.0, translation=0.5, seed=1)}},
        "output_dir": str(tmp_path / "cross"),
    })
    results = {}
    for name, cfg in (("single", single), ("cross", cross)):
        run(cfg)
        results[name] = replay(tmp_path / name / "manifest.json", tmp_path / f"{name}-replay")
    ok = all(r.identical for r in results.values())
    counts = {n: f"{sum(r.matches.values())}/{len(r.matches)}" for n, r in results.items()}
    verdict(10, ok, f"bit-identical outputs after replay: {counts}")
