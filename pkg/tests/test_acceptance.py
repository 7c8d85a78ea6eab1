"""Acceptance criteria 1-10, one test each.

Every test appends a PASS/FAIL line (with wall time against its budget) to
the session summary printed at the end of the pytest run.
"""

import csv
import time
from contextlib import contextmanager

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from scipy.stats import ortho_group

from featprobe import dsp
from featprobe.cli import main
from featprobe.convnet import ARCHITECTURES, architecture, deform_conv2d, forward_extract, init_weights
from featprobe.handcrafted import cwt_summary, ricker_sample
from featprobe.probe import fit_normalizer, softmax_xent, train_logreg
from featprobe.simlab import (cca_similarities, canonical_correlations, center_columns,
                              cka_feature_form, cka_gram_form, linear_cka, linreg_r2,
                              svcca_similarities, svd_truncation)
from featprobe.tensorio import decode_bundle, encode_bundle

from test_tensorio import bundles

pytestmark = pytest.mark.slow


@contextmanager
def criterion(log, number, title, budget):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        line = f"FAIL  {number:>2}. {title} ({time.perf_counter() - t0:.2f}s / {budget}s): {str(e).splitlines()[0][:120]}"
        log.append(line)
        print(line)
        raise
    elapsed = time.perf_counter() - t0
    verdict = "PASS" if elapsed < budget else "FAIL"
    line = f"{verdict}  {number:>2}. {title} ({elapsed:.2f}s / {budget}s)"
    log.append(line)
    print(line)
    assert elapsed < budget, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"


def cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"featprobe {args[0]} exited {code}"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- 1, 2: geometry

NSYNTH = {"Regular": (30, 4, 4), "Deformable": (30, 6, 6), "Dilated": (30, 6, 6),
          "OneDF": (30, 6, 128), "OneDT": (30, 128, 6)}
COMPOSER = {"Regular": (30, 4, 6), "Deformable": (30, 6, 8), "Dilated": (30, 6, 9),
            "OneDF": (30, 6, 176), "OneDT": (30, 128, 9)}


def test_criterion_01_shape_table(acceptance_log):
    with criterion(acceptance_log, 1, "conv3 shape tables, both geometries", 1.0):
        for frames, table in ((128, NSYNTH), (176, COMPOSER)):
            for arch_id in ARCHITECTURES:
                arch = architecture(arch_id, frames=frames)
                assert arch.tap_shapes()["conv3"] == table[arch_id]
                acts = forward_extract(arch, init_weights(arch), np.zeros((1, 128, frames)), ["conv3"])
                assert acts["conv3"].shape[1:] == table[arch_id], (arch_id, frames)


def test_criterion_02_spectrogram_geometry(acceptance_log):
    with criterion(acceptance_log, 2, "mel-spectrogram geometry 128x128 / 128x176", 1.0):
        r = np.random.default_rng(0)
        for sr, frames in ((16000, 128), (22050, 176)):
            db = dsp.clip_to_db(dsp.AudioClip(r.normal(size=4 * sr), sr))
            assert db.shape == (128, frames)


# ---------------------------------------------------------------- 3, 4: similarity


def test_criterion_03_cka_invariances(acceptance_log):
    with criterion(acceptance_log, 3, "linear CKA invariance suite, 50 pairs", 5.0):
        r = np.random.default_rng(3)
        witness = 0.0
        for k in range(50):
            p1, p2 = r.integers(3, 61, size=2)
            x, y = r.normal(size=(40, p1)), r.normal(size=(40, p2))
            base = linear_cka(x, y)
            assert abs(linear_cka(x, x) - 1) <= 1e-10
            q = ortho_group.rvs(int(p1), random_state=k)
            assert abs(linear_cka(x @ q, y) - base) <= 1e-10
            a, b = r.uniform(0.01, 100, size=2)
            assert abs(linear_cka(a * x, b * y) - base) <= 1e-10
            assert abs(linear_cka(y, x) - base) <= 1e-12
            cx, cy = center_columns(x), center_columns(y)
            assert abs(cka_feature_form(cx, cy) - cka_gram_form(cx, cy)) <= 1e-10
            t = np.eye(p1) + np.diag(r.uniform(0, 20, size=p1)) + np.triu(r.normal(size=(p1, p1)), 1)
            witness = max(witness, abs(linear_cka(x @ t, y) - base))
        assert witness > 0.01


def _eig_canonical(x, y):
    x, y = center_columns(x), center_columns(y)
    sxx, syy, sxy = x.T @ x, y.T @ y, x.T @ y
    ev = scipy.linalg.eigh(sxy @ np.linalg.solve(syy, sxy.T), sxx, eigvals_only=True)
    return np.sqrt(np.clip(np.sort(ev)[::-1], 0, None))


def test_criterion_04_cca_svcca_lr(acceptance_log):
    with criterion(acceptance_log, 4, "CCA / SVCCA / LR-R2 suite", 5.0):
        r = np.random.default_rng(4)
        for _ in range(10):
            x = r.normal(size=(50, 3))
            assert abs(linreg_r2(x, x) - 1) <= 1e-8
            for v in cca_similarities(x, x).values():
                assert abs(v - 1) <= 1e-8
            for v in svcca_similarities(x, x).values():
                assert abs(v - 1) <= 1e-8
            basis = np.linalg.qr(center_columns(r.normal(size=(50, 6))))[0]
            xa, ya = basis[:, :3] @ r.normal(size=(3, 3)), basis[:, 3:] @ r.normal(size=(3, 3))
            assert abs(linreg_r2(xa, ya)) <= 1e-8
            for v in cca_similarities(xa, ya).values():
                assert abs(v) <= 1e-8
            for v in svcca_similarities(xa, ya).values():
                assert abs(v) <= 1e-8
            y = r.normal(size=(50, 3)) + x @ r.normal(size=(3, 3)) * 0.5
            np.testing.assert_allclose(canonical_correlations(x, y), _eig_canonical(x, y), atol=1e-8)
        u = np.linalg.qr(center_columns(r.normal(size=(40, 6))))[0]
        s = np.sqrt([50.0, 30, 15, 4.5, 0.4, 0.1])
        m = u @ np.diag(s) @ ortho_group.rvs(6, random_state=0).T
        assert svd_truncation(m)[1].size == 4


# ---------------------------------------------------------------- 5, 6: oracles


def _brute_cwt_mean(db, a):
    rows, L = db.shape
    M = int(min(10 * a, L))
    amp = 2.0 / (np.sqrt(3.0 * a) * np.pi**0.25)
    psi = [amp * (1 - ((m - (M - 1) / 2) / a) ** 2) * np.exp(-((m - (M - 1) / 2) ** 2) / (2 * a * a))
           for m in range(M)]
    shift = (M - 1) // 2
    out = np.zeros(rows)
    for rr in range(rows):
        seq = db[rr].tolist()
        total = 0.0
        for i in range(L):
            for m in range(M):
                j = i + shift - m
                if 0 <= j < L:
                    total += seq[j] * psi[m]
        out[rr] = total / L
    return out


def test_criterion_05_cwt_oracle(acceptance_log):
    with criterion(acceptance_log, 5, "Ricker CWT vs brute-force convolution", 5.0):
        r = np.random.default_rng(5)
        for a in (1, 5, 10, 25):
            db = r.uniform(-80, 0, size=(128, 32))
            np.testing.assert_allclose(cwt_summary(db, a, "mean"), _brute_cwt_mean(db, a), atol=1e-9, rtol=0)
        closed = 2.0 / (np.sqrt(np.longdouble(3)) * np.pi ** np.longdouble(0.25))
        assert abs(np.longdouble(ricker_sample(1.0, 1)[0]) - closed) <= 1e-12


def _regular_grid(x, w, ho, wo):
    # integer reads on the stride-2 grid (origin 1, taps -2..2), zeros outside
    cout, cin, kh, kw = w.shape
    _, h, wd = x.shape
    out = np.zeros((cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for a in range(kh):
                for b in range(kw):
                    rr, cc = 1 + 2 * i + a - 2, 1 + 2 * j + b - 2
                    if 0 <= rr < h and 0 <= cc < wd:
                        out[:, i, j] += w[:, :, a, b] @ x[:, rr, cc]
    return out


def test_criterion_06_deformable_reduction(acceptance_log):
    with criterion(acceptance_log, 6, "zero-offset deformable conv = regular grid, 10 instances", 5.0):
        r = np.random.default_rng(6)
        for _ in range(10):
            h, wd = r.integers(7, 16, size=2)
            x = r.normal(size=(20, h, wd))
            w = r.normal(size=(30, 20, 5, 5)) * 0.1
            out = deform_conv2d(x, w, np.zeros((50, 20, 3, 3)), np.zeros(50))
            np.testing.assert_allclose(out, _regular_grid(x, w, *out.shape[1:]), atol=1e-4)


# ---------------------------------------------------------------- 7: logistic regression


def test_criterion_07_logreg_gradient_and_monotone(acceptance_log):
    with criterion(acceptance_log, 7, "softmax gradient vs finite differences; monotone loss", 10.0):
        r = np.random.default_rng(7)
        ld = np.longdouble
        x = r.normal(size=(8, 5)).astype(ld)
        y = r.integers(0, 3, 8)
        w, b = r.normal(size=(3, 5)).astype(ld), r.normal(size=3).astype(ld)
        _, gw, gb = softmax_xent(w, b, x, y)
        h, worst = ld("1e-7"), 0.0
        for idx in np.ndindex(w.shape):
            up, dn = w.copy(), w.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (softmax_xent(up, b, x, y)[0] - softmax_xent(dn, b, x, y)[0]) / (2 * h)
            worst = max(worst, float(abs(fd - gw[idx]) / abs(fd)))
        for k in range(3):
            up, dn = b.copy(), b.copy()
            up[k] += h
            dn[k] -= h
            fd = (softmax_xent(w, up, x, y)[0] - softmax_xent(w, dn, x, y)[0]) / (2 * h)
            worst = max(worst, float(abs(fd - gb[k]) / abs(fd)))
        assert worst < 1e-4, worst

        yy = np.arange(60) % 2
        xx = r.normal(size=(60, 3))
        xx[:, 0] += 2 * yy - 1
        xx = fit_normalizer(xx).transform(xx)
        hist = train_logreg(xx, yy, full_batch=True).loss_history
        assert all(b2 <= a2 for a2, b2 in zip(hist, hist[1:]))


# ---------------------------------------------------------------- 8-10: pipeline


def test_criterion_08_desk_experiment(acceptance_log, tmp_path):
    with criterion(acceptance_log, 8, "desk experiment: 200 clips, tones vs chirps", 300.0):
        cli("synth", "--out", tmp_path / "corpus", "--n", 200, "--seed", 0)
        common = ["--manifest", tmp_path / "corpus" / "manifest.jsonl", "--out", tmp_path / "out",
                  "--features", "waveletStat(25,mean,overTime)", "--tasks", "class",
                  "--architectures", "Regular", "--taps", "conv3", "--seeds", "0,1,2,3,4"]
        for step in ("melspec", "features", "deepfeat", "decode"):
            cli(step, *common)
        agg = {r["feature"]: r for r in read_rows(tmp_path / "out" / "decode" / "aggregate.csv")}
        runs = [r for r in read_rows(tmp_path / "out" / "decode" / "runs.csv")
                if r["feature"] == "Regular/conv3@untrained"]
        deep, wav = agg["Regular/conv3@untrained"], agg["waveletStat(25,mean,overTime)"]
        summary = (f"deep {float(deep['mean']):.3f} per-seed {[r['value'][:5] for r in runs]}, "
                   f"wavelet {float(wav['mean']):.3f}")
        print(summary)
        assert float(deep["baseline"]) == 0.5 and float(wav["baseline"]) == 0.5
        assert float(deep["mean"]) >= 0.95, summary
        assert len(runs) == 5 and all(float(r["value"]) > 0.90 for r in runs), summary
        assert float(wav["mean"]) >= 0.95, summary


def test_criterion_09_cross_task_pitch(acceptance_log, tmp_path):
    with criterion(acceptance_log, 9, "untrained conv3 decodes pitch across source tasks (1000 clips)", 120.0):
        cli("synth", "--out", tmp_path / "corpus", "--n", 1000, "--seed", 0)
        out = tmp_path / "out"
        common = ["--manifest", tmp_path / "corpus" / "manifest.jsonl", "--out", out,
                  "--features", "meanPower", "--tasks", "pitchHz",
                  "--source-tasks", "class,pitchHz", "--architectures", "Regular",
                  "--taps", "conv3", "--seeds", "0,1,2,3,4"]
        for step in ("melspec", "features", "deepfeat"):
            cli(step, *common)
        for s in range(5):
            a = out / "deep" / f"Regular__class__s{s}__conv3.ftb"
            b = out / "deep" / f"Regular__pitchHz__s{s}__conv3.ftb"
            assert a.read_bytes() == b.read_bytes()
        cli("decode", *common)
        agg = {r["feature"]: r for r in read_rows(out / "decode" / "aggregate.csv")}
        runs = read_rows(out / "decode" / "runs.csv")
        ratios = {}
        for source in ("class", "pitchHz"):
            label = f"Regular/conv3@{source}"
            base = float(agg[label]["baseline"])
            ratios[source] = [float(r["value"]) / base for r in runs if r["feature"] == label]
        print("RMSE / baseline:", {k: [round(v, 3) for v in vs] for k, vs in ratios.items()})
        assert ratios["class"] == ratios["pitchHz"]
        assert len(ratios["class"]) == 5 and max(ratios["class"]) <= 0.5, ratios


def _full_pipeline(corpus, out):
    common = ["--manifest", corpus / "manifest.jsonl", "--out", out,
              "--features", "meanPower,timeToDb(-70),waveletCombined(5,overTime),spectralCentroid",
              "--architectures", "Regular,Deformable", "--taps", "conv1,conv3",
              "--source-tasks", "class,pitchHz", "--seeds", "0,1",
              "--measures", "cka,lrR2,ccaR2,svccaRho"]
    for step in ("melspec", "features", "deepfeat", "similarity"):
        cli(step, *common)
    cli("decode", *common, "--cross-task", "--concat-with", "meanPower")
    cli("report", *common)


def test_criterion_10_reproducibility(acceptance_log, tmp_path):
    with criterion(acceptance_log, 10, "byte-identical reruns; FTB property round-trip", 120.0):
        cli("synth", "--out", tmp_path / "corpus", "--n", 30, "--seed", 1)
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        _full_pipeline(tmp_path / "corpus", a)
        _full_pipeline(tmp_path / "corpus", b)
        csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
        assert len(csvs) > 20
        for rel in csvs:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        assert sorted(p.relative_to(b) for p in b.rglob("*.csv")) == csvs

        @settings(max_examples=200, deadline=None)
        @given(bundles())
        def roundtrip(bundle):
            back = decode_bundle(encode_bundle(bundle))
            assert encode_bundle(back) == encode_bundle(bundle)

        roundtrip()
