"""Acceptance runs. Each test prints one PASS/FAIL line for its criterion and
the terminal summary repeats them. The training runs are the slow part of
the suite (tens of minutes on one CPU core)."""
import json
import os
import statistics
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from olchdr.autoencoder import (OlcTrainConfig, PerceptualExtractor, codebook_usage, olc_losses,
                                perceptual_distance, reconstruction_psnr_mu, train_olc)
from olchdr.codebook import OverlappedCodebook, segment_range, straight_through, vq_loss
from olchdr.datasets import SynthConfig, synth_dataset
from olchdr.hdrio import read_hdr
from olchdr.hdrnet import FuseUnit, HdrTrainConfig, hdr_losses, load_prior, mapping_loss, train_hdr
from olchdr.hdrnet.train import train_psnr_mu
from olchdr.layers import mu_law, parameter_digest
from olchdr.radiometry import LdrFrame, expose, fuse_exposures, tonemap
from oracles import brute_force_nearest, central_difference, relative_error

ROOT = Path(__file__).resolve().parents[1]

# toy scale shared by the training criteria
STEP1 = dict(num_codes=64, code_dim=8, base_channels=16, patch_size=32, stride=32, batch_size=8,
             lambda_adv=0.0, lr_g=1e-3, log_every=0)
STEP2 = dict(base_channels=8, patch_size=32, stride=32, batch_size=8, lr=1e-3, log_every=0)
SCENE = dict(height=32, width=32)


@contextmanager
def criterion(n: int, title: str):
    """Record and print the verdict for criterion ``n``; ``out["msg"]`` adds detail."""
    out = {"msg": ""}
    try:
        yield out
    except BaseException as exc:
        first = str(exc).splitlines()[0] if str(exc) else ""
        ACCEPTANCE[n] = (False, f"{title}: {type(exc).__name__} {first} {out['msg']}".strip())
        print(f"criterion {n}: FAIL  {ACCEPTANCE[n][1]}")
        raise
    ACCEPTANCE[n] = (True, f"{title}: {out['msg']}")
    print(f"criterion {n}: PASS  {ACCEPTANCE[n][1]}")


@pytest.fixture(scope="module")
def step1(tmp_path_factory):
    """The criterion-5 overfit run; its checkpoint is the frozen prior for Step 2."""
    scenes = synth_dataset(SynthConfig(**SCENE), 16, seed=0)
    out = tmp_path_factory.mktemp("acc_step1")
    t0 = time.perf_counter()
    run = train_olc(OlcTrainConfig(steps=1500, seed=0, **STEP1), scenes, out_dir=str(out))
    elapsed = time.perf_counter() - t0
    return {"run": run, "scenes": scenes, "elapsed": elapsed, "checkpoint": run.checkpoint}


def test_c1_codebook_algebra():
    with criterion(1, "codebook algebra") as out:
        t0 = time.perf_counter()
        for k in (8, 64, 1024):
            wins = [set(segment_range(eta, k)) for eta in (1, 2, 3)]
            assert all(len(w) == k // 2 for w in wins)
            assert len(wins[0] & wins[1]) == k // 4 and len(wins[1] & wins[2]) == k // 4
            assert not wins[0] & wins[2]
            assert wins[0] | wins[1] | wins[2] == set(range(k)) == set(segment_range(4, k))

        gen = torch.Generator().manual_seed(0)
        for k in (8, 64, 1024):
            cb = OverlappedCodebook(k, 8)
            with torch.no_grad():
                cb.vectors.normal_(generator=gen)
            feats = torch.randn(1000, 1, 8, generator=gen)
            d_full = ((feats - cb.quantize(feats, 4).quantized) ** 2).sum(-1)
            for eta in (1, 2, 3):
                res = cb.quantize(feats, eta)
                r = segment_range(eta, k)
                assert int(res.indices.min()) >= r.start and int(res.indices.max()) < r.stop
                assert torch.all(d_full <= ((feats - res.quantized) ** 2).sum(-1))
        elapsed = time.perf_counter() - t0
        out["msg"] = f"K in (8, 64, 1024), 1000 quantizations per eta, {elapsed:.1f}s"
        assert elapsed < 60


def test_c2_brute_force_oracle():
    with criterion(2, "quantize == brute force") as out:
        rng = np.random.default_rng(2024)
        mismatches = ties = 0
        for q in range(500):
            k = int(rng.choice([4, 8, 16, 32, 64]))
            eta = int(rng.integers(1, 5))
            n_z = int(rng.integers(1, 9))
            vectors = rng.normal(size=(k, n_z))
            if q % 5 == 0:
                vectors[1::2] = vectors[0::2]
                ties += 1
            query = rng.normal(size=n_z)
            cb = OverlappedCodebook(k, n_z).double()
            with torch.no_grad():
                cb.vectors.copy_(torch.from_numpy(vectors))
            got = int(cb.quantize(torch.from_numpy(query).view(1, 1, n_z), eta).indices.item())
            mismatches += got != brute_force_nearest(query, vectors, segment_range(eta, k))
        out["msg"] = f"500 queries ({ties} with duplicated codes), {mismatches} mismatches"
        assert mismatches == 0


def test_c3_gradient_suite():
    with criterion(3, "gradients vs central differences") as out:
        t0 = time.perf_counter()
        torch.manual_seed(0)
        errors = {}

        # straight-through: encoder gets the gradient taken at the quantized value
        z = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        q = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        w = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def f(y):
            return torch.sum(torch.tanh(y) * w)

        f(straight_through(z, q)).backward()
        errors["straight_through"] = relative_error(z.grad, central_difference(f, q))

        # vq_loss routing: commitment to the encoder, codebook term to the codes
        cb = OverlappedCodebook(16, 3).double()
        with torch.no_grad():
            cb.vectors.normal_()
        z = torch.randn(1, 4, 4, 3, dtype=torch.float64, requires_grad=True)
        res = cb.quantize(z, 2)
        res.loss.backward()
        zq = cb.vectors.detach()[res.indices]
        z0 = z.detach()
        errors["vq_encoder"] = relative_error(
            z.grad, central_difference(lambda v: 0.25 * torch.mean((zq - v) ** 2), z))
        errors["vq_codes"] = relative_error(
            cb.vectors.grad, central_difference(lambda v: torch.mean((z0 - v[res.indices]) ** 2), cb.vectors))
        cb_term, commit, _ = vq_loss(z0, zq)
        assert float(cb_term) == pytest.approx(float(commit))

        # rec / per in the tone-mapped domain, both stages
        phi = PerceptualExtractor("random").double()
        gt = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.9 + 0.05
        pred = (torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.9 + 0.05).requires_grad_(True)

        def rec(v):
            return olc_losses(gt, v, None, lambda_per=0.0).rec

        def per(v):
            return perceptual_distance(phi, mu_law(gt), mu_law(v))

        for name, fn in (("rec", rec), ("per", per)):
            pred.grad = None
            fn(pred).backward()
            errors[name] = relative_error(pred.grad, central_difference(fn, pred))

        small = pred.detach()[..., :8, :8].clone().requires_grad_(True)
        gt_small = gt[..., :8, :8]
        z_gt = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        z_vq = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
        hdr_losses(small, gt_small, z_vq, z_gt, phi, 0.1, 0.5).total.backward()
        errors["step2_total"] = relative_error(small.grad, central_difference(
            lambda v: hdr_losses(v, gt_small, z_vq, z_gt, phi, 0.1, 0.5).total, small))

        # mapping loss
        z_vq.grad = None
        mapping_loss(z_vq, z_gt).backward()
        errors["mapping"] = relative_error(z_vq.grad, central_difference(lambda v: mapping_loss(v, z_gt), z_vq))

        # residual fusing block, with a non-zero head so every path is live
        unit = FuseUnit(2, 3).double()
        with torch.no_grad():
            unit.head.weight.normal_(0, 0.3)
            unit.head.bias.normal_(0, 0.3)
        feat = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
        cond = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        torch.sum(torch.tanh(unit(feat, cond)) * w).backward()
        errors["rf_feature"] = relative_error(
            feat.grad, central_difference(lambda v: torch.sum(torch.tanh(unit(v, cond)) * w), feat))
        errors["rf_condition"] = relative_error(
            cond.grad, central_difference(lambda v: torch.sum(torch.tanh(unit(feat, v)) * w), cond))

        elapsed = time.perf_counter() - t0
        worst = max(errors, key=errors.get)
        out["msg"] = f"{len(errors)} checks, worst {worst} {errors[worst]:.1e}, {elapsed:.1f}s"
        assert errors[worst] <= 1e-4
        assert elapsed < 300


def test_c4_radiometry():
    with criterion(4, "fusion exactness and tone map identities") as out:
        rng = np.random.default_rng(0)
        gamma, times = 2.2, (0.25, 1.0, 4.0)
        worst = 0.0
        for _ in range(100):
            h = rng.uniform(1e-4, 1.0 / max(times), (16, 16, 3))
            frames = [LdrFrame(expose(h, t, gamma), t) for t in times]
            assert all(fr.pixels.max() < 1.0 for fr in frames)
            worst = max(worst, float(np.max(np.abs(fuse_exposures(frames, gamma) - h) / h)))

        x = np.linspace(0.0, 1.0, 200_001)
        t = tonemap(x)
        pairs = np.sort(rng.uniform(0, 1, (10_000, 2)), axis=1)
        pairs = pairs[pairs[:, 0] < pairs[:, 1]]
        out["msg"] = f"100 maps, worst rel err {worst:.1e}; tau(0)={t[0]}, tau(1)={t[-1]}"
        assert worst <= 1e-6
        assert t[0] == 0.0 and t[-1] == 1.0
        assert np.all(np.diff(t) > 0)
        assert np.all(tonemap(pairs[:, 0]) < tonemap(pairs[:, 1]))


def test_c5_step1_overfit(step1):
    with criterion(5, "Step-1 overfit") as out:
        score = reconstruction_psnr_mu(step1["run"].model, step1["scenes"], 32, 32)
        out["msg"] = f"train PSNR-mu {score:.2f} dB after 1500 steps, {step1['elapsed'] / 60:.1f} min"
        assert score >= 30.0
        assert step1["elapsed"] <= 30 * 60


def _step2_psnr(scenes, ablation, seed, steps, checkpoint):
    cfg = HdrTrainConfig(steps=steps, seed=seed, ablation=ablation, **STEP2)
    run = train_hdr(cfg, scenes, checkpoint)
    return train_psnr_mu(run.model, scenes, 32, 32)


def test_c6_step2_overfit(step1):
    with criterion(6, "Step-2 overfit and PA gain") as out:
        t0 = time.perf_counter()
        aligned = synth_dataset(SynthConfig(**SCENE, motion=0), 8, seed=100)
        full = _step2_psnr(aligned, "full", 0, 1000, step1["checkpoint"])
        out["msg"] = f"aligned full {full:.2f} dB"
        assert full >= 35.0

        gains = []
        for seed in (0, 1, 2):
            moving = synth_dataset(SynthConfig(**SCENE, motion=2), 8, seed=100 + seed)
            base = _step2_psnr(moving, "baseline", seed, 2000, None)
            pa = _step2_psnr(moving, "pa", seed, 2000, None)
            gains.append(pa - base)
        gain = statistics.median(gains)
        out["msg"] += (f"; 2px motion PA gain median {gain:.2f} dB "
                       f"({', '.join(f'{g:.2f}' for g in gains)}), {(time.perf_counter() - t0) / 60:.1f} min")
        assert gain >= 1.0


def test_c7_olc_vs_vanilla_usage():
    with criterion(7, "OLC vs vanilla code usage") as out:
        train = synth_dataset(SynthConfig(**SCENE), 16, seed=0)
        held_out = synth_dataset(SynthConfig(**SCENE), 8, seed=500)
        positions = len(held_out) * (32 // 8) * (32 // 8)
        used = {True: [], False: []}
        for seed in (0, 1, 2):
            for overlapped in (True, False):
                cfg = OlcTrainConfig(steps=500, seed=seed, overlapped=overlapped, **STEP1)
                usage = codebook_usage(train_olc(cfg, train).model, held_out)
                for eta, summary in usage["per_eta"].items():
                    assert sum(summary["histogram"]) == summary["positions"] == positions, eta
                assert sum(usage["full"]["histogram"]) == 4 * positions
                used[overlapped].append(usage["per_eta"][4]["used"])
        olc, vanilla = statistics.median(used[True]), statistics.median(used[False])
        out["msg"] = f"median codes used on held-out HDR: OLC {olc} {used[True]}, vanilla {vanilla} {used[False]}"
        assert olc >= vanilla


def test_c8_freeze_and_determinism(step1):
    with criterion(8, "freeze and determinism") as out:
        torch.set_num_threads(1)
        scenes = synth_dataset(SynthConfig(**SCENE, motion=2), 8, seed=100)
        prior, _ = load_prior(step1["checkpoint"])
        before = parameter_digest(prior)
        cfg = HdrTrainConfig(steps=100, seed=7, **STEP2)
        a = train_hdr(cfg, scenes, prior=prior)
        assert parameter_digest(a.model.prior) == before
        b = train_hdr(cfg, scenes, step1["checkpoint"])
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
        assert parameter_digest(a.model) == parameter_digest(b.model)

        small = synth_dataset(SynthConfig(height=16, width=16), 2, seed=0)
        tiny = dict(num_codes=16, code_dim=4, base_channels=4, patch_size=16, stride=16, batch_size=2,
                    lambda_adv=0.1, adv_warmup=50, log_every=0)
        c = train_olc(OlcTrainConfig(steps=100, seed=7, **tiny), small)
        d = train_olc(OlcTrainConfig(steps=100, seed=7, **tiny), small)
        assert parameter_digest(c.model) == parameter_digest(d.model)
        assert parameter_digest(c.disc) == parameter_digest(d.disc)
        out["msg"] = f"prior digest {before[:12]} unchanged over 100 steps; Step-1 and Step-2 reruns bit-identical"


def test_c9_end_to_end(tmp_path):
    with criterion(9, "end-to-end toy pipeline") as out:
        run_dir = tmp_path / "toy"
        env = {**os.environ, "PYTHON": sys.executable}
        t0 = time.perf_counter()
        proc = subprocess.run(["bash", str(ROOT / "scripts" / "toy_pipeline.sh"), str(run_dir)],
                              env=env, capture_output=True, text=True, timeout=3600)
        elapsed = time.perf_counter() - t0
        assert proc.returncode == 0, proc.stderr[-2000:]

        preds = list((run_dir / "pred").glob("*.hdr"))
        assert len(preds) == 1
        assert preds[0].read_bytes()[:10] == b"#?RADIANCE"
        img = read_hdr(preds[0])
        assert img.shape == (32, 32, 3) and np.all(np.isfinite(img)) and img.min() >= 0
        assert preds[0].with_suffix(".png").exists()

        rows = [json.loads(line) for line in (run_dir / "report.jsonl").read_text().splitlines()]
        assert [r["scene"] for r in rows[-1:]] == ["mean"] and rows[-1]["count"] == len(rows) - 1 == 8
        out["msg"] = f"{elapsed / 60:.1f} min, eval mean PSNR-mu {rows[-1]['psnr_mu']} dB"
        assert elapsed <= 3600
