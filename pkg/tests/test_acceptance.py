"""Acceptance criteria, one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. The slow criteria (the
distillation ablation and the end-to-end smoke pipeline) share the
session-scoped training fixtures from conftest.
"""

import csv
import time

import numpy as np
import pytest

import stream4d.tensor as T
from stream4d import losses as L
from stream4d.cli import main as cli_main
from stream4d.cli import read_predictions
from stream4d.model import Model, ModelConfig, StreamingSession, load_checkpoint, \
    save_checkpoint
from stream4d.attention import KVCache
from stream4d.metrics import cloud_metrics, depth_metrics, nearest_neighbors, \
    pose_auc30
from stream4d.scenes import dataset_read, dataset_write, random_scene_spec, \
    render_sequence
from stream4d.tensor import precision

from oracles import (GRAD_TOL, brute_force_nn, gradcheck, loss_gradcheck_cases,
                     op_gradcheck_cases, reference_cloud_metrics,
                     reference_depth_metrics, reference_pose_auc)
from conftest import PIPELINE, ABLATION


def report(number, description, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"\n[criterion {number}] {description}: {status} {detail}")
    assert ok, f"criterion {number} ({description}): {detail}"


def _pred_arrays(p):
    return [p.pose.as_vector(), p.point_map, p.point_conf, p.depth,
            p.depth_conf, p.tracks, p.visibility]


class TestCriterion1StreamEqualsFull:
    def test_stream_equals_full(self):
        """Streaming outputs match full-sequence causal outputs for
        T in {1, 2, 5, 10, 40}: tokens within 1e-5, head outputs within 1e-4."""
        t0 = time.time()
        cfg = ModelConfig(max_frames=48)
        model = Model(cfg, seed=17)
        rng = np.random.default_rng(17)
        images = [rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
                  for _ in range(40)]
        queries = np.array([[4.5, 6.5], [20.0, 25.0], [30.5, 8.5]])
        worst_tok, worst_head = 0.0, 0.0
        for t_len in (1, 2, 5, 10, 40):
            sub = images[:t_len]
            toks = [model.encode(img, i + 1) for i, img in enumerate(sub)]
            full_tokens = model.decode_training(toks, mode="causal")
            cache = model.new_cache()
            for t, tok in enumerate(toks):
                out = model.decode_streaming(tok, cache)
                worst_tok = max(worst_tok,
                                float(np.abs(out.data - full_tokens[t].data).max()))
            full_preds = model.predict_sequence(sub, queries=queries, mode="causal")
            session = StreamingSession(model, queries=queries)
            for t, img in enumerate(sub):
                got = session.step(img)
                for a, b in zip(_pred_arrays(got), _pred_arrays(full_preds[t])):
                    worst_head = max(worst_head, float(np.abs(a - b).max()))
        elapsed = time.time() - t0
        report(1, "STREAM=FULL identity",
               worst_tok < 1e-5 and worst_head < 1e-4 and elapsed < 60,
               f"(max token diff {worst_tok:.2e}, max head diff {worst_head:.2e}, "
               f"{elapsed:.1f}s)")


class TestCriterion2Causality:
    def test_causality_both_directions(self):
        """Perturbing frames > t leaves frames <= t bit-identical for the causal
        student; the global-attention teacher must fail the same check."""
        cfg = ModelConfig(max_frames=16)
        model = Model(cfg, seed=23)
        rng = np.random.default_rng(23)
        images = [rng.uniform(0, 1, (3, 32, 32)).astype(np.float32) for _ in range(6)]
        noise = [rng.uniform(0, 1, (3, 32, 32)).astype(np.float32) for _ in range(3)]

        base = model.predict_sequence(images, mode="causal")
        perturbed = model.predict_sequence(images[:3] + noise, mode="causal")
        student_ok = all(
            all(np.array_equal(a, b) for a, b in
                zip(_pred_arrays(base[t]), _pred_arrays(perturbed[t])))
            for t in range(3))

        teacher = Model(cfg, seed=23, attention_mode="global")
        t_base = teacher.predict_sequence(images, mode="global")
        t_pert = teacher.predict_sequence(images[:3] + noise, mode="global")
        teacher_differs = any(
            np.abs(a - b).max() > 0 for a, b in
            zip(_pred_arrays(t_base[0]), _pred_arrays(t_pert[0])))

        report(2, "causality suite", student_ok and teacher_differs,
               f"(student prefix bit-identical: {student_ok}, "
               f"teacher reacts to future: {teacher_differs})")


class TestCriterion3LatencyScaling:
    def test_latency_scaling(self):
        """Streaming last-frame latency grows ~linearly while full reprocessing
        grows superlinearly; ratio < 0.5 at T=40 and nonincreasing over T."""
        cfg = ModelConfig(max_frames=48)
        model = Model(cfg, seed=31)
        rng = np.random.default_rng(31)
        images = [rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
                  for _ in range(40)]
        lengths = (10, 20, 30, 40)
        stream_med, full_med = {}, {}
        for t_len in lengths:
            stream_times, full_times = [], []
            for _ in range(3):
                session = StreamingSession(model)
                last = 0.0
                for img in images[:t_len]:
                    t0 = time.perf_counter()
                    session.step(img)
                    last = time.perf_counter() - t0
                stream_times.append(last)
                t0 = time.perf_counter()
                model.predict_sequence(images[:t_len], mode="causal")
                full_times.append(time.perf_counter() - t0)
            stream_med[t_len] = float(np.median(stream_times))
            full_med[t_len] = float(np.median(full_times))
        ratios = {t: stream_med[t] / full_med[t] for t in lengths}
        ratio_ok = ratios[40] < 0.5
        monotone_ok = all(ratios[b] <= ratios[a] * 1.25
                          for a, b in zip(lengths, lengths[1:]))
        stream_growth = stream_med[40] / stream_med[10]
        full_growth = full_med[40] / full_med[10]
        growth_ok = stream_growth < full_growth and full_growth > 3.0
        report(3, "latency scaling", ratio_ok and monotone_ok and growth_ok,
               f"(ratios {[round(ratios[t], 3) for t in lengths]}, "
               f"stream x{stream_growth:.1f} vs full x{full_growth:.1f} from T=10 to 40)")


class TestCriterion4GradientSuite:
    def test_all_ops_and_losses(self):
        """Central finite differences, 64-bit, rel err < 1e-4, >= 20 instances
        per op and per loss."""
        t0 = time.time()
        failures = []
        with precision(np.float64):
            for name, builder in op_gradcheck_cases() + loss_gradcheck_cases():
                for seed in range(20):
                    rng = np.random.default_rng(9000 + seed)
                    f, tensors = builder(rng)
                    err = gradcheck(f, tensors)
                    if err >= GRAD_TOL:
                        failures.append((name, seed, err))
        elapsed = time.time() - t0
        report(4, "gradient suite", not failures and elapsed < 300,
               f"({len(op_gradcheck_cases()) + len(loss_gradcheck_cases())} ops/losses "
               f"x 20 instances, {elapsed:.0f}s{', failures: ' + str(failures[:3]) if failures else ''})")


class TestCriterion5DistillationAblation:
    def test_distillation_beats_plain_student(self, ablation_results):
        """Median-over-seeds pointmap RMSE: distilled student < plain student;
        teacher <= distilled student."""
        kd = ablation_results["kd"]
        plain = ablation_results["plain"]
        teacher = ablation_results["teacher"]
        kd_med = float(np.median(kd))
        plain_med = float(np.median(plain))
        ok = kd_med < plain_med and teacher <= kd_med
        report(5, "distillation ablation", ok,
               f"(teacher {teacher:.4f} <= distilled median {kd_med:.4f} "
               f"< plain median {plain_med:.4f}; seeds kd={[round(x, 4) for x in kd]} "
               f"plain={[round(x, 4) for x in plain]})")


class TestCriterion6MetricOracles:
    def test_cloud_depth_pose_vs_bruteforce(self):
        """Cloud/depth/pose metrics match 64-bit brute-force oracles within
        1e-9 on >= 50 random instances each."""
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(7000 + seed)
            pred = rng.normal(size=(120, 3)) * rng.uniform(0.5, 2)
            gt = rng.normal(size=(140, 3)) * rng.uniform(0.5, 2)
            pn = rng.normal(size=(120, 3))
            pn /= np.linalg.norm(pn, axis=1, keepdims=True)
            gn = rng.normal(size=(140, 3))
            gn /= np.linalg.norm(gn, axis=1, keepdims=True)
            got = cloud_metrics(pred, gt, pred_normals=pn, gt_normals=gn)
            want = reference_cloud_metrics(pred, gt, pn, gn)
            for key, val in want.items():
                worst = max(worst, abs(getattr(got, key) - val))
            d_grid, i_grid = nearest_neighbors(pred, gt)
            d_brute, i_brute = brute_force_nn(pred, gt)
            worst = max(worst, float(np.abs(d_grid - d_brute).max()))
            assert np.array_equal(i_grid, i_brute)
        cloud_worst = worst

        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(7100 + seed)
            gt = rng.uniform(0.5, 6, size=(9, 9))
            pred = gt * rng.uniform(0.4, 1.6, size=gt.shape)
            mask = rng.random(gt.shape) > 0.2
            got = depth_metrics(pred, gt, mask)
            want = reference_depth_metrics(pred, gt, mask)
            worst = max(worst, abs(got.abs_rel - want["abs_rel"]),
                        abs(got.delta_125 - want["delta_125"]),
                        abs(got.scale - want["scale"]))
        depth_worst = worst

        from test_metrics import spiral_poses
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(7200 + seed)
            gt = spiral_poses(5, rng)
            pred = spiral_poses(5, rng, jitter=rng.uniform(0.01, 0.2))
            got = pose_auc30(pred, gt).auc30
            want = reference_pose_auc([p.as_vector() for p in pred],
                                      [p.as_vector() for p in gt])
            worst = max(worst, abs(got - want))
        pose_worst = worst

        ok = cloud_worst < 1e-9 and depth_worst < 1e-9 and pose_worst < 1e-9
        report(6, "metric oracle equivalence", ok,
               f"(worst diffs: cloud {cloud_worst:.1e}, depth {depth_worst:.1e}, "
               f"pose {pose_worst:.1e})")


class TestCriterion7EndToEndSmoke:
    def test_pipeline_beats_sanity_floors(self, cli_pipeline):
        """gen -> train teacher -> distill student -> stream -> eval clears
        AbsRel < 0.25 and auc30 > 0.5 on held-out scenes; a random-weight
        model fails both."""
        abs_rel = cli_pipeline["abs_rel"]
        auc30 = cli_pipeline["auc30"]
        trained_ok = abs_rel < 0.25 and auc30 > 0.5

        # the same evaluation with random weights must fail both floors
        rand_model = Model(cli_pipeline["config"], seed=999)
        rand_abs, rand_auc = [], []
        for seq in cli_pipeline["held_sequences"]:
            preds = rand_model.predict_sequence([f.image for f in seq], mode="causal")
            from stream4d.metrics import sequence_depth_scale
            s = sequence_depth_scale([p.depth for p in preds],
                                     [f.depth for f in seq],
                                     [f.valid for f in seq])
            dm = depth_metrics(np.stack([p.depth for p in preds]),
                               np.stack([f.depth for f in seq]),
                               np.stack([f.valid for f in seq]), scale=s)
            rand_abs.append(dm.abs_rel)
            rand_auc.append(pose_auc30([p.pose for p in preds],
                                       [f.pose for f in seq]).auc30)
        random_fails = np.mean(rand_abs) >= 0.25 and np.mean(rand_auc) <= 0.5
        report(7, "end-to-end smoke", trained_ok and random_fails,
               f"(trained: AbsRel {abs_rel:.3f} < 0.25, auc30 {auc30:.3f} > 0.5; "
               f"random: AbsRel {np.mean(rand_abs):.3f}, auc30 {np.mean(rand_auc):.3f})")


class TestCriterion8RoundTrips:
    def test_all_containers_bit_identical(self, tmp_path):
        """Checkpoint, dataset container, and KV-cache snapshot all read back
        bit-identical."""
        cfg = ModelConfig(height=16, width=16, patch_size=4, channels=32,
                          layers=2, max_frames=48)
        model = Model(cfg, seed=41)
        ck1, ck2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ck1, model)
        save_checkpoint(ck2, load_checkpoint(ck1))
        ckpt_ok = ck1.read_bytes() == ck2.read_bytes()

        frames = render_sequence(random_scene_spec(3, height=16, width=16,
                                                   frame_count=40))
        d1, d2 = tmp_path / "a.s4dd", tmp_path / "b.s4dd"
        dataset_write(d1, frames)
        dataset_write(d2, dataset_read(d1))
        data_ok = d1.read_bytes() == d2.read_bytes()

        session = StreamingSession(model)
        rng = np.random.default_rng(0)
        for _ in range(5):
            session.step(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32))
        c1, c2 = tmp_path / "a.s4dc", tmp_path / "b.s4dc"
        session.cache.save(c1)
        KVCache.load(c1).save(c2)
        cache_ok = c1.read_bytes() == c2.read_bytes()

        report(8, "round-trip suites", ckpt_ok and data_ok and cache_ok,
               f"(checkpoint {ckpt_ok}, dataset {data_ok}, cache snapshot {cache_ok})")
