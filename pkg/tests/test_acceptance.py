"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
"""

import io
import json
import os
import time

import numpy as np
import pytest

from atoken.att import (
    biased_attention,
    build_stage_params,
    merge_clusters,
    run_att,
)
from atoken.cce import ScoreMap, back_project, ground_depth
from atoken.cli import (
    RunMetrics,
    adaptive_focus_stats,
    run_pipeline,
    run_verification,
)
from atoken.fmcore import CameraIntrinsics, FeatureMap, PipelineConfig, StageTrace
from atoken.mfr import MlpBlock, reconstruct
from atoken.numerics import brute_force_assign, reference_attention
from atoken.scene import generate_scene, random_scene_spec

from conftest import random_feature_map, random_token_set


def report(num, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {num:2d} {status}: {detail}")
    assert passed, f"criterion {num}: {detail}"


def test_criterion_01_virtual_plane_consistency():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        k = CameraIntrinsics(
            f_x=float(rng.uniform(200, 2000)),
            f_y=float(rng.uniform(200, 2000)),
            c_x=float(rng.uniform(-50, 50)),
            c_y=float(rng.uniform(-50, 400)),
            cam_height=float(rng.uniform(0.5, 3.0)),
        )
        u = float(rng.uniform(-100, 1000))
        v = k.c_y + float(rng.uniform(1e-3, 600))
        _, y_3d, _ = back_project(u, v, ground_depth(v, k), k)
        worst = max(worst, abs(y_3d - k.cam_height))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-12 and elapsed < 1.0,
           f"virtual-plane consistency, max |y - H| = {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_clustering_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    betas = (0.0, 0.05, 0.5)
    mismatches = 0
    from atoken.att import assign_clusters

    for i in range(200):
        if i < 10:
            n, k = 256, 32  # pin the maximum size
        else:
            n = int(rng.integers(2, 257))
            k = int(rng.integers(1, min(n, 32) + 1))
        ts = random_token_set(rng, 16, 16, n, channels=int(rng.integers(1, 7)))
        centers = rng.permutation(n)[:k]
        beta = betas[i % 3]
        a = assign_clusters(ts, centers, beta)
        b = brute_force_assign(ts, centers, beta)
        mismatches += int(not np.array_equal(a, b))
    elapsed = time.perf_counter() - t0
    report(2, mismatches == 0 and elapsed < 10.0,
           f"clustering oracle equivalence, {mismatches} mismatches / 200, "
           f"{elapsed:.2f}s")


def _random_pipeline(rng, max_side=16, max_stages=4):
    w = int(rng.integers(2, max_side + 1))
    h = int(rng.integers(2, max_side + 1))
    n0 = w * h
    n_stages = int(rng.integers(1, max_stages + 1))
    counts = np.sort(rng.choice(np.arange(1, n0 + 1), size=n_stages, replace=False))[::-1]
    cfg = PipelineConfig(
        token_schedule=tuple(int(c) for c in counts),
        rng_seed=int(rng.integers(0, 2**31)),
    )
    c = int(rng.integers(1, 6))
    fm = random_feature_map(rng, w, h, c)
    s = ScoreMap(w, h, rng.normal(size=n0))
    heads, blocks = build_stage_params(cfg, c)
    return fm, s, cfg, heads, blocks


def test_criterion_03_partition_invariant():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    checked = 0
    for _ in range(100):
        fm, s, cfg, heads, blocks = _random_pipeline(rng)
        final, traces = run_att(fm, s, cfg, heads, blocks)
        # TokenSet construction already enforces the partition invariant at
        # every stage; verify the final set explicitly as well.
        covered = np.sort(np.concatenate(final.regions))
        assert np.array_equal(covered, np.arange(fm.num_pixels))
        checked += 1
    elapsed = time.perf_counter() - t0
    report(3, checked == 100 and elapsed < 30.0,
           f"partition invariant over {checked} random pipelines, {elapsed:.2f}s")


def test_criterion_04_merge_properties():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_shift = 0.0
    hull_ok = True
    for _ in range(500):
        m = int(rng.integers(1, 9))
        c = int(rng.integers(1, 6))
        x = rng.normal(size=(m, c))
        p = rng.normal(size=m)
        shift = float(rng.uniform(-50, 50))

        def softmax_mean(pp):
            w = np.exp(pp - pp.max())
            w /= w.sum()
            return w @ x

        y1 = softmax_mean(p)
        y2 = softmax_mean(p + shift)
        # relative to the cluster's per-channel feature scale: y is a convex
        # combination of the x rows, so that is the magnitude that matters
        denom = np.maximum(np.abs(x).max(axis=0), 1e-30)
        worst_shift = max(worst_shift, float(np.max(np.abs(y1 - y2) / denom)))
        hull_ok &= bool(
            np.all(y1 >= x.min(axis=0) - 1e-12) and np.all(y1 <= x.max(axis=0) + 1e-12)
        )
    elapsed = time.perf_counter() - t0
    report(4, worst_shift < 1e-12 and hull_ok and elapsed < 5.0,
           f"merge shift invariance (worst rel {worst_shift:.2e}) and convex "
           f"hull containment, {elapsed:.2f}s")


def test_criterion_05_attention_properties():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_row = 0.0
    worst_plain = 0.0
    for _ in range(200):
        n_q = int(rng.integers(1, 7))
        n_k = int(rng.integers(1, 9))
        d_k = int(rng.integers(1, 5))
        d_v = int(rng.integers(1, 5))
        q = rng.normal(size=(n_q, d_k))
        k = rng.normal(size=(n_k, d_k))
        v = rng.normal(size=(n_k, d_v))
        p = rng.normal(size=n_k)
        rows = biased_attention(q, k, np.eye(n_k), p).sum(axis=1)
        worst_row = max(worst_row, float(np.max(np.abs(rows - 1.0))))
        got = biased_attention(q, k, v, np.zeros(n_k))
        ref = reference_attention(q, k, v)
        worst_plain = max(worst_plain, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - t0
    report(5, worst_row < 1e-12 and worst_plain < 1e-12 and elapsed < 5.0,
           f"attention rows sum to 1 (worst {worst_row:.2e}), p=0 matches "
           f"plain attention (worst {worst_plain:.2e}), {elapsed:.2f}s")


def test_criterion_06_gradient_checks():
    t0 = time.perf_counter()
    sink = io.StringIO()
    ok = run_verification(stream=sink, instances=20, seed=6)
    reports = [json.loads(line) for line in sink.getvalue().splitlines()]
    worst = max(r["max_rel_error"] for r in reports)
    elapsed = time.perf_counter() - t0
    report(6, ok and len(reports) == 60 and elapsed < 60.0,
           f"gradient checks: {len(reports)} reports, worst rel err "
           f"{worst:.2e}, {elapsed:.2f}s")


def test_criterion_07_piecewise_constant_reconstruction():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        fm, s, cfg, heads, blocks = _random_pipeline(rng, max_side=12, max_stages=3)
        final, traces = run_att(fm, s, cfg, heads, blocks)
        zeroed = [
            StageTrace(
                stage_index=t.stage_index,
                assignment=t.assignment,
                center_token_indices=t.center_token_indices,
                attention_scores=t.attention_scores,
                input_features=np.zeros_like(t.input_features),
            )
            for t in traces
        ]
        mlps = [MlpBlock.zeros(fm.channels, 2 * fm.channels)] * len(traces)
        out = reconstruct(final, zeroed, mlps)
        flat = out.pixel_features()
        for j, region in enumerate(final.regions):
            worst = max(worst, float(np.max(np.abs(flat[region] - final.features[j][None, :]))))
    elapsed = time.perf_counter() - t0
    report(7, worst < 1e-12 and elapsed < 10.0,
           f"piecewise-constant reconstruction, worst deviation {worst:.2e}, "
           f"{elapsed:.2f}s")


def test_criterion_08_adaptive_focus():
    t0 = time.perf_counter()
    wins = 0
    for seed in range(20):
        spec = random_scene_spec(seed, width=32, height=32)
        cfg = PipelineConfig(token_schedule=(256, 64, 16), rng_seed=seed)
        fm, _ = generate_scene(spec, seed)
        from atoken.cce import SemanticScorer, combine_scores, depth_score, semantic_score

        sd = depth_score(spec.intrinsics, fm.width, fm.height)
        ss = semantic_score(fm, SemanticScorer.seeded(fm.channels, seed))
        s = combine_scores(sd, ss, cfg.alpha)
        heads, blocks = build_stage_params(cfg, fm.channels)
        final, _ = run_att(fm, s, cfg, heads, blocks)
        top, bottom = adaptive_focus_stats(final, s.flat())
        wins += int(top < bottom)
    elapsed = time.perf_counter() - t0
    report(8, wins >= 19 and elapsed < 60.0,
           f"adaptive focus: finer tokens on high-score pixels in {wins}/20 "
           f"scenes, {elapsed:.2f}s")


def test_criterion_09_efficiency_accounting():
    # 32x32 map, three 1/4-ratio stages: token counts 1024 -> 256 -> 64 -> 16
    m = RunMetrics.from_schedule(1024, (256, 64, 16))
    expected_pairs = 1024 * 256 + 256 * 64 + 64 * 16
    expected_grid = 3 * 1024**2
    exact = (
        m.adaptive_pair_count == expected_pairs
        and m.grid_pair_count == expected_grid
        and m.reduction_factor == expected_grid / expected_pairs
    )
    report(9, exact,
           f"pair accounting {m.adaptive_pair_count} == {expected_pairs}, "
           f"reduction {m.reduction_factor:.4f}")


def test_criterion_10_determinism(tmp_path):
    cfg = PipelineConfig(token_schedule=(64, 16, 4), rng_seed=42)
    spec = random_scene_spec(42, width=16, height=16)
    artifacts = ("output.atfm", "tokens_final.json", "token_map.ppm",
                 "token_map.svg", "metrics.json")
    outputs = []
    for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        os.environ["ATOKEN_THREADS"] = threads
        try:
            out = tmp_path / tag
            run_pipeline(cfg, out, scene_spec=spec)
            outputs.append({n: (out / n).read_bytes() for n in artifacts})
        finally:
            os.environ.pop("ATOKEN_THREADS", None)
    identical = outputs[0] == outputs[1] == outputs[2]
    report(10, identical,
           "pipeline outputs byte-identical across repeat runs and "
           "ATOKEN_THREADS in {1, 4}")
