from pathlib import Path

import numpy as np
import pytest

from atoken.att import (
    TransformerBlock,
    assign_clusters,
    build_stage_params,
    merge_clusters,
    run_att,
)
from atoken.cce import ScoreMap
from atoken.fmcore import FeatureMap, PipelineConfig, StageTrace, slice_to_tokens
from atoken.mfr import MlpBlock, aggregate_stage, build_mlps, reconstruct, upsample_stage

from conftest import random_feature_map, random_token_set

GOLDEN = Path(__file__).parent / "golden"


def make_trace(assignment, centers, features, stage_index=1):
    return StageTrace(
        stage_index=stage_index,
        assignment=assignment,
        center_token_indices=centers,
        attention_scores=np.zeros(len(assignment)),
        input_features=features,
    )


class TestUpsampleStage:
    def test_identity_assignment(self, rng):
        feats = rng.normal(size=(4, 3))
        trace = make_trace(np.arange(4), np.arange(4), np.zeros((4, 3)))
        assert np.array_equal(upsample_stage(feats, trace), feats)

    def test_copy_semantics(self):
        trace = make_trace(np.array([0, 0, 1]), np.array([0, 2]), np.zeros((3, 1)))
        got = upsample_stage(np.array([[2.0], [5.0]]), trace)
        assert np.array_equal(got, [[2.0], [2.0], [5.0]])

    def test_loop_oracle(self, rng):
        n_in, n_out, c = 20, 6, 4
        assignment = rng.integers(0, n_out, size=n_in)
        assignment[:n_out] = np.arange(n_out)
        centers = np.arange(n_out)
        trace = make_trace(assignment, centers, np.zeros((n_in, c)))
        merged = rng.normal(size=(n_out, c))
        got = upsample_stage(merged, trace)
        for i in range(n_in):
            assert np.array_equal(got[i], merged[assignment[i]])

    def test_count_mismatch(self, rng):
        trace = make_trace(np.array([0, 1]), np.array([0, 1]), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            upsample_stage(rng.normal(size=(3, 1)), trace)


class TestAggregateStage:
    def test_zero_previous(self, rng):
        up = rng.normal(size=(3, 2))
        trace = make_trace(np.arange(3), np.arange(3), np.zeros((3, 2)))
        assert np.array_equal(aggregate_stage(up, trace), up)

    def test_simple_sum(self):
        trace = make_trace(np.array([0]), np.array([0]), np.array([[1.0]]))
        assert np.array_equal(aggregate_stage(np.array([[2.0]]), trace), [[3.0]])

    def test_elementwise_loop_oracle(self, rng):
        prev = rng.normal(size=(64, 8))
        up = rng.normal(size=(64, 8))
        assignment = np.arange(64)
        trace = make_trace(assignment, assignment, prev)
        got = aggregate_stage(up, trace)
        for i in range(64):
            for c in range(8):
                assert got[i, c] == up[i, c] + prev[i, c]

    def test_shape_mismatch(self, rng):
        trace = make_trace(np.arange(3), np.arange(3), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            aggregate_stage(rng.normal(size=(3, 3)), trace)


class TestMlpBlock:
    def test_zero_weights_residual_identity(self, rng):
        blk = MlpBlock.zeros(4, 8)
        x = rng.normal(size=(5, 4))
        assert np.array_equal(blk.apply(x), x)

    def test_shape_chain_checked(self):
        with pytest.raises(ValueError):
            MlpBlock(np.zeros((3, 4)), np.zeros(4), np.zeros((5, 3)), np.zeros(3))


class TestReconstruct:
    def test_single_stage_identity(self, rng):
        fm = random_feature_map(rng, 3, 2, 2)
        ts = slice_to_tokens(fm)
        # one stage, every token its own cluster, zeroed skip features
        trace = make_trace(
            np.arange(6), np.arange(6), np.zeros((6, 2)), stage_index=1
        )
        merged, _ = merge_clusters(ts, trace.assignment, np.zeros(6), np.arange(6))
        out = reconstruct(merged, [trace], [MlpBlock.zeros(2, 4)])
        assert np.array_equal(out.data, fm.data)

    def test_two_stage_singleton_sum(self, rng):
        # All clusters singletons: with zero-weight MLPs the reconstruction
        # is the sum of the per-stage input features plus the final features.
        c = 3
        f0 = rng.normal(size=(4, c))
        f1 = rng.normal(size=(4, c))
        final_feats = rng.normal(size=(4, c))
        t1 = make_trace(np.arange(4), np.arange(4), f0, stage_index=1)
        t2 = make_trace(np.arange(4), np.arange(4), f1, stage_index=2)
        fm = FeatureMap(2, 2, c, final_feats)
        final = slice_to_tokens(fm)
        out = reconstruct(final, [t1, t2], [MlpBlock.zeros(c, 4)] * 2)
        np.testing.assert_allclose(
            out.pixel_features(), final_feats + f1 + f0, atol=1e-15
        )

    def test_piecewise_constant_property(self, rng):
        fm = random_feature_map(rng, 8, 8, 3)
        s = ScoreMap(8, 8, rng.normal(size=64))
        cfg = PipelineConfig(token_schedule=(16, 4), rng_seed=3)
        heads, blocks = build_stage_params(cfg, 3)
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
        out = reconstruct(final, zeroed, [MlpBlock.zeros(3, 6)] * 2)
        flat = out.pixel_features()
        for j, region in enumerate(final.regions):
            np.testing.assert_allclose(
                flat[region] - final.features[j][None, :], 0.0, atol=1e-12
            )

    def test_output_dimensions(self, rng):
        fm = random_feature_map(rng, 5, 4, 6)
        s = ScoreMap(5, 4, rng.normal(size=20))
        cfg = PipelineConfig(token_schedule=(8, 3), rng_seed=0)
        heads, blocks = build_stage_params(cfg, 6)
        final, traces = run_att(fm, s, cfg, heads, blocks)
        mlps = build_mlps(2, 6, 12, seed=0)
        out = reconstruct(final, traces, mlps)
        assert (out.width, out.height, out.channels) == (5, 4, 6)

    def test_trace_schedule_mismatch(self, rng):
        fm = random_feature_map(rng, 2, 2, 1)
        final = slice_to_tokens(fm)
        trace = make_trace(np.arange(3), np.arange(3), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            reconstruct(final, [trace], [MlpBlock.zeros(1, 2)])

    def test_golden_replay(self):
        fixture = np.load(GOLDEN / "reconstruct.npz")
        fm = FeatureMap(8, 8, 4, fixture["input_map"])
        s = ScoreMap(8, 8, fixture["scores"])
        cfg = PipelineConfig(token_schedule=(16, 4), rng_seed=21)
        heads, blocks = build_stage_params(cfg, 4)
        final, traces = run_att(fm, s, cfg, heads, blocks)
        mlps = build_mlps(2, 4, 8, seed=21)
        out = reconstruct(final, traces, mlps)
        assert np.array_equal(out.data, fixture["expected"])
