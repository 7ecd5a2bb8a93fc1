"""Command-line front end: configuration, end-to-end pipeline runs,
gradient verification, and token-map rendering.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .att import build_stage_params, run_att
from .cce import (
    SemanticScorer,
    combine_scores,
    depth_score,
    semantic_score,
    token_scores,
)
from .fmcore import CameraIntrinsics, FeatureMap, PipelineConfig, TokenSet
from .mfr import build_mlps, reconstruct
from .numerics import (
    biased_attention_backward,
    fd_check,
    focal_loss_backward,
    merge_backward,
)
from .render import render_token_map, render_token_svg
from .scene import SceneSpec, generate_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4

_CONFIG_KEYS = {
    "token_schedule",
    "alpha",
    "beta",
    "d_k",
    "rng_seed",
    "mlp_hidden",
    "normalize_positions",
    "intrinsics",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunMetrics:
    """Token counts, attention pair accounting, and per-phase timings."""

    stage_token_counts: tuple[int, ...]  # n_0, n_1, ..., n_N
    pair_counts: tuple[int, ...]  # n_l * n_{l-1} per stage
    grid_pair_count: int  # n_0^2 * N baseline
    wall_clock_ms: dict = field(default_factory=dict)

    @property
    def adaptive_pair_count(self) -> int:
        return sum(self.pair_counts)

    @property
    def reduction_factor(self) -> float:
        return self.grid_pair_count / self.adaptive_pair_count

    @classmethod
    def from_schedule(
        cls, n_0: int, schedule: tuple[int, ...], wall_clock_ms: dict | None = None
    ) -> "RunMetrics":
        counts = (n_0,) + tuple(schedule)
        pairs = tuple(b * a for a, b in zip(counts, counts[1:]))
        return cls(
            stage_token_counts=counts,
            pair_counts=pairs,
            grid_pair_count=n_0 * n_0 * len(schedule),
            wall_clock_ms=dict(wall_clock_ms or {}),
        )

    def to_dict(self) -> dict:
        return {
            "stage_token_counts": list(self.stage_token_counts),
            "pair_counts": list(self.pair_counts),
            "adaptive_pair_count": self.adaptive_pair_count,
            "grid_pair_count": self.grid_pair_count,
            "reduction_factor": self.reduction_factor,
        }


def load_config(path) -> tuple[PipelineConfig, CameraIntrinsics | None]:
    """Parse the JSON run configuration; unknown keys are rejected."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "token_schedule" not in raw:
        raise ConfigError("config must define token_schedule")
    intrinsics = None
    if "intrinsics" in raw:
        try:
            intrinsics = CameraIntrinsics(**raw["intrinsics"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad intrinsics: {exc}") from exc
    fields = {k: v for k, v in raw.items() if k != "intrinsics"}
    try:
        cfg = PipelineConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad pipeline config: {exc}") from exc
    return cfg, intrinsics


def save_tokens_json(ts: TokenSet, path, scores=None) -> None:
    payload = {
        "width": ts.width,
        "height": ts.height,
        "regions": [r.tolist() for r in ts.regions],
    }
    if scores is not None:
        payload["scores"] = [float(s) for s in np.asarray(scores)]
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_tokens_json(path) -> TokenSet:
    with open(path) as fh:
        payload = json.load(fh)
    regions = [np.asarray(r, dtype=np.int64) for r in payload["regions"]]
    from .fmcore import pixel_positions

    grid = pixel_positions(payload["width"], payload["height"])
    positions = np.stack([grid[r].mean(axis=0) for r in regions])
    return TokenSet(
        width=payload["width"],
        height=payload["height"],
        features=np.zeros((len(regions), 1)),
        regions=regions,
        positions=positions,
    )


def token_pixel_areas(ts: TokenSet) -> np.ndarray:
    """Per-pixel area of the token containing each pixel, flat index order."""
    areas = np.empty(ts.width * ts.height, dtype=np.float64)
    for r in ts.regions:
        areas[r] = r.size
    return areas


def adaptive_focus_stats(ts: TokenSet, score_flat: np.ndarray) -> tuple[float, float]:
    """Mean containing-token area over the top- and bottom-decile-score pixels."""
    areas = token_pixel_areas(ts)
    score_flat = np.asarray(score_flat, dtype=np.float64).reshape(-1)
    n = score_flat.size
    decile = max(1, n // 10)
    order = np.argsort(score_flat, kind="stable")
    bottom = order[:decile]
    top = order[-decile:]
    return float(areas[top].mean()), float(areas[bottom].mean())


def run_pipeline(
    cfg: PipelineConfig,
    out_dir,
    scene_spec: SceneSpec | None = None,
    input_map: FeatureMap | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> RunMetrics:
    """Execute cce -> att -> mfr and write all artifacts into out_dir."""
    if (scene_spec is None) == (input_map is None):
        raise ConfigError("exactly one of scene_spec/input_map is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if scene_spec is not None:
        fm, _ = generate_scene(scene_spec, cfg.rng_seed)
        intrinsics = scene_spec.intrinsics
    else:
        fm = input_map
        if intrinsics is None:
            raise ConfigError("intrinsics required when running from a feature map")
    cfg.validate_for(fm.width, fm.height)
    timings["setup_ms"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    sd = depth_score(intrinsics, fm.width, fm.height)
    scorer = SemanticScorer.seeded(fm.channels, cfg.rng_seed)
    ss = semantic_score(fm, scorer)
    s = combine_scores(sd, ss, cfg.alpha)
    timings["cce_ms"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    heads, blocks = build_stage_params(cfg, fm.channels)
    final, traces = run_att(fm, s, cfg, heads, blocks)
    timings["att_ms"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    hidden = cfg.mlp_hidden if cfg.mlp_hidden > 0 else 2 * fm.channels
    mlps = build_mlps(cfg.num_stages, fm.channels, hidden, cfg.rng_seed)
    out_fm = reconstruct(final, traces, mlps)
    timings["mfr_ms"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    out_fm.save(out_dir / "output.atfm")
    final_scores = token_scores(final, s)
    save_tokens_json(final, out_dir / "tokens_final.json", scores=final_scores)
    render_token_map(final, out_dir / "token_map.ppm", scores=s, scale=8)
    render_token_svg(final, out_dir / "token_map.svg")
    timings["render_ms"] = 1e3 * (time.perf_counter() - t0)

    metrics = RunMetrics.from_schedule(
        fm.num_pixels, cfg.token_schedule, wall_clock_ms=timings
    )
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2)
    # Timings vary run to run; kept apart so every other artifact is
    # byte-reproducible for a fixed seed.
    with open(out_dir / "timings.json", "w") as fh:
        json.dump({"wall_clock_ms": timings, "threads": _thread_cap()}, fh, indent=2)
    return metrics


def _thread_cap() -> int:
    raw = os.environ.get("ATOKEN_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ATOKEN_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError("ATOKEN_THREADS must be >= 1")
    return cap


def sample_focal_instance(rng):
    """Random logits/heatmap pair for the focal-loss gradient check.

    Pixels where gt approaches 1 carry a (1-gt)^4 damping that can push
    gradient coordinates below what central differences resolve to 1e-6
    relative in double precision, so ill-conditioned draws are resampled.
    """
    while True:
        logits = rng.normal(size=(6, 6))
        gt = 0.7 * rng.random((6, 6))
        for _ in range(2):
            gt[rng.integers(0, 6), rng.integers(0, 6)] = 1.0
        grad = focal_loss_backward(logits, gt)
        if np.min(np.abs(grad)) >= 1e-4:
            return logits, gt, grad


def run_verification(stream=None, instances: int = 20, seed: int = 0) -> bool:
    """Gradient-check the three differentiable operations; one JSON report
    line per check. Returns True when everything passes.
    """
    stream = stream or sys.stdout
    rng = np.random.default_rng(seed)
    ok = True

    for i in range(instances):
        x = rng.normal(size=(5, 4))
        p = rng.normal(size=5)
        g_y = rng.normal(size=4)
        g_x, g_p = merge_backward(x, p, g_y)

        def f_merge(theta, shape=x.shape):
            xx = theta[: x.size].reshape(shape)
            pp = theta[x.size :]
            w = np.exp(pp - pp.max())
            w /= w.sum()
            return float((w @ xx) @ g_y)

        theta0 = np.concatenate([x.reshape(-1), p])
        analytic = np.concatenate([g_x.reshape(-1), g_p])
        report = fd_check(f_merge, analytic, theta0, operation=f"merge_backward[{i}]")
        ok &= report.passed
        print(report.to_json(), file=stream)

    for i in range(instances):
        q = rng.normal(size=(4, 3))
        k = rng.normal(size=(5, 3))
        v = rng.normal(size=(5, 2))
        p = rng.normal(size=5)
        upstream = rng.normal(size=(4, 2))
        g_q, g_k, g_v, g_p = biased_attention_backward(q, k, v, p, upstream)

        def f_attn(theta):
            off = 0
            qq = theta[off : off + q.size].reshape(q.shape); off += q.size
            kk = theta[off : off + k.size].reshape(k.shape); off += k.size
            vv = theta[off : off + v.size].reshape(v.shape); off += v.size
            pp = theta[off:]
            from .att import biased_attention

            return float(np.sum(biased_attention(qq, kk, vv, pp) * upstream))

        theta0 = np.concatenate([q.reshape(-1), k.reshape(-1), v.reshape(-1), p])
        analytic = np.concatenate(
            [g_q.reshape(-1), g_k.reshape(-1), g_v.reshape(-1), g_p]
        )
        report = fd_check(
            f_attn, analytic, theta0, operation=f"biased_attention_backward[{i}]"
        )
        ok &= report.passed
        print(report.to_json(), file=stream)

    for i in range(instances):
        logits, gt, grad = sample_focal_instance(rng)

        def f_focal(theta):
            from .cce import ScoreMap, focal_loss

            pred = ScoreMap(width=6, height=6, values=theta.reshape(6, 6))
            return focal_loss(pred, ScoreMap(width=6, height=6, values=gt))

        report = fd_check(
            f_focal,
            grad.reshape(-1),
            logits.reshape(-1),
            operation=f"focal_loss_backward[{i}]",
        )
        ok &= report.passed
        print(report.to_json(), file=stream)

    return ok


def _cmd_run(args) -> int:
    try:
        cfg, intrinsics = load_config(args.config)
        _thread_cap()
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    scene_spec = None
    input_map = None
    try:
        if args.scene:
            scene_spec = SceneSpec.load(args.scene)
        elif args.input:
            input_map = FeatureMap.load(args.input)
        else:
            print("config error: one of --scene/--input is required", file=sys.stderr)
            return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        metrics = run_pipeline(
            cfg,
            args.out_dir,
            scene_spec=scene_spec,
            input_map=input_map,
            intrinsics=intrinsics,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(metrics.to_dict()))
    return EXIT_OK


def _cmd_verify(args) -> int:
    ok = run_verification(instances=args.instances, seed=args.seed)
    return EXIT_OK if ok else EXIT_VERIFY


def _cmd_render(args) -> int:
    try:
        ts = load_tokens_json(args.tokens)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if str(args.out).endswith(".svg"):
            render_token_svg(ts, args.out)
        else:
            render_token_map(ts, args.out, scale=args.scale)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atoken",
        description="Adaptive token clustering pipeline: score, cluster, "
        "merge, attend, reconstruct.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--scene", help="scene spec JSON to synthesize the input")
    p_run.add_argument("--input", help="ATFM feature map file to run on")
    p_run.add_argument("--out-dir", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify", help="run the gradient-check suite")
    p_verify.add_argument("--instances", type=int, default=20)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=_cmd_verify)

    p_render = sub.add_parser("render", help="render a token-set JSON file")
    p_render.add_argument("--tokens", required=True)
    p_render.add_argument("--out", required=True)
    p_render.add_argument("--scale", type=int, default=8)
    p_render.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
