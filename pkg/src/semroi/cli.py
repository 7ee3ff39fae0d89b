"""Batch command-line entry point.

Subcommands: gradcheck, oracles, ablate-sampler, ablate-descriptor,
ablate-embedding, train-toy, invariance, diversity, bench.  Every run writes
a machine-readable report embedding the resolved configuration and seed.
Exit codes: 0 success, 1 acceptance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import SraConfig, init_params, param_leaves, parameter_count, sra_extract
from .evaluate import flops_estimate, invariance_eval, make_feature_fn, mask_diversity
from .oracles import full_pipeline_gradcheck, run_all
from .reporting import save_checkpoint, stream_rng, write_report
from .sampler import FIXED_GRID, RoIBox, dynamic_grid_size
from .synthetic import TransformRanges, generate_dataset
from .train import compare_extractors, train_toy

SUBCOMMANDS = (
    "gradcheck",
    "oracles",
    "ablate-sampler",
    "ablate-descriptor",
    "ablate-embedding",
    "train-toy",
    "invariance",
    "diversity",
    "bench",
)

# flat dotted-key configuration; the sra.* defaults are the reference
# operating point, the desk-scale keys below size the synthetic harness
COMMON_DEFAULTS: dict[str, object] = {
    "sra.n_masks": 49,
    "sra.budget": 128,
    "sra.descriptor_dim": 256,
    "sra.embed_channels": 32,
    "sra.gamma": 50.0,
    "sra.hidden": 128,
    "sra.descriptor_mode": "average",
    "sra.embedding_mode": "area",
    "sra.fixed_grid": "none",
    "sra.independent_heads": False,
    "data.n_classes": 4,
    "data.n_per_class": 200,
    "data.channels": 16,
    "train.epochs": 30,
    "train.lr": 0.02,
    "train.momentum": 0.9,
    "train.kind": "both",
    "eval.invariance_samples": 60,
    "eval.diversity_samples": 40,
    "transform.rotation_max_deg": 45.0,
    "transform.scale_lo": 0.8,
    "transform.scale_hi": 1.25,
    "transform.pan_frac": 0.1,
}

SUBCOMMAND_DEFAULTS: dict[str, dict[str, object]] = {
    "gradcheck": {"gradcheck.seeds": 20, "gradcheck.tolerance": 1e-4},
    "oracles": {},
    "ablate-sampler": {"sampler.mode": "dynamic", "sampler.n_boxes": 200},
    "ablate-descriptor": {"ablate.epochs": 10, "ablate.n_per_class": 75},
    "ablate-embedding": {"ablate.epochs": 10, "ablate.n_per_class": 75},
    "train-toy": {},
    "invariance": {"invariance.families": "rotation,reflection,scale_pan"},
    "diversity": {"diversity.threshold": 0.3},
    "bench": {"bench.grid": "8x8", "bench.timing_rois": 50},
}


class UsageError(ValueError):
    pass


def _parse_grid(value: object) -> tuple[int, int] | None:
    if value in (None, "none", "None", ""):
        return None
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    try:
        h, w = str(value).lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"grid must look like '8x8' or 'none', got {value!r}") from exc


def _coerce(key: str, raw: object, default: object) -> object:
    if isinstance(raw, str):
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    return raw


def resolve_config(subcommand: str, config_file: str | None, overrides: list[str]) -> dict:
    config = dict(COMMON_DEFAULTS)
    config.update(SUBCOMMAND_DEFAULTS[subcommand])
    merged: dict[str, object] = {}
    if config_file:
        try:
            merged.update(json.loads(Path(config_file).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_file}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = value
    for key, value in merged.items():
        if key not in config:
            raise UsageError(f"unknown config key {key!r} for {subcommand}")
        config[key] = _coerce(key, value, config[key])
    return config


def sra_config_from(config: dict) -> SraConfig:
    return SraConfig(
        n_masks=config["sra.n_masks"],
        budget=config["sra.budget"],
        descriptor_dim=config["sra.descriptor_dim"],
        embed_channels=config["sra.embed_channels"],
        gamma=config["sra.gamma"],
        hidden=config["sra.hidden"],
        descriptor_mode=config["sra.descriptor_mode"],
        embedding_mode=config["sra.embedding_mode"],
        fixed_grid=_parse_grid(config["sra.fixed_grid"]),
        independent_heads=config["sra.independent_heads"],
    )


def ranges_from(config: dict) -> TransformRanges:
    return TransformRanges(
        rotation_max_deg=config["transform.rotation_max_deg"],
        scale_lo=config["transform.scale_lo"],
        scale_hi=config["transform.scale_hi"],
        pan_frac=config["transform.pan_frac"],
    )


def _dataset(config: dict, seed: int, n_per_class: int | None = None):
    n_classes = config["data.n_classes"]
    per_class = n_per_class if n_per_class is not None else config["data.n_per_class"]
    return generate_dataset(
        n_classes,
        n_classes * per_class,
        seed,
        ranges_from(config),
        channels=config["data.channels"],
    )


# ---------------------------------------------------------------------------
# subcommand bodies: each returns (exit_code, metrics)


def cmd_gradcheck(config: dict, seed: int) -> tuple[int, dict]:
    tol = config["gradcheck.tolerance"]
    per_seed = []
    worst = 0.0
    for i in range(config["gradcheck.seeds"]):
        report = full_pipeline_gradcheck(seed + i)
        per_seed.append({"seed": seed + i, "max_rel_err": report.max_rel_err, "worst": report.worst})
        worst = max(worst, report.max_rel_err)
    passed = worst < tol
    return (0 if passed else 1), {
        "passed": passed,
        "tolerance": tol,
        "max_rel_err": worst,
        "per_seed": per_seed,
    }


def cmd_oracles(config: dict, seed: int) -> tuple[int, dict]:
    results = run_all(seed)
    entries = [
        {"name": r.name, "passed": r.passed, "max_err": r.max_err, "detail": r.detail}
        for r in results
    ]
    ok = all(r.passed for r in results)
    return (0 if ok else 1), {"passed": ok, "checks": entries}


def cmd_ablate_sampler(config: dict, seed: int) -> tuple[int, dict]:
    mode = config["sampler.mode"]
    if mode not in ("fixed", "dynamic"):
        raise UsageError(f"sampler.mode must be fixed or dynamic, got {mode!r}")
    budget = config["sra.budget"]
    rng = stream_rng(seed, "sampler-ablation")
    areas = []
    grids: dict[str, int] = {}
    for _ in range(config["sampler.n_boxes"]):
        x0, y0 = rng.uniform(0, 30, 2)
        box = RoIBox(x0, y0, x0 + rng.uniform(1, 60), y0 + rng.uniform(1, 60))
        grid = FIXED_GRID if mode == "fixed" else tuple(dynamic_grid_size(box, budget))
        areas.append(grid[0] * grid[1])
        key = f"{grid[0]}x{grid[1]}"
        grids[key] = grids.get(key, 0) + 1
    metrics = {
        "mode": mode,
        "budget": budget,
        "mean_grid_area": float(np.mean(areas)),
        "max_grid_area": int(np.max(areas)),
        "budget_respected": mode == "fixed" or int(np.max(areas)) <= budget,
        "distinct_grids": len(grids),
        "top_grids": sorted(grids.items(), key=lambda kv: -kv[1])[:8],
    }
    return 0, metrics


def _ablation_runs(config: dict, seed: int, variants: list[tuple[str, SraConfig]]) -> dict:
    dataset = _dataset(config, seed, n_per_class=config["ablate.n_per_class"])
    out = {}
    for name, cfg in variants:
        _, history = train_toy(
            "sra",
            cfg,
            dataset,
            epochs=config["ablate.epochs"],
            lr=config["train.lr"],
            momentum=config["train.momentum"],
            seed=seed,
            ranges=ranges_from(config),
        )
        out[name] = {
            "final_test_accuracy": history[-1]["test_accuracy"],
            "final_train_accuracy": history[-1]["train_accuracy"],
            "final_train_loss": history[-1]["train_loss"],
        }
    return out


def cmd_ablate_descriptor(config: dict, seed: int) -> tuple[int, dict]:
    base = sra_config_from(config)
    variants = [
        ("average", replace(base, descriptor_mode="average")),
        ("maximum", replace(base, descriptor_mode="maximum")),
        # concatenation cannot follow a dynamic grid; pin the fixed size
        ("concatenation", replace(base, descriptor_mode="concatenation", fixed_grid=FIXED_GRID)),
    ]
    return 0, {"modes": _ablation_runs(config, seed, variants)}


def cmd_ablate_embedding(config: dict, seed: int) -> tuple[int, dict]:
    base = sra_config_from(config)
    variants = [
        ("none", replace(base, embedding_mode="none")),
        ("position", replace(base, embedding_mode="position")),
        ("area", replace(base, embedding_mode="area")),
    ]
    return 0, {"modes": _ablation_runs(config, seed, variants)}


def cmd_train_toy(config: dict, seed: int, out_dir: Path) -> tuple[int, dict]:
    kind = config["train.kind"]
    if kind == "both":
        result = compare_extractors(
            sra_config_from(config),
            seeds=[seed],
            n_classes=config["data.n_classes"],
            n_per_class=config["data.n_per_class"],
            epochs=config["train.epochs"],
            lr=config["train.lr"],
            momentum=config["train.momentum"],
            invariance_samples=config["eval.invariance_samples"],
            diversity_samples=config["eval.diversity_samples"],
            ranges=ranges_from(config),
            channels=config["data.channels"],
        )
        return 0, result
    if kind not in ("sra", "roi_align"):
        raise UsageError(f"train.kind must be sra, roi_align or both, got {kind!r}")
    dataset = _dataset(config, seed)
    state, history = train_toy(
        kind,
        sra_config_from(config),
        dataset,
        epochs=config["train.epochs"],
        lr=config["train.lr"],
        momentum=config["train.momentum"],
        seed=seed,
        ranges=ranges_from(config),
    )
    metrics: dict = {"kind": kind, "history": history}
    if state.params is not None:
        ckpt = out_dir / f"trained_{kind}_seed{seed}.tjson"
        save_checkpoint(
            ckpt,
            param_leaves(state.params),
            meta={"seed": seed, "channels": config["data.channels"]},
        )
        metrics["checkpoint"] = str(ckpt)
    return 0, metrics


def _trained_states(config: dict, seed: int):
    cfg = sra_config_from(config)
    dataset = _dataset(config, seed)
    states = {}
    for kind in ("sra", "roi_align"):
        state, _ = train_toy(
            kind,
            cfg,
            dataset,
            epochs=config["train.epochs"],
            lr=config["train.lr"],
            momentum=config["train.momentum"],
            seed=seed,
            ranges=ranges_from(config),
        )
        states[kind] = state
    return cfg, dataset, states


def cmd_invariance(config: dict, seed: int) -> tuple[int, dict]:
    families = [f.strip() for f in str(config["invariance.families"]).split(",") if f.strip()]
    _, dataset, states = _trained_states(config, seed)
    ranges = ranges_from(config)
    per_extractor: dict = {}
    for kind, state in states.items():
        fn = make_feature_fn(kind, state.params, state.config)
        per_extractor[kind] = {
            family: invariance_eval(
                fn, dataset, family, config["eval.invariance_samples"],
                stream_rng(seed, f"invariance/{kind}/{family}"), ranges,
            ).mean_cosine
            for family in families
        }
    return 0, {"families": families, "mean_cosine": per_extractor}


def cmd_diversity(config: dict, seed: int) -> tuple[int, dict]:
    cfg, dataset, states = _trained_states(config, seed)
    report = mask_diversity(
        states["sra"].params,
        cfg,
        dataset,
        config["eval.diversity_samples"],
        stream_rng(seed, "diversity"),
        threshold=config["diversity.threshold"],
    )
    return 0, {
        "threshold": report.threshold,
        "fraction_below": report.fraction_below,
        "n_samples": report.n_samples,
        "mean_offdiagonal_cosine": float(
            report.mean_matrix[~np.eye(cfg.n_masks, dtype=bool)].mean()
        ),
    }


def cmd_bench(config: dict, seed: int) -> tuple[int, dict]:
    cfg = sra_config_from(config)
    channels = config["data.channels"]
    grid = _parse_grid(config["bench.grid"])
    est = flops_estimate(cfg, channels, grid)
    rng = stream_rng(seed, "bench")
    params = init_params(cfg, channels, rng)
    fmap = rng.standard_normal((channels, 64, 64))
    boxes = []
    for _ in range(config["bench.timing_rois"]):
        x0, y0 = rng.uniform(0, 30, 2)
        boxes.append(RoIBox(x0, y0, x0 + rng.uniform(4, 30), y0 + rng.uniform(4, 30)))
    start = time.perf_counter()
    for box in boxes:
        sra_extract(fmap, box, params, cfg)
    elapsed = time.perf_counter() - start
    return 0, {
        "grid": list(grid),
        "channels": channels,
        "parameter_count": parameter_count(cfg, channels),
        "multiply_adds_per_roi": est.per_roi,
        "multiply_adds_per_300_rois": est.per_300_rois,
        "breakdown": est.breakdown,
        "wall_ms_per_roi": elapsed / len(boxes) * 1e3,
        "note": (
            "analytic count covers this extractor only; end-to-end detector "
            "budgets also include the backbone and heads and are out of scope"
        ),
    }


# ---------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semroi", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="reports")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        if name == "ablate-sampler":
            p.add_argument("--mode", choices=("fixed", "dynamic"), default=None)
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        config = resolve_config(args.subcommand, args.config, args.overrides)
        if getattr(args, "mode", None):
            config["sampler.mode"] = args.mode
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "gradcheck":
            code, metrics = cmd_gradcheck(config, args.seed)
        elif args.subcommand == "oracles":
            code, metrics = cmd_oracles(config, args.seed)
        elif args.subcommand == "ablate-sampler":
            code, metrics = cmd_ablate_sampler(config, args.seed)
        elif args.subcommand == "ablate-descriptor":
            code, metrics = cmd_ablate_descriptor(config, args.seed)
        elif args.subcommand == "ablate-embedding":
            code, metrics = cmd_ablate_embedding(config, args.seed)
        elif args.subcommand == "train-toy":
            code, metrics = cmd_train_toy(config, args.seed, out_dir)
        elif args.subcommand == "invariance":
            code, metrics = cmd_invariance(config, args.seed)
        elif args.subcommand == "diversity":
            code, metrics = cmd_diversity(config, args.seed)
        else:
            code, metrics = cmd_bench(config, args.seed)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    payload = {
        "subcommand": args.subcommand,
        "seed": args.seed,
        "config": config,
        "metrics": metrics,
    }
    path = write_report(out_dir / f"{args.subcommand}.{args.format}", payload, args.format)
    status = "ok" if code == 0 else "FAILED"
    print(f"{args.subcommand}: {status} (report: {path})")
    if code != 0:
        _explain_failure(args.subcommand, metrics)
    return code


def _explain_failure(subcommand: str, metrics: dict) -> None:
    if subcommand == "gradcheck":
        print(f"  max_rel_err {metrics['max_rel_err']:.3e} over tolerance", file=sys.stderr)
    elif subcommand == "oracles":
        for entry in metrics["checks"]:
            if not entry["passed"]:
                print(f"  failing oracle: {entry['name']} (err {entry['max_err']:.3e})", file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
