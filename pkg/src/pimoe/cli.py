"""Command-line surface: synth, ingest, train, predict, evaluate, classify, analyze.

Config documents are JSON, validated against a schema that rejects unknown
keys before any work starts. Every command is deterministic given its
config and seed; wall-clock measurements are isolated in a timing.json so
rerunning a command overwrites its other outputs bit-identically.

Exit codes: 0 success, 2 config error, 3 data error, 4 training diverged.
The PIMOE_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import dataio, evalkit, plots, synthgen
from . import trainer as trainer_mod
from .core import Dataset, dataset_summary, partition_dataset
from .errors import (
    ConfigError,
    InvalidArgument,
    PimoeError,
    TrainingDiverged,
)
from .fornn import predict_trajectory
from .preprocess import FixedStart, RandomSocStart, build_inference_sample, clean_cycles
from .trainer import (
    PreprocessConfig,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATA_ERRORS = (
    "IngestError",
    "InvalidDataset",
    "InsufficientData",
    "HorizonTooLong",
    "OutOfRange",
    "MalformedCycle",
    "InsufficientRelaxation",
    "ModelContractError",
    "ChecksumError",
    "IncompatibleCheckpoint",
    "CalibrationAmbiguous",
    "Underdetermined",
)

VARIANT_ALIASES = {
    "standard": "standard",
    "pimoe": "standard",
    "pimoe-linear": "ablate_amdp_linear",
    "pimoe-wofo": "ablate_fornn_plain_rnn",
    "history": "history_mode",
}


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

_V_START_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["policy", "voltage_v"],
            "properties": {
                "policy": {"const": "fixed"},
                "voltage_v": {"type": "number"},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["policy"],
            "properties": {
                "policy": {"const": "random_soc"},
                "seed": {"type": "integer"},
                "soc_range": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
            },
        },
    ]
}

_PREP_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "v_start": _V_START_SCHEMA,
        "relax_window_min": {"type": "number", "exclusiveMinimum": 0},
        "relax_points": {"type": "integer", "minimum": 2},
        "current_tol": {"type": "number", "exclusiveMinimum": 0},
    },
}

_TRAIN_FIELDS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "horizon": {"type": "integer", "minimum": 1},
        "n_experts": {"type": "integer", "minimum": 1},
        "top_k": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0, "maximum": 1e-4},
        "batch_size": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "cv_eps": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 0},
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "feature_mode": {"enum": ["full12", "charge_only6"]},
        "variant": {"enum": list(VARIANT_ALIASES)},
        "hidden_dim": {"type": "integer", "minimum": 1},
        "n_charge_segments": {"type": "integer", "minimum": 2},
        "history_window": {"type": "integer", "minimum": 1},
        "noise_in_training": {"type": "boolean"},
        "double_softmax_literal": {"type": "boolean"},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "data_dir", "out_dir"],
    "properties": {
        "seed": {"type": "integer"},
        "data_dir": {"type": "string"},
        "out_dir": {"type": "string"},
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "train": _TRAIN_FIELDS_SCHEMA,
        "prep": _PREP_SCHEMA,
    },
}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "out_dir"],
    "properties": {
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "profile": {"enum": ["ul", "tpsl-random", "tpsl-fixed"]},
        "n_batteries": {"type": "integer", "minimum": 1},
        "max_cycles": {"type": "integer", "minimum": 3},
        "cell_sigma": {"type": "number", "minimum": 0},
        "capacity_noise_mah": {"type": "number", "minimum": 0},
        "voltage_noise_v": {"type": "number", "minimum": 0},
        "conditions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "items": {"type": "number"},
                "minItems": 3,
                "maxItems": 3,
            },
        },
    },
}


def _load_config(path, schema) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config failed validation: {e.message} (at {list(e.absolute_path)})")
    return doc


def _env_seed() -> int | None:
    raw = os.environ.get("PIMOE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"PIMOE_SEED must be an integer, got {raw!r}") from None


def _v_start_from_dict(doc: dict, default_seed: int):
    if doc["policy"] == "fixed":
        return FixedStart(doc["voltage_v"])
    return RandomSocStart(
        seed=doc.get("seed", default_seed),
        soc_range=tuple(doc.get("soc_range", (0.10, 0.50))),
    )


def _prep_from_config(doc: dict, seed: int) -> PreprocessConfig:
    kwargs = {}
    if "v_start" in doc:
        kwargs["v_start"] = _v_start_from_dict(doc["v_start"], seed)
    for key in ("relax_window_min", "relax_points", "current_tol"):
        if key in doc:
            kwargs[key] = doc[key]
    return PreprocessConfig(**kwargs)


def _write_json(path, payload) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _load_config(args.config, SYNTH_SCHEMA)
    seed = _env_seed()
    if seed is None:
        seed = doc["seed"]
    profile = doc.get("profile", "ul")
    common = {
        k: doc[k]
        for k in ("n_batteries", "max_cycles", "cell_sigma", "capacity_noise_mah", "voltage_noise_v")
        if k in doc
    }
    if profile == "ul":
        conditions = tuple(tuple(c) for c in doc.get("conditions", [[0.5, 1.0, 25.0], [1.0, 1.0, 25.0]]))
        cfg = synthgen.SynthConfig(
            seed=seed,
            schedule=synthgen.ConditionSchedule(mode="fixed", conditions=conditions),
            **common,
        )
    else:
        cfg = synthgen.tpsl_config(
            seed=seed, random_phase2=(profile == "tpsl-random"), **common
        )
    fleet = synthgen.gen_fleet(cfg)
    out = Path(doc["out_dir"] if args.out is None else args.out)
    paths = dataio.write_dataset(fleet.dataset, out)
    dataio.write_stage_labels(fleet.stage_labels, out / "stages.csv")
    for row in dataset_summary(fleet.dataset):
        print(
            f"{row.condition_tag}: {row.n_batteries} batteries, "
            f"{row.min_cycles}-{row.max_cycles} cycles, "
            f"capacity {row.min_capacity_mah:.0f}-{row.max_capacity_mah:.0f} mAh"
        )
    print(f"wrote {paths['cycles']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    ds = dataio.read_dataset(args.cycles, args.summary, args.meta)
    out = Path(args.out)
    cleaned = []
    removal_manifest = {}
    for b in ds.batteries:
        result = clean_cycles(b)
        cleaned.append(result.series)
        removal_manifest[b.battery_id] = [
            {"cycle": r.cycle_index, "rule": r.rule, "detail": r.detail}
            for r in result.removed
        ]
    clean_ds = Dataset(name=ds.name, batteries=cleaned, condition_tag=ds.condition_tag)
    dataio.write_dataset(clean_ds, out)
    _write_json(
        out / "manifest.json",
        {
            "n_batteries": len(cleaned),
            "n_cycles": sum(len(b.cycles) for b in cleaned),
            "removed": removal_manifest,
        },
    )
    n_removed = sum(len(v) for v in removal_manifest.values())
    print(f"archived {len(cleaned)} batteries to {out} ({n_removed} cycles removed)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = _load_config(args.config, TRAIN_SCHEMA)
    seed = _env_seed()
    if seed is None:
        seed = doc["seed"]
    train_fields = dict(doc.get("train", {}))
    if "variant" in train_fields:
        train_fields["variant"] = VARIANT_ALIASES[train_fields["variant"]]
    if args.variant is not None:
        train_fields["variant"] = VARIANT_ALIASES[args.variant]
    if args.horizon is not None:
        train_fields["horizon"] = args.horizon
    try:
        cfg = TrainConfig(seed=seed, **train_fields)
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from None

    split_doc = doc.get("split", {})
    fraction = args.fraction if args.fraction is not None else split_doc.get("fraction", 1.0)
    data_dir = args.data if args.data is not None else doc["data_dir"]
    out = Path(args.out if args.out is not None else doc["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    ds = dataio.read_dataset_dir(data_dir)
    split = partition_dataset(
        ds,
        fraction=fraction,
        seed=seed,
        val_fraction=split_doc.get("val_fraction", 0.2),
        test_fraction=split_doc.get("test_fraction", 0.25),
    )
    prep = _prep_from_config(doc.get("prep", {}), seed)

    t0 = time.perf_counter()
    model = fit(ds, split, cfg, prep)
    elapsed_s = time.perf_counter() - t0

    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, model, prep=prep)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in model.training_history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_json(
        out / "split.json",
        {
            "train_ids": list(split.train_ids),
            "val_ids": list(split.val_ids),
            "test_ids": list(split.test_ids),
            "train_fraction": split.train_fraction,
        },
    )
    _write_json(out / "timing.json", {"train_seconds": elapsed_s})
    plots.plot_training_curves(model.training_history, out / "training_curves.png")
    n_epochs = sum(1 for h in model.training_history if "epoch" in h)
    print(
        f"trained {cfg.variant} model for {n_epochs} epochs "
        f"({len(split.train_ids)} train / {len(split.val_ids)} val / "
        f"{len(split.test_ids)} test batteries) -> {ckpt_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _model_prep(ckpt) -> PreprocessConfig:
    if ckpt.prep is None:
        return PreprocessConfig()
    return trainer_mod.prep_from_dict(ckpt.prep)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    prep = _model_prep(ckpt)
    ds = dataio.read_dataset_dir(args.data)
    horizon = args.horizon or model.spec.horizon
    conditions = dataio.read_conditions_file(args.conditions) if args.conditions else None
    if conditions is not None and conditions.shape[0] < horizon:
        raise InvalidArgument(
            f"conditions file has {conditions.shape[0]} steps, horizon needs {horizon}"
        )
    ids = args.battery or ds.battery_ids()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    fig_records = []
    timing: dict[str, list[float]] = {}
    hist_window = model.spec.history_window if model.spec.variant == "history_mode" else 0
    for bid in ids:
        b = clean_cycles(ds.get(bid), current_tol=prep.current_tol).series
        anchor = args.anchor_cycle or len(b.cycles)
        sample = build_inference_sample(
            b,
            anchor,
            horizon,
            prep.v_start,
            conditions=conditions,
            n_segments=model.config.n_charge_segments,
            relax_window_min=prep.relax_window_min,
            relax_points=prep.relax_points,
            feature_mode=model.config.feature_mode,
            history_window=hist_window,
        )
        repeats = max(1, args.timing_repeats)
        times = []
        traj = None
        for _ in range(repeats):
            traj = predict_trajectory(sample, model, horizon=horizon)
            times.append(traj.inference_ms)
        timing[bid] = times
        pred_mah = traj.values_mah
        actual = sample.target_mah[:horizon]
        future_cycles = anchor + 1 + np.arange(horizon)
        for j in range(horizon):
            act = actual[j] if j < len(actual) and np.isfinite(actual[j]) else ""
            rows.append([bid, anchor, int(future_cycles[j]), pred_mah[j], act])
        fig_records.append(
            {
                "battery_id": bid,
                "future_cycle": future_cycles,
                "predicted": pred_mah,
                "actual": actual[np.isfinite(actual)] if len(actual) else None,
            }
        )

    with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["battery_id", "anchor_cycle", "future_cycle", "predicted_mah", "actual_mah"])
        w.writerows(rows)
    all_times = [t for ts in timing.values() for t in ts]
    _write_json(
        out / "timing.json",
        {
            "per_battery_ms": timing,
            "median_ms": float(np.median(all_times)),
            "mean_ms": float(np.mean(all_times)),
            "repeats": max(1, args.timing_repeats),
        },
    )
    plots.plot_trajectories(fig_records, out / "trajectories.png")
    print(
        f"predicted {len(ids)} batteries over {horizon} cycles "
        f"(median inference {float(np.median(all_times)):.2f} ms) -> {out / 'trajectories.csv'}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _split_ids(args, ds: Dataset) -> list[str]:
    if args.split:
        doc = json.loads(Path(args.split).read_text(encoding="utf-8"))
        return list(doc["test_ids"])
    return ds.battery_ids()


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    prep = _model_prep(ckpt)
    ds = dataio.read_dataset_dir(args.data)
    ids = _split_ids(args, ds)
    report = evalkit.evaluate_model(model, ds, ids, prep=prep, horizon=args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    payload = report.to_json_dict()
    latency = payload.pop("latency")
    per_battery_ms = {r.battery_id: r.mean_inference_ms for r in report.per_battery}
    for row in payload["per_battery"]:
        row.pop("mean_inference_ms", None)
    _write_json(out / "report.json", payload)
    _write_json(out / "timing.json", {"latency": latency, "per_battery_ms": per_battery_ms})

    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["battery_id", "condition_tag", "n_samples", "rmse", "mape_percent", "r2", "mae"])
        for r in report.per_battery:
            w.writerow(
                [r.battery_id, r.condition_tag, r.n_samples, r.rmse, r.mape_percent, r.r2, r.mae]
            )
    plots.plot_condition_metrics(
        [c.condition_tag for c in report.per_condition],
        [c.mape_percent for c in report.per_condition],
        out / "condition_metrics.png",
    )
    overall = report.overall()
    print(
        f"evaluated {len(report.per_battery)} batteries: "
        f"MAPE {overall['mape_percent']:.3f}%, RMSE {overall['rmse']:.3f} -> {out / 'report.json'}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------


def _anchor_for_soh(b, target_soh: float, min_anchor: int, tol: float = 0.02) -> int | None:
    soh = b.soh()
    if len(soh) == 0:
        return None
    idx = int(np.argmin(np.abs(soh - target_soh)))
    anchor = idx + 1
    if abs(soh[idx] - target_soh) > tol or anchor < min_anchor:
        return None
    return anchor


def cmd_classify(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    prep = _model_prep(ckpt)
    ds = dataio.read_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    hist_window = model.spec.history_window if model.spec.variant == "history_mode" else 0
    min_anchor = max(1, hist_window)
    cleaned = {
        b.battery_id: clean_cycles(b, current_tol=prep.current_tol).series
        for b in ds.batteries
    }

    # calibration: every reachable anchor, labeled by its own SOH
    calib_samples = []
    calib_labels = []
    per_bucket_samples: dict[int, list[tuple[str, object]]] = {95: [], 85: [], 75: []}
    for bid in sorted(cleaned):
        b = cleaned[bid]
        for anchor in range(min_anchor, len(b.cycles) + 1):
            soh = b.cycles[anchor - 1].max_discharge_capacity_mah / b.nominal_capacity_mah
            sample = build_inference_sample(
                b, anchor, 1, prep.v_start,
                n_segments=model.config.n_charge_segments,
                relax_window_min=prep.relax_window_min,
                relax_points=prep.relax_points,
                feature_mode=model.config.feature_mode,
                history_window=hist_window,
            )
            calib_samples.append(sample)
            calib_labels.append(evalkit.stage_label_for_soh(soh))
        for bucket in per_bucket_samples:
            anchor = _anchor_for_soh(b, bucket / 100.0, min_anchor)
            if anchor is not None:
                sample = build_inference_sample(
                    b, anchor, 1, prep.v_start,
                    n_segments=model.config.n_charge_segments,
                    relax_window_min=prep.relax_window_min,
                    relax_points=prep.relax_points,
                    feature_mode=model.config.feature_mode,
                    history_window=hist_window,
                )
                per_bucket_samples[bucket].append((bid, sample))

    stage_map = evalkit.calibrate_expert_stage_map(
        model, calib_samples, calib_labels, strict=False
    )
    if stage_map.ambiguous:
        print("warning: stage calibration ambiguous (two stages share an expert)", file=sys.stderr)

    label_rows = []
    labels_by_bucket: dict[int, list[str]] = {95: [], 85: [], 75: []}
    for bucket in sorted(per_bucket_samples, reverse=True):
        pairs = per_bucket_samples[bucket]
        if not pairs:
            continue
        weights, _ = trainer_mod.gate_matrix(model, [s for _, s in pairs])
        for (bid, _), w in zip(pairs, weights):
            decision = evalkit.classify_battery(w, stage_map)
            labels_by_bucket[bucket].append(decision.label)
            label_rows.append(
                [bid, bucket, decision.label, decision.dominant_expert]
                + [f"{x:.6f}" for x in decision.weight_vector]
            )

    confidence = evalkit.confidence_table(labels_by_bucket)
    n_experts = model.spec.router.n_experts
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["battery_id", "soh_bucket", "label", "dominant_expert"]
            + [f"w{j + 1}" for j in range(n_experts)]
        )
        w.writerows(label_rows)
    with open(out / "confidence.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["soh_percent", "total", "excellent", "qualified", "scrap", "confidence_percent"])
        for row in confidence:
            w.writerow(
                [
                    row.soh_percent, row.total, row.n_excellent, row.n_qualified, row.n_scrap,
                    "" if row.confidence_percent is None else f"{row.confidence_percent:.1f}",
                ]
            )
    _write_json(
        out / "stage_map.json",
        {"stage_to_expert": stage_map.stage_to_expert, "ambiguous": stage_map.ambiguous},
    )
    if confidence:
        plots.plot_classification_counts(confidence, out / "classification_counts.png")
    for row in confidence:
        conf = "n/a" if row.confidence_percent is None else f"{row.confidence_percent:.1f}%"
        print(
            f"SOH {row.soh_percent}%: {row.total} batteries -> "
            f"{row.n_excellent} Excellent / {row.n_qualified} Qualified / "
            f"{row.n_scrap} Scrap (confidence {conf})"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    prep = _model_prep(ckpt)
    ds = dataio.read_dataset_dir(args.data)
    ids = _split_ids(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _env_seed()
    if seed is None:
        seed = args.seed

    by_battery = trainer_mod.prepare_samples(ds, ids, model.config, prep)
    samples = [s for bid in ids for s in by_battery[bid]]
    if len(samples) > args.max_samples:
        stride = int(np.ceil(len(samples) / args.max_samples))
        samples = samples[::stride]
    # stage by the SOH right at the prediction point (next-cycle capacity)
    stages = [
        evalkit.stage_label_for_soh(s.target_mah[0] / s.nominal_capacity_mah)
        for s in samples
    ]
    sample_ids = [f"{bid}:{cyc}" for bid, cyc in (s.origin for s in samples)]

    weights, _ = trainer_mod.gate_matrix(model, samples)
    embeddings = trainer_mod.export_trend_embeddings(model, samples)

    n_experts = weights.shape[1]
    with open(out / "gate_weights.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "stage"] + [f"w{j + 1}" for j in range(n_experts)])
        for sid, stage, row in zip(sample_ids, stages, weights):
            w.writerow([sid, stage] + [f"{x:.10g}" for x in row])
    with open(out / "trend_embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"t{j + 1}" for j in range(embeddings.shape[1])])
        for sid, row in zip(sample_ids, embeddings):
            w.writerow([sid] + [f"{x:.10g}" for x in row])

    tsne = evalkit.tsne_embed(
        weights, perplexity=args.perplexity, iters=args.iters, seed=seed
    )
    with open(out / "tsne.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "x", "y", "stage"])
        for sid, point, stage in zip(sample_ids, tsne.embedding, stages):
            w.writerow([sid, f"{point[0]:.10g}", f"{point[1]:.10g}", stage])
    _write_json(
        out / "tsne_meta.json",
        {
            "final_kl": tsne.final_kl,
            "initial_kl": tsne.kl_trace[0],
            "perplexity": tsne.perplexity_used,
            "iters": args.iters,
            "n_samples": len(samples),
        },
    )

    plots.plot_gate_heatmap(weights, out / "gate_heatmap.png")
    plots.plot_tsne(tsne.embedding, stages, out / "tsne.png")
    plots.plot_trend_embeddings(embeddings, out / "trend_embeddings.png")
    print(
        f"analyzed {len(samples)} samples: KL {tsne.kl_trace[0]:.3f} -> {tsne.final_kl:.3f} "
        f"-> {out / 'tsne.csv'}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pimoe",
        description="Battery degradation trajectory forecasting with a physics-informed expert mixture.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic fleet")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None, help="override out_dir from the config")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ingest", help="validate, clean, and archive raw CSVs")
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--summary", required=True)
    sp.add_argument("--meta", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train a model from a dataset directory")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--fraction", type=float, default=None, help="train-pool reduction fraction")
    sp.add_argument("--variant", choices=sorted(VARIANT_ALIASES), default=None)
    sp.add_argument("--horizon", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="forecast trajectories from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--battery", action="append", default=None)
    sp.add_argument("--anchor-cycle", type=int, default=None)
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--conditions", default=None, help="future-condition schedule CSV")
    sp.add_argument("--timing-repeats", type=int, default=1)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="metric report over a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default=None, help="split.json; evaluates its test_ids")
    sp.add_argument("--horizon", type=int, default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("classify", help="three-path reuse classification")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("analyze", help="gate weights, trend embeddings, t-SNE")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--perplexity", type=float, default=30.0)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--max-samples", type=int, default=1000)
    sp.set_defaults(func=cmd_analyze)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except PimoeError as e:
        if type(e).__name__ in DATA_ERRORS:
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        raise
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except KeyError as e:
        print(f"data error: unknown battery {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
