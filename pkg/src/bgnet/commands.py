"""Implementations behind the CLI verbs. Each returns its result object so tests
and scripts can call them without going through argv."""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .attention import JOINT
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .model import BGNModel, predict
from .optim import AdamaxState
from .synth import (
    DataError,
    generate_split,
    load_dataset,
    make_header,
    object_label,
    scene_from_features,
    decode_tokens,
    to_batch,
    write_dataset,
)
from .training import EvalReport, build_report, evaluate, predict_records, soft_scores, train

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"


# ---------------------------------------------------------------------------
# generate


def cmd_generate(config_path, out_path, seed: int | None = None, stream: TextIO | None = None) -> dict[str, int]:
    cfg = load_config(config_path)
    seed = cfg.seed if seed is None else seed
    synth = cfg.synth_config()
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from exc
    train_records = generate_split(cfg.train_count, "train", seed, synth)
    val_records = generate_split(cfg.val_count, "val", seed, synth, exclude={r.key() for r in train_records})
    counts = {}
    for split, records, name in (("train", train_records, TRAIN_FILE), ("val", val_records, VAL_FILE)):
        try:
            write_dataset(records, out / name, make_header(split, len(records), synth, seed))
        except OSError as exc:
            raise DataError(f"cannot write {out / name}: {exc.strerror}") from exc
        counts[split] = len(records)
    print(json.dumps({"event": "generated", "out": str(out), **counts}), file=stream or sys.stdout)
    return counts


def load_splits(data_path) -> tuple[dict, list, list]:
    data = Path(data_path)
    header, train_records = load_dataset(data / TRAIN_FILE)
    val_header, val_records = load_dataset(data / VAL_FILE)
    for key in ("vocabulary", "answers", "D_raw", "n_max", "m"):
        if header[key] != val_header[key]:
            raise DataError(f"train and val disagree on {key}")
    return header, train_records, val_records


def _load_eval_split(data_path) -> tuple[dict, list]:
    data = Path(data_path)
    return load_dataset(data / VAL_FILE if data.is_dir() else data)


# ---------------------------------------------------------------------------
# train


def _check_data_shape(run: RunConfig, header: dict) -> None:
    if header["m"] != run.m or header["n_max"] != run.n:
        raise DataError(f"dataset has m={header['m']}, n={header['n_max']} but config has m={run.m}, n={run.n}")


def train_run(
    run: RunConfig,
    header: dict,
    train_records: Sequence,
    val_records: Sequence,
    variant: str,
    L: int,
    seed: int,
    out_checkpoint=None,
    resume: Checkpoint | None = None,
    stream: TextIO | None = None,
) -> Checkpoint:
    """Train one (variant, L, seed) cell, logging one JSON line per epoch.

    With ``out_checkpoint`` set, the checkpoint is rewritten after every
    epoch (so a later failure leaves the last good one in place) and the
    best-by-validation state is kept alongside as ``<name>.best``.
    """
    answers = header["answers"]
    if resume is not None:
        model = resume.model()
        state = resume.optimizer
        start, history = resume.epoch + 1, list(resume.history)
        seed = resume.seeds["model"]
        if resume.vocabulary != header["vocabulary"] or resume.answers != answers:
            raise DataError("checkpoint vocabulary does not match the dataset")
    else:
        _check_data_shape(run, header)
        mcfg = run.model_config(len(header["vocabulary"]), len(answers), header["D_raw"], variant=variant, L=L, seed=seed)
        model, state, start, history = BGNModel(mcfg), run.optimizer_state(), 1, []
    out = None if out_checkpoint is None else Path(out_checkpoint)
    best_path = None if out is None else out.with_name(out.name + ".best")
    log_path = None if out is None else out.with_name(out.name + ".log.jsonl")
    best = max((h["val_accuracy"] or 0.0 for h in history), default=-1.0)
    stream = stream or sys.stdout

    def snapshot(epoch: int, model: BGNModel, state: AdamaxState) -> Checkpoint:
        return Checkpoint.from_model(
            model,
            state,
            epoch,
            seeds={"model": seed, "data_order": seed, "dropout": seed},
            history=list(history),
            vocabulary=list(header["vocabulary"]),
            answers=list(answers),
            run_config=asdict(run),
        )

    def on_epoch(entry: dict, model: BGNModel, state: AdamaxState) -> None:
        nonlocal best
        history.append(entry)
        line = json.dumps({"event": "epoch", "variant": model.cfg.variant, "L": model.cfg.L, "seed": seed, **entry})
        print(line, file=stream, flush=True)
        if out is None:
            return
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
        ckpt = snapshot(entry["epoch"], model, state)
        save_checkpoint(ckpt, out)
        if entry["val_accuracy"] is not None and entry["val_accuracy"] > best:
            best = entry["val_accuracy"]
            save_checkpoint(ckpt, best_path)

    state, _ = train(
        model,
        train_records,
        val_records,
        answers,
        run.schedule(),
        run.epochs,
        run.batch_size,
        seed,
        state=state,
        start_epoch=start,
        on_epoch=on_epoch,
    )
    return snapshot(max(run.epochs, start - 1), model, state)


def cmd_train(
    config_path,
    data_path,
    out_checkpoint,
    variant: str | None = None,
    layers: int | None = None,
    seed: int | None = None,
    resume=None,
    stream: TextIO | None = None,
) -> Checkpoint:
    header, train_records, val_records = load_splits(data_path)
    run = load_config(config_path)
    resumed = None
    if resume is not None:
        resumed = load_checkpoint(resume)
        if resumed.run_config:
            run = RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in resumed.run_config.items()})
        variant, layers = resumed.config.variant, resumed.config.L
    variant = variant or run.variant
    layers = layers or run.L
    seed = run.seed if seed is None else seed
    return train_run(run, header, train_records, val_records, variant, layers, seed, out_checkpoint, resumed, stream)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(checkpoint_path, data_path, out_path=None, stream: TextIO | None = None) -> EvalReport:
    ckpt = load_checkpoint(checkpoint_path)
    header, records = _load_eval_split(data_path)
    if ckpt.vocabulary != header["vocabulary"] or ckpt.answers != header["answers"]:
        raise DataError("checkpoint vocabulary does not match the dataset")
    model = ckpt.model()
    preds, targets = predict_records(model, records, header["answers"])
    scores = soft_scores(preds, targets)
    report = build_report(scores, records, model.cfg.variant, model.cfg.L)
    out = Path(out_path) if out_path else Path(str(checkpoint_path) + ".eval.json")
    payload = {**report.to_dict(), "predictions": preds.tolist(), "scores": scores.tolist()}
    out.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    print(report.table(), file=stream or sys.stdout)
    return report


# ---------------------------------------------------------------------------
# ablate


def _subset_accuracy(report: EvalReport, hops: Sequence[int]) -> float:
    total = sum(report.per_hop.get(str(h), 0.0) * report.bucket_counts["hop"].get(str(h), 0) for h in hops)
    count = sum(report.bucket_counts["hop"].get(str(h), 0) for h in hops)
    return total / count if count else 0.0


def _ablate_cell(args) -> dict:
    run, header, train_records, val_records, variant, L, seed, out_dir = args
    out = Path(out_dir) / f"{variant}_L{L}_s{seed}.ckpt"
    ckpt = train_run(run, header, train_records, val_records, variant, L, seed, out, stream=open(os.devnull, "w"))
    report, _ = evaluate(ckpt.model(), val_records, header["answers"])
    return {
        "variant": variant,
        "L": L,
        "seed": seed,
        "report": report.to_dict(),
        "hops_2_3": _subset_accuracy(report, (2, 3)),
        "final_loss": ckpt.history[-1]["loss"] if ckpt.history else None,
    }


def summarize_ablation(cells: list[dict]) -> dict:
    """Seed means per (variant, L) and the directional comparisons."""
    grid: dict[str, dict] = {}
    for c in cells:
        key = f"{c['variant']}_L{c['L']}"
        grid.setdefault(key, {"variant": c["variant"], "L": c["L"], "seeds": {}})
        grid[key]["seeds"][str(c["seed"])] = {
            "overall": c["report"]["overall"],
            "hops_2_3": c["hops_2_3"],
            "per_hop": c["report"]["per_hop"],
        }
    for entry in grid.values():
        seeds = entry["seeds"].values()
        entry["overall"] = float(np.mean([s["overall"] for s in seeds]))
        entry["hops_2_3"] = float(np.mean([s["hops_2_3"] for s in seeds]))
        hops = sorted({h for s in seeds for h in s["per_hop"]})
        entry["per_hop"] = {h: float(np.mean([s["per_hop"].get(h, 0.0) for s in seeds])) for h in hops}

    def compare(a: str, b: str, metric: str, margin: float = 0.0) -> dict | None:
        if a not in grid or b not in grid:
            return None
        per_seed = {
            s: grid[a]["seeds"][s][metric] - grid[b]["seeds"][s][metric]
            for s in grid[a]["seeds"]
            if s in grid[b]["seeds"]
        }
        mean = grid[a][metric] - grid[b][metric]
        return {
            "lhs": a,
            "rhs": b,
            "metric": metric,
            "margin": margin,
            "mean_delta": mean,
            "per_seed_delta": per_seed,
            "failing_seeds": sorted(s for s, d in per_seed.items() if d < margin),
            "holds": mean >= margin,
        }

    deltas = {}
    if "bgn_L3" in grid and "bgn_L1" in grid:
        deltas["bgn_L3_minus_L1_per_hop"] = {
            h: grid["bgn_L3"]["per_hop"].get(h, 0.0) - grid["bgn_L1"]["per_hop"].get(h, 0.0)
            for h in grid["bgn_L1"]["per_hop"]
        }
    return {
        "cells": grid,
        "deltas": deltas,
        "checks": {
            "bgn_L3_vs_L1_hops_2_3": compare("bgn_L3", "bgn_L1", "hops_2_3", 0.02),
            "bgn_L1_vs_ban_L1_overall": compare("bgn_L1", "ban_L1", "overall"),
            "bgn_L2_vs_sdp_L2_overall": compare("bgn_L2", "sdp_L2", "overall"),
        },
    }


def ablation_table(summary: dict) -> str:
    lines = ["| cell | overall | 1-hop | 2-hop | 3-hop | 2+3-hop |", "|---|---|---|---|---|---|"]
    for key, entry in sorted(summary["cells"].items(), key=lambda kv: (kv[1]["variant"], kv[1]["L"])):
        ph = entry["per_hop"]
        lines.append(
            f"| {key} | {entry['overall']:.4f} | {ph.get('1', 0):.4f} | {ph.get('2', 0):.4f} "
            f"| {ph.get('3', 0):.4f} | {entry['hops_2_3']:.4f} |"
        )
    lines.append("")
    for name, check in summary["checks"].items():
        if check is None:
            continue
        status = "holds" if check["holds"] else "FAILS"
        seeds = ", ".join(f"s{s}: {d:+.4f}" for s, d in sorted(check["per_seed_delta"].items()))
        lines.append(f"- {name}: mean delta {check['mean_delta']:+.4f} (need >= {check['margin']:+.2f}) {status}; {seeds}")
        if check["failing_seeds"]:
            lines.append(f"  direction fails for seeds {', '.join(check['failing_seeds'])}")
    for h, d in sorted(summary["deltas"].get("bgn_L3_minus_L1_per_hop", {}).items()):
        lines.append(f"- bgn L3 - L1, hop {h}: {d:+.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(
    config_path,
    data_path,
    out_dir,
    cells: Sequence[tuple[str, int]] | None = None,
    seeds: Sequence[int] | None = None,
    stream: TextIO | None = None,
) -> dict:
    run = load_config(config_path)
    header, train_records, val_records = load_splits(data_path)
    _check_data_shape(run, header)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cells is None:
        cells = [(v, L) for v in run.ablation_variants for L in run.ablation_layers]
    seeds = list(run.seeds if seeds is None else seeds)
    jobs = [(run, header, train_records, val_records, v, L, s, out) for s in seeds for v, L in cells]
    workers = max(1, int(os.environ.get("BGN_NUM_WORKERS", "1")))
    stream = stream or sys.stdout
    results = []
    if workers == 1:
        for job in jobs:
            results.append(_ablate_cell(job))
            print(json.dumps({"event": "cell", **{k: results[-1][k] for k in ("variant", "L", "seed", "hops_2_3")},
                              "overall": results[-1]["report"]["overall"]}), file=stream, flush=True)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    summary = summarize_ablation(results)
    summary["raw"] = results
    (out / "ablation.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    table = ablation_table(summary)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    print(table, file=stream)
    return summary


# ---------------------------------------------------------------------------
# dump-attention


def _normalization_ok(weights: np.ndarray, mode: str, row_mask, col_mask, tol: float = 1e-9) -> bool:
    mask = np.outer(row_mask, col_mask)
    if np.any(weights[~mask] != 0.0):
        return False
    if mode == JOINT:
        return not mask.any() or abs(weights.sum() - 1.0) <= tol
    rows = weights.sum(axis=1)
    valid = mask.any(axis=1)
    return bool(np.all(np.abs(rows[valid] - 1.0) <= tol))


def cmd_dump_attention(checkpoint_path, data_path, record_index: int, out_path) -> dict:
    ckpt = load_checkpoint(checkpoint_path)
    header, records = _load_eval_split(data_path)
    if ckpt.vocabulary != header["vocabulary"] or ckpt.answers != header["answers"]:
        raise DataError("checkpoint vocabulary does not match the dataset")
    if not 0 <= record_index < len(records):
        raise IndexError(f"record index {record_index} out of range [0, {len(records)})")
    record = records[record_index]
    model = ckpt.model()
    batch = to_batch([record], header["answers"])
    scores, trace = model.forward(batch, train=False)
    pred = int(predict(scores.data[0]))
    scene = scene_from_features(record.features, record.v_mask)
    layers = []
    for i, layer in enumerate(trace.layers):
        group = {"layer": i + 1}
        for graph in ("image", "question"):
            amap = layer.get(graph)
            if amap is None:
                continue
            per_glimpse = [w.data[0] for w in amap.weights]
            row_mask, col_mask = amap.row_mask[0], amap.col_mask[0]
            group[graph] = {
                "mode": amap.mode,
                "glimpses": [g.tolist() for g in per_glimpse],
                "summed": np.sum(per_glimpse, axis=0).tolist(),
                "normalized": all(_normalization_ok(g, amap.mode, row_mask, col_mask) for g in per_glimpse),
            }
        layers.append(group)
    payload = {
        "record_index": record_index,
        "variant": model.cfg.variant,
        "L": model.cfg.L,
        "tokens": [header["vocabulary"][t] for t in record.token_ids],
        "question": " ".join(decode_tokens(record.token_ids)),
        "objects": [object_label(o) for o in scene.objects],
        "prediction": header["answers"][pred],
        "target": record.answer,
        "hops": record.hops,
        "layers": layers,
    }
    Path(out_path).write_text(json.dumps(payload), encoding="utf-8")
    return payload
