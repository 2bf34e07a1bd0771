"""Command implementations behind the CLI.

Each ``cmd_*`` function takes plain arguments, writes its files and returns a
JSON-serialisable summary, so tests can drive them without a subprocess.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig, coerce, format_config, load_config
from .data import Vocab, read_dataset, write_dataset
from .gridworld import CATEGORIES, DatasetSpec, category_histogram, generate_dataset
from .mac import ConfigError, MacConfig
from .training import baselines, evaluate, load_network, train

log = logging.getLogger(__name__)

OUT_ENV = "MACNET_OUT_DIR"


def resolve_out(path) -> Path:
    """Output directory from the flag, falling back to ``$MACNET_OUT_DIR``."""
    chosen = path if path is not None else os.environ.get(OUT_ENV)
    if chosen is None:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
    out = Path(chosen)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


# ---------------------------------------------------------------- generate

def cmd_generate(seed: int, train_n: int, val_n: int, out_dir=None, grid: int = 5,
                 objects: tuple[int, int] = (3, 8), max_hops: int = 2, paraphrase: float = 0.0) -> dict:
    if train_n < 1 or val_n < 1:
        raise ConfigError("--train-n and --val-n must be >= 1")
    out = resolve_out(out_dir)
    lo, hi = objects
    spec = dict(grid_size=grid, min_objects=lo, max_objects=hi, max_hops=max_hops, paraphrase_prob=paraphrase)
    train_set = generate_dataset(DatasetSpec(n=train_n, **spec), seed=seed)
    # the validation stream is a different seed so no instance is shared by construction
    val_set = generate_dataset(DatasetSpec(n=val_n, **spec), seed=seed + 1)
    write_dataset(train_set, out / "train.jsonl")
    write_dataset(val_set, out / "val.jsonl")
    Vocab.default(grid).save(out / "vocab.json")
    summary = {
        "train": str(out / "train.jsonl"),
        "val": str(out / "val.jsonl"),
        "vocab": str(out / "vocab.json"),
        "histogram": {"train": category_histogram(train_set), "val": category_histogram(val_set)},
        "generator": {"seed": seed, **spec},
    }
    _dump(out / "generate.json", summary)
    return summary


# ---------------------------------------------------------------- train / eval

def load_data(data_dir) -> tuple[list, list, Vocab]:
    data_dir = Path(data_dir)
    vocab_path = data_dir / "vocab.json"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else Vocab.default()
    return read_dataset(data_dir / "train.jsonl"), read_dataset(data_dir / "val.jsonl"), vocab


def cmd_train(data_dir, out=None, seed: int = 0, config_path=None, overrides: dict | None = None,
              run_cfg: RunConfig | None = None) -> dict:
    cfg = run_cfg if run_cfg is not None else load_config(config_path, overrides)
    out = resolve_out(out)
    train_set, val_set, vocab = load_data(data_dir)
    if train_set and train_set[0].scene.grid_size != cfg.model.grid_size:
        raise ConfigError(f"config grid_size {cfg.model.grid_size} does not match the data")
    (out / "config.txt").write_text(format_config(cfg))
    report = train(cfg, train_set, val_set, vocab, seed=seed, out_dir=out)
    summary = report.to_dict()
    summary.pop("step_losses")
    summary["checkpoint"] = str(out / "best.ckpt")
    summary["baselines"] = baselines(val_set, len(vocab.answers))
    return summary


def cmd_eval(checkpoint, data, use_ema: bool = True, predictions_out=None) -> dict:
    net, vocab, _ = load_network(checkpoint, use_ema)
    instances = read_dataset(data)
    res = evaluate(net, instances, vocab)
    summary = {
        "checkpoint": str(checkpoint),
        "data": str(data),
        "source": net.source,
        "n": len(instances),
        **res.to_dict(),
        "baselines": baselines(instances, len(vocab.answers)),
    }
    if predictions_out is not None:
        _dump(Path(predictions_out), res.predictions)
    return summary


# ---------------------------------------------------------------- ablate

def parse_grid_spec(spec) -> dict[str, list]:
    """``"p=1,2,4; control_variant=none,word_attention"`` or a JSON file/object of value lists."""
    if isinstance(spec, dict):
        raw = spec
    elif Path(str(spec)).is_file():
        raw = json.loads(Path(spec).read_text())
    else:
        raw = {}
        for part in str(spec).split(";"):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(f"grid spec entry {part!r} is not field=v1,v2")
            key, values = part.split("=", 1)
            raw[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    types = {f.name: f.type for f in fields(MacConfig)}
    grid = {}
    for key, values in raw.items():
        if key not in types:
            raise ConfigError(f"unknown MacConfig field {key!r} in grid spec")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid spec {key!r} needs a non-empty list of values")
        grid[key] = [coerce(v, types[key], key) for v in values]
    return grid


def variant_name(assignment: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in assignment.items()) or "default"


def cmd_ablate(grid_spec, data_dir, out=None, seed: int = 0, config_path=None,
               overrides: dict | None = None) -> dict:
    grid = parse_grid_spec(grid_spec)
    base = load_config(config_path, overrides)
    out = resolve_out(out)
    train_set, val_set, vocab = load_data(data_dir)
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        assignment = dict(zip(keys, values))
        name = variant_name(assignment)
        cfg = base.with_overrides(assignment)
        log.info("ablation variant %s", name)
        report = train(cfg, train_set, val_set, vocab, seed=seed, out_dir=out / name)
        best = report.best_epoch
        rows.append({
            "variant": name,
            "assignment": assignment,
            "best_accuracy": report.best_accuracy,
            "best_epoch": best,
            "relational_accuracy": report.val_relational[best] if best >= 0 else None,
            "per_category": report.val_per_category[best] if best >= 0 else None,
            "stopping_epoch": report.stopping_epoch,
            "wall_time": report.wall_time,
        })
    result = {"seed": seed, "grid": grid, "baselines": baselines(val_set, len(vocab.answers)), "rows": rows}
    _dump(out / "ablation.json", result)
    (out / "ablation.txt").write_text(format_table(rows))
    return result


def format_table(rows: list[dict]) -> str:
    cats = list(CATEGORIES)
    header = ["variant", "overall", "relational", *cats]
    fmt = lambda x: "-" if x is None else f"{100 * x:.1f}"
    lines = [header]
    for r in rows:
        per = r["per_category"] or {}
        lines.append([r["variant"], fmt(r["best_accuracy"]), fmt(r["relational_accuracy"]),
                      *(fmt(per.get(c)) for c in cats)])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    text = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
    return "\n".join(text) + "\n"


# ---------------------------------------------------------------- dump-attention

def heat_grid(rv: np.ndarray) -> list[str]:
    """ASCII shading of an H x W attention map, darkest = most attended."""
    ramp = " .:-=+*#%@"
    top = float(rv.max()) or 1.0
    return ["".join(ramp[min(len(ramp) - 1, int(v / top * (len(ramp) - 1) + 0.5))] for v in row) for row in rv]


def cmd_dump_attention(checkpoint, data, instance: int, out=None, use_ema: bool = True) -> dict:
    net, vocab, _ = load_network(checkpoint, use_ema)
    instances = read_dataset(data)
    if not 0 <= instance < len(instances):
        raise IndexError(f"instance {instance} outside 0..{len(instances) - 1}")
    inst = instances[instance]
    tokens = np.array([vocab.encode(inst.tokens)])
    logits, trace = net(tokens, [inst.scene], record=True)
    if len(trace.rv) != net.cfg.p:
        raise RuntimeError(f"trace has {len(trace.rv)} steps, config says {net.cfg.p}")
    probs = np.exp(logits.data[0] - logits.data[0].max())
    probs /= probs.sum()
    steps = []
    for i in range(net.cfg.p):
        cv = None if trace.cv[i] is None else trace.cv[i][0]
        steps.append({
            "step": i + 1,
            "cv": None if cv is None else cv.tolist(),
            "top_words": [] if cv is None else [[inst.tokens[s], float(cv[s])] for s in np.argsort(-cv, kind="stable")[:3]],
            "rv": trace.rv[i][0].tolist(),
            "gate": None if trace.gate[i] is None else float(trace.gate[i][0]),
            "sa": None if trace.sa[i] is None else trace.sa[i][0].tolist(),
        })
    dump = {
        "instance": instance,
        "tokens": inst.tokens,
        "answer": inst.answer,
        "predicted": vocab.answers[int(np.argmax(probs))],
        "confidence": float(probs.max()),
        "param_source": trace.param_source,
        "objects": [o.to_dict() for o in inst.scene.objects],
        "steps": steps,
    }
    text = render_trace(dump)
    if out is not None or os.environ.get(OUT_ENV):
        folder = resolve_out(out)
        _dump(folder / f"attention_{instance}.json", dump)
        (folder / f"attention_{instance}.txt").write_text(text)
    dump["text"] = text
    return dump


def render_trace(dump: dict) -> str:
    lines = [" ".join(dump["tokens"]), f"answer: {dump['answer']}  predicted: {dump['predicted']}"
             f" ({dump['confidence']:.2f}, {dump['param_source']} weights)"]
    for step in dump["steps"]:
        words = ", ".join(f"{w} {p:.2f}" for w, p in step["top_words"]) or "(no word attention)"
        extra = "" if step["gate"] is None else f"  gate {step['gate']:.2f}"
        lines.append(f"step {step['step']}: {words}{extra}")
        lines.extend("  |" + row + "|" for row in heat_grid(np.asarray(step["rv"])))
    return "\n".join(lines) + "\n"
