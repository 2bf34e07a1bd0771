"""Training loop and evaluation."""
from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Vocab, encode_batch, load_checkpoint, make_batches, save_checkpoint
from .gridworld import CATEGORIES, QAInstance, is_relational
from .mac import MacConfig, MacNetwork
from .optim import AdamState, EmaState, TrainingError, adam_step, clip_gradients, early_stop, ema_update
from .tensor import Tape, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    accuracy: float
    per_category: dict
    relational_accuracy: float | None
    counts: dict
    predictions: list = field(default_factory=list)

    def to_dict(self, with_predictions: bool = False) -> dict:
        d = asdict(self)
        if not with_predictions:
            d.pop("predictions")
        return d


@dataclass
class RunReport:
    train_loss: list = field(default_factory=list)  # mean loss per epoch
    step_losses: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_per_category: list = field(default_factory=list)
    val_relational: list = field(default_factory=list)
    wall_time: float = 0.0
    stopping_epoch: int = 0
    best_epoch: int = -1
    best_accuracy: float | None = None
    seed: int = 0
    config: dict = field(default_factory=dict)
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def model_manifest(cfg: MacConfig, vocab: Vocab) -> dict:
    """Everything the parameter layout depends on; its hash guards checkpoint loading."""
    return {"model": cfg.to_dict(), "vocab": vocab.to_dict()}


def predict(net: MacNetwork, instances: Sequence[QAInstance], vocab: Vocab, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(instances), dtype=np.int64)
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        batch = encode_batch(chunk, vocab)
        logits, _ = net(batch.tokens, batch.scenes, batch.lengths, training=False)
        preds[start:start + len(chunk)] = np.argmax(logits.data, axis=1)
    return preds


def evaluate(net: MacNetwork, instances: Sequence[QAInstance], vocab: Vocab, batch_size: int = 256) -> EvalResult:
    preds = predict(net, instances, vocab, batch_size)
    gold = np.array([vocab.answer_id(i.answer) for i in instances], dtype=np.int64)
    correct = preds == gold
    per_cat, counts = {}, {}
    for cat in CATEGORIES:
        sel = np.array([i.category == cat for i in instances], dtype=bool)
        counts[cat] = int(sel.sum())
        per_cat[cat] = float(correct[sel].mean()) if sel.any() else None
    rel = np.array([is_relational(i.program) for i in instances], dtype=bool)
    predictions = [
        {"index": k, "predicted": vocab.answers[int(p)], "answer": inst.answer, "category": inst.category}
        for k, (p, inst) in enumerate(zip(preds, instances))
    ]
    return EvalResult(
        accuracy=float(correct.mean()) if len(instances) else 0.0,
        per_category=per_cat,
        relational_accuracy=float(correct[rel].mean()) if rel.any() else None,
        counts=counts,
        predictions=predictions,
    )


def baselines(instances: Sequence[QAInstance], n_answers: int) -> dict:
    answers = Counter(i.answer for i in instances)
    n = len(instances)
    per_type_hits = 0
    for cat in CATEGORIES:
        cat_answers = Counter(i.answer for i in instances if i.category == cat)
        if cat_answers:
            per_type_hits += cat_answers.most_common(1)[0][1]
    mode, freq = answers.most_common(1)[0] if answers else (None, 0)
    return {
        "chance": 1.0 / n_answers,
        "most_frequent_answer": mode,
        "most_frequent_accuracy": freq / n if n else 0.0,
        "per_category_most_frequent_accuracy": per_type_hits / n if n else 0.0,
    }


def train(
    run_cfg: RunConfig,
    train_set: Sequence[QAInstance],
    val_set: Sequence[QAInstance],
    vocab: Vocab,
    seed: int = 0,
    out_dir=None,
    on_epoch: Callable[[int, dict], None] | None = None,
    stop_when: Callable[[RunReport], bool] | None = None,
) -> RunReport:
    """Train with Adam, clipping, EMA and early stopping.

    Writes ``best.ckpt`` and ``final.ckpt`` (raw and EMA weights) and ``report.json`` into
    ``out_dir`` when given. ``stop_when`` may end training early once the
    report satisfies a caller's criterion.
    """
    mcfg, tcfg = run_cfg.model, run_cfg.train
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    net = MacNetwork(mcfg, len(vocab.words), len(vocab.answers), seed=seed)
    named = list(net.named_parameters())
    params = [p for _, p in named]
    adam = AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    ema = EmaState.from_params(named, tcfg.ema_decay)
    dropout_rng = np.random.default_rng([seed, 1])
    report = RunReport(seed=seed, config=run_cfg.to_dict())
    manifest = model_manifest(mcfg, vocab)

    def checkpoint(path, epoch):
        arrays = {f"raw/{k}": v for k, v in net.state_dict().items()}
        arrays.update({f"ema/{k}": v for k, v in ema.shadow.items()})
        save_checkpoint(path, manifest, arrays, {"epoch": epoch, "seed": seed})

    if out is not None:
        checkpoint(out / "best.ckpt", -1)

    for epoch in range(tcfg.epochs):
        losses = []
        for batch in make_batches(train_set, vocab, tcfg.batch_size, seed=seed * 100003 + epoch):
            with Tape() as tape:
                logits, _ = net(batch.tokens, batch.scenes, batch.lengths, training=True, rng=dropout_rng)
                loss = cross_entropy(logits, batch.answers)
            value = loss.item()
            if not np.isfinite(value):
                report.status = "nan_loss"
                if out is not None:
                    checkpoint(out / "last_good.ckpt", epoch)
                    _write_report(out, report, t0)
                raise TrainingError(f"non-finite loss at epoch {epoch} step {len(report.step_losses)}")
            grads = tape.backward(loss)
            glist, _ = clip_gradients([grads.of(p) for p in params], tcfg.clip_norm)
            adam_step(adam, params, glist)
            ema_update(ema, named)
            losses.append(value)
            report.step_losses.append(value)
        report.train_loss.append(float(np.mean(losses)) if losses else 0.0)

        eval_net = net.with_weights(ema.shadow, "ema") if tcfg.use_ema else net
        res = evaluate(eval_net, val_set, vocab, tcfg.eval_batch_size)
        report.val_accuracy.append(res.accuracy)
        report.val_per_category.append(res.per_category)
        report.val_relational.append(res.relational_accuracy)
        report.stopping_epoch = epoch + 1
        decision = early_stop(report.val_accuracy, tcfg.patience)
        if decision.best_index == epoch:
            report.best_epoch = epoch
            report.best_accuracy = res.accuracy
            if out is not None:
                checkpoint(out / "best.ckpt", epoch)
        log.info("epoch %d loss %.4f val %.4f rel %s", epoch + 1, report.train_loss[-1], res.accuracy,
                 res.relational_accuracy)
        if on_epoch is not None:
            on_epoch(epoch, {"loss": report.train_loss[-1], "val": res.accuracy,
                             "relational": res.relational_accuracy, "per_category": res.per_category})
        if decision.stop or (stop_when is not None and stop_when(report)):
            break

    if out is not None:
        checkpoint(out / "final.ckpt", report.stopping_epoch - 1)
        _write_report(out, report, t0)
    report.wall_time = time.perf_counter() - t0
    return report


def _write_report(out: Path, report: RunReport, t0: float) -> None:
    import json

    report.wall_time = time.perf_counter() - t0
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")


def load_network(path, use_ema: bool, expected_manifest: dict | None = None) -> tuple[MacNetwork, Vocab, dict]:
    manifest, arrays = load_checkpoint(path, expected_manifest)
    cfg = MacConfig(**manifest["config"]["model"])
    vocab = Vocab.from_dict(manifest["config"]["vocab"])
    net = MacNetwork(cfg, len(vocab.words), len(vocab.answers))
    prefix = "ema/" if use_ema else "raw/"
    net.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    net.source = "ema" if use_ema else "raw"
    return net, vocab, manifest
