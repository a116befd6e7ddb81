"""Prediction and the three evaluation harnesses.

Prediction classifies an image by softmax over cosine similarities between
its embedding and per-class text embeddings, scaled by 1/tau. A raw frozen
backbone predicts through the plain template sentences; a tuned model runs
prompts and adapters on both branches. Harnesses: base-to-novel (with
harmonic mean), cross-dataset transfer, and domain-shifted variants.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import Dataset, DatasetError
from .encoders import DualEncoder
from .training import TunedModel


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    per_class: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    split_ids: dict = field(default_factory=dict)

    def to_dict(self):
        return {"base_acc": self.base_acc, "novel_acc": self.novel_acc, "hm": self.hm,
                "per_class": self.per_class, "config_fingerprint": self.config_fingerprint,
                "split_ids": self.split_ids}


class _BackboneModel:
    """Adapter giving a raw frozen backbone the tuned-model surface."""

    def __init__(self, backbone: DualEncoder):
        self.backbone = backbone

    @property
    def tau(self):
        return self.backbone.tau

    @property
    def tokenizer(self):
        return self.backbone.tokenizer

    def text_embedding(self, tokens):
        return self.backbone.encode_text(tokens)

    def image_embedding(self, image):
        return self.backbone.encode_image(image)


def _as_model(model):
    if isinstance(model, DualEncoder):
        return _BackboneModel(model)
    if all(hasattr(model, a) for a in ("text_embedding", "image_embedding", "tau", "tokenizer")):
        return model
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def _class_matrix(model, class_names):
    embs = []
    for name in class_names:
        tokens = model.tokenizer.encode(f"a photo of a {name}", strict=True)
        embs.append(model.text_embedding(tokens).data)
    return np.stack(embs)


def predict(model, image, class_names):
    """(argmax class index, probability vector) for one image.

    Probabilities are softmax(similarities / tau); ties break to the lowest
    class index.
    """
    if not class_names:
        raise ValueError("predict: empty class set")
    model = _as_model(model)
    with ad.no_grad():
        class_embs = _class_matrix(model, class_names)
        emb = model.image_embedding(image).data
    logits = (class_embs @ emb) / model.tau
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    return int(np.argmax(logits)), probs


def harmonic_mean(base, novel):
    """2ab/(a+b); defined as 0 (with a warning) when both inputs are zero."""
    if base < 0 or novel < 0:
        raise ValueError(f"harmonic_mean: negative inputs ({base}, {novel})")
    if base == 0 and novel == 0:
        warnings.warn("harmonic_mean of (0, 0) defined as 0")
        return 0.0
    return 2.0 * base * novel / (base + novel)


def _pool_accuracy(model, dataset: Dataset, class_ids, pool="test"):
    """Accuracy over a pool, predicting within the given class id set.

    Returns (accuracy %, per-class dict). Class text embeddings are computed
    once; prediction is argmax over similarity, identical to `predict`.
    """
    model = _as_model(model)
    names = [dataset.manifest.classes[cid].name for cid in class_ids]
    with ad.no_grad():
        class_embs = _class_matrix(model, names)
        correct = {cid: 0 for cid in class_ids}
        totals = {cid: 0 for cid in class_ids}
        for pos, cid in enumerate(class_ids):
            for pixels, _ in dataset.pool([cid], pool):
                emb = model.image_embedding(pixels).data
                pred = int(np.argmax((class_embs @ emb) / model.tau))
                correct[cid] += pred == pos
                totals[cid] += 1
    per_class = {dataset.manifest.classes[cid].name: 100.0 * correct[cid] / totals[cid]
                 for cid in class_ids}
    overall = 100.0 * sum(correct.values()) / sum(totals.values())
    return overall, per_class


def base_to_novel_eval(model, dataset: Dataset, fingerprint="") -> EvalReport:
    """Accuracy on held-out base images and on novel images, plus HM."""
    split = dataset.manifest.split
    if set(split.base) & set(split.novel):
        raise DatasetError("base and novel class sets overlap")
    base_acc, base_pc = _pool_accuracy(model, dataset, split.base)
    novel_acc, novel_pc = _pool_accuracy(model, dataset, split.novel)
    per_class = dict(base_pc)
    per_class.update(novel_pc)
    return EvalReport(
        base_acc=base_acc, novel_acc=novel_acc,
        hm=harmonic_mean(base_acc, novel_acc),
        per_class=per_class, config_fingerprint=fingerprint,
        split_ids={"dataset": dataset.manifest.name,
                   "base": list(split.base), "novel": list(split.novel)})


def cross_dataset_eval(model, source_id, targets):
    """Zero-shot accuracy per target family plus the average.

    Every target is evaluated over its full class set on the test pool.
    Rows: [(name, accuracy)]; the average is omitted for an empty list.
    """
    rows = []
    for ds in targets:
        class_ids = [c.id for c in ds.manifest.classes]
        acc, _ = _pool_accuracy(model, ds, class_ids)
        rows.append((ds.manifest.name, acc))
    table = {"source": source_id, "rows": rows}
    if rows:
        table["average"] = float(np.mean([acc for _, acc in rows]))
    return table


def domain_gen_eval(model, variants):
    """Accuracy per shifted variant; variants must share the source class set."""
    rows = []
    expected_names = None
    for ds in variants:
        names = [c.name for c in ds.manifest.classes]
        if expected_names is None:
            expected_names = names
        elif names != expected_names:
            raise DatasetError(
                f"variant {ds.manifest.name!r} has a different class set")
        class_ids = [c.id for c in ds.manifest.classes]
        acc, _ = _pool_accuracy(model, ds, class_ids)
        rows.append((ds.manifest.name, acc))
    table = {"rows": rows}
    if rows:
        table["average"] = float(np.mean([acc for _, acc in rows]))
    return table


# ---------------------------------------------------------------------------
# report rendering


def report_to_csv(path, rows, header):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def render_table(rows, header):
    """Fixed-width text table."""
    cells = [header] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for r_i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r_i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def write_eval_outputs(out_dir, name, rows, header):
    os.makedirs(out_dir, exist_ok=True)
    report_to_csv(os.path.join(out_dir, f"{name}.csv"), rows, header)
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write(render_table(rows, header))
