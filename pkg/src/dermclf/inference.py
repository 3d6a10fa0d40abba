"""Per-image predictions (plain and test-time augmented) and the evaluation report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .dataset import (
    CATEGORY_CODES,
    IMAGE_SIZE,
    N_CATEGORIES,
    AugmentationPolicy,
    ImageTensor,
    Manifest,
    augment,
    find_unreadable_images,
    load_and_resize,
    normalize,
)
from .errors import ContractViolation, MissingImagesError
from .model import ModelAssembly, forward, softmax
from .seeding import stream, text_key

DEFAULT_N_AUG = 4


def predict(model: ModelAssembly, img: ImageTensor) -> np.ndarray:
    """Class probabilities for one normalized image (evaluation mode)."""
    if model.training:
        raise ContractViolation("predict requires the model in evaluation mode")
    if img.data.ndim != 3:
        raise ValueError("predict takes a single (3, H, W) image")
    with torch.inference_mode():
        logits = forward(model, img)[0]
    return softmax(logits.double().numpy())


def argmax_label(pred) -> int:
    """Index of the largest component; ties go to the lowest index."""
    return int(np.argmax(np.asarray(pred)))


def mean_prediction(members: Sequence[np.ndarray]) -> np.ndarray:
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in members])
    # summing n identical floats and dividing by n need not round-trip
    if np.all(stacked == stacked[0]):
        return stacked[0].copy()
    return stacked.mean(axis=0)


def tta_members(model: ModelAssembly, img: ImageTensor, n_aug: int, policy: AugmentationPolicy,
                rng: np.random.Generator) -> list[np.ndarray]:
    if n_aug < 0:
        raise ValueError("n_aug must be >= 0")
    members = [predict(model, img)]
    for _ in range(n_aug):
        members.append(predict(model, augment(img, policy, rng)))
    return members


def tta_predict(model: ModelAssembly, img: ImageTensor, n_aug: int, policy: AugmentationPolicy,
                rng: np.random.Generator) -> np.ndarray:
    """Average of the probabilities for the original image and ``n_aug`` random transforms of it."""
    return mean_prediction(tta_members(model, img, n_aug, policy, rng))


def confusion_matrix(preds: Sequence[int], truths: Sequence[int], n: int = N_CATEGORIES) -> np.ndarray:
    """``counts[true][pred]``."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} labels")
    cm = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(truths, preds):
        if not (0 <= t < n and 0 <= p < n):
            raise ValueError(f"category index out of range: true={t}, pred={p}")
        cm[t, p] += 1
    return cm


def per_category_recall(cm: np.ndarray) -> list[float | None]:
    """Recall per true category; ``None`` where the category has no instances."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    return [float(cm[i, i] / support[i]) if support[i] else None for i in range(cm.shape[0])]


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean recall over the categories that occur in the evaluated split."""
    recalls = [r for r in per_category_recall(cm) if r is not None]
    if not recalls:
        raise ValueError("balanced accuracy undefined for an all-zero confusion matrix")
    return float(np.mean(recalls))


@dataclass
class EvaluationReport:
    confusion: np.ndarray
    per_category_recall: list[float | None]
    balanced_accuracy: float
    n_records: int
    tta: bool
    n_aug: int
    seed: int
    plain: EvaluationReport | None = None
    image_ids: list[str] = field(default_factory=list, repr=False)
    probabilities: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_predictions(cls, image_ids, probs: np.ndarray, truths, *, tta: bool, n_aug: int, seed: int):
        preds = [argmax_label(p) for p in probs]
        cm = confusion_matrix(preds, truths)
        return cls(cm, per_category_recall(cm), balanced_accuracy(cm), len(preds), tta, n_aug, seed,
                   image_ids=list(image_ids), probabilities=np.asarray(probs))

    def to_dict(self) -> dict:
        d = {
            "n_records": self.n_records,
            "confusion": self.confusion.tolist(),
            "per_category_recall": self.per_category_recall,
            "balanced_accuracy": self.balanced_accuracy,
            "tta": self.tta,
            "n_aug": self.n_aug,
            "seed": self.seed,
        }
        if self.plain is not None:
            d["plain"] = self.plain.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvaluationReport:
        plain = cls.from_dict(d["plain"]) if d.get("plain") else None
        return cls(np.asarray(d["confusion"], dtype=np.int64), list(d["per_category_recall"]),
                   float(d["balanced_accuracy"]), int(d["n_records"]), bool(d["tta"]), int(d["n_aug"]),
                   int(d["seed"]), plain)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_predictions_csv(self, fh: IO[str]) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", *CATEGORY_CODES, "predicted"])
        for image_id, p in zip(self.image_ids, self.probabilities):
            writer.writerow([image_id, *(repr(float(x)) for x in p), CATEGORY_CODES[argmax_label(p)]])


def evaluate(model: ModelAssembly, manifest: Manifest, use_tta: bool, n_aug: int = DEFAULT_N_AUG, seed: int = 0,
             policy: AugmentationPolicy | None = None, side: int = IMAGE_SIZE) -> EvaluationReport:
    """Predict every record and build the report.

    With ``use_tta`` the returned report is the TTA one and ``report.plain``
    holds the un-augmented variant (the original image is a TTA member, so
    both come from the same forward passes). TTA randomness is keyed by image
    id, so results do not depend on record order.
    """
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    missing = find_unreadable_images(manifest)
    if missing:
        raise MissingImagesError(missing)
    policy = policy or AugmentationPolicy()
    was_training = model.training
    model.eval()
    try:
        plain_probs, tta_probs = [], []
        for rec in manifest:
            img = normalize(load_and_resize(rec.image_path, side))
            if use_tta:
                members = tta_members(model, img, n_aug, policy, stream(seed, "tta", text_key(rec.image_id)))
                plain_probs.append(members[0])
                tta_probs.append(mean_prediction(members))
            else:
                plain_probs.append(predict(model, img))
    finally:
        model.train(was_training)
    ids = [r.image_id for r in manifest]
    truths = [r.label for r in manifest]
    plain = EvaluationReport.from_predictions(ids, np.stack(plain_probs), truths, tta=False, n_aug=0, seed=seed)
    if not use_tta:
        return plain
    report = EvaluationReport.from_predictions(ids, np.stack(tta_probs), truths, tta=True, n_aug=n_aug, seed=seed)
    report.plain = plain
    return report
