"""Classification by text/image cosine similarity, accuracy and the base/novel HM."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .config import AblationConfig
from .data import ClassSplit, Dataset, Sample
from .encoder import EncoderContext
from .numerics import Tensor


@dataclass
class Metrics:
    acc_base: float | None = None
    acc_novel: float | None = None
    hm: float | None = None
    per_domain: dict[int, float] = field(default_factory=dict)
    comm_volume: float = 0.0

    def check(self) -> None:
        for value in (self.acc_base, self.acc_novel, self.hm, *self.per_domain.values()):
            if value is not None and not 0.0 <= value <= 100.0:
                raise ValueError(f"accuracy {value} outside [0, 100]")
        if self.acc_base is not None and self.acc_novel is not None:
            expected = harmonic_mean(self.acc_base, self.acc_novel)
            if abs(expected - self.hm) > 1e-9:
                raise ValueError(f"hm {self.hm} inconsistent with recomputed {expected}")

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def similarity_matrix(image_features: np.ndarray, text_features: np.ndarray) -> np.ndarray:
    return _unit(np.atleast_2d(image_features)) @ _unit(np.atleast_2d(text_features)).T


def class_probabilities(image_features: np.ndarray, text_features: np.ndarray, tau: float = 1.0) -> np.ndarray:
    logits = similarity_matrix(image_features, text_features) / tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def classify_batch(image_features: np.ndarray, text_features: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise argmax of the softmax over cosine similarities (ties -> lowest index)."""
    return np.argmax(class_probabilities(image_features, text_features, tau), axis=1)


def classify(image_feature: np.ndarray, text_features: np.ndarray, tau: float = 1.0) -> int:
    return int(classify_batch(image_feature, text_features, tau)[0])


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(predictions == labels))


def harmonic_mean(acc_base: float, acc_novel: float) -> float:
    if acc_base < 0 or acc_novel < 0:
        raise ValueError("accuracies must be non-negative")
    total = acc_base + acc_novel
    return 0.0 if total == 0 else 2.0 * acc_base * acc_novel / total


def text_feature_table(delta: np.ndarray, ctx: EncoderContext, class_ids: Sequence[int]) -> np.ndarray:
    return ctx.text_features(Tensor(delta), list(class_ids)).data


def _restricted_predictions(
    delta: np.ndarray, ctx: EncoderContext, dataset: Dataset, samples: Sequence[Sample], classes: Sequence[int], tau: float
) -> tuple[np.ndarray, np.ndarray]:
    classes = list(classes)
    text = text_feature_table(delta, ctx, classes)
    idx = classify_batch(dataset.feature_matrix(samples), text, tau)
    return np.asarray(classes)[idx], np.array([s.class_id for s in samples])


def evaluate_base_novel(
    delta: np.ndarray, ctx: EncoderContext, dataset: Dataset, split: ClassSplit, tau: float = 1.0
) -> Metrics:
    """Base accuracy over base classes only, novel accuracy over novel classes only."""
    base_test = dataset.select("test", classes=split.base)
    novel_test = dataset.select("test", classes=split.novel)
    if not base_test or not novel_test:
        raise ValueError("evaluation needs test samples on both the base and the novel side")
    pb, yb = _restricted_predictions(delta, ctx, dataset, base_test, split.base, tau)
    pn, yn = _restricted_predictions(delta, ctx, dataset, novel_test, split.novel, tau)
    acc_base, acc_novel = accuracy(pb, yb), accuracy(pn, yn)
    per_domain = {}
    domains = np.array([s.domain for s in base_test + novel_test])
    correct = np.concatenate([pb == yb, pn == yn])
    for d in sorted(set(domains.tolist())):
        per_domain[int(d)] = 100.0 * float(correct[domains == d].mean())
    metrics = Metrics(acc_base, acc_novel, harmonic_mean(acc_base, acc_novel), per_domain)
    metrics.check()
    return metrics


def evaluate_lodo(
    delta: np.ndarray,
    ctx: EncoderContext,
    dataset: Dataset,
    test_domain: int,
    classes: Sequence[int] | None = None,
    tau: float = 1.0,
) -> Metrics:
    """Accuracy on the held-out domain's test samples (full label space by default)."""
    classes = list(range(dataset.spec.n_classes)) if classes is None else list(classes)
    samples = dataset.select("test", classes=classes, domains=[test_domain])
    if not samples:
        raise ValueError(f"no test samples in domain {test_domain}")
    pred, y = _restricted_predictions(delta, ctx, dataset, samples, classes, tau)
    metrics = Metrics(per_domain={test_domain: accuracy(pred, y)})
    metrics.check()
    return metrics


def average_domains(per_domain: dict[int, float]) -> float:
    return float(np.mean(list(per_domain.values())))


# Every on/off combination of the three components, baseline first.
ABLATION_VARIANTS: tuple[AblationConfig, ...] = (
    AblationConfig(hard_masking=False, reweighting=False, cscr=False),
    AblationConfig(hard_masking=True, reweighting=False, cscr=False),
    AblationConfig(hard_masking=False, reweighting=True, cscr=False),
    AblationConfig(hard_masking=True, reweighting=True, cscr=False),
    AblationConfig(hard_masking=False, reweighting=False, cscr=True),
    AblationConfig(hard_masking=True, reweighting=False, cscr=True),
    AblationConfig(hard_masking=False, reweighting=True, cscr=True),
    AblationConfig(hard_masking=True, reweighting=True, cscr=True),
)
