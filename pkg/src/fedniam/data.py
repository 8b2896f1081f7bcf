"""Synthetic multi-domain tasks, Dirichlet client partitions and class/domain splits."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .encoder import VisionBackbone, vision_features
from .numerics import RngStream


class GenerationError(RuntimeError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class TaskSpec:
    n_classes: int = 10
    d_embed: int = 16
    sigma: float = 0.35
    n_domains: int = 2
    domain_shift: float = 0.3
    samples_per_class_per_domain: int = 20
    test_per_class_per_domain: int = 20
    anchor_separation: float = 0.5
    # cosine between each anchor and its class's zero-shot text direction
    text_alignment: float = 0.6
    max_retries: int = 100

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.text_alignment <= 1.0:
            raise ValueError("text_alignment must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    sample_id: int
    class_id: int
    domain: int
    split: str  # "train" or "test"


@dataclass
class Dataset:
    spec: TaskSpec
    seed: int
    samples: list[Sample]
    features: np.ndarray  # one row per sample, indexed by sample_id
    backbone: VisionBackbone

    def __len__(self) -> int:
        return len(self.samples)

    def select(self, split: str | None = None, classes=None, domains=None) -> list[Sample]:
        classes = None if classes is None else set(classes)
        domains = None if domains is None else set(domains)
        return [
            s
            for s in self.samples
            if (split is None or s.split == split)
            and (classes is None or s.class_id in classes)
            and (domains is None or s.domain in domains)
        ]

    def feature_matrix(self, samples: Sequence[Sample]) -> np.ndarray:
        return self.features[[s.sample_id for s in samples]]


@dataclass
class ClientShard:
    client_id: int
    samples: list[Sample] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.samples)

    def classes(self) -> list[int]:
        return sorted({s.class_id for s in self.samples})


@dataclass(frozen=True)
class ClassSplit:
    base: tuple[int, ...]
    novel: tuple[int, ...]


@dataclass
class DomainSplit:
    train_domains: tuple[int, ...]
    test_domain: int
    shards: list[ClientShard]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _min_pairwise_distance(x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    return float(dist[np.triu_indices(len(x), k=1)].min())


def sample_anchors(spec: TaskSpec, rng: RngStream, text_directions: np.ndarray | None = None) -> np.ndarray:
    """Unit-norm class anchors, rejection-sampled until pairwise distance >= separation.

    With ``text_directions`` each anchor has cosine ``text_alignment`` with
    its class's direction, the rest of it being a random orthogonal part.
    """
    g = rng.generator()
    a = spec.text_alignment if text_directions is not None else 0.0
    if text_directions is not None:
        text_directions = _unit_rows(np.asarray(text_directions, dtype=np.float64))
        if text_directions.shape != (spec.n_classes, spec.d_embed):
            raise GenerationError(f"text directions shape {text_directions.shape} does not match the task")
    for _ in range(spec.max_retries):
        r = g.normal(size=(spec.n_classes, spec.d_embed))
        if text_directions is not None:
            r -= (r * text_directions).sum(axis=1, keepdims=True) * text_directions
            anchors = a * text_directions + math.sqrt(1.0 - a * a) * _unit_rows(r)
        else:
            anchors = _unit_rows(r)
        if _min_pairwise_distance(anchors) >= spec.anchor_separation:
            return anchors
    raise GenerationError(
        f"no anchor set met separation {spec.anchor_separation} after {spec.max_retries} draws"
    )


def sample_domains(spec: TaskSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Domain 0 is the identity; the others are random near-identity affine maps."""
    g = rng.generator()
    d = spec.d_embed
    A = np.repeat(np.eye(d)[None], spec.n_domains, axis=0)
    b = np.zeros((spec.n_domains, d))
    for k in range(1, spec.n_domains):
        A[k] += spec.domain_shift * g.normal(size=(d, d)) / math.sqrt(d)
        b[k] = spec.domain_shift * g.normal(size=d) / math.sqrt(d)
    return A, b


def generate_task(spec: TaskSpec, seed: int, text_directions: np.ndarray | None = None) -> Dataset:
    rng = RngStream(seed, "data")
    anchors = sample_anchors(spec, rng.child("anchors"), text_directions)
    A, b = sample_domains(spec, rng.child("domains"))
    backbone = VisionBackbone(anchors, A, b, spec.sigma, seed)
    samples = []
    for domain in range(spec.n_domains):
        for class_id in range(spec.n_classes):
            for split, count in (("train", spec.samples_per_class_per_domain), ("test", spec.test_per_class_per_domain)):
                for _ in range(count):
                    samples.append(Sample(len(samples), class_id, domain, split))
    features = np.stack([vision_features(backbone, s) for s in samples]) if samples else np.zeros((0, spec.d_embed))
    return Dataset(spec, seed, samples, features, backbone)


def dirichlet_partition(
    samples: Sequence[Sample], n_clients: int, beta: float, rng: RngStream
) -> list[ClientShard]:
    """Label-skewed split: each class's samples follow Dir(beta * 1_K) across clients."""
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    if beta <= 0:
        raise PartitionError("beta must be > 0")
    if len(samples) < n_clients:
        raise PartitionError(f"{len(samples)} samples cannot fill {n_clients} clients")
    g = rng.generator()
    by_class: dict[int, list[Sample]] = defaultdict(list)
    for s in samples:
        by_class[s.class_id].append(s)
    shards = [ClientShard(k) for k in range(n_clients)]
    for class_id in sorted(by_class):
        members = by_class[class_id]
        order = g.permutation(len(members))
        props = g.dirichlet(np.full(n_clients, beta))
        cuts = (np.cumsum(props)[:-1] * len(members)).astype(int)
        for k, part in enumerate(np.split(order, cuts)):
            shards[k].samples.extend(members[i] for i in part)
    for shard in shards:
        if shard.size == 0:
            donor = max(shards, key=lambda s: s.size)
            shard.samples.append(donor.samples.pop())
    return shards


def class_proportions(shards: Sequence[ClientShard], classes: Sequence[int]) -> np.ndarray:
    """(n_classes, n_clients) fraction of each class's samples held by each client."""
    counts = np.zeros((len(classes), len(shards)))
    index = {c: i for i, c in enumerate(classes)}
    for k, shard in enumerate(shards):
        for s in shard.samples:
            counts[index[s.class_id], k] += 1
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def base_novel_split(n_classes: int, fraction: float = 0.5) -> ClassSplit:
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_base = math.ceil(fraction * n_classes)
    if n_base <= 0 or n_base >= n_classes:
        raise ValueError(f"split of {n_classes} classes at {fraction} leaves one side empty")
    return ClassSplit(tuple(range(n_base)), tuple(range(n_base, n_classes)))


def leave_one_domain_out(
    dataset: Dataset,
    held_out: int,
    clients_per_domain: int,
    rng: RngStream,
    classes: Sequence[int] | None = None,
) -> DomainSplit:
    """Hold one domain out; split each remaining domain's training data across clients."""
    n_domains = dataset.spec.n_domains
    if n_domains < 2:
        raise ValueError("leave-one-domain-out needs at least two domains")
    if not 0 <= held_out < n_domains:
        raise KeyError(f"unknown domain {held_out}")
    if clients_per_domain < 1:
        raise PartitionError("clients_per_domain must be >= 1")
    g = rng.generator()
    train_domains = tuple(d for d in range(n_domains) if d != held_out)
    shards: list[ClientShard] = []
    for domain in train_domains:
        pool = dataset.select("train", classes=classes, domains=[domain])
        if len(pool) < clients_per_domain:
            raise PartitionError(f"domain {domain} has fewer samples than clients")
        for part in np.array_split(g.permutation(len(pool)), clients_per_domain):
            shards.append(ClientShard(len(shards), [pool[i] for i in sorted(part)]))
    return DomainSplit(train_domains, held_out, shards)


def dataset_snapshot(dataset: Dataset, shards: Sequence[ClientShard] | None = None) -> dict[str, Any]:
    """JSON-ready record of anchors, sample table and shard assignment."""
    snap: dict[str, Any] = {
        "seed": dataset.seed,
        "spec": asdict(dataset.spec),
        "backbone": dataset.backbone.to_dict(),
        "samples": [[s.sample_id, s.class_id, s.domain, s.split] for s in dataset.samples],
    }
    if shards is not None:
        snap["shards"] = {str(sh.client_id): [s.sample_id for s in sh.samples] for sh in shards}
    return snap
