"""Clients, server and the single-round orchestrator.

Clients start from the broadcast prompt, tune it on their shard with the
masked encoder and draw randomly weighted visual prototypes. Each uploads
once. The server averages prompts by shard size, pools the prototypes and
refines the global prompt against the pool.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import FederationConfig, RunConfig
from .data import (
    ClassSplit,
    ClientShard,
    Dataset,
    base_novel_split,
    dirichlet_partition,
    generate_task,
    leave_one_domain_out,
)
from .encoder import EncoderContext, build_niam_mask, encode_text, assemble_batch
from .evaluation import Metrics, evaluate_base_novel, evaluate_lodo
from .numerics import (
    RngStream,
    Tensor,
    backward,
    cosine_matrix,
    log_sigmoid,
    log_softmax,
    logsumexp,
    sgd_step,
)

log = logging.getLogger(__name__)

UPLOAD_SCHEMA = "fedniam.client_upload"
UPLOAD_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    delta: np.ndarray
    config: FederationConfig
    losses: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class VisualPrototype:
    class_id: int
    client_id: int
    replica: int
    vector: np.ndarray


@dataclass
class GlobalPrototypePool:
    entries: list[VisualPrototype] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def vectors(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])

    def labels(self) -> np.ndarray:
        return np.array([e.class_id for e in self.entries])


@dataclass
class ServerState:
    delta_g: np.ndarray
    config: FederationConfig
    losses: list[float] = field(default_factory=list)


@dataclass
class CommLedger:
    uploads: dict[int, int] = field(default_factory=dict)
    downloads: dict[int, int] = field(default_factory=dict)
    payloads: dict[int, dict[str, Any]] = field(default_factory=dict)

    def record_download(self, client_id: int) -> None:
        self.downloads[client_id] = self.downloads.get(client_id, 0) + 1

    def record_upload(self, upload: "ClientUpload") -> None:
        k = upload.client_id
        self.uploads[k] = self.uploads.get(k, 0) + 1
        self.payloads[k] = {
            "prompt": upload.delta is not None,
            "prototypes": len(upload.prototypes),
            "floats": upload.float_count(),
        }

    @property
    def total_uploads(self) -> int:
        return sum(self.uploads.values())

    @property
    def total_downloads(self) -> int:
        return sum(self.downloads.values())

    def is_one_shot(self, n_clients: int) -> bool:
        return (
            len(self.uploads) == n_clients
            and all(v == 1 for v in self.uploads.values())
            and len(self.downloads) == n_clients
            and all(v == 1 for v in self.downloads.values())
        )

    def comm_volume(self) -> float:
        """Mean number of floats uploaded per client."""
        if not self.payloads:
            return 0.0
        return float(np.mean([p["floats"] for p in self.payloads.values()]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "uploads": {str(k): v for k, v in sorted(self.uploads.items())},
            "downloads": {str(k): v for k, v in sorted(self.downloads.items())},
            "payloads": {str(k): v for k, v in sorted(self.payloads.items())},
            "total_uploads": self.total_uploads,
            "total_downloads": self.total_downloads,
            "comm_volume": self.comm_volume(),
        }


@dataclass
class ClientUpload:
    """The single message a client sends: shard size, prompt and prototypes."""

    client_id: int
    n_samples: int
    delta: np.ndarray | None
    prototypes: list[VisualPrototype]

    def float_count(self) -> int:
        n = 0 if self.delta is None else self.delta.size
        return n + sum(p.vector.size for p in self.prototypes)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": UPLOAD_SCHEMA,
                "version": UPLOAD_VERSION,
                "client_id": self.client_id,
                "n_samples": self.n_samples,
                "delta": None
                if self.delta is None
                else {"shape": list(self.delta.shape), "values": self.delta.reshape(-1).tolist()},
                "prototypes": [[p.class_id, p.replica, p.vector.tolist()] for p in self.prototypes],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> ClientUpload:
        raw = json.loads(text)
        if raw.get("schema") != UPLOAD_SCHEMA or raw.get("version") != UPLOAD_VERSION:
            raise ValueError(f"unsupported upload schema {raw.get('schema')!r} v{raw.get('version')!r}")
        k = int(raw["client_id"])
        delta = None
        if raw["delta"] is not None:
            shape = tuple(raw["delta"]["shape"])
            values = np.array(raw["delta"]["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError("delta values do not match the declared shape")
            delta = values.reshape(shape)
        protos = [VisualPrototype(int(c), k, int(i), np.array(v, dtype=np.float64)) for c, i, v in raw["prototypes"]]
        return cls(k, int(raw["n_samples"]), delta, protos)


# -- losses -----------------------------------------------------------------------
def _label_index(labels: Sequence[int], class_ids: Sequence[int]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_ids)}
    missing = sorted({int(y) for y in labels} - set(index))
    if missing:
        raise KeyError(f"classes {missing} are absent from the prompt table")
    return np.array([index[int(y)] for y in labels])


def local_cross_entropy_loss(
    ctx: EncoderContext,
    delta: Tensor,
    features: np.ndarray,
    labels: Sequence[int],
    class_ids: Sequence[int],
    tau: float = 1.0,
) -> Tensor:
    """Mean cross-entropy of softmax(cosine(f_v, text_c) / tau) over ``class_ids``."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    idx = _label_index(labels, class_ids)
    sims = cosine_matrix(Tensor(features), ctx.text_features(delta, class_ids)) * (1.0 / tau)
    logp = log_softmax(sims, axis=1)
    return -(logp[np.arange(len(idx)), idx].mean())


def refinement_loss(
    ctx: EncoderContext,
    delta: Tensor,
    prototypes: np.ndarray,
    labels: Sequence[int],
    class_ids: Sequence[int],
    objective: str = "sigmoid_margin",
) -> Tensor:
    """-mean log sigmoid(sim_c - logsumexp_j sim_j) over a prototype batch.

    ``objective="softmax_ce"`` drops the sigmoid (plain cross-entropy), kept
    only for comparison.
    """
    if len(labels) == 0:
        raise ValueError("empty prototype batch")
    idx = _label_index(labels, class_ids)
    sims = cosine_matrix(Tensor(prototypes), ctx.text_features(delta, class_ids))
    return alignment_loss_from_similarities(sims, idx, objective)


def alignment_loss_from_similarities(sims: Tensor, targets: np.ndarray, objective: str = "sigmoid_margin") -> Tensor:
    """Loss on a (batch, classes) similarity matrix given target column indices."""
    targets = np.asarray(targets)
    margin = sims[np.arange(len(targets)), targets] - logsumexp(sims, axis=1)
    if objective == "softmax_ce":
        return -(margin.mean())
    return -(log_sigmoid(margin).mean())


# -- client side ------------------------------------------------------------------
def _batches(g: np.random.Generator, n: int, size: int):
    order = g.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def local_tune(
    client: ClientState, ctx: EncoderContext, dataset: Dataset, class_ids: Sequence[int], rng: RngStream
) -> np.ndarray:
    """Mini-batch SGD on the client's prompt for ``local_epochs`` passes over its shard."""
    if client.shard.size == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")
    cfg = client.config
    g = rng.generator()
    features = dataset.feature_matrix(client.shard.samples)
    labels = np.array([s.class_id for s in client.shard.samples])
    delta = Tensor(client.delta.copy(), requires_grad=True)
    for _ in range(cfg.local_epochs):
        for batch in _batches(g, len(labels), cfg.batch_size):
            loss = local_cross_entropy_loss(ctx, delta, features[batch], labels[batch], class_ids, cfg.tau)
            backward(loss, [delta])
            sgd_step([delta], cfg.lr, cfg.weight_decay)
            client.losses.append(loss.item())
    client.delta = delta.data.copy()
    return client.delta


def extract_prototypes(client: ClientState, dataset: Dataset, n: int, rng: RngStream) -> list[VisualPrototype]:
    """``n`` random convex combinations of the client's features for each local class."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rng.generator()
    out = []
    for c in client.shard.classes():
        members = [s for s in client.shard.samples if s.class_id == c]
        feats = dataset.feature_matrix(members)
        for i in range(n):
            alpha = g.uniform(0.0, 1.0, len(members))
            alpha /= alpha.sum()
            out.append(VisualPrototype(c, client.client_id, i, alpha @ feats))
    return out


# -- server side ------------------------------------------------------------------
def aggregate_prompts(deltas: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Shard-size weighted average of client prompts."""
    if len(deltas) == 0 or len(deltas) != len(sizes):
        raise ValueError("need one size per prompt")
    shape = np.shape(deltas[0])
    if any(np.shape(d) != shape for d in deltas):
        raise ValueError("client prompts differ in shape")
    total = float(sum(sizes))
    if total <= 0:
        raise ValueError("total shard size is zero")
    out = np.zeros(shape)
    for d, n in zip(deltas, sizes):
        out += (n / total) * np.asarray(d, dtype=np.float64)
    return out


def build_pool(prototype_lists: Sequence[Sequence[VisualPrototype]]) -> GlobalPrototypePool:
    return GlobalPrototypePool([p for protos in prototype_lists for p in protos])


def refine_global(
    server: ServerState, pool: GlobalPrototypePool, ctx: EncoderContext, class_ids: Sequence[int], rng: RngStream
) -> np.ndarray:
    """SGD on the global prompt over shuffled prototype mini-batches."""
    if len(pool) == 0:
        raise ValueError("empty prototype pool")
    cfg = server.config
    g = rng.generator()
    vectors, labels = pool.vectors(), pool.labels()
    delta = Tensor(server.delta_g.copy(), requires_grad=True)
    for _ in range(cfg.refine_epochs):
        for batch in _batches(g, len(pool), cfg.refine_batch_size):
            loss = refinement_loss(ctx, delta, vectors[batch], labels[batch], class_ids, cfg.refine_objective)
            backward(loss, [delta])
            sgd_step([delta], cfg.refine_lr, cfg.weight_decay)
            server.losses.append(loss.item())
    server.delta_g = delta.data.copy()
    return server.delta_g


# -- orchestration ----------------------------------------------------------------
@dataclass
class RunResult:
    config: RunConfig
    metrics: Metrics
    ledger: CommLedger
    delta_g: np.ndarray
    delta_0: np.ndarray
    local_losses: dict[int, list[float]]
    refine_losses: list[float]
    pool_size: int
    checksums: dict[str, tuple[str, str]]
    dataset: Dataset
    shards: list[ClientShard]
    split: ClassSplit | None = None

    @property
    def run_id(self) -> str:
        a = self.config.ablation
        flags = "".join(str(int(x)) for x in (a.hard_masking, a.reweighting, a.cscr, a.local_stage))
        n = self.config.federation.n_prototypes
        protocol = self.config.protocol
        if protocol == "lodo":
            protocol += f"{self.config.held_out_domain}"
        return f"{protocol}-s{self.config.seed}-f{flags}-lam{self.config.encoder.lam:g}-n{n}"


def zero_shot_directions(ctx: EncoderContext, n_classes: int) -> np.ndarray:
    """Centered class text features of the prompt-free, causal-only encoder.

    These play the role of the image-text alignment a pre-trained backbone
    would have; they do not depend on the ablation flags.
    """
    cfg = ctx.config
    mask = build_niam_mask(0, cfg.n_text, 0.0, cfg.causal, hard_masking=False)
    seq = assemble_batch(ctx.weights, Tensor(np.zeros((0, cfg.d_text))), ctx.class_tokens, range(n_classes))
    feats = ctx.head(encode_text(ctx.weights, seq, mask, cfg.ln_eps).eos).data
    return feats - feats.mean(axis=0, keepdims=True)


def _stage(name: str):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Guard()


def run_one_shot(config: RunConfig) -> RunResult:
    """Broadcast, local tuning + prototypes, one upload each, aggregate, refine, evaluate."""
    fed = config.federation
    root = RngStream(config.seed)
    with _stage("setup"):
        ctx = EncoderContext.create(config.encoder, config.task.n_classes, root.child("init"))
        dataset = generate_task(config.task, config.seed, zero_shot_directions(ctx, config.task.n_classes))
        before = _checksums(ctx, dataset)
    with _stage("partition"):
        split = None
        if config.protocol == "base_novel":
            split = base_novel_split(config.task.n_classes, config.base_fraction)
            class_ids = list(split.base)
            shards = dirichlet_partition(
                dataset.select("train", classes=split.base), fed.n_clients, fed.beta, root.child("partition")
            )
        else:
            class_ids = list(range(config.task.n_classes))
            shards = leave_one_domain_out(
                dataset, config.held_out_domain, config.clients_per_domain, root.child("partition")
            ).shards
    with _stage("init"):
        g = root.child("init/prompt").generator()
        delta_0 = g.normal(0.0, fed.prompt_init_std, (config.encoder.n_prompt, config.encoder.d_text))

    ledger = CommLedger()
    wire: list[str] = []
    local_losses: dict[int, list[float]] = {}
    with _stage("clients"):
        for shard in shards:
            k = shard.client_id
            ledger.record_download(k)
            client = ClientState(k, shard, delta_0.copy(), fed)
            if fed.local_stage:
                local_tune(client, ctx, dataset, class_ids, root.child(f"batching/client{k}"))
            protos = extract_prototypes(client, dataset, fed.n_prototypes, root.child(f"prototypes/client{k}"))
            upload = ClientUpload(k, shard.size, client.delta if fed.local_stage else None, protos)
            wire.append(upload.to_json())
            ledger.record_upload(upload)
            local_losses[k] = client.losses

    with _stage("server"):
        received = [ClientUpload.from_json(msg) for msg in wire]
        if fed.local_stage:
            delta_g = aggregate_prompts([u.delta for u in received], [u.n_samples for u in received])
        else:
            delta_g = delta_0.copy()
        pool = build_pool([u.prototypes for u in received])
        server = ServerState(delta_g, fed)
        if fed.cscr:
            refine_global(server, pool, ctx, class_ids, root.child("batching/server"))

    with _stage("evaluate"):
        if config.protocol == "base_novel":
            metrics = evaluate_base_novel(server.delta_g, ctx, dataset, split, fed.tau)
        else:
            metrics = evaluate_lodo(server.delta_g, ctx, dataset, config.held_out_domain, tau=fed.tau)
        metrics.comm_volume = ledger.comm_volume()
        after = _checksums(ctx, dataset)
        checksums = {name: (before[name], after[name]) for name in before}
        changed = [name for name, (a, b) in checksums.items() if a != b]
        if changed:
            raise RuntimeError(f"frozen state modified: {changed}")
        if not ledger.is_one_shot(len(shards)):
            raise RuntimeError("communication ledger is not one-shot")

    log.info("run %s seed=%d done: %s", config.protocol, config.seed, metrics)
    return RunResult(
        config=config,
        metrics=metrics,
        ledger=ledger,
        delta_g=server.delta_g,
        delta_0=delta_0,
        local_losses=local_losses,
        refine_losses=server.losses,
        pool_size=len(pool),
        checksums=checksums,
        dataset=dataset,
        shards=shards,
        split=split,
    )


def _checksums(ctx: EncoderContext, dataset: Dataset) -> dict[str, str]:
    return {
        "text_encoder": ctx.weights.checksum(),
        "projection_head": ctx.head.checksum(),
        "vision_backbone": dataset.backbone.checksum(),
    }
