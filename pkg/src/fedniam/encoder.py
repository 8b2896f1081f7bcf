"""Masked text encoder, prompt assembly and the frozen synthetic vision backbone.

Sequence layout (0-based): rows ``0 .. n_prompt-1`` are learnable prompt
tokens, ``n_prompt .. n_prompt+n_text-1`` are class text tokens and the last
row is [EOS]. The EOS output, passed through the projection head, is the
class text feature.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from .numerics import (
    HARD,
    RngStream,
    ShapeError,
    Tensor,
    add,
    concat,
    layer_norm,
    masked_softmax,
    matmul,
    quick_gelu,
    reshape,
    transpose,
)

PAD_TOKEN = 0
TEMPLATE_TOKENS = (1, 2, 3)  # "a", "photo", "of"
POSITION_POLICIES = ("fixed_text", "shifted")


@dataclass
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_text: int = 32
    d_embed: int = 16
    n_prompt: int = 10
    n_text: int = 8
    lam: float = 0.5
    vocab_size: int = 64
    mlp_ratio: int = 4
    max_prompt: int = 32
    hard_masking: bool = True
    reweighting: bool = True
    causal: bool = True
    eos_self_attention: bool = False
    position_policy: str = "fixed_text"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_text % self.n_heads:
            raise ValueError(f"d_text={self.d_text} is not divisible by n_heads={self.n_heads}")
        if self.n_text < 1:
            raise ValueError("n_text must be >= 1")
        if not 0 <= self.n_prompt <= self.max_prompt:
            raise ValueError(f"n_prompt must lie in [0, {self.max_prompt}]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.position_policy not in POSITION_POLICIES:
            raise ValueError(f"position_policy must be one of {POSITION_POLICIES}")
        if self.vocab_size < len(TEMPLATE_TOKENS) + 3:
            raise ValueError("vocab_size too small for the synthetic vocabulary")

    @property
    def seq_len(self) -> int:
        return self.n_prompt + self.n_text + 1

    @property
    def effective_lam(self) -> float:
        return self.lam if self.reweighting else 0.0


# -- attention mask ------------------------------------------------------------
@dataclass(frozen=True)
class AttentionMask:
    bias: np.ndarray
    n_prompt: int
    n_text: int

    @property
    def size(self) -> int:
        return self.bias.shape[0]

    @property
    def eos(self) -> int:
        return self.n_prompt + self.n_text

    def hard(self) -> np.ndarray:
        return self.bias <= HARD / 2


def build_niam_mask(
    n_prompt: int,
    n_text: int,
    lam: float,
    apply_causal: bool = True,
    *,
    hard_masking: bool = True,
    eos_self_attention: bool = False,
) -> AttentionMask:
    """Additive attention bias isolating text tokens from learnable prompts.

    Hard-masked: prompt->text, text->prompt and every query's view of the EOS
    key. The EOS query gets bias ``lam`` on text keys; all else is 0. With
    ``apply_causal`` every key after its query is hard-masked as well.
    ``eos_self_attention`` re-opens the (EOS, EOS) entry.
    """
    if n_text < 1:
        raise ValueError("n_text must be >= 1")
    if n_prompt < 0:
        raise ValueError("n_prompt must be >= 0")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    size = n_prompt + n_text + 1
    prompt = slice(0, n_prompt)
    text = slice(n_prompt, n_prompt + n_text)
    eos = size - 1
    bias = np.zeros((size, size))
    bias[eos, text] = lam
    if hard_masking:
        bias[prompt, text] = HARD
        bias[text, prompt] = HARD
        bias[:, eos] = HARD
        if eos_self_attention:
            bias[eos, eos] = 0.0
    if apply_causal:
        bias[np.triu_indices(size, k=1)] = HARD
    return AttentionMask(bias, n_prompt, n_text)


def mask_for(config: EncoderConfig, n_prompt: int | None = None) -> AttentionMask:
    return build_niam_mask(
        config.n_prompt if n_prompt is None else n_prompt,
        config.n_text,
        config.effective_lam,
        config.causal,
        hard_masking=config.hard_masking,
        eos_self_attention=config.eos_self_attention,
    )


# -- tokens and weights ------------------------------------------------------
def class_token_ids(class_id: int, n_text: int, vocab_size: int) -> np.ndarray:
    """Synthetic "a photo of <name>" ids, truncated from the left to ``n_text``."""
    span = vocab_size - len(TEMPLATE_TOKENS) - 2  # reserve pad and EOS
    first = len(TEMPLATE_TOKENS) + 1
    name = [first + class_id % span, first + (7 * class_id + 3) % span]
    ids = list(TEMPLATE_TOKENS) + name
    if len(ids) > n_text:
        ids = ids[-n_text:]
    ids += [PAD_TOKEN] * (n_text - len(ids))
    return np.array(ids, dtype=np.int64)


def class_token_table(n_classes: int, n_text: int, vocab_size: int) -> np.ndarray:
    return np.stack([class_token_ids(c, n_text, vocab_size) for c in range(n_classes)])


@dataclass
class LayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray


@dataclass
class TextEncoderWeights:
    token_embedding: np.ndarray
    text_positions: np.ndarray
    prompt_positions: np.ndarray
    layers: list[LayerWeights]
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    n_heads: int
    frozen: bool = True

    @property
    def d_text(self) -> int:
        return self.token_embedding.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [self.token_embedding, self.text_positions, self.prompt_positions]
        for layer in self.layers:
            out.extend(asdict(layer).values())
        return out + [self.lnf_gain, self.lnf_bias]

    def checksum(self) -> str:
        return _checksum(self.arrays())


@dataclass
class ProjectionHead:
    weight: np.ndarray  # d_text x d_embed

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return reshape(matmul(reshape(x, (1, x.shape[0])), Tensor(self.weight)), (self.weight.shape[1],))
        return matmul(x, Tensor(self.weight))

    def checksum(self) -> str:
        return _checksum([self.weight])


def _checksum(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def init_text_encoder(config: EncoderConfig, rng: RngStream) -> tuple[TextEncoderWeights, ProjectionHead]:
    g = rng.child("text_encoder").generator()
    d, hidden = config.d_text, config.d_text * config.mlp_ratio
    scale = 1.0 / np.sqrt(d)
    layers = [
        LayerWeights(
            ln1_gain=np.ones(d),
            ln1_bias=np.zeros(d),
            w_q=g.normal(0.0, scale, (d, d)),
            w_k=g.normal(0.0, scale, (d, d)),
            w_v=g.normal(0.0, scale, (d, d)),
            w_o=g.normal(0.0, scale, (d, d)),
            ln2_gain=np.ones(d),
            ln2_bias=np.zeros(d),
            mlp_w1=g.normal(0.0, scale, (d, hidden)),
            mlp_b1=np.zeros(hidden),
            mlp_w2=g.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)),
            mlp_b2=np.zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    weights = TextEncoderWeights(
        token_embedding=g.normal(0.0, 1.0, (config.vocab_size, d)),
        text_positions=g.normal(0.0, 0.1, (config.max_prompt + config.n_text + 1, d)),
        prompt_positions=g.normal(0.0, 0.02, (config.max_prompt, d)),
        layers=layers,
        lnf_gain=np.ones(d),
        lnf_bias=np.zeros(d),
        n_heads=config.n_heads,
    )
    head = ProjectionHead(g.normal(0.0, scale, (d, config.d_embed)))
    return weights, head


# -- prompts -------------------------------------------------------------------
@dataclass
class PromptState:
    delta: Tensor
    class_tokens: np.ndarray  # n_classes x n_text token ids

    def __post_init__(self):
        if not isinstance(self.delta, Tensor):
            self.delta = Tensor(self.delta, requires_grad=True)
        self.delta.requires_grad = True
        self.class_tokens = np.asarray(self.class_tokens, dtype=np.int64)

    @property
    def n_prompt(self) -> int:
        return self.delta.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_tokens.shape[0]


def _positions(weights: TextEncoderWeights, n_prompt: int, n_text: int, policy: str):
    if policy == "fixed_text":
        return weights.prompt_positions[:n_prompt], weights.text_positions[: n_text + 1]
    return weights.text_positions[:n_prompt], weights.text_positions[n_prompt : n_prompt + n_text + 1]


def assemble_batch(
    weights: TextEncoderWeights,
    delta: Tensor,
    class_tokens: np.ndarray,
    class_ids: Sequence[int],
    policy: str = "fixed_text",
) -> Tensor:
    """Stack ``[delta; text tokens; EOS]`` for each class id -> (B, S, d)."""
    n_prompt = delta.shape[0]
    if n_prompt > weights.prompt_positions.shape[0]:
        raise ShapeError(f"n_prompt={n_prompt} exceeds the positional table")
    class_ids = list(class_ids)
    for c in class_ids:
        if not 0 <= c < class_tokens.shape[0]:
            raise IndexError(f"class id {c} out of range [0, {class_tokens.shape[0]})")
    n_text = class_tokens.shape[1]
    prompt_pos, text_pos = _positions(weights, n_prompt, n_text, policy)
    eos_id = weights.token_embedding.shape[0] - 1
    ids = np.concatenate([class_tokens[class_ids], np.full((len(class_ids), 1), eos_id)], axis=1)
    text = Tensor(weights.token_embedding[ids] + text_pos)
    if n_prompt == 0:
        return text
    prompt = add(np.zeros((len(class_ids), n_prompt, weights.d_text)), delta + prompt_pos)
    return concat([prompt, text], axis=1)


def assemble_prompt(
    weights: TextEncoderWeights, prompts: PromptState, class_id: int, policy: str = "fixed_text"
) -> Tensor:
    return assemble_batch(weights, prompts.delta, prompts.class_tokens, [class_id], policy)[0]


# -- encoder forward -----------------------------------------------------------
class EncoderOutput(NamedTuple):
    tokens: Tensor  # (..., S, d_text) final-layer outputs
    eos: Tensor  # (..., d_text)


def _attention(x: Tensor, layer: LayerWeights, n_heads: int, mask: AttentionMask, probe: list | None) -> Tensor:
    b, s, d = x.shape
    dk = d // n_heads

    def heads(w: np.ndarray) -> Tensor:
        return transpose(reshape(matmul(x, Tensor(w)), (b, s, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(layer.w_q), heads(layer.w_k), heads(layer.w_v)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    probs = masked_softmax(scores, mask)
    if probe is not None:
        probe.append(probs.data.copy())
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    return matmul(ctx, Tensor(layer.w_o))


def encode_text(
    weights: TextEncoderWeights,
    sequence: Tensor,
    mask: AttentionMask,
    eps: float = 1e-5,
    probe: list | None = None,
) -> EncoderOutput:
    """Run the masked pre-LN transformer over (S, d) or (B, S, d) embeddings.

    ``probe``, when given, collects each layer's attention probabilities.
    """
    squeeze = sequence.ndim == 2
    x = reshape(sequence, (1, *sequence.shape)) if squeeze else sequence
    if x.ndim != 3 or x.shape[1] != mask.size or x.shape[2] != weights.d_text:
        raise ShapeError(f"sequence {sequence.shape} does not match mask size {mask.size}")
    for layer in weights.layers:
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps)
        x = x + _attention(h, layer, weights.n_heads, mask, probe)
        h = layer_norm(x, layer.ln2_gain, layer.ln2_bias, eps)
        x = x + matmul(quick_gelu(matmul(h, Tensor(layer.mlp_w1)) + layer.mlp_b1), Tensor(layer.mlp_w2)) + layer.mlp_b2
    x = layer_norm(x, weights.lnf_gain, weights.lnf_bias, eps)
    eos = x[:, -1, :]
    if squeeze:
        return EncoderOutput(x[0], eos[0])
    return EncoderOutput(x, eos)


def text_feature(
    weights: TextEncoderWeights,
    head: ProjectionHead,
    prompts: PromptState,
    class_id: int,
    mask: AttentionMask,
    policy: str = "fixed_text",
) -> Tensor:
    seq = assemble_prompt(weights, prompts, class_id, policy)
    return head(encode_text(weights, seq, mask).eos)


@dataclass
class EncoderContext:
    """Everything frozen that turns a prompt matrix into per-class text features."""

    config: EncoderConfig
    weights: TextEncoderWeights
    head: ProjectionHead
    class_tokens: np.ndarray
    mask: AttentionMask = field(init=False)

    def __post_init__(self):
        self.mask = mask_for(self.config)

    @classmethod
    def create(cls, config: EncoderConfig, n_classes: int, rng: RngStream) -> EncoderContext:
        weights, head = init_text_encoder(config, rng)
        return cls(config, weights, head, class_token_table(n_classes, config.n_text, config.vocab_size))

    def encode(self, delta: Tensor, class_ids: Sequence[int], probe: list | None = None) -> EncoderOutput:
        mask = self.mask if delta.shape[0] == self.config.n_prompt else mask_for(self.config, delta.shape[0])
        seq = assemble_batch(self.weights, delta, self.class_tokens, class_ids, self.config.position_policy)
        return encode_text(self.weights, seq, mask, self.config.ln_eps, probe)

    def text_features(self, delta: Tensor, class_ids: Sequence[int]) -> Tensor:
        """(len(class_ids), d_embed) projected EOS embeddings."""
        return self.head(self.encode(delta, class_ids).eos)

    def checksum(self) -> str:
        return _checksum([*self.weights.arrays(), self.head.weight, self.class_tokens.astype(np.float64)])


# -- vision backbone -------------------------------------------------------------
@dataclass
class VisionBackbone:
    """Frozen stand-in image encoder: f_v(x) = A_dom (mu_class + eps_x) + b_dom."""

    anchors: np.ndarray  # n_classes x d_embed
    domain_A: np.ndarray  # n_domains x d_embed x d_embed
    domain_b: np.ndarray  # n_domains x d_embed
    sigma: float
    seed: int
    frozen: bool = True

    @property
    def n_domains(self) -> int:
        return self.domain_A.shape[0]

    def noise(self, sample_id: int) -> np.ndarray:
        g = RngStream(self.seed, f"vision/sample/{sample_id}").generator()
        return g.normal(0.0, 1.0, self.anchors.shape[1]) * self.sigma

    def checksum(self) -> str:
        return _checksum([self.anchors, self.domain_A, self.domain_b, np.array([self.sigma])])

    def to_dict(self) -> dict[str, Any]:
        return {
            "anchors": self.anchors.tolist(),
            "domain_A": self.domain_A.tolist(),
            "domain_b": self.domain_b.tolist(),
            "sigma": self.sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> VisionBackbone:
        return cls(
            np.array(d["anchors"], dtype=np.float64),
            np.array(d["domain_A"], dtype=np.float64),
            np.array(d["domain_b"], dtype=np.float64),
            float(d["sigma"]),
            int(d["seed"]),
        )


def vision_features(backbone: VisionBackbone, sample) -> np.ndarray:
    """Feature of one sample; ``sample`` carries sample_id, class_id and domain."""
    if not 0 <= sample.domain < backbone.n_domains:
        raise KeyError(f"unknown domain {sample.domain}")
    latent = backbone.anchors[sample.class_id] + backbone.noise(sample.sample_id)
    return backbone.domain_A[sample.domain] @ latent + backbone.domain_b[sample.domain]
