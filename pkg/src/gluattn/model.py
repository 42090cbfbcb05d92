"""Pre-norm transformer models for patch classification and causal language modelling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .attention import AttentionConfig, MultiHeadAttention, causal_mask, param_count
from .errors import ConfigError, ShapeError
from .nn import GLUFFN, Embedding, LayerNorm, Linear
from .rng import make_rng
from .tensor import Tensor, add, as_dtype, gather_rows, mean

TASKS = ("classify", "lm")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 384
    n_heads: int = 8
    ffn_hidden: int = 1024
    variant: str = "baseline"
    task: str = "classify"
    n_classes: int = 10
    n_patches: int = 64
    patch_dim: int = 48
    vocab: int = 256
    context: int = 16
    final_norm: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("n_layers", "ffn_hidden", "n_classes", "n_patches", "patch_dim", "vocab", "context"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        AttentionConfig(self.d_model, self.n_heads, self.variant)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.variant)

    @classmethod
    def reference(cls, variant: str = "baseline") -> "ModelConfig":
        """Full-size classifier: 6 layers, d=384, 8 heads, GLU FFN 384->2048 / 1024->384."""
        return cls(6, 384, 8, 1024, variant, "classify", 10, 64, 48)

    def with_variant(self, variant: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "variant": variant})


class Block:
    def __init__(self, cfg: ModelConfig, seed: int, prefix: str, dtype):
        def rng(name, *extra):
            return make_rng(seed, prefix + name, *extra)

        self.ln1 = LayerNorm(cfg.d_model, dtype)
        # W_V and W_O change shape with the variant, so their init stream is keyed by it too
        self.attn = MultiHeadAttention(cfg.attention, {
            "w_q": rng("attn.w_q"), "w_k": rng("attn.w_k"),
            "w_v": rng("attn.w_v", cfg.variant), "w_o": rng("attn.w_o", cfg.variant),
        }, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn = GLUFFN(cfg.d_model, cfg.ffn_hidden, rng("ffn.w_in"), rng("ffn.w_out"), dtype)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        return block_forward(self, x, mask)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.ln1.named_parameters(prefix + "ln1.")
        yield from self.attn.named_parameters(prefix + "attn.")
        yield from self.ln2.named_parameters(prefix + "ln2.")
        yield from self.ffn.named_parameters(prefix + "ffn.")


def block_forward(block: Block, x: Tensor, mask=None) -> Tensor:
    x = add(x, block.attn(block.ln1(x), mask=mask))
    return add(x, block.ffn(block.ln2(x)))


class TransformerModel:
    """Embedding + learned positions, ``n_layers`` pre-norm blocks, linear head.

    For ``task="classify"`` the input is ``[..., n_patches, patch_dim]`` and the
    blocks' output is mean-pooled over patches; for ``task="lm"`` the input is
    integer ids ``[..., T]`` and attention is causally masked.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype="f32"):
        self.cfg = cfg
        self.seed = seed
        self.dtype = as_dtype(dtype)
        if cfg.task == "classify":
            self.embed = Linear(cfg.patch_dim, cfg.d_model, make_rng(seed, "patch_proj"), dtype)
            n_pos = cfg.n_patches
        else:
            self.embed = Embedding(cfg.vocab, cfg.d_model, make_rng(seed, "tok_embed"), dtype)
            n_pos = cfg.context
        self.pos = Embedding(n_pos, cfg.d_model, make_rng(seed, "pos_embed"), dtype)
        self.blocks = [Block(cfg, seed, f"blocks.{i}.", dtype) for i in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model, dtype) if cfg.final_norm else None
        n_out = cfg.n_classes if cfg.task == "classify" else cfg.vocab
        self.head = Linear(cfg.d_model, n_out, make_rng(seed, "head"), dtype)
        for name, p in self.named_parameters():
            p.name = name

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.cfg.task == "classify":
            yield "patch_proj.weight", self.embed.weight
        else:
            yield "tok_embed.table", self.embed.table
        yield "pos_embed.table", self.pos.table
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{i}.")
        if self.final_ln is not None:
            yield from self.final_ln.named_parameters("final_ln.")
        yield "head.weight", self.head.weight

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigError(f"state does not match model: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape or arr.dtype != p.dtype:
                raise ConfigError(
                    f"{name}: expected {p.shape} {p.dtype}, got {arr.shape} {arr.dtype}")
            p.data = np.array(arr, copy=True)

    def _trunk(self, x: Tensor, mask=None) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return x

    def __call__(self, inputs):
        if self.cfg.task == "classify":
            return classifier_forward(self, inputs)
        return lm_forward(self, inputs)


def classifier_forward(model: TransformerModel, patches) -> Tensor:
    cfg = model.cfg
    if cfg.task != "classify":
        raise ConfigError("classifier_forward needs a classify model")
    patches = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches), dtype=model.dtype)
    if patches.ndim < 2 or patches.shape[-2:] != (cfg.n_patches, cfg.patch_dim):
        raise ShapeError(
            f"expected patches [..., {cfg.n_patches}, {cfg.patch_dim}], got {patches.shape}")
    x = add(model.embed(patches), model.pos.table)
    x = model._trunk(x)
    return model.head(mean(x, axis=-2))


def lm_forward(model: TransformerModel, tokens) -> Tensor:
    cfg = model.cfg
    if cfg.task != "lm":
        raise ConfigError("lm_forward needs an lm model")
    ids = np.asarray(tokens)
    if ids.ndim == 0 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"expected integer token ids [..., T], got {ids.dtype} {ids.shape}")
    T = ids.shape[-1]
    if not 1 <= T <= cfg.context:
        raise ShapeError(f"sequence length {T} outside 1..context={cfg.context}")
    x = add(model.embed(ids), gather_rows(model.pos.table, np.arange(T)))
    x = model._trunk(x, causal_mask(T, model.dtype))
    return model.head(x)


def init_model(cfg: ModelConfig, seed: int = 0, dtype="f32") -> TransformerModel:
    return TransformerModel(cfg, seed, dtype)


def count_parameters(cfg: ModelConfig) -> int:
    """Total weight count without materializing the model."""
    d = cfg.d_model
    n_pos = cfg.n_patches if cfg.task == "classify" else cfg.context
    embed = cfg.patch_dim * d if cfg.task == "classify" else cfg.vocab * d
    per_block = 4 * d + param_count(cfg.attention) + d * 2 * cfg.ffn_hidden + cfg.ffn_hidden * d
    n_out = cfg.n_classes if cfg.task == "classify" else cfg.vocab
    return embed + n_pos * d + cfg.n_layers * per_block + (2 * d if cfg.final_norm else 0) + d * n_out
