"""ViT encoder building blocks: patch embedding, attention, MLP, head, params.

These pieces know nothing about how position embeddings are routed;
:mod:`pewire.wiring` composes them per wiring variant.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from pewire import autodiff as ad
from pewire.autodiff import Param, Tensor
from pewire.errors import ConfigError, ShapeError
from pewire.wiring_config import WiringConfig, WiringVariant

INIT_STD = 0.02


class HeadMode(str, enum.Enum):
    CLS = "cls"
    GAP = "gap"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    head_mode: HeadMode = HeadMode.GAP

    def __post_init__(self):
        object.__setattr__(self, "head_mode", HeadMode(self.head_mode))
        for field in ("image_size", "patch_size", "channels", "embed_dim", "num_layers", "num_heads", "num_classes"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"{field} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2 for layer normalisation")
        if self.hidden_dim < 1:
            raise ConfigError("mlp_ratio yields an empty hidden layer")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def has_cls(self) -> bool:
        return self.head_mode is HeadMode.CLS

    @property
    def last_layer(self) -> int:
        """Index ``L`` of the final encoder layer (layers are ``0..L``)."""
        return self.num_layers - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_mode"] = self.head_mode.value
        return d


TOY_TI = ModelConfig()
DEIT_TI = ModelConfig(224, 16, 3, 192, 12, 3, 4.0, 1000, HeadMode.GAP)
DEIT_S = ModelConfig(224, 16, 3, 384, 12, 6, 4.0, 1000, HeadMode.GAP)
DEIT_B = ModelConfig(224, 16, 3, 768, 12, 12, 4.0, 1000, HeadMode.GAP)


def pe_rows(config: ModelConfig, wiring: WiringConfig) -> int:
    # the class-token position exists only in Default-style dataflow
    default_style = wiring.variant in (WiringVariant.DEFAULT, WiringVariant.NON_LAYERWISE_LAST_LN)
    return config.num_patches + (1 if config.has_cls and default_style else 0)


def param_shapes(config: ModelConfig, wiring: WiringConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor the (config, wiring) pair needs, in init order."""
    d, hid = config.embed_dim, config.hidden_dim
    patch_in = config.channels * config.patch_size**2
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (patch_in, d),
        "patch_embed.bias": (d,),
    }
    if config.has_cls:
        shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (pe_rows(config, wiring), d)
    delivered = set(wiring.delivered_layers(config.num_layers))
    for layer in range(config.num_layers):
        p = f"layer.{layer}."
        shapes[p + "ln_attn.gamma"] = (d,)
        shapes[p + "ln_attn.beta"] = (d,)
        if layer in delivered:
            shapes[p + "ln_pe.gamma"] = (d,)
            shapes[p + "ln_pe.beta"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "ln_mlp.gamma"] = (d,)
        shapes[p + "ln_mlp.beta"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, hid)
        shapes[p + "mlp.fc1.bias"] = (hid,)
        shapes[p + "mlp.fc2.weight"] = (hid, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["last_ln.gamma"] = (d,)
    shapes["last_ln.beta"] = (d,)
    if wiring.has_last_ln_pe:
        shapes["last_ln_pe.gamma"] = (d,)
        shapes["last_ln_pe.beta"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def count_params(config: ModelConfig, wiring: WiringConfig) -> int:
    """Exact number of trainable scalars, without allocating any tensor."""
    return sum(math.prod(s) for s in param_shapes(config, wiring).values())


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(ad.DTYPE)


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=ad.DTYPE)
    if name.endswith(".beta") or name.endswith(".bias") or name == "cls_token":
        return np.zeros(shape, dtype=ad.DTYPE)
    return trunc_normal(rng, shape)


class ModelParams:
    """Named parameter table for one (ModelConfig, WiringConfig) pair."""

    def __init__(self, config: ModelConfig, wiring: WiringConfig, params: dict[str, Param]):
        expected = param_shapes(config, wiring)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            if missing or extra:
                raise ConfigError(f"parameter set mismatch; missing={missing} extra={extra}")
            params = {k: params[k] for k in expected}
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.wiring = wiring
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, wiring: WiringConfig, seed: int | np.random.Generator = 0) -> "ModelParams":
        wiring.validate_for(config.num_layers)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = {name: Param(name, _init_value(name, shape, rng)) for name, shape in param_shapes(config, wiring).items()}
        return cls(config, wiring, params)

    @classmethod
    def from_arrays(cls, config, wiring, arrays: dict[str, np.ndarray], frozen=()) -> "ModelParams":
        params = {name: Param(name, np.array(a), trainable=name not in frozen) for name, a in arrays.items()}
        return cls(config, wiring, params)

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def trainable(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def frozen_names(self) -> list[str]:
        return [k for k, p in self.params.items() if not p.trainable]

    def copy(self, dtype=None) -> "ModelParams":
        out = {}
        for name, p in self.params.items():
            data = p.data.astype(dtype) if dtype is not None else p.data.copy()
            out[name] = Param(name, data, trainable=p.trainable)
        return ModelParams(self.config, self.wiring, out)

    def freeze(self, *names: str) -> None:
        for name in names:
            self.params[name].trainable = False

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable())


# ---------------------------------------------------------------------------
# building blocks


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[C,H,W]`` (or ``[B,C,H,W]``) into ``[N, C*P*P]`` row-major patches.

    Inside a patch the layout is channel-major, then pixel rows.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"patchify expects [C,H,W] or [B,C,H,W], got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    out = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    out = np.ascontiguousarray(out.reshape(b, (h // p) * (w // p), c * p * p))
    return out[0] if single else out


def msa(x_ln: Tensor, qkv_w: Tensor, qkv_b: Tensor, proj_w: Tensor, proj_b: Tensor, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention (no residual)."""
    *lead, t, d = x_ln.shape
    if d % num_heads:
        raise ConfigError(f"embed dim {d} is not divisible by {num_heads} heads")
    dh = d // num_heads
    x3 = x_ln if lead else ad.reshape(x_ln, (1, t, d))
    b = x3.shape[0]
    qkv = ad.linear(x3, qkv_w, qkv_b)
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = ad.linear(ctx, proj_w, proj_b)
    return out if lead else ad.reshape(out, (t, d))


def attention_weights(x_ln: np.ndarray, qkv_w: np.ndarray, qkv_b: np.ndarray, num_heads: int) -> np.ndarray:
    """Attention probabilities ``[B, heads, T, T]`` for inspection."""
    x = x_ln if x_ln.ndim == 3 else x_ln[None]
    b, t, d = x.shape
    dh = d // num_heads
    qkv = (x @ qkv_w + qkv_b).reshape(b, t, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    scores = qkv[0] @ qkv[1].transpose(0, 1, 3, 2) / math.sqrt(dh)
    return ad.softmax_array(scores)


def mlp(x_ln: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x_ln, fc1_w, fc1_b)), fc2_w, fc2_b)


def head(
    x_last: Tensor,
    ln: tuple[Tensor, Tensor],
    classifier: tuple[Tensor, Tensor],
    mode: HeadMode | str,
    pe_term: Tensor | None = None,
    pe_ln: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """Last LN, optional normalised PE term on patch rows, then classifier.

    Returns ``(logits, y)`` where ``y`` is the post-Last-LN token state.
    ``x_last`` is ``[B, T, d]`` or ``[T, d]``; in CLS mode row 0 is the
    class token.
    """
    mode = HeadMode(mode)
    if x_last.ndim == 2:
        logits, y = head(ad.reshape(x_last, (1,) + x_last.shape), ln, classifier, mode, pe_term, pe_ln)
        return ad.reshape(logits, logits.shape[1:]), ad.reshape(y, y.shape[1:])
    y = ad.layer_norm(x_last, *ln)
    start = 1 if mode is HeadMode.CLS else 0
    if pe_term is not None:
        if pe_ln is None:
            raise ConfigError("pe_term needs its own layer norm parameters")
        n_patch = x_last.shape[-2] - start
        if pe_term.ndim != 2 or pe_term.shape != (n_patch, x_last.shape[-1]):
            raise ShapeError(f"pe_term shape {pe_term.shape} does not cover the {n_patch} patch rows")
        pe = ad.layer_norm(pe_term, *pe_ln)
        if start:
            y = ad.concat([y[:, :1], ad.add(y[:, 1:], pe)], axis=1)
        else:
            y = ad.add(y, pe)
    if mode is HeadMode.CLS:
        pooled = y[:, 0]
    else:
        pooled = ad.mean(y, axis=1)
    logits = ad.linear(pooled, *classifier)
    return logits, y
