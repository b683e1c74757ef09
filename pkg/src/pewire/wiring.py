"""Position-embedding wiring: Default, LaPE, PVG, MPVG and the fig5b control.

Layer-wise variants route the PE table through a chain of per-layer layer
norms. For every delivered layer ``l`` the tensor added to that layer's
attention input is ``LN'_l(src)``, where ``src`` is the previous delivered
layer's output (hierarchical) or the raw table (non-hierarchical). LaPE's
and PVG's index conventions both reduce to this rule; they differ only in
which layers are delivered and whether the table is also added to the
input tokens.

The last-LN PE branch (MPVG, fig5b) reads ``pos_k``: the raw table for
``k == 0`` and the tensor injected at layer ``k`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pewire import autodiff as ad
from pewire.autodiff import Tensor
from pewire.errors import ConfigError, NumericFault, ShapeError
from pewire.model import ModelConfig, ModelParams, head, mlp, msa, patchify
from pewire.wiring_config import PRESETS, WiringConfig, WiringVariant, variant_preset

__all__ = [
    "PRESETS",
    "WiringConfig",
    "WiringVariant",
    "variant_preset",
    "PEChain",
    "ForwardTrace",
    "build_pe_chain",
    "forward",
    "loss_and_grads",
]


@dataclass
class PEChain:
    """``initial`` is the raw table; ``injected[l]`` is what layer ``l`` receives."""

    initial: Tensor
    injected: dict[int, Tensor] = field(default_factory=dict)

    def state(self, index: int) -> Tensor:
        if index == 0:
            return self.initial
        if index not in self.injected:
            raise ConfigError(f"PE chain has no state for layer {index}")
        return self.injected[index]

    @property
    def layers(self) -> list[int]:
        return sorted(self.injected)


def build_pe_chain(
    pos0: Tensor,
    ln_params: dict[int, tuple[Tensor, Tensor]],
    hierarchical: bool,
    layers,
) -> PEChain:
    chain = PEChain(pos0)
    src = pos0
    for layer in sorted(layers):
        if layer not in ln_params:
            raise ConfigError(f"no PE layer norm for delivered layer {layer}")
        out = ad.layer_norm(src if hierarchical else pos0, *ln_params[layer])
        chain.injected[layer] = out
        src = out
    return chain


@dataclass
class ForwardTrace:
    """Intermediate states captured during one forward pass.

    ``tokens[l]`` is ``LN_l(x_l)`` before any PE injection, ``[B, T, d]``.
    ``pe[l]`` is the PE tensor added at layer ``l``, ``[N, d]``.
    """

    has_cls: bool
    variant: WiringVariant
    tokens: dict[int, Tensor] = field(default_factory=dict)
    pe: dict[int, Tensor] = field(default_factory=dict)
    attn_inputs: dict[int, Tensor] = field(default_factory=dict)
    chain: PEChain | None = None
    pre_last: Tensor | None = None
    post_last: Tensor | None = None
    logits: Tensor | None = None

    @property
    def layers(self) -> list[int]:
        return sorted(self.tokens)


def _ln(params: ModelParams, prefix: str) -> tuple[Tensor, Tensor]:
    return params[prefix + ".gamma"], params[prefix + ".beta"]


def _pad_cls(pe: Tensor, has_cls: bool) -> Tensor:
    if not has_cls:
        return pe
    zero = Tensor(np.zeros((1, pe.shape[1]), dtype=pe.dtype))
    return ad.concat([zero, pe], axis=0)


def embed(params: ModelParams, images: np.ndarray) -> Tensor:
    """Patch projection of a ``[B, C, H, W]`` batch to ``[B, N, d]`` tokens."""
    config = params.config
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expected = (config.channels, config.image_size, config.image_size)
    if images.shape[1:] != expected:
        raise ShapeError(f"images have shape {images.shape[1:]}, model expects {expected}")
    dtype = params["patch_embed.weight"].dtype
    patches = Tensor(patchify(images, config.patch_size).astype(dtype, copy=False))
    return ad.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])


def forward(
    params: ModelParams,
    images: np.ndarray,
    wiring: WiringConfig | None = None,
    config: ModelConfig | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Logits ``[B, num_classes]`` and the trace for a batch of images."""
    config = config or params.config
    wiring = wiring or params.wiring
    wiring.validate_for(config.num_layers)
    has_cls = config.has_cls
    trace = ForwardTrace(has_cls=has_cls, variant=wiring.variant)

    try:
        tokens = embed(params, images)
    except NumericFault as exc:
        raise NumericFault(f"patch embedding: {exc}", op=exc.op) from None
    batch = tokens.shape[0]
    pos = params["pos_embed"]

    if wiring.layerwise:
        if wiring.pe_at_input:
            tokens = ad.add(tokens, pos)
        x = tokens
        if has_cls:
            x = ad.concat([ad.broadcast_rows(ad.reshape(params["cls_token"], (1, -1)), batch), tokens], axis=1)
        delivered = wiring.delivered_layers(config.num_layers)
        ln_pe = {layer: _ln(params, f"layer.{layer}.ln_pe") for layer in delivered}
        chain = build_pe_chain(pos, ln_pe, wiring.hierarchical, delivered)
        trace.chain = chain
    else:
        x = tokens
        if has_cls:
            x = ad.concat([ad.broadcast_rows(ad.reshape(params["cls_token"], (1, -1)), batch), tokens], axis=1)
        x = ad.add(x, pos)
        chain = None

    for layer in range(config.num_layers):
        p = f"layer.{layer}."
        try:
            h = ad.layer_norm(x, *_ln(params, p + "ln_attn"))
            trace.tokens[layer] = h
            if chain is not None and layer in chain.injected:
                injected = chain.injected[layer]
                trace.pe[layer] = injected
                h = ad.add(h, _pad_cls(injected, has_cls))
            trace.attn_inputs[layer] = h
            x = ad.add(
                x,
                msa(h, params[p + "attn.qkv.weight"], params[p + "attn.qkv.bias"],
                    params[p + "attn.proj.weight"], params[p + "attn.proj.bias"], config.num_heads),
            )
            h2 = ad.layer_norm(x, *_ln(params, p + "ln_mlp"))
            x = ad.add(
                x,
                mlp(h2, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"],
                    params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"]),
            )
        except NumericFault as exc:
            raise NumericFault(f"layer {layer}: {exc}", op=exc.op, layer=layer) from None

    trace.pre_last = x
    pe_term = None
    if wiring.has_last_ln_pe:
        k = wiring.last_ln_pe_index
        pe_term = chain.state(k) if chain is not None else pos
        if pe_term.shape[0] == config.num_patches + 1:
            pe_term = pe_term[1:]  # class-token row of a Default-style table
    try:
        logits, y = head(
            x,
            _ln(params, "last_ln"),
            (params["head.weight"], params["head.bias"]),
            config.head_mode,
            pe_term=pe_term,
            pe_ln=_ln(params, "last_ln_pe") if pe_term is not None else None,
        )
    except NumericFault as exc:
        raise NumericFault(f"head: {exc}", op=exc.op, layer=config.num_layers) from None
    trace.post_last = y
    trace.logits = logits
    return logits, trace


def loss_and_grads(params: ModelParams, images: np.ndarray, labels) -> tuple[float, dict[str, np.ndarray], Tensor]:
    """Cross-entropy loss, gradients of trainable params, and the logits."""
    logits, _ = forward(params, images)
    loss = ad.cross_entropy(logits, labels)
    grads = ad.backward(loss)
    return float(loss.data), grads, logits


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for many images without building a graph."""
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = forward(params, images[start:start + batch_size])
            out.append(logits.data)
    return np.concatenate(out, axis=0)
