"""Wiring variants, their canonical presets and the preset string grammar.

A preset string is ``variant[,key=value...]``::

    mpvg
    mpvg,last=11
    mpvg,layer0=true
    lape,hier=false

Keys: ``layer0``, ``hier``, ``xpe`` (booleans) and ``last`` (int or ``none``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from pewire.errors import ConfigError


class WiringVariant(str, enum.Enum):
    DEFAULT = "default"
    LAPE = "lape"
    PVG = "pvg"
    MPVG = "mpvg"
    NON_LAYERWISE_LAST_LN = "fig5b"


LAYERWISE = (WiringVariant.LAPE, WiringVariant.PVG, WiringVariant.MPVG)


@dataclass(frozen=True)
class WiringConfig:
    variant: WiringVariant
    include_layer0: bool = False
    hierarchical: bool = True
    add_pe_at_input: bool = True
    last_ln_pe_index: int | None = None

    def __post_init__(self):
        if self.last_ln_pe_index is not None:
            if self.variant not in (WiringVariant.MPVG, WiringVariant.NON_LAYERWISE_LAST_LN):
                raise ConfigError(f"last-LN PE index is only valid for mpvg/fig5b, not {self.variant.value}")
            if self.last_ln_pe_index < 0:
                raise ConfigError("last-LN PE index must be >= 0")
            if self.variant is WiringVariant.NON_LAYERWISE_LAST_LN and self.last_ln_pe_index != 0:
                raise ConfigError("fig5b has no PE chain; only the initial PE (last=0) can reach the last LN")
        needs_branch = (WiringVariant.MPVG, WiringVariant.NON_LAYERWISE_LAST_LN)
        if self.variant in needs_branch and self.last_ln_pe_index is None:
            raise ConfigError(f"{self.variant.value} requires the last-LN PE branch")

    @property
    def layerwise(self) -> bool:
        return self.variant in LAYERWISE

    @property
    def pe_at_input(self) -> bool:
        # Default-style dataflow always adds PE to the input tokens
        return self.add_pe_at_input or not self.layerwise

    @property
    def has_last_ln_pe(self) -> bool:
        return self.last_ln_pe_index is not None

    def delivered_layers(self, num_layers: int) -> list[int]:
        if not self.layerwise:
            return []
        return list(range(0 if self.include_layer0 else 1, num_layers))

    def validate_for(self, num_layers: int) -> None:
        k = self.last_ln_pe_index
        if k is None or k == 0:
            return
        if k > num_layers - 1:
            raise ConfigError(f"last-LN PE index {k} exceeds the last layer {num_layers - 1}")
        if k not in self.delivered_layers(num_layers):
            raise ConfigError(f"last-LN PE index {k} names a layer that receives no PE")

    def preset_string(self) -> str:
        """Canonical preset string that round-trips through :func:`variant_preset`."""
        base = PRESETS[self.variant]
        parts = [self.variant.value]
        if self.layerwise:
            if self.include_layer0 != base.include_layer0:
                parts.append(f"layer0={str(self.include_layer0).lower()}")
            if self.hierarchical != base.hierarchical:
                parts.append(f"hier={str(self.hierarchical).lower()}")
            if self.add_pe_at_input != base.add_pe_at_input:
                parts.append(f"xpe={str(self.add_pe_at_input).lower()}")
        if self.last_ln_pe_index != base.last_ln_pe_index:
            parts.append(f"last={self.last_ln_pe_index}")
        return ",".join(parts)


PRESETS: dict[WiringVariant, WiringConfig] = {
    WiringVariant.DEFAULT: WiringConfig(WiringVariant.DEFAULT, False, False, True, None),
    WiringVariant.LAPE: WiringConfig(WiringVariant.LAPE, True, True, False, None),
    WiringVariant.PVG: WiringConfig(WiringVariant.PVG, False, True, True, None),
    WiringVariant.MPVG: WiringConfig(WiringVariant.MPVG, False, True, True, 0),
    WiringVariant.NON_LAYERWISE_LAST_LN: WiringConfig(WiringVariant.NON_LAYERWISE_LAST_LN, False, False, True, 0),
}

_BOOL_KEYS = {"layer0": "include_layer0", "hier": "hierarchical", "xpe": "add_pe_at_input"}


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"'{key}' expects a boolean, got {text!r}")


def variant_preset(spec: str) -> WiringConfig:
    """Parse ``variant[,key=value...]`` into a :class:`WiringConfig`."""
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    if not parts:
        raise ConfigError("empty wiring preset")
    try:
        variant = WiringVariant(parts[0].lower())
    except ValueError:
        names = ", ".join(v.value for v in WiringVariant)
        raise ConfigError(f"unknown wiring variant {parts[0]!r} (expected one of {names})") from None
    config = PRESETS[variant]
    changes: dict = {}
    seen: set[str] = set()
    for item in parts[1:]:
        if "=" not in item:
            raise ConfigError(f"malformed override {item!r}; expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        key = key.lower()
        if key in seen:
            raise ConfigError(f"override {key!r} given twice")
        seen.add(key)
        if key in _BOOL_KEYS:
            if not config.layerwise:
                raise ConfigError(f"'{key}' does not apply to the {variant.value} wiring")
            changes[_BOOL_KEYS[key]] = _parse_bool(key, value)
        elif key == "last":
            if value.lower() == "none":
                changes["last_ln_pe_index"] = None
                continue
            try:
                index = int(value)
            except ValueError:
                raise ConfigError(f"'last' expects an integer or none, got {value!r}") from None
            changes["last_ln_pe_index"] = index
        else:
            raise ConfigError(f"unknown wiring override {key!r}")
    try:
        return replace(config, **changes)
    except ConfigError as exc:
        raise ConfigError(f"wiring preset {spec!r}: {exc}") from None
