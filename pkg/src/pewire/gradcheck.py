"""Finite-difference verification of the reverse-mode gradients.

The check runs on a float64 copy of the model: the analytic gradient comes
from :func:`pewire.autodiff.backward`, the oracle from central differences
perturbing one scalar at a time. By default the central difference is
refined with one Richardson step, ``(4 D(h/2) - D(h)) / 3``, which cancels
the ``h**2`` truncation term that otherwise dominates for tiny gradient
entries behind layer norms of small-scale inputs (the raw PE table).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pewire import autodiff as ad
from pewire.model import ModelParams
from pewire.wiring import forward
from pewire.wiring_config import WiringConfig

REL_FLOOR = 1e-8


def relative_error(a, b) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, 1e-8)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    variant: str
    step: float
    tol: float
    method: str
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.params, key=lambda p: p.max_rel_error, default=None)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    def __getitem__(self, name: str) -> ParamCheck:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


def _loss(params: ModelParams, images, labels) -> float:
    with ad.no_grad():
        logits, _ = forward(params, images)
        return float(ad.cross_entropy(logits, labels).data)


def finite_difference(loss_fn, array: np.ndarray, step: float, richardson: bool = True) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``array``, perturbed in place."""
    flat = array.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)

    def central(i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        return (up - down) / (2.0 * h)

    for i in range(flat.size):
        if richardson:
            out[i] = (4.0 * central(i, step / 2) - central(i, step)) / 3.0
        else:
            out[i] = central(i, step)
    return out.reshape(array.shape)


def numeric_gradient(params: ModelParams, name: str, images, labels, step: float, richardson: bool = True) -> np.ndarray:
    """Finite-difference gradient of the mean cross-entropy w.r.t. one param."""
    return finite_difference(lambda: _loss(params, images, labels), params[name].data, step, richardson)


def grad_check(
    model: ModelParams,
    config: WiringConfig | None = None,
    batch=None,
    step: float = 1e-3,
    tol: float = 1e-3,
    richardson: bool = True,
) -> GradCheckReport:
    """Compare analytic and finite-difference gradients for every trainable param.

    ``batch`` is ``(images, labels)``. ``config`` optionally overrides the
    model's wiring (the param table must match it). Frozen params are
    skipped and do not appear in the report. A non-finite forward value
    raises :class:`~pewire.errors.NumericFault` naming the op.
    """
    if batch is None:
        raise ValueError("grad_check needs a (images, labels) batch")
    images, labels = batch
    params = model.copy(np.float64)
    if config is not None and config != params.wiring:
        params = ModelParams(params.config, config, params.params)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    logits, _ = forward(params, images)
    analytic = ad.backward(ad.cross_entropy(logits, labels))

    report = GradCheckReport(
        variant=params.wiring.variant.value,
        step=step,
        tol=tol,
        method="central+richardson" if richardson else "central",
    )
    for p in params.trainable():
        g = analytic.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        fd = numeric_gradient(params, p.name, images, labels, step, richardson)
        rel = relative_error(g, fd)
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        worst = float(rel[idx]) if rel.size else 0.0
        report.params.append(ParamCheck(
            name=p.name,
            max_rel_error=worst,
            worst_index=tuple(int(i) for i in idx),
            analytic=float(g[idx]) if rel.size else 0.0,
            numeric=float(fd[idx]) if rel.size else 0.0,
            passed=worst <= tol,
        ))
    return report


def toy_batch(config, n: int = 2, seed: int = 0):
    """Standard-normal images and cycling labels for a gradient check."""
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n, config.channels, config.image_size, config.image_size))
    labels = np.arange(n) % config.num_classes
    return images, labels
