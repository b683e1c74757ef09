"""Token/PE correlation, heatmaps, Last-LN statistics and CSV export.

Everything here reads a :class:`~pewire.wiring.ForwardTrace` or a parameter
table and never mutates either. Statistics are accumulated in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pewire.checkpoint import canonical_json
from pewire.errors import ContractError, ShapeError, UndefinedStatistic
from pewire.model import HeadMode, ModelParams
from pewire.wiring import ForwardTrace

STREAMS = ("token", "pe")


def pearson(a, b) -> float:
    """Pearson correlation of two equally shaped arrays, flattened jointly."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"pearson needs equal sizes, got {a.size} and {b.size}")
    if a.size < 2:
        raise ContractError("pearson needs at least two elements")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedStatistic("correlation undefined: an input has zero variance")
    r = float(np.dot(da, db)) / (sa * sb)
    return max(-1.0, min(1.0, r))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise UndefinedStatistic("cosine undefined: zero-norm vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def _batch_mean(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x))
    if x.ndim == 2:
        return x.astype(np.float64)
    return x.astype(np.float64).mean(axis=0)


def heatmap(trace: ForwardTrace, layer: int, stream: str) -> np.ndarray:
    """Batch-averaged ``[N, d]`` matrix of one stream at one layer (patch rows only)."""
    if stream not in STREAMS:
        raise ValueError(f"stream must be one of {STREAMS}")
    if layer not in trace.tokens:
        raise IndexError(f"layer {layer} was not executed (layers: {trace.layers})")
    if stream == "pe":
        if layer not in trace.pe:
            raise KeyError(f"no PE stream at layer {layer}")
        return _batch_mean(trace.pe[layer])
    tok = _batch_mean(trace.tokens[layer])
    return tok[1:] if trace.has_cls else tok


@dataclass
class LayerCorrelation:
    layer: int
    r: float | None
    error: str | None = None


def layer_correlations(trace: ForwardTrace, batch_averaged: bool = True) -> list[LayerCorrelation]:
    """Token/PE Pearson r for every layer that received PE, ordered by layer.

    With ``batch_averaged`` the token stream is averaged over the batch first;
    otherwise per-sample correlations are averaged.
    """
    if not trace.pe:
        raise KeyError(f"trace of the {trace.variant.value} wiring has no PE stream")
    out = []
    for layer in sorted(trace.pe):
        pe = _batch_mean(trace.pe[layer])
        try:
            if batch_averaged:
                r = pearson(heatmap(trace, layer, "token"), pe)
            else:
                tok = np.asarray(trace.tokens[layer].data, dtype=np.float64)
                if tok.ndim == 2:
                    tok = tok[None]
                if trace.has_cls:
                    tok = tok[:, 1:]
                r = float(np.mean([pearson(sample, pe) for sample in tok]))
            out.append(LayerCorrelation(layer, r))
        except UndefinedStatistic as exc:
            out.append(LayerCorrelation(layer, None, str(exc)))
    return out


def lastln_cosine(trace: ForwardTrace, mode: HeadMode | str | None = None) -> float:
    """Cosine similarity of the pooled state before and after the Last LN.

    GAP: mean over patch tokens of the batch-averaged states.
    CLS: the class-token row of the batch-averaged states.
    """
    if trace.pre_last is None or trace.post_last is None:
        raise ContractError("trace lacks the Last-LN states")
    mode = HeadMode(mode) if mode is not None else (HeadMode.CLS if trace.has_cls else HeadMode.GAP)
    before = _batch_mean(trace.pre_last)
    after = _batch_mean(trace.post_last)
    if mode is HeadMode.CLS:
        if not trace.has_cls:
            raise ContractError("CLS cosine requested for a trace without a class token")
        return cosine(before[0], after[0])
    start = 1 if trace.has_cls else 0
    return cosine(before[start:].mean(axis=0), after[start:].mean(axis=0))


def lastln_affine_stats(params: ModelParams | dict) -> dict[str, float]:
    """Population mean/variance of the Last-LN gamma and beta vectors."""
    gamma = np.asarray(getattr(params["last_ln.gamma"], "data", params["last_ln.gamma"]), dtype=np.float64)
    beta = np.asarray(getattr(params["last_ln.beta"], "data", params["last_ln.beta"]), dtype=np.float64)
    return {
        "var_gamma": float(gamma.var()),
        "var_beta": float(beta.var()),
        "mean_gamma": float(gamma.mean()),
        "mean_beta": float(beta.mean()),
    }


def token_norms(trace: ForwardTrace) -> np.ndarray:
    """Per-patch-token L2 norms of the first sample before/after the Last LN, ``[N, 2]``."""
    start = 1 if trace.has_cls else 0
    before = np.asarray(trace.pre_last.data, dtype=np.float64)
    after = np.asarray(trace.post_last.data, dtype=np.float64)
    if before.ndim == 2:
        before, after = before[None], after[None]
    return np.stack([np.linalg.norm(before[0, start:], axis=-1), np.linalg.norm(after[0, start:], axis=-1)], axis=1)


@dataclass
class DiagnosticsReport:
    correlations: list[LayerCorrelation] = field(default_factory=list)
    heatmaps: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    lastln: dict[str, float] = field(default_factory=dict)
    cosine_before_after: float | None = None
    token_norms: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.heatmaps})


def build_report(params: ModelParams, trace: ForwardTrace, meta: dict | None = None) -> DiagnosticsReport:
    report = DiagnosticsReport(meta=dict(meta or {}))
    for layer in trace.layers:
        report.heatmaps[(layer, "token")] = heatmap(trace, layer, "token").astype(np.float32)
        if layer in trace.pe:
            report.heatmaps[(layer, "pe")] = heatmap(trace, layer, "pe").astype(np.float32)
    if trace.pe:
        report.correlations = layer_correlations(trace)
    report.lastln = lastln_affine_stats(params)
    try:
        report.cosine_before_after = lastln_cosine(trace)
    except UndefinedStatistic:
        report.cosine_before_after = None
    report.token_norms = token_norms(trace)
    report.meta.setdefault("variant", trace.variant.value)
    report.meta.setdefault("layers", trace.layers)
    return report


def _fmt(x) -> str:
    # 9 significant digits round-trip float32 exactly
    return format(float(np.float32(x)), ".9g")


def _fmt64(x) -> str:
    return "nan" if x is None else repr(float(x))


def export_report(report: DiagnosticsReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for (layer, stream), matrix in sorted(report.heatmaps.items()):
            path = out / f"layer{layer}_{stream}.csv"
            lines = [",".join(_fmt(v) for v in row) for row in np.asarray(matrix)]
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
        if report.correlations:
            path = out / "correlations.csv"
            rows = ["layer,r"] + [f"{c.layer},{_fmt64(c.r)}" for c in report.correlations]
            path.write_text("\n".join(rows) + "\n")
            written.append(path)
        path = out / "lastln.csv"
        stats = dict(report.lastln)
        if report.cosine_before_after is not None:
            stats["cosine_before_after"] = report.cosine_before_after
        path.write_text("stat,value\n" + "".join(f"{k},{_fmt64(v)}\n" for k, v in stats.items()))
        written.append(path)
        if report.token_norms is not None:
            path = out / "token_norms.csv"
            rows = ["token,norm_before,norm_after"] + [
                f"{i},{_fmt64(a)},{_fmt64(b)}" for i, (a, b) in enumerate(report.token_norms)
            ]
            path.write_text("\n".join(rows) + "\n")
            written.append(path)
        meta = dict(report.meta)
        meta["undefined_correlations"] = [c.layer for c in report.correlations if c.r is None]
        path = out / "meta.json"
        path.write_text(canonical_json(meta))
        written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write diagnostics to {exc.filename or out}: {exc.strerror}") from exc
    return written


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    return np.array([[np.float32(float(v)) for v in row] for row in rows], dtype=np.float32)


def load_meta(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
