"""Correlation, heatmap, Last-LN statistics and report export."""

import mpmath
import numpy as np
import pytest

from pewire import autodiff as ad
from pewire.autodiff import Tensor
from pewire.diagnostics import (
    DiagnosticsReport,
    build_report,
    cosine,
    export_report,
    heatmap,
    lastln_affine_stats,
    lastln_cosine,
    layer_correlations,
    load_meta,
    pearson,
    read_heatmap_csv,
    token_norms,
)
from pewire.errors import ContractError, ShapeError, UndefinedStatistic
from pewire.model import ModelConfig, ModelParams
from pewire.wiring import ForwardTrace, forward
from pewire.wiring_config import WiringVariant, variant_preset


def mp_pearson(a, b):
    """Two-pass Pearson r at 50 digits."""
    with mpmath.workdps(50):
        a = [mpmath.mpf(float(x)) for x in np.ravel(a)]
        b = [mpmath.mpf(float(x)) for x in np.ravel(b)]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
        va = sum((x - ma) ** 2 for x in a)
        vb = sum((y - mb) ** 2 for y in b)
        return float(cov / mpmath.sqrt(va * vb))


def traced(config, name, n=3, seed=0):
    params = ModelParams.init(config, variant_preset(name), seed)
    images = np.random.default_rng(seed).standard_normal(
        (n, config.channels, config.image_size, config.image_size)).astype(np.float32)
    with ad.no_grad():
        _, trace = forward(params, images)
    return params, trace


class TestPearson:
    def test_self_and_negation(self, rng):
        x = rng.standard_normal(50)
        assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_two_pass_oracle(self, rng):
        for _ in range(20):
            a, b = rng.standard_normal((2, 7, 5)) + rng.normal(0, 100, 2)[:, None, None]
            assert abs(pearson(a, b) - mp_pearson(a, b)) < 1e-9

    def test_symmetry_and_affine_invariance(self, rng):
        for _ in range(20):
            a, b = rng.standard_normal((2, 30))
            alpha, c = rng.uniform(-5, 5), rng.normal(0, 10)
            r = pearson(a, b)
            assert abs(pearson(b, a) - r) < 1e-12
            assert abs(pearson(alpha * a + c, b) - np.sign(alpha) * r) < 1e-9

    def test_errors(self):
        with pytest.raises(UndefinedStatistic):
            pearson(np.ones(4), np.arange(4.0))
        with pytest.raises(ShapeError):
            pearson(np.ones(4), np.ones(5))
        with pytest.raises(ContractError):
            pearson([1.0], [2.0])

    def test_accepts_tensors(self, rng):
        a, b = rng.standard_normal((2, 6))
        assert pearson(Tensor(a), Tensor(b)) == pytest.approx(pearson(a, b))


class TestCosine:
    def test_values(self, rng):
        v = rng.standard_normal(8)
        assert cosine(v, 3 * v) == pytest.approx(1.0)
        assert cosine(v, -v) == pytest.approx(-1.0)
        assert cosine([1, 0], [0, 2]) == 0
        with pytest.raises(UndefinedStatistic):
            cosine(np.zeros(3), v[:3])

    def test_lastln_cosine_rescaling(self, tiny_config):
        _, trace = traced(tiny_config, "pvg")
        trace.pre_last = Tensor(trace.pre_last.data.astype(np.float64))
        trace.post_last = Tensor(trace.post_last.data.astype(np.float64))
        c = lastln_cosine(trace)
        trace.pre_last = Tensor(trace.pre_last.data * 3.0)
        trace.post_last = Tensor(trace.post_last.data * 0.5)
        assert lastln_cosine(trace) == pytest.approx(c, abs=1e-12)

    def test_lastln_cosine_identity_and_negation(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 6))
        trace = ForwardTrace(has_cls=False, variant=WiringVariant.PVG, pre_last=Tensor(x), post_last=Tensor(x))
        assert lastln_cosine(trace) == pytest.approx(1.0)
        trace.post_last = Tensor(-x)
        assert lastln_cosine(trace) == pytest.approx(-1.0)

    def test_lastln_cosine_cls_row(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 2, 5, 6))
        trace = ForwardTrace(has_cls=True, variant=WiringVariant.DEFAULT, pre_last=Tensor(x), post_last=Tensor(y))
        assert lastln_cosine(trace, "cls") == pytest.approx(cosine(x.mean(0)[0], y.mean(0)[0]))
        assert lastln_cosine(trace, "gap") == pytest.approx(cosine(x.mean(0)[1:].mean(0), y.mean(0)[1:].mean(0)))
        trace.has_cls = False
        with pytest.raises(ContractError):
            lastln_cosine(trace, "cls")


class TestHeatmap:
    def test_explicit_mean_oracle(self, small_config):
        _, trace = traced(small_config, "mpvg", n=4)
        for layer in trace.layers:
            tok = trace.tokens[layer].data.astype(np.float64)
            acc = np.zeros(tok.shape[1:])
            for sample in tok:
                acc += sample
            assert np.abs(heatmap(trace, layer, "token") - acc / len(tok)).max() < 1e-7

    def test_batch_of_one(self, tiny_config):
        _, trace = traced(tiny_config, "pvg", n=1)
        np.testing.assert_array_equal(heatmap(trace, 0, "token"), trace.tokens[0].data[0].astype(np.float64))

    def test_v_and_minus_v(self):
        v = np.random.default_rng(2).standard_normal((4, 6))
        trace = ForwardTrace(has_cls=False, variant=WiringVariant.PVG, tokens={0: Tensor(np.stack([v, -v]))})
        np.testing.assert_array_equal(heatmap(trace, 0, "token"), np.zeros((4, 6)))

    def test_cls_row_excluded(self):
        cfg = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_layers=2, num_heads=2, head_mode="cls")
        _, trace = traced(cfg, "pvg")
        assert heatmap(trace, 1, "token").shape == (4, 8)
        np.testing.assert_allclose(heatmap(trace, 1, "token"), trace.tokens[1].data[:, 1:].mean(0), atol=1e-7)

    def test_errors(self, tiny_config):
        _, trace = traced(tiny_config, "pvg")
        with pytest.raises(IndexError):
            heatmap(trace, 7, "token")
        with pytest.raises(KeyError):
            heatmap(trace, 0, "pe")
        with pytest.raises(ValueError):
            heatmap(trace, 1, "attn")


class TestCorrelations:
    def test_match_recomputation(self, small_config):
        _, trace = traced(small_config, "mpvg", n=4)
        rs = layer_correlations(trace)
        assert [c.layer for c in rs] == [1, 2, 3]
        for c in rs:
            tok = trace.tokens[c.layer].data.astype(np.float64).mean(0)
            assert abs(c.r - mp_pearson(tok, trace.pe[c.layer].data)) < 1e-9
            assert -1 <= c.r <= 1

    def test_per_sample_mode(self, small_config):
        _, trace = traced(small_config, "pvg", n=3)
        rs = layer_correlations(trace, batch_averaged=False)
        for c in rs:
            expected = np.mean([mp_pearson(s, trace.pe[c.layer].data) for s in trace.tokens[c.layer].data])
            assert abs(c.r - expected) < 1e-9

    def test_contrived_negative(self):
        rng = np.random.default_rng(3)
        pe = rng.standard_normal((4, 6))
        trace = ForwardTrace(has_cls=False, variant=WiringVariant.PVG,
                             tokens={2: Tensor(np.stack([-pe, -pe])), 3: Tensor(-pe[None])},
                             pe={3: Tensor(pe), 2: Tensor(rng.standard_normal((4, 6)))})
        rs = {c.layer: c.r for c in layer_correlations(trace)}
        assert rs[3] == pytest.approx(-1.0, abs=1e-12)
        assert list(rs) == [2, 3]

    def test_zero_pe_gives_undefined_entries(self, small_config):
        params = ModelParams.init(small_config, variant_preset("pvg"), 0)
        params["pos_embed"].data[:] = 0
        for l in (1, 2, 3):
            params[f"layer.{l}.ln_pe.gamma"].data[:] = 0
        with ad.no_grad():
            _, trace = forward(params, np.ones((2, 2, 8, 8), np.float32))
        rs = layer_correlations(trace)
        assert all(c.r is None and "variance" in c.error for c in rs)

    def test_default_has_no_pe_stream(self, tiny_config):
        _, trace = traced(tiny_config, "default")
        with pytest.raises(KeyError):
            layer_correlations(trace)


class TestAffineStats:
    def test_fresh_init(self, tiny_config):
        params = ModelParams.init(tiny_config, variant_preset("mpvg"), 0)
        assert lastln_affine_stats(params) == {"var_gamma": 0.0, "var_beta": 0.0, "mean_gamma": 1.0, "mean_beta": 0.0}

    def test_population_variance(self):
        stats = lastln_affine_stats({"last_ln.gamma": np.array([1.0, 3.0]), "last_ln.beta": np.array([1.0, -1.0])})
        assert stats["var_beta"] == 1.0 and stats["var_gamma"] == 1.0 and stats["mean_gamma"] == 2.0


class TestReport:
    def test_inventory_and_round_trip(self, tmp_path, small_config):
        params, trace = traced(small_config, "mpvg")
        report = build_report(params, trace, {"seed": 0})
        written = export_report(report, tmp_path)
        names = sorted(p.name for p in written)
        layers = trace.layers
        expected = sorted([f"layer{l}_token.csv" for l in layers] + [f"layer{l}_pe.csv" for l in sorted(trace.pe)]
                          + ["correlations.csv", "lastln.csv", "meta.json", "token_norms.csv"])
        assert names == expected
        for (layer, stream), matrix in report.heatmaps.items():
            back = read_heatmap_csv(tmp_path / f"layer{layer}_{stream}.csv")
            assert back.tobytes() == matrix.tobytes()
        lines = (tmp_path / "correlations.csv").read_text().splitlines()
        assert lines[0] == "layer,r" and len(lines) == 1 + len(trace.pe)
        meta = load_meta(tmp_path / "meta.json")
        assert meta["variant"] == "mpvg" and meta["layers"] == layers and meta["seed"] == 0

    def test_default_report_has_no_correlations(self, tmp_path, tiny_config):
        params, trace = traced(tiny_config, "default")
        names = {p.name for p in export_report(build_report(params, trace), tmp_path)}
        assert "correlations.csv" not in names and "layer0_pe.csv" not in names

    def test_empty_layer_set(self, tmp_path, tiny_config):
        params = ModelParams.init(tiny_config, variant_preset("pvg"), 0)
        report = DiagnosticsReport(lastln=lastln_affine_stats(params))
        assert sorted(p.name for p in export_report(report, tmp_path)) == ["lastln.csv", "meta.json"]

    def test_token_norms(self, tiny_config):
        _, trace = traced(tiny_config, "pvg")
        norms = token_norms(trace)
        assert norms.shape == (tiny_config.num_patches, 2)
        np.testing.assert_allclose(norms[:, 0], np.linalg.norm(trace.pre_last.data[0].astype(np.float64), axis=1))

    def test_export_is_deterministic(self, tmp_path, small_config):
        params, trace = traced(small_config, "lape")
        a = export_report(build_report(params, trace), tmp_path / "a")
        b = export_report(build_report(params, trace), tmp_path / "b")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_unwritable_directory(self, tmp_path, tiny_config):
        params, trace = traced(tiny_config, "pvg")
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            export_report(build_report(params, trace), blocker / "sub")
