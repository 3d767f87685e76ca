import numpy as np
import pytest
import torch

from griddown.datastore import DatasetReader, SplitPlan, materialize
from griddown.errors import NonFiniteActivation, ShapeMismatch
from griddown.grids import canonical_geometry, mini_geometry
from griddown.model import (
    ARCH_NATIVE,
    ARCH_PRE_INTERPOLATED,
    ArchitectureConfig,
    ConvBlock,
    ModelBundle,
    ResidualBlock,
    assemble_inputs,
    baseline_bilinear,
    build_bundle,
    catalog_groups,
    freeze_groups,
    load_bundle,
    parameter_census,
    save_bundle,
    shape_check,
)
from griddown.synthetic import GeneratorConfig, WeatherGenerator, default_catalog

from .oracles import nearest_regrid_oracle

GEO = canonical_geometry()
CATALOG = default_catalog()


def make_config(strategy=ARCH_NATIVE, geometry=GEO, **kw):
    hyper = dict(branch_channels=4, base_filters=8, depth=3)
    hyper.update(kw)
    return ArchitectureConfig.build(CATALOG, geometry, strategy=strategy, **hyper)


def zero_parameters(net):
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()


def fake_batch_tensors(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    lr_size = cfg.lr_size if cfg.strategy == ARCH_NATIVE else cfg.hr_size
    inputs = {}
    for name, cin in cfg.groups:
        size = cfg.hr_size if name == "hr" else lr_size
        inputs[name] = torch.from_numpy(
            rng.normal(size=(batch, cin, size, size)).astype(np.float32)
        )
    skip = torch.from_numpy(
        rng.uniform(1, 10, size=(batch, cfg.lr_size, cfg.lr_size)).astype(np.float32)
    )
    return inputs, skip


class TestCatalogGroups:
    def test_canonical_channels(self):
        groups = dict(catalog_groups(CATALOG))
        assert groups == {"uv": 4, "u": 4, "v": 4, "t": 4, "grad": 3, "single": 6, "hr": 3}

    def test_concat_channels_sum(self):
        cfg = make_config()
        total = sum(c for _, c in cfg.groups)
        assert total == 28


class TestShapeCheck:
    def test_canonical_trace(self):
        cfg = make_config(base_filters=64, branch_channels=32)
        trace = dict(shape_check(cfg))
        assert trace["front_end.fused"] == (64, 16, 16)
        assert trace["encoder.level0"] == (64, 16, 16)
        assert trace["encoder.level1"] == (128, 8, 8)
        assert trace["encoder.level2"] == (256, 4, 4)
        assert trace["encoder.bottleneck"] == (512, 2, 2)
        assert trace["decoder.level0"] == (64, 16, 16)
        assert trace["head.out"] == (1, 48, 48)

    def test_too_deep_rejected(self):
        with pytest.raises(ShapeMismatch):
            shape_check(make_config(depth=4))

    def test_strategy_parity_of_shapes(self):
        nat = dict(shape_check(make_config(ARCH_NATIVE)))
        pre = dict(shape_check(make_config(ARCH_PRE_INTERPOLATED)))
        assert nat == pre

    def test_config_round_trip(self):
        cfg = make_config(ARCH_PRE_INTERPOLATED, dropout_rate=0.3)
        assert ArchitectureConfig.from_json(cfg.to_json()) == cfg


class TestForwardContracts:
    def test_output_shape(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        bundle.net.eval()
        inputs, skip = fake_batch_tensors(bundle.config, batch=3)
        with torch.no_grad():
            out = bundle.net(inputs, skip)
        assert out.shape == (3, 48, 48)
        assert torch.isfinite(out).all()

    def test_zero_weights_output_equals_skip_bit_exact(self):
        bundle = build_bundle(make_config(), GEO, seed=1)
        zero_parameters(bundle.net)
        bundle.net.eval()
        inputs, skip = fake_batch_tensors(bundle.config, batch=2, seed=3)
        with torch.no_grad():
            out = bundle.net(inputs, skip).numpy()
        oracle = nearest_regrid_oracle(
            GEO.lr_grid, skip.numpy()[0], GEO.predictand_grid
        )
        assert np.array_equal(out[0], oracle)

    def test_skip_field_matches_independent_oracle_bit_exact(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        skip_in = torch.from_numpy(
            np.random.default_rng(5).uniform(0, 12, size=(1, 16, 16)).astype(np.float32)
        )
        got = bundle.net.skip_field(skip_in).numpy()[0]
        oracle = nearest_regrid_oracle(GEO.lr_grid, skip_in.numpy()[0], GEO.predictand_grid)
        assert np.array_equal(got, oracle)

    def test_additive_skip_guarantee_any_weights(self):
        bundle = build_bundle(make_config(), GEO, seed=7)
        bundle.net.eval()
        inputs, skip = fake_batch_tensors(bundle.config, batch=2, seed=9)
        with torch.no_grad():
            full = bundle.net(inputs, skip)
            learned = bundle.net.learned_path(inputs)
            skip_only = bundle.net.skip_field(skip)
        # the output is exactly the learned residual plus the untouched skip
        assert torch.equal(full, learned + skip_only)

    def test_batch_size_invariance_inference(self):
        bundle = build_bundle(make_config(), GEO, seed=2)
        bundle.net.eval()
        inputs, skip = fake_batch_tensors(bundle.config, batch=8, seed=4)
        with torch.no_grad():
            big = bundle.net(inputs, skip)
            small = bundle.net(
                {k: v[2:3] for k, v in inputs.items()}, skip[2:3]
            )
        assert torch.allclose(big[2], small[0], atol=1e-5)

    def test_shape_mismatch_raises(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        inputs, skip = fake_batch_tensors(bundle.config)
        inputs["uv"] = inputs["uv"][:, :, :8, :8]
        with pytest.raises(ShapeMismatch):
            bundle.net(inputs, skip)

    def test_non_finite_activation_named(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        bundle.net.eval()
        inputs, skip = fake_batch_tensors(bundle.config)
        inputs["uv"][0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteActivation, match="front_end"):
            bundle.net(inputs, skip)


class TestFrontEnd:
    def test_hr_branch_downsamples_64_to_16(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        bundle.net.eval()
        x = torch.zeros(1, 3, 64, 64)
        with torch.no_grad():
            out = bundle.net.front_end.branches["hr"](x)
        assert out.shape == (1, 4, 16, 16)

    def test_fused_shape_parity_between_strategies(self):
        nat = build_bundle(make_config(ARCH_NATIVE), GEO, seed=0)
        pre = build_bundle(make_config(ARCH_PRE_INTERPOLATED), GEO, seed=0)
        nat.net.eval(), pre.net.eval()
        nat_in, _ = fake_batch_tensors(nat.config, batch=2)
        pre_in, _ = fake_batch_tensors(pre.config, batch=2)
        with torch.no_grad():
            a = nat.net.front_end(nat_in)
            b = pre.net.front_end(pre_in)
        assert a.shape == b.shape == (2, 8, 16, 16)

    def test_zero_inputs_zero_biases_give_zero_output(self):
        for strategy in (ARCH_NATIVE, ARCH_PRE_INTERPOLATED):
            bundle = build_bundle(make_config(strategy), GEO, seed=0)
            with torch.no_grad():
                for name, p in bundle.net.named_parameters():
                    if name.endswith("bias"):
                        p.zero_()
            bundle.net.eval()
            inputs, _ = fake_batch_tensors(bundle.config, batch=1)
            zeros = {k: torch.zeros_like(v) for k, v in inputs.items()}
            with torch.no_grad():
                out = bundle.net.front_end(zeros)
            assert torch.all(out == 0)


class TestResidualBlock:
    def test_zero_inner_is_identity(self):
        block = ResidualBlock(4, 3, 0.25)
        zero_parameters(block)
        block.eval()
        x = torch.randn(2, 4, 6, 6)
        with torch.no_grad():
            assert torch.equal(block(x), x)

    def test_shape_preserved(self):
        block = ResidualBlock(8, 3, 0.2)
        block.eval()
        x = torch.randn(1, 8, 16, 16)
        with torch.no_grad():
            assert block(x).shape == x.shape

    def test_identity_jacobian_at_zero_inner(self):
        block = ResidualBlock(1, 3, 0.25).double()
        zero_parameters(block)
        block.eval()
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        eps = 1e-6
        for probe in [(0, 0), (1, 2), (3, 3)]:
            e = torch.zeros_like(x)
            e[0, 0, probe[0], probe[1]] = eps
            with torch.no_grad():
                fd = (block(x + e) - block(x - e)) / (2 * eps)
            expect = torch.zeros_like(x)
            expect[0, 0, probe[0], probe[1]] = 1.0
            assert torch.allclose(fd, expect, atol=1e-8)


class TestUNetBody:
    def test_inference_deterministic(self):
        bundle = build_bundle(make_config(dropout_rate=0.5), GEO, seed=0)
        bundle.net.eval()
        x = torch.randn(1, 8, 16, 16)
        with torch.no_grad():
            f1, s1 = bundle.net.encoder(x)
            f2, s2 = bundle.net.encoder(x)
        assert torch.equal(f1, f2)

    def test_zero_dropout_train_equals_eval(self):
        # isolate the dropout contract: normalization stays in inference mode
        bundle = build_bundle(make_config(dropout_rate=0.0), GEO, seed=0)
        net = bundle.net
        net.eval()
        x = torch.randn(2, 8, 16, 16)
        with torch.no_grad():
            eval_out = net.decoder(*net.encoder(x))
        net.train()
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.eval()
        with torch.no_grad():
            train_out = net.decoder(*net.encoder(x))
        assert torch.equal(eval_out, train_out)

    def test_encoder_spatial_trace(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        bundle.net.eval()
        x = torch.randn(1, 8, 16, 16)
        sizes = []
        with torch.no_grad():
            feats = x
            for level, down in zip(bundle.net.encoder.levels, bundle.net.encoder.downs):
                feats = level(feats)
                sizes.append(feats.shape[-1])
                feats = down(feats)
            bott = bundle.net.encoder.bottleneck(feats)
        assert sizes == [16, 8, 4]
        assert bott.shape[-1] == 2


class TestParameterCensus:
    def test_conv_counting_rule(self):
        conv = torch.nn.Conv2d(2, 4, 3)
        n = sum(p.numel() for p in conv.parameters())
        assert n == 2 * 4 * 9 + 4 == 76

    def test_census_equals_independent_enumeration(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        census = parameter_census(bundle)
        expect = sum(p.numel() for p in bundle.net.parameters())
        assert census["total"] == expect
        assert census["total_trainable"] == expect
        by_group = {g: 0 for g in ("front_end", "encoder", "decoder", "head")}
        for name, p in bundle.net.named_parameters():
            by_group[name.split(".")[0]] += p.numel()
        for g, n in by_group.items():
            assert census[g]["trainable"] == n

    def test_frozen_reported_separately(self):
        bundle = build_bundle(make_config(), GEO, seed=0)
        before = parameter_census(bundle)
        freeze_groups(bundle, ("front_end", "encoder"))
        after = parameter_census(bundle)
        assert after["front_end"]["trainable"] == 0
        assert after["front_end"]["frozen"] == before["front_end"]["trainable"]
        assert after["decoder"] == before["decoder"]
        assert after["total"] == before["total"]


class TestBaseline:
    def test_constant(self):
        out = baseline_bilinear(np.full((16, 16), 4.0, np.float32), GEO)
        assert np.allclose(out, 4.0, atol=1e-6)
        assert out.shape == (48, 48)

    def test_batched(self):
        arr = np.random.default_rng(0).uniform(0, 10, (5, 16, 16)).astype(np.float32)
        out = baseline_bilinear(arr, GEO)
        assert out.shape == (5, 48, 48)


class TestBundleSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        bundle = build_bundle(make_config(), GEO, seed=11)
        freeze_groups(bundle, ("front_end",))
        save_bundle(bundle, tmp_path / "m")
        back = load_bundle(tmp_path / "m")
        sd_a, sd_b = bundle.net.state_dict(), back.net.state_dict()
        assert set(sd_a) == set(sd_b)
        for k in sd_a:
            assert torch.equal(sd_a[k], sd_b[k]), k
        assert back.frozen_groups == ("front_end",)
        assert back.config == bundle.config

    def test_group_membership_in_index(self, tmp_path):
        import json

        bundle = build_bundle(make_config(), GEO, seed=0)
        save_bundle(bundle, tmp_path / "m")
        index = json.loads((tmp_path / "m/weights.index.json").read_text())
        groups = {e["group"] for e in index.values()}
        assert groups == {"front_end", "encoder", "decoder", "head"}

    def test_missing_bundle(self, tmp_path):
        from griddown.errors import MissingArtifact

        with pytest.raises(MissingArtifact):
            load_bundle(tmp_path / "nope")


class TestAssembleInputs:
    def test_assembly_from_real_batch(self, tmp_path):
        geo = mini_geometry()
        gen = WeatherGenerator(geo, GeneratorConfig(seed=3))
        plan = SplitPlan((0, 8), (8, 10), (10, 12))
        materialize(gen, plan, tmp_path / "d")
        reader = DatasetReader(tmp_path / "d")
        cfg = ArchitectureConfig.build(
            CATALOG, geo, branch_channels=4, base_filters=8, depth=2
        )
        batch = reader.get_batch("train", np.arange(4))
        inputs, skip, target = assemble_inputs(batch, CATALOG, cfg, reader.stats)
        assert inputs["uv"].shape == (4, 4, 8, 8)
        assert inputs["hr"].shape == (4, 3, 32, 32)
        assert inputs["single"].shape == (4, 6, 8, 8)
        assert skip.shape == (4, 8, 8)
        assert target.shape == (4, 24, 24)
        # standardized target should be O(1)
        assert abs(float(target.mean())) < 3.0

        bundle = build_bundle(cfg, geo, seed=0, stats=reader.stats)
        bundle.net.eval()
        with torch.no_grad():
            out = bundle.net(inputs, skip)
        assert out.shape == (4, 24, 24)
        assert torch.isfinite(out).all()
