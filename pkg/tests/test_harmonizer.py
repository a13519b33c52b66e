import hashlib

import numpy as np
import pytest
import torch

from pastiche.backbone import UNetSpec, encode_text, freeze, init_backbone
from pastiche.diffusion import SamplerConfig, linear_schedule, sample
from pastiche.harmonizer import (
    HarmonizerError,
    InjectionGates,
    composite_to_tensors,
    encode_condition,
    init_from_backbone,
    load_harmonizer,
    save_harmonizer,
    set_disconnect,
)
from pastiche.imaging import BBox, BinaryMask, Composite, RasterImage, make_mask


def tensor_digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def random_composite(size=8, seed=0):
    rng = np.random.default_rng(seed)
    img = RasterImage(rng.uniform(0, 1, (size, size, 3)).astype(np.float32))
    box = BBox(1, 1, size - 2, size - 2)
    return Composite(img, make_mask(box, size, size), box)


def randomize_projections(phi, scale=0.05, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for proj in phi.module.projections:
            proj.weight.copy_(torch.randn(proj.weight.shape, generator=gen) * scale)
            proj.bias.copy_(torch.randn(proj.bias.shape, generator=gen) * scale)
    return phi


class TestInitFromBackbone:
    def test_encoder_copied_bit_exactly(self, frozen_mini_backbone):
        phi = init_from_backbone(frozen_mini_backbone, seed=1)
        src = frozen_mini_backbone.encoder_state()
        dst = {k: v for k, v in phi.module.state_dict().items() if k in src}
        assert tensor_digest(src) == tensor_digest(dst)

    def test_projections_exactly_zero(self, mini_harmonizer):
        assert all(n == 0.0 for n in mini_harmonizer.projection_norms())

    def test_two_seeds_differ_only_in_stem(self, frozen_mini_backbone):
        a = init_from_backbone(frozen_mini_backbone, seed=1)
        b = init_from_backbone(frozen_mini_backbone, seed=2)
        sa, sb = a.module.state_dict(), b.module.state_dict()
        differing = [k for k in sa if not torch.equal(sa[k], sb[k])]
        assert differing, "seeds should change the stem"
        assert all(k.startswith("stem.") for k in differing)

    def test_records_backbone_checksum(self, frozen_mini_backbone):
        phi = init_from_backbone(frozen_mini_backbone, seed=1)
        assert phi.trained_against == frozen_mini_backbone.checksum()


class TestEncodeCondition:
    def test_fresh_module_emits_exact_zeros(self, mini_harmonizer):
        x = torch.randn(1, 3, 8, 8)
        comp = random_composite()
        feats = encode_condition(mini_harmonizer, comp, x, 3)
        assert len(feats.features) == mini_harmonizer.k
        assert all(float(f.detach().abs().max()) == 0.0 for f in feats.features)

    def test_all_gates_off_zero_regardless_of_weights(self, mini_harmonizer):
        randomize_projections(mini_harmonizer)
        x = torch.randn(1, 3, 8, 8)
        gates = set_disconnect(InjectionGates.all_on(mini_harmonizer.k), 0)
        feats = encode_condition(mini_harmonizer, random_composite(), x, 3, gates)
        assert all(float(f.detach().abs().max()) == 0.0 for f in feats.features)

    def test_gate_support_pattern(self, mini_harmonizer):
        randomize_projections(mini_harmonizer)
        k = mini_harmonizer.k
        gates = set_disconnect(InjectionGates.all_on(k), 2)
        x = torch.randn(1, 3, 8, 8)
        feats = encode_condition(mini_harmonizer, random_composite(), x, 3, gates)
        on = [float(f.detach().abs().max()) > 0 for f in feats.features]
        assert on[:2] == [True, True]
        assert not any(on[2:])

    def test_feature_shapes_match_decoder_skips(self, frozen_mini_backbone, mini_harmonizer):
        # The backbone accepts the features without shape errors.
        x = torch.randn(2, 3, 16, 16)
        feats = encode_condition(mini_harmonizer, random_composite(16), x, 5)
        out = frozen_mini_backbone.predict(x, 5, None, injected=feats)
        assert out.shape == x.shape

    def test_shape_contract_across_specs(self):
        for spec in [
            UNetSpec(base_width=8, channel_mults=(1, 2), blocks_per_level=1,
                     time_dim=16, text_dim=16, vocab_size=64),
            UNetSpec(base_width=8, channel_mults=(1, 1, 2), blocks_per_level=2,
                     time_dim=16, text_dim=16, vocab_size=64, attn_levels=(2,)),
        ]:
            bb = freeze(init_backbone(spec, seed=0))
            phi = init_from_backbone(bb, seed=0)
            x = torch.randn(1, 3, 16, 16)
            feats = encode_condition(phi, random_composite(16), x, 1)
            assert len(feats.features) == spec.num_connections
            bb.predict(x, 1, None, injected=feats)

    def test_composite_resized_to_working_resolution(self, mini_harmonizer):
        x = torch.randn(1, 3, 8, 8)
        feats = encode_condition(mini_harmonizer, random_composite(32), x, 1)
        assert feats.features[0].shape[-2:] == (8, 8)

    def test_gate_length_mismatch(self, mini_harmonizer):
        with pytest.raises(HarmonizerError):
            mini_harmonizer.encode(torch.zeros(1, 4, 8, 8), torch.zeros(1, 3, 8, 8), 1,
                                   InjectionGates.all_on(mini_harmonizer.k + 1))


class TestSetDisconnect:
    def test_all_off_and_all_on(self):
        gates = InjectionGates.all_on(6)
        assert set_disconnect(gates, 0).on_count == 0
        assert set_disconnect(gates, 6).on_count == 6

    def test_keep_first_three_of_twelve(self):
        gates = InjectionGates.all_on(12)
        out = set_disconnect(gates, 3)
        assert out.on_count == 3
        assert out.flags[:3] == (True, True, True)

    def test_range_errors(self):
        gates = InjectionGates.all_on(4)
        with pytest.raises(HarmonizerError):
            set_disconnect(gates, 5)
        with pytest.raises(HarmonizerError):
            set_disconnect(gates, -1)


class TestZeroInitTransparency:
    def test_sampling_is_bit_identical_with_fresh_module(self, frozen_mini_backbone):
        phi = init_from_backbone(frozen_mini_backbone, seed=4)
        sched = linear_schedule(10)
        cfg = SamplerConfig(steps=4, w=1.0)
        comp = random_composite(8)
        text = encode_text("a photo of a red square")
        for seed in (0, 1, 2):
            plain = sample(frozen_mini_backbone, sched, cfg, (1, 3, 8, 8), text=text,
                           rng=torch.Generator().manual_seed(seed))
            guided = sample(
                frozen_mini_backbone, sched, cfg, (1, 3, 8, 8), text=text,
                condition_fn=lambda x, t: encode_condition(phi, comp, x, t),
                rng=torch.Generator().manual_seed(seed),
            )
            assert np.array_equal(plain.data, guided.data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, frozen_mini_backbone):
        phi = randomize_projections(init_from_backbone(frozen_mini_backbone, seed=5))
        path = str(tmp_path / "phi.ckpt")
        save_harmonizer(path, phi)
        loaded = load_harmonizer(path, frozen_mini_backbone)
        assert loaded.checksum() == phi.checksum()
        assert loaded.k == phi.k

    def test_mismatched_backbone_rejected(self, tmp_path, frozen_mini_backbone, mini_spec):
        phi = init_from_backbone(frozen_mini_backbone, seed=5)
        path = str(tmp_path / "phi.ckpt")
        save_harmonizer(path, phi)
        other = freeze(init_backbone(mini_spec, seed=999))
        with pytest.raises(HarmonizerError, match="different backbone"):
            load_harmonizer(path, other)


def test_composite_to_tensors_channels():
    comp = random_composite(8)
    cond = composite_to_tensors(comp, 8, 8)
    assert cond.shape == (1, 4, 8, 8)
    assert float(cond[:, :3].min()) >= -1.0 and float(cond[:, :3].max()) <= 1.0
    assert set(np.unique(cond[0, 3].numpy())) <= {0.0, 1.0}
