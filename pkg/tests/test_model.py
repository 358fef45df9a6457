import numpy as np
import pytest
import torch

from ptxseg.model import (
    COMPOUND_COEFFS,
    ModelConfig,
    SegmentationModel,
    build_model,
    count_parameters,
    round_channels,
    round_repeats,
    tiny_config,
)


def test_config_validation():
    with pytest.raises(ValueError, match="encoder"):
        ModelConfig(encoder="b9")
    with pytest.raises(ValueError, match="upsample_mode"):
        ModelConfig(upsample_mode="bicubic")
    with pytest.raises(ValueError, match="decoder_channels"):
        ModelConfig(decoder_channels=(64, 32))
    with pytest.raises(ValueError, match="32"):
        build_model(ModelConfig(encoder="tiny", resolution=100))


def test_round_channels_matches_reference_scaling():
    # width 1.4 (the b4 coefficient) on the canonical stage widths
    assert round_channels(32 * 1.4) == 48
    assert round_channels(16 * 1.4) == 24
    assert round_channels(24 * 1.4) == 32
    assert round_channels(40 * 1.4) == 56
    assert round_channels(112 * 1.4) == 160
    assert round_channels(320 * 1.4) == 448
    # identity at width 1.0
    for ch in (16, 24, 40, 112, 320):
        assert round_channels(ch) == ch
    # never rounds below 90% of the request
    for ch in range(8, 400):
        for width in (1.0, 1.1, 1.2, 1.4, 2.0):
            rounded = round_channels(ch * width)
            assert rounded >= 0.9 * ch * width
            assert rounded % 8 == 0


def test_round_repeats_ceils():
    assert round_repeats(1, 1.0) == 1
    assert round_repeats(1, 1.8) == 2
    assert round_repeats(2, 1.8) == 4
    assert round_repeats(3, 1.8) == 6
    assert round_repeats(4, 1.8) == 8


def test_b0_and_b4_feature_channels():
    b0 = build_model(ModelConfig(encoder="b0", resolution=64))
    assert b0.encoder.feature_channels == [16, 24, 40, 112, 320]
    b4 = build_model(ModelConfig(encoder="b4", resolution=64))
    assert b4.encoder.feature_channels == [24, 32, 56, 160, 448]


def test_compound_coefficients_table():
    assert COMPOUND_COEFFS["b0"] == (1.0, 1.0)
    assert COMPOUND_COEFFS["b4"] == (1.4, 1.8)
    assert COMPOUND_COEFFS["b7"] == (2.0, 3.1)
    widths = [COMPOUND_COEFFS[f"b{i}"][0] for i in range(8)]
    depths = [COMPOUND_COEFFS[f"b{i}"][1] for i in range(8)]
    assert widths == sorted(widths)
    assert depths == sorted(depths)


def test_encoder_feature_strides():
    model = build_model(tiny_config(128))
    feats = model.encoder(torch.rand(1, 3, 128, 128))
    assert [f.shape[2] for f in feats] == [64, 32, 16, 8, 4]


def test_forward_shape_and_range():
    model = build_model(tiny_config(128))
    with torch.no_grad():
        out = model(torch.rand(2, 3, 128, 128))
    assert out.shape == (2, 1, 128, 128)
    assert float(out.min()) >= 0.0
    assert float(out.max()) <= 1.0


def test_forward_accepts_other_multiples_of_32():
    model = build_model(tiny_config(128))
    assert model(torch.rand(1, 3, 64, 96)).shape == (1, 1, 64, 96)


def test_forward_input_validation():
    model = build_model(tiny_config(128))
    with pytest.raises(ValueError, match="input"):
        model(torch.rand(1, 1, 128, 128))
    with pytest.raises(ValueError, match="divisible"):
        model(torch.rand(1, 3, 100, 100))
    with pytest.raises(ValueError):
        model(torch.rand(3, 128, 128))


def test_both_upsample_modes_forward():
    for mode in ("nearest_then_conv", "transposed_conv"):
        model = build_model(ModelConfig(encoder="tiny",
                                        decoder_channels=(64, 48, 32, 24, 16),
                                        upsample_mode=mode, resolution=64))
        assert model(torch.rand(1, 3, 64, 64)).shape == (1, 1, 64, 64)


def test_gradients_reach_every_parameter():
    model = build_model(tiny_config(128))
    out = model(torch.rand(1, 3, 64, 64))
    out.mean().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None]
    assert dead == []


def test_init_is_seed_deterministic():
    torch.manual_seed(123)
    a = build_model(tiny_config(64))
    torch.manual_seed(123)
    b = build_model(tiny_config(64))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)


def test_count_parameters():
    model = build_model(tiny_config(64))
    assert count_parameters(model) == sum(p.numel() for p in model.parameters() if p.requires_grad)
    assert 0 < count_parameters(model) < 1_000_000


def test_b4_is_larger_than_b0():
    b0 = build_model(ModelConfig(encoder="b0", resolution=64))
    b4 = build_model(ModelConfig(encoder="b4", resolution=64))
    assert count_parameters(b4) > count_parameters(b0)


def test_pretrained_encoder_round_trip(tmp_path):
    torch.manual_seed(7)
    donor = build_model(tiny_config(64))
    weights = tmp_path / "encoder.pt"
    torch.save(donor.encoder.state_dict(), weights)

    torch.manual_seed(8)  # different init, so loading must actually change weights
    model = build_model(ModelConfig(encoder="tiny", decoder_channels=(64, 48, 32, 24, 16),
                                    resolution=64, pretrained_path=str(weights)))
    for p_new, p_donor in zip(model.encoder.parameters(), donor.encoder.parameters()):
        assert torch.equal(p_new, p_donor)


def test_pretrained_missing_path_mentions_scratch_fallback(tmp_path):
    cfg = ModelConfig(encoder="tiny", decoder_channels=(64, 48, 32, 24, 16),
                      resolution=64, pretrained_path=str(tmp_path / "absent.pt"))
    with pytest.raises(FileNotFoundError, match="scratch"):
        build_model(cfg)


def test_all_variants_construct():
    for name in list(COMPOUND_COEFFS) + ["tiny"]:
        cfg = ModelConfig(encoder=name, resolution=64) if name != "tiny" else tiny_config(64)
        model = build_model(cfg)
        assert isinstance(model, SegmentationModel)
