import pytest
import torch
from safetensors.torch import save_file

from adapterseg.backbone import (EncoderConfig, HierarchicalEncoder, MaskDecoder, MissingParameterError,
                                 ShapeMismatchError, decode, encode, encoder_hash, encoder_state,
                                 full_encoder_config, load_pretrained_encoder, save_encoder, toy_encoder_config)
from adapterseg.checkpoint import CheckpointReadError, FormatVersionError, load_container
from adapterseg.model import ModelConfig, build_model

from oracles import central_difference, relative_error


def mini_config():
    return EncoderConfig(num_stages=2, blocks_per_stage=[1, 1], stage_widths=[4, 8], patch_size=2,
                         input_resolution=8, num_heads=2)


def test_toy_token_grids():
    enc = HierarchicalEncoder(toy_encoder_config())
    feats = encode(enc, torch.rand(2, 3, 64, 64))
    assert [tuple(f.shape) for f in feats] == [(2, 256, 16), (2, 64, 32), (2, 16, 64), (2, 4, 128)]
    single = encode(enc, torch.rand(3, 64, 64))
    assert single[0].shape == (256, 16)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(blocks_per_stage=[2, 2])
    with pytest.raises(ValueError):
        EncoderConfig(input_resolution=60)
    with pytest.raises(ValueError):
        EncoderConfig(stage_widths=[16, 32, 64, 130])
    assert full_encoder_config().grid(3) == 8
    cfg = toy_encoder_config()
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_rejects_bad_inputs():
    enc = HierarchicalEncoder(toy_encoder_config())
    with pytest.raises(ValueError):
        encode(enc, torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        encode(enc, torch.rand(1, 3, 64, 64), prompts=[torch.zeros(256, 16)])


def test_zero_prompts_are_bitwise_identity():
    enc = HierarchicalEncoder(toy_encoder_config())
    x = torch.rand(1, 3, 64, 64)
    zeros = [torch.zeros(g * g, w) for g, w in zip((16, 8, 4, 2), (16, 32, 64, 128))]
    for a, b in zip(encode(enc, x), encode(enc, x, zeros)):
        assert torch.equal(a, b)


def test_encoder_frozen_and_stays_in_eval():
    enc = HierarchicalEncoder(toy_encoder_config())
    assert not any(p.requires_grad for p in enc.parameters())
    enc.train()
    assert not enc.training


def test_features_change_with_image():
    enc = HierarchicalEncoder(toy_encoder_config())
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        a, b = torch.rand(2, 1, 3, 64, 64, generator=g)
        assert not torch.equal(encode(enc, a)[-1], encode(enc, b)[-1])


def test_decoder_shape_and_determinism():
    cfg = toy_encoder_config()
    enc, dec = HierarchicalEncoder(cfg), MaskDecoder(cfg)
    feats = encode(enc, torch.rand(2, 3, 64, 64))
    out = decode(dec, feats)
    assert out.shape == (2, 1, 64, 64)
    assert torch.equal(out, decode(dec, feats))
    assert decode(dec, [f[0] for f in feats]).shape == (1, 64, 64)
    with pytest.raises(ValueError):
        decode(dec, feats[:3])
    with pytest.raises(ValueError):
        decode(MaskDecoder(mini_config()), feats[:2])


def test_decoder_gradients_match_central_differences():
    torch.manual_seed(0)
    cfg = mini_config()
    dec = MaskDecoder(cfg, dim=4).double()
    feats = [torch.randn(1, 16, 4, dtype=torch.float64), torch.randn(1, 4, 8, dtype=torch.float64)]
    target = torch.randn(1, 1, 8, 8, dtype=torch.float64)

    def loss():
        return ((decode(dec, feats) - target) ** 2).mean()

    loss().backward()
    for name, p in dec.named_parameters():
        def as_fn(value, p=p):
            saved = p.detach().clone()
            p.data.copy_(value)
            out = loss()
            p.data.copy_(saved)
            return out
        err = relative_error(p.grad, central_difference(as_fn, p.detach()))
        assert err < 1e-4, name


def test_end_to_end_gradients_reach_adapters_and_decoder():
    model = build_model(ModelConfig(encoder=toy_encoder_config()), seed=0)
    with torch.no_grad():
        model.adapter.shared_up.weight.normal_(std=0.1)
    model(torch.rand(1, 3, 64, 64)).mean().backward()
    for p in model.trainable_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all()
    assert model.adapter.stage0.tune.weight.grad.abs().sum() > 0
    assert all(p.grad is None for p in model.encoder.parameters())


def test_zero_init_prompted_encode_equals_frozen_encode():
    model = build_model(ModelConfig(encoder=toy_encoder_config()), seed=3)
    x = torch.rand(2, 3, 64, 64)
    for a, b in zip(model.features(x), encode(model.encoder, x)):
        assert torch.equal(a, b)


def test_encoder_roundtrip(tmp_path):
    enc = HierarchicalEncoder(toy_encoder_config())
    save_encoder(enc, tmp_path / "enc.safetensors")
    loaded = load_pretrained_encoder(tmp_path / "enc.safetensors")
    for (k, a), (_, b) in zip(enc.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    assert encoder_hash(enc) == encoder_hash(loaded)
    assert not any(p.requires_grad for p in loaded.parameters())


def test_missing_array_is_named(tmp_path):
    enc = HierarchicalEncoder(toy_encoder_config())
    _, record = load_container(save_encoder(enc, tmp_path / "enc.safetensors"))
    state = encoder_state(enc)
    del state["encoder.stages.2.1.attn.qkv.weight"]
    save_file({k: v.contiguous() for k, v in state.items()}, str(tmp_path / "bad.safetensors"),
              metadata={"record": '{"format_version": 1}'})
    with pytest.raises(MissingParameterError, match="encoder.stages.2.1.attn.qkv.weight"):
        load_pretrained_encoder(tmp_path / "bad.safetensors", config=toy_encoder_config())


def test_width_mismatch_lists_all_stages(tmp_path):
    save_encoder(HierarchicalEncoder(toy_encoder_config()), tmp_path / "enc.safetensors")
    wide = EncoderConfig(stage_widths=[32, 64, 128, 256])
    with pytest.raises(ShapeMismatchError) as info:
        load_pretrained_encoder(tmp_path / "enc.safetensors", config=wide)
    assert info.value.report.stages_affected() == [0, 1, 2, 3]
    assert "shape mismatch in stages 0, 1, 2, 3" in str(info.value)


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(CheckpointReadError):
        load_pretrained_encoder(tmp_path / "absent.safetensors")
    (tmp_path / "junk.safetensors").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointReadError):
        load_pretrained_encoder(tmp_path / "junk.safetensors")
    save_encoder(HierarchicalEncoder(toy_encoder_config()), tmp_path / "enc.safetensors")
    with pytest.raises(FormatVersionError):
        load_pretrained_encoder(tmp_path / "enc.safetensors", format_version=2)
