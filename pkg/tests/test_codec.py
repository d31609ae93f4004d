from fractions import Fraction

import numpy as np
import pytest

from mambajscc import ops
from mambajscc.channel import ChannelRealization
from mambajscc.codec import (ConfigError, MambaJSCC, ModelConfig, PatchDivide, PatchMerge,
                             checkpoint_hash, conv_compress, decode, encode, load_checkpoint,
                             patch_divide, patch_embed, patch_merge, save_checkpoint)
from mambajscc.harness.counting import count_macs_params
from mambajscc.tensor import DimensionError, tensor


@pytest.fixture(scope="module")
def desk():
    return MambaJSCC(ModelConfig.desk(), seed=0)


def image(seed=0, size=32):
    return tensor(np.random.default_rng(seed).uniform(size=(3, size, size)))


def test_patch_embed_shape_and_zero(desk):
    assert patch_embed(image(), desk).shape == (8, 16, 16)
    z = patch_embed(tensor(np.zeros((3, 32, 32))), desk)
    np.testing.assert_array_equal(z.data, 0.0)  # biases start at zero
    with pytest.raises(DimensionError):
        patch_embed(image(size=16), desk)


def test_patch_embed_macs(desk):
    rep = count_macs_params(desk)
    row = next(l for l in rep.layers if l.name == "encoder.patch_embed")
    assert row.macs == 8 * 3 * 2 * 2 * 16 * 16


def test_merge_regroup_is_lossless():
    x = np.arange(8.0).reshape(2, 2, 2)
    m = PatchMerge(2, 8, np.random.default_rng(0))
    m.proj.weight.data = np.eye(8)
    out = patch_merge(tensor(x), m).data
    assert out.shape == (8, 1, 1)
    assert sorted(out.ravel().tolist()) == list(range(8))
    np.testing.assert_array_equal(out, ops.pixel_unshuffle(tensor(x), 2).data)


def test_merge_odd_dims_rejected():
    m = PatchMerge(2, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        m(tensor(np.zeros((2, 3, 4))))


def test_divide_inverts_merge_with_inverse_projection():
    rng = np.random.default_rng(0)
    c = 3
    Q = np.linalg.qr(rng.standard_normal((4 * c, 4 * c)))[0]
    m = PatchMerge(c, 4 * c, rng)
    m.proj.weight.data = Q
    d = PatchDivide(4 * c, c, rng)
    d.fc.weight.data = Q.T
    # bypass the divide norm so the projections are exact inverses
    d.norm = lambda x: x
    x = tensor(rng.standard_normal((c, 4, 6)))
    np.testing.assert_allclose(patch_divide(patch_merge(x, m), d).data, x.data, atol=1e-13)


def test_divide_shapes_and_zero():
    d = PatchDivide(320, 256, np.random.default_rng(0))
    assert d(tensor(np.zeros((320, 4, 4)))).shape == (256, 8, 8)
    d.norm.gamma.data[:] = 0.0
    out = d(tensor(np.random.default_rng(1).standard_normal((320, 4, 4))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_full_config_divide_shape():
    d = PatchDivide(320, 256, np.random.default_rng(0))
    assert d(tensor(np.ones((320, 16, 16)))).shape == (256, 32, 32)


def test_last_divide_emits_image_channels(desk):
    assert desk.decoder.stages[-1].divide.fc.out_features == 4 * 3


def test_symbol_budget_full_config():
    cfg = ModelConfig()
    assert cfg.num_symbols == 4608
    assert cfg.latent_channels == 18


def test_symbol_budget_desk():
    cfg = ModelConfig.desk()
    assert cfg.num_symbols == 192
    assert cfg.latent_channels == 3
    with pytest.raises(ConfigError):
        ModelConfig.desk(cbr=Fraction(3, 128))


@pytest.mark.parametrize("bad", [dict(channels=(16, 8)), dict(blocks=(1,)),
                                 dict(image_size=(34, 34)), dict(csi_mode="on"),
                                 dict(csi_dim=7), dict(cbr=Fraction(1, 7))])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ModelConfig.desk(**bad)


def test_manifest_round_trip():
    cfg = ModelConfig.desk(decoder_blocks=(2, 1), cbr=Fraction(1, 8))
    assert ModelConfig.from_manifest(cfg.to_manifest()) == cfg
    assert ModelConfig.from_manifest(ModelConfig().to_manifest()) == ModelConfig()


@pytest.mark.parametrize("cfg", [ModelConfig.desk(), ModelConfig.desk(channels=(4, 8, 12),
                                                                     blocks=(1, 0, 1))])
def test_shape_ladder(cfg):
    model = MambaJSCC(cfg)
    s = image()
    x = patch_embed(s, model)
    for k, (stage, st) in enumerate(zip(model.encoder.stages, cfg.stages())):
        if stage.merge is not None:
            x = stage.merge(x)
        for blk in stage.blocks:
            x = blk(x, None)
        assert x.shape == (st.channels, 32 // 2 ** (k + 1), 32 // 2 ** (k + 1))
    y = conv_compress(x, model)
    assert y.shape[0] == 2 * cfg.latent_channels
    assert y.size // 2 == cfg.num_symbols
    out = decode(encode(s, 10.0, model), 10.0, model)
    assert out.shape == (3, 32, 32)


def test_untrained_model_is_finite(desk):
    for seed in range(3):
        out = desk(image(seed), ChannelRealization("rayleigh", 5.0, h=0.3 - 0.8j, noise_seed=seed))
        assert out.shape == (3, 32, 32)
        assert np.all(np.isfinite(out.data))


def test_zero_latent_gives_zero_channel_input():
    desk = MambaJSCC(ModelConfig.desk())
    x = tensor(np.zeros((16, 8, 8)))
    desk.encoder.compress.bias.data[:] = 0.0
    np.testing.assert_array_equal(conv_compress(x, desk).data, 0.0)


def test_encoder_decoder_share_no_storage(desk):
    enc = {id(p) for p in desk.encoder.parameters()} | {id(p.data) for p in desk.encoder.parameters()}
    dec = {id(p) for p in desk.decoder.parameters()} | {id(p.data) for p in desk.decoder.parameters()}
    assert not enc & dec
    for p in desk.encoder.parameters():
        for q in desk.decoder.parameters():
            assert not np.shares_memory(p.data, q.data)


def test_same_seed_same_weights_different_seed_differs():
    a, b, c = MambaJSCC(ModelConfig.desk(), 3), MambaJSCC(ModelConfig.desk(), 3), MambaJSCC(ModelConfig.desk(), 4)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert any(not np.array_equal(p.data, r.data) for p, r in zip(a.parameters(), c.parameters())
               if p.data.std() > 0)


def test_checkpoint_round_trip(tmp_path):
    desk = MambaJSCC(ModelConfig.desk(), seed=5)
    rng = np.random.default_rng(0)
    for p in desk.parameters():
        p.data = p.data + 0.01 * rng.standard_normal(p.shape)
    d1 = save_checkpoint(desk, tmp_path / "a")
    loaded = load_checkpoint(d1)
    assert loaded.config == desk.config
    for (n, p), (m, q) in zip(desk.named_parameters(), loaded.named_parameters()):
        assert n == m
        np.testing.assert_array_equal(p.data, q.data)
    d2 = save_checkpoint(loaded, tmp_path / "b")
    assert checkpoint_hash(d1) == checkpoint_hash(d2)
    real = ChannelRealization("awgn", 10.0, noise_seed=1)
    np.testing.assert_array_equal(desk(image(), real).data, loaded(image(), real).data)


def test_checkpoint_hash_detects_changes(tmp_path):
    model = MambaJSCC(ModelConfig.desk())
    d = save_checkpoint(model, tmp_path / "c")
    h = checkpoint_hash(d)
    assert len(h) == 40
    model.decoder.expand.bias.data[0] = 1.0
    save_checkpoint(model, d)
    assert checkpoint_hash(d) != h


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
