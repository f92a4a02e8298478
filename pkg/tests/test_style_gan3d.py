import numpy as np
import pytest

import autodiff_tensor as ad
from autodiff_tensor import DimensionError, Tensor
from style_gan3d import (CheckpointError, Discriminator, Generator, ModelConfig, load_checkpoint,
                         parameter_count, save_checkpoint)


def _zero_all(model):
    for p in model.parameters():
        p.data[...] = 0.0


def test_channel_schedules():
    full = ModelConfig(output_size=64)
    assert full.num_deconv_blocks == 4
    assert full.generator_channels == (512, 256, 128, 64, 1)
    assert full.block_sizes == (4, 8, 16, 32, 64)
    assert full.discriminator_channels == (64, 128, 256, 512, 1)
    assert full.discriminator_sizes == (64, 32, 16, 8, 4, 1)

    desk = ModelConfig(output_size=16, channel_divisor=4)
    assert desk.num_deconv_blocks == 2
    assert desk.generator_channels == (128, 64, 1)
    assert desk.block_sizes == (4, 8, 16)
    assert desk.discriminator_sizes == (16, 8, 4, 2, 1, 1)


@pytest.mark.parametrize("size", [8, 24, 128])
def test_unsupported_output_size(size):
    with pytest.raises(ValueError):
        ModelConfig(output_size=size)


def test_parameter_count_hand_counted_at_16():
    cfg = ModelConfig(output_size=16, channel_divisor=4)
    # mapping 8 x (512*512 + 512); const 128*4³; styles 2 x (512*C + C) per block;
    # deconvs 128*64*4³ + 64 and 64*1*4³ + 1
    assert parameter_count(cfg) == {"generator": 2835907, "discriminator": 690545}


def test_parameter_count_small_config():
    cfg = ModelConfig(latent_dim=4, mapping_layers=1, output_size=16, channel_divisor=64)
    # 20 + 512 + 80 + 2052 + 40 + 257 + 10
    assert parameter_count(cfg)["generator"] == 2971
    assert Generator(cfg).parameter_count() == 2971
    assert Discriminator(cfg).parameter_count() == parameter_count(cfg)["discriminator"]


def test_style_affine_width_is_twice_block_channels(tiny_config):
    g = Generator(tiny_config)
    for b, c in enumerate(tiny_config.generator_channels, start=1):
        width = g[f"block{b}.style.scale.weight"].shape[1] + g[f"block{b}.style.shift.weight"].shape[1]
        assert width == 2 * c


def test_map_latent_shape_and_width_check(tiny_config, rng):
    g = Generator(tiny_config)
    w = g.map_latent(Tensor(rng.normal(size=(16, 8))))
    assert w.shape == (16, 8)
    with pytest.raises(DimensionError):
        g.map_latent(Tensor(np.zeros((2, 7))))


def test_map_latent_zero_weights(tiny_config, rng):
    g = Generator(tiny_config)
    for i in range(tiny_config.mapping_layers):
        g[f"mapping{i}.weight"].data[...] = 0.0
        g[f"mapping{i}.bias"].data[...] = 0.0
    w = g.map_latent(Tensor(rng.normal(size=(3, 8)).astype(np.float32)))
    assert np.all(w.data == 0.0)


def test_map_latent_identity_passes_positive_input(tiny_config, rng):
    g = Generator(tiny_config)
    for i in range(tiny_config.mapping_layers):
        g[f"mapping{i}.weight"].data[...] = np.eye(8)
        g[f"mapping{i}.bias"].data[...] = 0.0
    z = np.abs(rng.normal(size=(3, 8))).astype(np.float32) + 0.1
    np.testing.assert_array_equal(g.map_latent(Tensor(z)).data, z)


def test_synthesize_shape_and_range(tiny_config, rng):
    g = Generator(tiny_config)
    out = g(Tensor(rng.normal(0, np.sqrt(0.2), size=(2, 8)).astype(np.float32)))
    assert out.shape == (2, 1, 16, 16, 16)
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


def test_synthesize_full_scale_shape(rng):
    cfg = ModelConfig(latent_dim=8, mapping_layers=1, output_size=64, channel_divisor=64)
    out = Generator(cfg)(Tensor(rng.normal(size=(1, 8)).astype(np.float32)))
    assert out.shape == (1, 1, 64, 64, 64)
    assert np.all((out.data > 0.0) & (out.data < 1.0))


def test_block_ladder(tiny_config, rng):
    trace = []
    g = Generator(tiny_config)
    g.synthesize(g.map_latent(Tensor(rng.normal(size=(1, 8)).astype(np.float32))), trace=trace)
    assert [t.shape[2] for t in trace] == [4, 8, 16]
    assert [t.shape[1] for t in trace] == list(tiny_config.generator_channels)


def test_zero_styles_give_one_half(tiny_config, rng):
    g = Generator(tiny_config)
    for name, p in g.named_parameters():
        if ".style." in name:
            p.data[...] = 0.0
    out = g(Tensor(rng.normal(size=(2, 8)).astype(np.float32)))
    assert np.all(out.data == 0.5)


def test_style_locality(tiny_config, rng):
    g = Generator(tiny_config)
    w = g.map_latent(Tensor(rng.normal(size=(2, 8)).astype(np.float32)))
    before = []
    out_before = g.synthesize(w, trace=before).data.copy()

    g["block3.style.scale.weight"].data += 0.5
    g["block3.style.shift.bias"].data += 0.25
    after = []
    out_after = g.synthesize(w, trace=after).data
    for k in range(2):
        assert before[k].data.tobytes() == after[k].data.tobytes()
    assert not np.array_equal(out_before, out_after)


def test_distinct_latents_give_distinct_outputs(tiny_config, rng):
    g = Generator(tiny_config)
    z = rng.normal(0, 1.0, size=(2, 8)).astype(np.float32)
    out = g(Tensor(z)).data
    assert not np.array_equal(out[0], out[1])


def test_parameters_in_declaration_order(tiny_config):
    names = [n for n, _ in Generator(tiny_config).named_parameters()]
    assert names[:2] == ["mapping0.weight", "mapping0.bias"]
    assert names.index("const") < names.index("block1.style.scale.weight") < names.index("block2.deconv.weight")


# ========== DISCRIMINATOR ==========
def test_discriminate_shape(tiny_config, rng):
    d = Discriminator(tiny_config)
    scores = d(Tensor(rng.random((3, 2, 16, 16, 16)).astype(np.float32)))
    assert scores.shape == (3,)
    assert [a.shape[2] for a in d.activations(Tensor(np.zeros((1, 2, 16, 16, 16), np.float32)))] == [8, 4, 2, 1, 1]


def test_discriminate_zero_weights(tiny_config, rng):
    d = Discriminator(tiny_config)
    _zero_all(d)
    scores = d(Tensor(rng.random((2, 2, 16, 16, 16)).astype(np.float32)))
    assert np.all(scores.data == 0.0)


def test_discriminate_rejects_wrong_pack(tiny_config):
    d = Discriminator(tiny_config)
    with pytest.raises(DimensionError):
        d(Tensor(np.zeros((1, 3, 16, 16, 16), np.float32)))
    with pytest.raises(DimensionError):
        d(Tensor(np.zeros((1, 2, 8, 8, 8), np.float32)))


def test_packing_is_order_sensitive(tiny_config, rng):
    d = Discriminator(tiny_config)
    a = rng.random((16, 16, 16)).astype(np.float32)
    b = rng.random((16, 16, 16)).astype(np.float32)
    s_ab = d(Tensor(np.stack([a, b])[None])).item()
    s_ba = d(Tensor(np.stack([b, a])[None])).item()
    assert s_ab != s_ba


def test_critic_is_unbounded(tiny_config):
    d = Discriminator(tiny_config)
    d["conv5.bias"].data[...] = 25.0
    assert d(Tensor(np.zeros((1, 2, 16, 16, 16), np.float32))).item() > 1.0


def test_summaries_report_parameter_count(tiny_config):
    g, d = Generator(tiny_config), Discriminator(tiny_config)
    assert g.summary()[-1] == f"parameters: {g.parameter_count()}"
    assert "16³" in g.summary()[-2]
    assert d.summary()[0].startswith("conv1: 2 -> ")


# ========== CHECKPOINTS ==========
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, tiny_config):
    g, d = Generator(tiny_config, seed=3), Discriminator(tiny_config, seed=3)
    path = tmp_path / "a.3dmg"
    save_checkpoint(path, g, d, step=42)
    g2, d2, step = load_checkpoint(path)
    assert step == 42
    assert g2.config == tiny_config
    for a, b in zip(g.get_arrays() + d.get_arrays(), g2.get_arrays() + d2.get_arrays()):
        assert a.tobytes() == b.tobytes()
    again = tmp_path / "b.3dmg"
    save_checkpoint(again, g2, d2, step=42)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_detects_corruption(tmp_path, tiny_config):
    path = tmp_path / "a.3dmg"
    save_checkpoint(path, Generator(tiny_config), Discriminator(tiny_config))
    blob = bytearray(path.read_bytes())
    blob[-100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path, tiny_config):
    path = tmp_path / "a.3dmg"
    save_checkpoint(path, Generator(tiny_config), Discriminator(tiny_config))
    blob = bytearray(path.read_bytes())
    blob[0:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path, tiny_config):
    path = tmp_path / "a.3dmg"
    save_checkpoint(path, Generator(tiny_config), Discriminator(tiny_config))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_seeded_init_is_deterministic(tiny_config):
    a, b = Generator(tiny_config, seed=5), Generator(tiny_config, seed=5)
    for x, y in zip(a.get_arrays(), b.get_arrays()):
        assert x.tobytes() == y.tobytes()
    c = Generator(tiny_config, seed=6)
    assert not np.array_equal(a["mapping0.weight"].data, c["mapping0.weight"].data)


def test_weight_init_statistics():
    cfg = ModelConfig(latent_dim=64, mapping_layers=2, output_size=16, channel_divisor=16)
    g = Generator(cfg)
    w = g["mapping0.weight"].data
    assert abs(float(w.std()) - 0.02) < 0.002
    assert np.all(g["mapping0.bias"].data == 0.0)
    assert np.all(g["block1.style.scale.bias"].data == 1.0)
    assert np.all(g["block1.style.shift.bias"].data == 0.0)


def test_float64_models(rng):
    cfg = ModelConfig(latent_dim=8, mapping_layers=1, output_size=16, channel_divisor=32, dtype="float64")
    g = Generator(cfg)
    assert g["const"].dtype == np.float64
    with ad.no_grad():
        assert g(Tensor(rng.normal(size=(1, 8)))).dtype == np.float64
