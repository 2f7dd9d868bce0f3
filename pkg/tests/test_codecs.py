import pytest
import torch

from tripletgen.codecs import (CodecConfig, ModalityCodec, argmax_label, build_codecs, check_shared_geometry,
                               concat_latents, decode, encode, kl_term, reconstruction_report, split_latents,
                               train_codec, train_codecs, triplet_tensors)
from tripletgen.errors import ConfigError, DataError, NumericalError, ShapeError

SIZE = (32, 32)


@pytest.fixture
def codecs():
    torch.manual_seed(0)
    return build_codecs(5, SIZE, CodecConfig(depth=2, latent_channels=4, width=8))


def test_shared_latent_geometry(codecs):
    assert check_shared_geometry(codecs) == (4, 8, 8)
    assert codecs["L"].in_channels == 6 and codecs["V"].in_channels == 3 and codecs["I"].in_channels == 1
    other = dict(codecs, I=ModalityCodec("I", 5, SIZE, depth=1))
    with pytest.raises(ConfigError):
        check_shared_geometry(other)


def test_encode_decode_shapes(codecs, small_triplets):
    data = triplet_tensors(small_triplets[:3])
    for m, c in codecs.items():
        z = encode(c, data[m])
        assert z.shape == (3, 4, 8, 8)
        out = decode(c, z)
        assert out.shape == (3, c.out_channels, 32, 32)
    assert argmax_label(decode(codecs["L"], torch.randn(2, 4, 8, 8))).dtype == torch.uint8


def test_encode_is_deterministic(codecs, small_triplets):
    x = triplet_tensors(small_triplets[:4])["V"]
    assert torch.equal(encode(codecs["V"], x), encode(codecs["V"], x))


def test_vae_sampling_only_when_requested():
    torch.manual_seed(0)
    c = ModalityCodec("I", 5, SIZE, depth=2, width=8, vae=True)
    x = torch.rand(2, 1, 32, 32)
    assert torch.equal(c.encode(x), c.encode(x))
    assert not torch.equal(c.encode(x, sample=True), c.encode(x, sample=True))
    _, mean, logvar = c.encode_raw(x)
    assert kl_term(mean, logvar).item() >= 0


def test_decoder_clips_images(codecs):
    z = torch.randn(8, 4, 8, 8) * 50
    for m in ("V", "I"):
        out = decode(codecs[m], z)
        assert out.min() >= 0 and out.max() <= 1
    assert (decode(codecs["L"], z).abs() > 1).any()  # logits are not clipped


def test_input_errors(codecs):
    with pytest.raises(ShapeError):
        encode(codecs["V"], torch.zeros(1, 1, 32, 32))
    with pytest.raises(ShapeError):
        encode(codecs["L"], torch.zeros(1, 1, 32, 32, dtype=torch.long))
    with pytest.raises(DataError):
        encode(codecs["L"], torch.full((1, 32, 32), 6, dtype=torch.long))
    with pytest.raises(ShapeError):
        decode(codecs["V"], torch.zeros(1, 4, 4, 4))
    with pytest.raises(ConfigError):
        ModalityCodec("V", 5, (30, 32), depth=2)
    with pytest.raises(ConfigError):
        ModalityCodec("X", 5, SIZE)


def test_split_concat_roundtrip():
    a, b, c = (torch.randn(2, 4, 8, 8) for _ in range(3))
    z = concat_latents(a, b, c)
    assert z.shape == (2, 12, 8, 8)
    sa, sb, sc = split_latents(z)
    assert torch.equal(sa, a) and torch.equal(sb, b) and torch.equal(sc, c)
    zero = concat_latents(*(torch.zeros(1, 4, 2, 2) for _ in range(3)))
    assert not zero.any()
    with pytest.raises(ShapeError):
        concat_latents(a, b, c[:, :3])
    with pytest.raises(ShapeError):
        split_latents(torch.zeros(1, 4, 2, 2))


def test_short_training_reduces_loss(small_triplets):
    torch.manual_seed(0)
    c = ModalityCodec("I", 5, SIZE, depth=2, width=8)
    data = triplet_tensors(small_triplets)["I"]
    curve = train_codec(c, data, CodecConfig(depth=2, width=8, steps=200, batch_size=16), seed=0)
    assert curve[-1] < curve[0]
    # normalization buffers put the training latents near zero mean, unit spread
    z = c.encode(data).detach()
    assert z.mean(dim=(0, 2, 3)).abs().max() < 1e-3
    assert (z.std(dim=(0, 2, 3)) - 1).abs().max() < 1e-3


def test_divergence_is_reported(small_triplets):
    c = ModalityCodec("V", 5, SIZE, depth=2, width=8)
    data = triplet_tensors(small_triplets[:4])["V"]
    data[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError, match="diverged"):
        train_codec(c, data, CodecConfig(depth=2, width=8, steps=5, batch_size=4), seed=0)


def test_train_codecs_errors_and_report(small_triplets):
    with pytest.raises(DataError):
        train_codecs([], 5, CodecConfig())
    cfg = CodecConfig(depth=2, width=8, steps=3, batch_size=8)
    codecs, curves = train_codecs(small_triplets[:8], 5, cfg)
    assert set(curves) == {"V", "I", "L"} and all(len(v) == 1 for v in curves.values())
    rep = reconstruction_report(codecs, small_triplets[:8])
    assert set(rep) == {"vis_mse", "ir_mse", "label_acc"}
    assert 0 <= rep["label_acc"] <= 1

