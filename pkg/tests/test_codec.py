import numpy as np
import pytest
import torch

from tryon.codec import (
    CodecSpec,
    ConvAutoencoderCodec,
    LinearTestCodec,
    PatchEmbed,
    TokenSequence,
    VideoLatent,
    VideoTensor,
    build_codec,
    decode,
    encode,
    fit_codec,
    patchify,
    unpatchify,
)
from tryon.exceptions import ConfigError, DataError, ShapeError

from .conftest import randn


def video(frames=3, size=32, seed=0):
    return VideoTensor(torch.tanh(randn(frames, size, size, 3, seed=seed)))


def patch_grid(count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    grid = []
    for _ in range(count):
        patch = int(rng.choice([1, 2, 4]))
        rows, cols = rng.integers(1, 6, size=2)
        grid.append((int(rng.integers(1, 4)), int(rows) * patch, int(cols) * patch, patch))
    return grid


PATCH_GRID = patch_grid(50)


class TestVideoTensor:
    def test_valid(self) -> None:
        assert video(frames=5).frames == 5

    @pytest.mark.parametrize(
        "shape", [(2, 32, 32, 4), (32, 32, 3), (2, 30, 32, 3), (0, 32, 32, 3)]
    )
    def test_bad_shape(self, shape) -> None:
        with pytest.raises(ShapeError):
            VideoTensor(torch.zeros(shape))

    def test_out_of_range(self) -> None:
        with pytest.raises(DataError):
            VideoTensor(torch.full((1, 8, 8, 3), 1.5))


class TestLinearTestCodec:
    def test_shapes(self, codec) -> None:
        latent = encode(video(frames=3, size=32), codec)
        assert latent.data.shape == (3, 4, 4, 4)
        assert decode(latent, codec).data.shape == (3, 32, 32, 3)

    def test_deterministic_per_seed(self) -> None:
        a = LinearTestCodec(CodecSpec(seed=1)).encode_tensor(video().data)
        b = LinearTestCodec(CodecSpec(seed=1)).encode_tensor(video().data)
        c = LinearTestCodec(CodecSpec(seed=2)).encode_tensor(video().data)
        assert torch.equal(a, b)
        assert not torch.allclose(a, c)

    def test_frame_permutation_commutes(self, codec) -> None:
        frames = video(frames=4).data
        perm = torch.tensor([2, 0, 3, 1])
        assert torch.allclose(
            codec.encode_tensor(frames[perm]), codec.encode_tensor(frames)[perm], atol=1e-6
        )

    def test_reconstruction_is_a_projection(self, codec) -> None:
        frames = video().data * 0.5
        once = codec.decode_tensor(codec.encode_tensor(frames))
        twice = codec.decode_tensor(codec.encode_tensor(once))
        assert torch.allclose(once, twice, atol=1e-5)

    def test_latent_scale(self) -> None:
        frames = video().data
        plain = LinearTestCodec(CodecSpec()).encode_tensor(frames)
        scaled = LinearTestCodec(CodecSpec(latent_scale=2.0)).encode_tensor(frames)
        assert torch.allclose(scaled, 2.0 * plain, atol=1e-6)

    def test_decode_clamps(self, codec) -> None:
        out = codec.decode_tensor(torch.full((1, 2, 2, 4), 100.0))
        assert out.abs().max() <= 1.0

    def test_no_trainable_state(self, codec) -> None:
        assert codec.parameters() == []
        assert codec.state_dict() == {}
        assert fit_codec(codec, video().data) == []

    def test_wrong_latent_channels(self, codec) -> None:
        with pytest.raises(ShapeError):
            codec.decode_tensor(torch.zeros(1, 2, 2, 3))


class TestBuildCodec:
    def test_kinds(self) -> None:
        assert isinstance(build_codec(CodecSpec(kind="linear")), LinearTestCodec)
        assert isinstance(build_codec(CodecSpec(kind="conv")), ConvAutoencoderCodec)

    def test_unknown(self) -> None:
        with pytest.raises(ConfigError):
            build_codec(CodecSpec(kind="vae"))


class TestConvAutoencoderCodec:
    def test_shapes(self) -> None:
        codec = ConvAutoencoderCodec(CodecSpec(kind="conv"))
        latents = codec.encode_tensor(video(frames=2).data)
        assert latents.shape == (2, 4, 4, 4)
        assert codec.decode_tensor(latents).shape == (2, 32, 32, 3)

    def test_same_seed_same_weights(self) -> None:
        a = ConvAutoencoderCodec(CodecSpec(kind="conv", seed=4)).state_dict()
        b = ConvAutoencoderCodec(CodecSpec(kind="conv", seed=4)).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_fit_lowers_reconstruction_error(self) -> None:
        codec = ConvAutoencoderCodec(CodecSpec(kind="conv", fit_steps=40, fit_learning_rate=3e-3))
        frames = video(frames=8).data * 0.5
        history = fit_codec(codec, frames, seed=0, batch_size=4)
        assert len(history) == 40
        assert sum(history[-5:]) < sum(history[:5])
        assert not any(p.requires_grad for p in codec.parameters())

    def test_state_roundtrip(self) -> None:
        source = ConvAutoencoderCodec(CodecSpec(kind="conv", seed=1))
        target = ConvAutoencoderCodec(CodecSpec(kind="conv", seed=2))
        target.load_state_dict(source.state_dict())
        frames = video(frames=1).data
        assert torch.equal(source.encode_tensor(frames), target.encode_tensor(frames))


class TestPatchify:
    def test_token_count(self) -> None:
        embed = PatchEmbed(4, 2, 32)
        tokens = patchify(VideoLatent(randn(3, 8, 4, 4)), embed)
        assert tokens.data.shape == (3, 8, 32)
        assert tokens.grid == (4, 2)

    def test_video_of_two_frames(self) -> None:
        embed = PatchEmbed(4, 2, 16)
        tokens = patchify(VideoLatent(randn(2, 8, 8, 4)), embed)
        assert tokens.data.shape == (2, 16, 16)
        assert tokens.data.shape[0] * tokens.tokens == 32
        assert tokens.grid == (4, 4)

    @pytest.mark.parametrize("frames,height,width,patch", PATCH_GRID)
    def test_random_grids(self, frames: int, height: int, width: int, patch: int) -> None:
        embed = PatchEmbed(4, patch, patch * patch * 4 + 4).double()
        data = randn(frames, height, width, 4, seed=height * width, dtype=torch.float64)
        latent = VideoLatent(data)
        tokens = patchify(latent, embed)
        grid = (height // patch, width // patch)
        assert tokens.grid == grid
        assert tokens.tokens == grid[0] * grid[1]
        assert tokens.data.shape == (frames, grid[0] * grid[1], embed.hidden_size)
        patches = embed.to_patches(latent.data)
        assert torch.equal(embed.from_patches(patches, grid), latent.data)
        restored = unpatchify(tokens)
        assert restored.data.shape == latent.data.shape
        assert torch.allclose(restored.data, latent.data, atol=1e-9)

    def test_roundtrip_exact_when_injective(self) -> None:
        embed = PatchEmbed(4, 2, 24).double()
        latent = VideoLatent(randn(2, 4, 6, 4, dtype=torch.float64))
        restored = unpatchify(patchify(latent, embed))
        assert torch.allclose(restored.data, latent.data, atol=1e-10)

    def test_patch_size_one(self) -> None:
        embed = PatchEmbed(4, 1, 4).double()
        latent = VideoLatent(randn(1, 2, 2, 4, dtype=torch.float64))
        tokens = patchify(latent, embed)
        assert tokens.tokens == 4
        assert torch.allclose(unpatchify(tokens).data, latent.data, atol=1e-10)

    def test_not_divisible(self) -> None:
        with pytest.raises(ShapeError):
            patchify(VideoLatent(torch.zeros(1, 3, 4, 4)), PatchEmbed(4, 2, 16))

    def test_missing_grid(self) -> None:
        with pytest.raises(ShapeError):
            unpatchify(TokenSequence(torch.zeros(1, 4, 16), patch_size=2))

    def test_grid_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            TokenSequence(torch.zeros(1, 4, 16), patch_size=2, grid=(3, 3))
