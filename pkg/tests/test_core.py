import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrevert.core import (
    EmbeddingFormatError,
    ImageTensor,
    InversionConfig,
    InversionResult,
    LatentTextEmbedding,
    NoiseSpec,
    Prompt,
    read_embedding,
    write_embedding,
)


def test_emb1_zero_matrix_layout(tmp_path):
    path = tmp_path / "zero.emb"
    write_embedding(LatentTextEmbedding(np.zeros((1, 1))), path)
    raw = path.read_bytes()
    # magic + u32 L + u32 d + one float32
    assert len(raw) == 16
    assert raw == b"EMB1" + b"\x01\x00\x00\x00" + b"\x01\x00\x00\x00" + b"\x00\x00\x00\x00"


def test_emb1_constant_matrix_layout(tmp_path):
    path = tmp_path / "ones.emb"
    write_embedding(LatentTextEmbedding(np.ones((2, 3))), path)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 3
    floats = np.frombuffer(raw, dtype="<f4", offset=12)
    assert floats.shape == (6,)
    assert (floats == 1.0).all()


def test_emb1_round_trip_100_seeded_matrices(tmp_path):
    # Round-trip oracle: the file stores float32, so matrices drawn at
    # float32 precision must survive bitwise.
    for seed in range(100):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((16, 8)).astype(np.float32).astype(np.float64)
        emb = LatentTextEmbedding(values)
        path = tmp_path / f"m{seed}.emb"
        write_embedding(emb, path)
        back = read_embedding(path)
        assert np.array_equal(back.values, emb.values)


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 32),
    cols=st.integers(1, 24),
    seed=st.integers(0, 2**32 - 1),
)
def test_emb1_round_trip_property(tmp_path_factory, rows, cols, seed):
    rng = np.random.default_rng(seed)
    values = (rng.standard_normal((rows, cols)) * 10).astype(np.float32).astype(np.float64)
    path = tmp_path_factory.mktemp("emb") / "p.emb"
    write_embedding(LatentTextEmbedding(values), path)
    assert np.array_equal(read_embedding(path).values, values)


def test_emb1_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(EmbeddingFormatError):
        read_embedding(path)


def test_emb1_truncated_payload(tmp_path):
    path = tmp_path / "trunc.emb"
    write_embedding(LatentTextEmbedding(np.ones((2, 3))), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(EmbeddingFormatError):
        read_embedding(path)


def test_write_rejects_directory(tmp_path):
    with pytest.raises(OSError):
        write_embedding(LatentTextEmbedding(np.ones((1, 1))), tmp_path)


def test_embedding_rejects_non_finite():
    with pytest.raises(ValueError):
        LatentTextEmbedding(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        LatentTextEmbedding(np.array([[np.inf, 1.0]]))


def test_embedding_rejects_overlong():
    with pytest.raises(ValueError):
        LatentTextEmbedding(np.zeros((33, 4)))


def test_embedding_values_are_read_only():
    emb = LatentTextEmbedding(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        emb.values[0, 0] = 1.0


def test_image_bounds_checked():
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 2, 2), 1.5))
    with pytest.raises(ValueError):
        ImageTensor(np.full((1, 2, 2), 0.5))
    img = ImageTensor(np.full((3, 2, 2), 0.5))
    assert img.shape == (3, 2, 2)


def test_noise_spec_validates_seed():
    with pytest.raises(ValueError):
        NoiseSpec(-1, (2, 2, 2))
    spec = NoiseSpec(3, (2, 2, 2))
    assert spec.shape == (2, 2, 2)


def test_prompt_rejects_overlong_and_negative():
    with pytest.raises(ValueError):
        Prompt("x", tuple(range(33)))
    with pytest.raises(ValueError):
        Prompt("x", (-1,))


def test_config_defaults_match_reference_recipe():
    cfg = InversionConfig()
    assert cfg.max_epoch == 1000
    assert cfg.denoise_steps == 5
    assert cfg.init_prompt_len == 16
    assert cfg.beam_width == 4


def test_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        InversionConfig(denoise_steps=0)
    with pytest.raises(ValueError):
        InversionConfig(loss_kind="huber")


def test_config_round_trips_through_dict():
    cfg = InversionConfig(max_epoch=7, loss_kind="latent_sse")
    assert InversionConfig.from_dict(cfg.to_dict()) == cfg


def test_result_trace_length_enforced():
    cfg = InversionConfig(max_epoch=2)
    prompt = Prompt("a", (1,))
    emb = LatentTextEmbedding(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        InversionResult(prompt, emb, (0.0, 0.0), 0.1, cfg)
    ok = InversionResult(prompt, emb, (1.0, 0.5, 0.25), 0.1, cfg)
    assert len(ok.loss_trace) == 3
