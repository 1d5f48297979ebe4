import math

import numpy as np
import pytest

import vqclone.autodiff as ad
from vqclone.corpus import TRAIN
from vqclone.model import (
    SD_MODULES,
    Batch,
    ModelConfig,
    bottleneck,
    checkpoint_bytes,
    decode_speech,
    decode_text,
    encode_speech,
    encode_text,
    init_model,
    lag_index,
    load_checkpoint,
    module_of,
    remove_sd,
    save_checkpoint,
    sts_stack,
    stt_stack,
    tts_stack,
    ttt_stack,
    vocode,
)
from vqclone.pipeline import model_config_for


@pytest.fixture
def batch(corpus):
    return Batch.from_utterances(corpus.split(TRAIN)[:3])


def test_lag_index_stays_inside_utterances():
    idx = lag_index([3, 2], 1)
    assert idx.tolist() == [-1, 0, 1, -1, 3]
    assert lag_index([3, 2], 3).tolist() == [-1] * 5


def test_encoders_are_deterministic_and_shaped(corpus, fresh_model):
    u = corpus.split(TRAIN)[0]
    a, b = encode_text(u.x, fresh_model), encode_text(u.x, fresh_model)
    assert a.z.data.tobytes() == b.z.data.tobytes()
    assert encode_speech(u.y, fresh_model).z.shape == (len(u), 64)
    assert len(encode_speech(np.zeros((0, 8)), fresh_model)) == 0
    with pytest.raises(ValueError):
        encode_text(np.array([12]), fresh_model)


def test_vae_sampling_is_seeded_and_collapses_with_zero_sigma(corpus):
    m = init_model(model_config_for(corpus, mode="vae"))
    u = corpus.split(TRAIN)[0]
    z1 = encode_text(u.x, m, np.random.default_rng(3)).z.data
    z2 = encode_text(u.x, m, np.random.default_rng(3)).z.data
    assert z1.tobytes() == z2.tobytes()
    lat = encode_text(u.x, m, np.random.default_rng(3))
    assert np.all(lat.sigma > 0)
    m.params["tenc.b_logsig"] = np.full(64, -1000.0)
    m.params["tenc.w_logsig"] = np.zeros_like(m.params["tenc.w_logsig"])
    lat = encode_text(u.x, m, np.random.default_rng(3))
    assert lat.z.data.tobytes() == lat.mu.data.tobytes()


def test_vq_decoder_input_rows_are_codebook_entries(corpus, fresh_model):
    u = corpus.split(TRAIN)[0]
    dec_in, codes = bottleneck(encode_speech(u.y, fresh_model), fresh_model)
    entries = fresh_model.params["codebook.entries"]
    assert dec_in.data.tobytes() == entries[codes.indices].tobytes()
    assert codes.vectors.data.tobytes() == entries[codes.indices].tobytes()


def test_decoders_shapes_and_speaker_dependence(corpus, fresh_model):
    u = corpus.split(TRAIN)[0]
    dec_in, _ = bottleneck(encode_text(u.x, fresh_model), fresh_model)
    y0 = decode_speech(dec_in, fresh_model, 0)
    y1 = decode_speech(dec_in, fresh_model, 1)
    assert y0.shape == (len(u), 8)
    assert not np.array_equal(y0.data, y1.data)
    assert vocode(u.y, fresh_model, 0).data.reshape(-1).shape == (4 * len(u),)
    with pytest.raises(ValueError):
        decode_speech(dec_in, fresh_model, None)


def test_decode_text_rows_sum_to_one(corpus, fresh_model):
    u = corpus.split(TRAIN)[0]
    p = decode_text(encode_text(u.x, fresh_model).z, fresh_model, 0).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_bounds():
    v = 12
    assert float(ad.cross_entropy(ad.Tensor(np.zeros((5, v))), np.arange(5)).data) == pytest.approx(math.log(v), rel=1e-12)
    perfect = np.full((3, v), -1e4)
    perfect[np.arange(3), [1, 2, 3]] = 1e4
    assert float(ad.cross_entropy(ad.Tensor(perfect), np.array([1, 2, 3])).data) == 0.0


def test_stacks_run_end_to_end(batch, fresh_model):
    n = batch.n_frames
    assert tts_stack(batch, fresh_model).output.shape == (n, 8)
    assert sts_stack(batch, fresh_model).output.shape == (n, 8)
    stt = stt_stack(batch, fresh_model)
    ttt = ttt_stack(batch, fresh_model)
    assert stt.output.shape == ttt.output.shape == (n, 12)
    assert stt.codes is None and ttt.codes is None


def test_remove_sd_touches_only_sd_parameters(fresh_model):
    m = remove_sd(fresh_model)
    for name, value in fresh_model.params.items():
        if name.endswith((".spk_table", ".spk_proj")):
            assert name not in m.params
        else:
            assert m.params[name].tobytes() == value.tobytes()
    assert {module_of(n) for n in m.params if n.endswith(".sd_bias")} == set(SD_MODULES)
    with pytest.raises(ValueError):
        remove_sd(m)


def test_removed_model_never_reads_speaker_tables(batch, fresh_model):
    m = remove_sd(fresh_model)

    class Guard(dict):
        def __getitem__(self, key):
            if key.endswith((".spk_table", ".spk_proj")):
                raise AssertionError(f"read {key}")
            return super().__getitem__(key)

    m.params = Guard(m.params)
    sts_stack(Batch(batch.lengths, None, batch.y, None, None), m)
    vocode(batch.y, m)
    with pytest.raises(ValueError):
        vocode(batch.y, m, 0)


def test_sd_bias_starts_at_mean_speaker_contribution(batch, fresh_model):
    m = remove_sd(fresh_model)
    table, proj = fresh_model.params["voc.spk_table"], fresh_model.params["voc.spk_proj"]
    np.testing.assert_allclose(m.params["voc.sd_bias"], (table @ proj).mean(axis=0), rtol=1e-12)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, fresh_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(fresh_model, path, {"note": "x"})
    m, header = load_checkpoint(path)
    assert header["mode"] == "vq" and header["K"] == 160 and header["D"] == 64
    assert header["A"] == 8 and header["V"] == 12 and header["extra"] == {"note": "x"}
    assert checkpoint_bytes(m) == checkpoint_bytes(fresh_model)
    assert path.read_bytes()[:8] == b"VQCLCKPT"


def test_frozen_modules_are_constants_under_a_graph(fresh_model):
    fresh_model.frozen = {"tenc"}
    with ad.Graph() as g:
        fresh_model.leaf("tenc.w1")
        fresh_model.leaf("senc.w1")
    assert set(g.parameters) == {"senc.w1"}


def test_invalid_model_config():
    with pytest.raises(ValueError):
        init_model(ModelConfig(mode="ae"))
    with pytest.raises(ValueError):
        init_model(ModelConfig(codebook_size=0))
