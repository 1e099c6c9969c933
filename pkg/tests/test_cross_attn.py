import numpy as np
import pytest

from isostory.cross_attn import character_map_extract, cross_attention, regional_blend
from isostory.masks import CharacterMask
from oracles import softmax64


def mask_of(bits, cid=0):
    bits = np.asarray(bits, np.uint8)
    return CharacterMask(cid, 1, bits.size, bits, 0.1)


def _weights(rng, d=8, d_txt=6):
    return (
        rng.standard_normal((d, d)).astype(np.float32),
        rng.standard_normal((d_txt, d)).astype(np.float32),
        rng.standard_normal((d_txt, d)).astype(np.float32),
    )


def test_single_prompt_token():
    rng = np.random.default_rng(0)
    wq, wk, wv = _weights(rng)
    text = rng.standard_normal((1, 6)).astype(np.float32)
    att = cross_attention(rng.standard_normal((5, 8)), text, wq, wk, wv)
    assert (att.weights == 1).all()
    expected = (text.astype(np.float64) @ wv.astype(np.float64)).astype(np.float32)
    assert np.array_equal(att.output, np.repeat(expected, 5, axis=0))


def test_two_identical_prompt_tokens():
    rng = np.random.default_rng(1)
    wq, wk, wv = _weights(rng)
    tok = rng.standard_normal(6)
    att = cross_attention(rng.standard_normal((4, 8)), np.stack([tok, tok]), wq, wk, wv)
    assert (att.weights == 0.5).all()


def test_cross_attention_matches_float64():
    rng = np.random.default_rng(2)
    wq, wk, wv = _weights(rng)
    tokens = rng.standard_normal((7, 8)).astype(np.float32)
    text = rng.standard_normal((5, 6)).astype(np.float32)
    att = cross_attention(tokens, text, wq, wk, wv)
    q = tokens.astype(float) @ wq.astype(float)
    k = text.astype(float) @ wk.astype(float)
    v = text.astype(float) @ wv.astype(float)
    w = np.array([softmax64(list(q[i] @ k.T / np.sqrt(8))) for i in range(7)])
    assert np.abs(att.weights - w).max() < 1e-5
    assert np.abs(att.output - w @ v).max() < 1e-5


def test_map_extract():
    w = np.array([[0.1, 0.2, 0.7], [0.5, 0.25, 0.25]], np.float32)
    assert character_map_extract(w, (1, 2)).tolist() == w[:, 1].astype(float).tolist()
    assert np.allclose(character_map_extract(w, (0, 3)), 1 / 3, atol=1e-7)
    assert np.abs(character_map_extract(w, (1, 3)) - w[:, 1:3].astype(float).mean(axis=1)).max() < 1e-6
    with pytest.raises(ValueError):
        character_map_extract(w, (2, 2))
    with pytest.raises(ValueError):
        character_map_extract(w, (2, 4))


def test_blend_single_mask():
    g = np.array([[0.0], [1.0], [2.0], [3.0]], np.float32)
    a = g + 10
    out = regional_blend(g, {0: a}, {0: mask_of([0, 1, 1, 0])})
    assert out[:, 0].tolist() == [0, 11, 12, 3]


def test_blend_empty_masks_is_global():
    g = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    assert regional_blend(g, {}, {}).tobytes() == g.tobytes()
    out = regional_blend(g, {0: g + 1}, {0: mask_of([0, 0, 0, 0])})
    assert out.tobytes() == g.tobytes()


def test_blend_two_characters_per_row():
    rng = np.random.default_rng(3)
    g, a, b = (rng.standard_normal((4, 2)).astype(np.float32) for _ in range(3))
    out = regional_blend(g, {0: a, 1: b}, {0: mask_of([1, 0, 0, 0], 0), 1: mask_of([0, 0, 0, 1], 1)})
    for r, src in enumerate([a, g, g, b]):
        assert out[r].tobytes() == src[r].tobytes()


def test_blend_rejects_overlap():
    g = np.zeros((3, 2), np.float32)
    with pytest.raises(ValueError):
        regional_blend(g, {0: g, 1: g}, {0: mask_of([1, 1, 0], 0), 1: mask_of([0, 1, 1], 1)})


def test_blend_idempotent():
    rng = np.random.default_rng(4)
    g, a = (rng.standard_normal((6, 2)).astype(np.float32) for _ in range(2))
    masks = {0: mask_of([1, 0, 1, 0, 0, 1])}
    once = regional_blend(g, {0: a}, masks)
    assert regional_blend(once, {0: a}, masks).tobytes() == once.tobytes()
