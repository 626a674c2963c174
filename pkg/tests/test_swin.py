import numpy as np
import pytest

from wcebleed.autograd import Tensor, grad_check, no_grad, ops, zero_
from wcebleed.autograd.checkpoint import dumps, loads
from wcebleed.models.swin import (
    PatchEmbed,
    PatchMerge,
    SwinBlock,
    SwinClassifier,
    SwinConfig,
    cosine_window_attention,
    shifted_attention_mask,
    soft_cross_entropy,
    window_partition,
    window_reverse,
)

GRID = [(h, w, ws, s) for h in (4, 6, 8) for w in (4, 5, 8) for ws in (2, 4) for s in sorted({0, ws // 2})]


@pytest.mark.parametrize("h,w,ws,shift", GRID)
def test_partition_round_trip(h, w, ws, shift, rng):
    x = rng.normal(size=(2, h, w, 3)).astype(np.float32)
    wset = window_partition(x, ws, shift)
    assert wset.windows.shape[1:] == (ws * ws, 3)
    assert wset.windows.shape[0] == 2 * wset.num_windows
    back = window_reverse(wset).data
    assert back.shape == x.shape
    assert np.array_equal(back, x)


def test_partition_row_major_windows():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    win = window_partition(x, 2).windows.data[..., 0]
    assert win.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_shift_rolls_towards_origin():
    # cyclic shift by (-1, -1): position (0, 0) holds source (1, 1)
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    win = window_partition(x, 2, shift=1).windows.data[..., 0]
    assert win[0].tolist() == [5, 6, 9, 10]
    assert win[3].tolist() == [15, 12, 3, 0]


def test_window_permutation_then_reverse():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 8, 8, 2)).astype(np.float32)
    wset = window_partition(x, 4)
    perm = rng.permutation(wset.num_windows)
    shuffled = wset.windows.data[perm]
    restored = np.empty_like(shuffled)
    restored[perm] = shuffled
    assert np.array_equal(window_reverse(wset, Tensor(restored)).data, x)


def _brute_mask(h, w, ws, shift):
    """Region id of every source pixel, rolled like the features, compared pairwise."""
    def region(i, n):
        if i < n - ws:
            return 0
        return 1 if i < n - shift else 2

    ids = np.array([[region(i, h) * 3 + region(j, w) for j in range(w)] for i in range(h)])
    masks = []
    for wy in range(h // ws):
        for wx in range(w // ws):
            cells = [ids[wy * ws + a, wx * ws + b] for a in range(ws) for b in range(ws)]
            masks.append([[0.0 if ci == cj else -1e4 for cj in cells] for ci in cells])
    return np.array(masks, dtype=np.float32)


@pytest.mark.parametrize("h,w,ws", [(h, w, ws) for h in (2, 4, 6, 8) for w in (2, 4, 6, 8) for ws in (2, 4) if h % ws == 0 and w % ws == 0])
def test_mask_matches_brute_force(h, w, ws):
    for shift in range(1, ws):
        assert np.array_equal(shifted_attention_mask(h, w, ws, shift), _brute_mask(h, w, ws, shift))


def test_mask_single_window_wrap():
    m = shifted_attention_mask(4, 4, 4, 2)
    assert m.shape == (1, 16, 16)
    assert np.array_equal(m, m.transpose(0, 2, 1))
    # tokens (0,0) and (0,1) share a region; (0,0) and (0,2) straddle the wrap
    assert m[0, 0, 1] == 0 and m[0, 0, 2] == -1e4 and m[0, 0, 8] == -1e4
    assert not shifted_attention_mask(4, 4, 2, 0).any()


def _qkv(rng, bw=2, heads=2, n=4, d=3):
    return [Tensor(rng.normal(size=(bw, heads, n, d))) for _ in range(3)]


def test_attention_rows_and_single_token(rng):
    q, k, v = _qkv(rng)
    out, attn = cosine_window_attention(q, k, v, None, np.array([0.1, 0.5]))
    assert np.allclose(attn.data.sum(-1), 1, atol=1e-6)
    q1, k1, v1 = _qkv(rng, n=1)
    out1, _ = cosine_window_attention(q1, k1, v1, None, np.array([0.1, 0.5]))
    assert np.allclose(out1.data, v1.data)


def test_attention_mask_saturation(rng):
    q, k, v = _qkv(rng, bw=1)
    mask = np.full((1, 4, 4), -1e4, dtype=np.float32)
    mask[..., 2] = 0
    out, _ = cosine_window_attention(q, k, v, mask, np.array([1.0, 1.0]))
    assert np.abs(out.data - v.data[:, :, 2:3, :]).max() < 1e-3


def test_attention_tau_floor(rng):
    q, k, v = _qkv(rng)
    with pytest.raises(ValueError):
        cosine_window_attention(q, k, v, None, np.array([0.005, 0.1]))


def test_patch_embed_shapes_and_zero_image():
    pe = PatchEmbed(4, 8, np.random.default_rng(0))
    x = Tensor(np.zeros((1, 64, 64, 3), dtype=np.float32))
    tok = pe(x).data
    assert tok.shape == (1, 16, 16, 8)
    assert np.allclose(tok, tok[0, 0, 0])


def test_patch_embed_locality(rng):
    pe = PatchEmbed(4, 8, np.random.default_rng(0))
    a = rng.normal(size=(1, 16, 16, 3)).astype(np.float32)
    b = a.copy()
    b[0, 4:8, 8:12] += 1.0
    diff = np.abs(pe.tokens(Tensor(a)).data - pe.tokens(Tensor(b)).data).max(-1)[0]
    changed = np.argwhere(diff > 0)
    assert changed.tolist() == [[1, 2]]


def test_block_identity_with_zero_projections(rng):
    blk = SwinBlock(8, 2, 4, 2, 8, np.random.default_rng(1))
    zero_(blk.attn.proj)
    zero_(blk.fc2)
    x = Tensor(rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
    assert np.array_equal(blk(x).data, x.data)


def test_two_blocks_grad_check(rng):
    r = np.random.default_rng(2)
    b1 = SwinBlock(4, 2, 2, 0, 4, r).astype(np.float64)
    b2 = SwinBlock(4, 2, 2, 1, 4, r).astype(np.float64)
    x = rng.normal(size=(1, 4, 4, 4))
    proj = rng.normal(size=(1, 4, 4, 4))
    err = grad_check(lambda t: (b2(b1(t)) * Tensor(proj)).sum(), [x])
    assert err < 1e-4


def test_patch_merge_shapes_constant_and_order(rng):
    pm = PatchMerge(3, np.random.default_rng(0))
    x = rng.normal(size=(1, 8, 8, 3)).astype(np.float32)
    assert pm(Tensor(x)).shape == (1, 4, 4, 6)
    c = np.broadcast_to(rng.normal(size=3), (1, 8, 8, 3)).astype(np.float32)
    out = pm(Tensor(c)).data
    assert np.allclose(out, out[0, 0, 0], atol=1e-6)
    with pytest.raises(ValueError):
        pm(Tensor(np.zeros((1, 7, 8, 3), dtype=np.float32)))
    # swapping the 2x2 neighbours changes the result
    swapped = x.copy()
    swapped[:, 0::2, 0::2], swapped[:, 1::2, 1::2] = x[:, 1::2, 1::2], x[:, 0::2, 0::2]
    assert not np.allclose(pm(Tensor(x)).data, pm(Tensor(swapped)).data)


def test_config_validation():
    with pytest.raises(ValueError):
        SwinConfig(input_size=63)
    with pytest.raises(ValueError):
        SwinConfig(depths=(2,), num_heads=(2, 4))
    with pytest.raises(ValueError):
        SwinConfig(embed_dim=30, num_heads=(4, 4))


def _tiny():
    return SwinConfig(input_size=16, patch_size=4, embed_dim=8, depths=(1,), num_heads=(2,), window_size=2)


def test_classifier_logits_and_determinism(rng):
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    a, b = SwinClassifier(seed=5), SwinClassifier(seed=5)
    la, lb = a.classify(img), b.classify(img)
    assert la.shape == (2,)
    assert np.array_equal(la, lb)
    assert np.isclose(ops.softmax(Tensor(la)).data.sum(), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        a.classify(np.zeros((32, 32, 3), dtype=np.uint8))


def test_full_model_grad_check(rng):
    model = SwinClassifier(_tiny(), seed=0).astype(np.float64)
    x = rng.integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8)
    y = np.eye(2)[[0, 1]]
    params = model.parameters()
    for p in params[:3] + params[-2:]:
        assert _param_grad_err(model, p, x, y) < 1e-3


def _param_grad_err(model, p, x, y, eps=1e-5):
    p.grad = None
    loss = soft_cross_entropy(model(x), y)
    loss.backward()
    analytic = p.grad.copy()
    flat = p.data.reshape(-1)
    idx = np.random.default_rng(0).choice(flat.size, size=min(6, flat.size), replace=False)
    num = np.empty(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = soft_cross_entropy(model(x), y).data
            flat[i] = orig - eps
            dn = soft_cross_entropy(model(x), y).data
            flat[i] = orig
            num[j] = (up - dn) / (2 * eps)
    a = analytic.reshape(-1)[idx]
    return np.abs(a - num).max() / max(np.abs(num).max(), np.abs(a).max(), 1e-6)


def test_cross_entropy_limits():
    perfect = soft_cross_entropy(Tensor(np.array([[60.0, -60.0]])), np.array([[1.0, 0.0]]))
    assert perfect.data < 1e-12
    uniform = soft_cross_entropy(Tensor(np.zeros((3, 2))), np.eye(2)[[0, 1, 1]])
    assert np.isclose(uniform.data, np.log(2))


def test_checkpoint_reload_same_logits(rng):
    model = SwinClassifier(_tiny(), seed=3)
    img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    params, hyper = loads(dumps(model.state_dict(), model.hyper()))
    clone = SwinClassifier(SwinConfig.from_dict(hyper["config"]), seed=99)
    clone.load_state_dict(params)
    assert np.array_equal(model.classify(img), clone.classify(img))


def test_capture_forward_from_matches_forward(rng):
    model = SwinClassifier(seed=1)
    imgs = rng.integers(0, 256, size=(2, 64, 64, 3), dtype=np.uint8)
    with no_grad():
        full = model(imgs).data
        for layer in model.layer_ids:
            act = model.capture(imgs, layer)
            assert np.array_equal(model.forward_from(layer, act).data, full)
    with pytest.raises(KeyError):
        model.capture(imgs, "stage9")

