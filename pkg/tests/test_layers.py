import math

import numpy as np
import pytest

from promptmil import autodiff as ad
from promptmil.autodiff import Tensor, backward, grad_check
from promptmil.layers import (BankError, ExampleBank, MessengerParams,
                              SlideHeadParams, SummaryParams, align_project,
                              match_patch_examples, match_slide_examples,
                              mean_pool_forward, messenger_forward, slide_head,
                              summary_forward)


def make_bank(vectors, tags):
    return ExampleBank(np.asarray(vectors, dtype=np.float64), list(tags),
                       slide_ids=["s0"], slide_tags=[0])


def rand_messenger(rng, width, in_width=None):
    in_width = in_width or width
    return MessengerParams(
        *(Tensor(rng.standard_normal((width, in_width)) / np.sqrt(in_width),
                 requires_grad=True, name=f"m{i}") for i in range(3)))


def rand_summary(rng, hidden, width):
    return SummaryParams(
        v=Tensor(rng.standard_normal((hidden, width)) / np.sqrt(width),
                 requires_grad=True, name="sv"),
        w=Tensor(rng.standard_normal((1, hidden)) / np.sqrt(hidden),
                 requires_grad=True, name="sw"))


# ---------------------------------------------------------------------------
# patch-example matching
# ---------------------------------------------------------------------------

def test_match_exact_row_hits_its_example():
    rng = np.random.default_rng(0)
    bank_vecs = rng.standard_normal((5, 4))
    bank = make_bank(bank_vecs, [0, 0, 1, 1, 1])
    bag = bank.patch_vectors[3:4].copy()
    idx, cos, aug = match_patch_examples(bag, bank)
    assert idx.tolist() == [3]
    assert cos[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(aug, np.hstack([bag, bank.patch_vectors[3:4]]))


def test_match_tie_takes_lowest_index():
    v = np.array([1.0, 0.0])
    bank = make_bank([v, v], [0, 1])  # identical examples -> tied cosine
    idx, cos, _ = match_patch_examples(np.array([[0.5, 0.5]]), bank)
    assert idx.tolist() == [0]


def test_match_hand_computed_cosine():
    bank = make_bank([[0.0, 1.0], [0.8, 0.6]], [0, 1])
    idx, cos, aug = match_patch_examples(np.array([[1.0, 0.0]]), bank)
    assert idx.tolist() == [1]
    assert cos[0] == pytest.approx(0.8, abs=1e-12)


def test_match_invariant_to_positive_rescaling():
    rng = np.random.default_rng(1)
    bank = make_bank(rng.standard_normal((4, 6)), [0, 0, 1, 1])
    bag = rng.standard_normal((7, 6))
    idx, _, _ = match_patch_examples(bag, bank)
    idx_scaled, _, _ = match_patch_examples(bag * 13.7, bank)
    assert np.array_equal(idx, idx_scaled)
    # bank side: rescaling before construction (bank normalizes on load)
    bank2 = make_bank(rng.standard_normal((4, 6)), [0, 0, 1, 1])
    bank2_scaled = make_bank(bank2.patch_vectors * 5.0, [0, 0, 1, 1])
    a, _, _ = match_patch_examples(bag, bank2)
    b, _, _ = match_patch_examples(bag, bank2_scaled)
    assert np.array_equal(a, b)


def test_match_top_k_mean():
    bank = make_bank([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [0, 1, 1])
    bag = np.array([[2.0, 1.0]])
    idx, cos, aug = match_patch_examples(bag, bank, top_k=2)
    assert idx.tolist() == [0]
    expected = (bank.patch_vectors[0] + bank.patch_vectors[1]) / 2
    np.testing.assert_allclose(aug[0, 2:], expected, atol=1e-12)


def test_match_empty_bank_rejected():
    with pytest.raises(BankError):
        make_bank(np.zeros((0, 3)), [])


# ---------------------------------------------------------------------------
# messenger
# ---------------------------------------------------------------------------

def test_messenger_single_row_is_value_row():
    rng = np.random.default_rng(2)
    p = rand_messenger(rng, 6)
    x = Tensor(rng.standard_normal((1, 6)))
    out = messenger_forward(x, p)
    np.testing.assert_allclose(out.data, (x.data @ p.wv.data.T), atol=1e-12)


def test_messenger_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(3)
    p = rand_messenger(rng, 4)
    row = rng.standard_normal((1, 4))
    out = messenger_forward(Tensor(np.repeat(row, 5, axis=0)), p).data
    for r in out[1:]:
        np.testing.assert_allclose(r, out[0], atol=1e-12)


def test_messenger_permutation_equivariant():
    rng = np.random.default_rng(4)
    p = rand_messenger(rng, 5)
    x = rng.standard_normal((5, 5))
    perm = rng.permutation(5)
    out = messenger_forward(Tensor(x), p).data
    out_perm = messenger_forward(Tensor(x[perm]), p).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------

def test_summary_single_row():
    rng = np.random.default_rng(5)
    p = rand_summary(rng, 3, 4)
    x = Tensor(rng.standard_normal((1, 4)))
    pooled, attn = summary_forward(x, p)
    np.testing.assert_allclose(attn.data, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(pooled.data, x.data, atol=1e-15)


def test_summary_identical_rows_uniform_attention():
    rng = np.random.default_rng(6)
    p = rand_summary(rng, 3, 4)
    x = Tensor(np.repeat(rng.standard_normal((1, 4)), 6, axis=0))
    _, attn = summary_forward(x, p)
    np.testing.assert_allclose(attn.data, np.full((1, 6), 1 / 6), atol=1e-12)


def test_summary_matches_bruteforce_reimplementation():
    # independent oracle: explicit per-row loops straight off the formula
    rng = np.random.default_rng(0)
    p = rand_summary(rng, 5, 7)
    x = rng.standard_normal((3, 7))
    pooled, attn = summary_forward(Tensor(x), p)

    scores = []
    for j in range(3):
        hidden = [math.tanh(sum(p.v.data[k, m] * x[j, m] for m in range(7)))
                  for k in range(5)]
        scores.append(sum(p.w.data[0, k] * hidden[k] for k in range(5)))
    exps = [math.exp(s - max(scores)) for s in scores]
    weights = [e / sum(exps) for e in exps]
    expected = [sum(weights[j] * x[j, m] for j in range(3)) for m in range(7)]

    np.testing.assert_allclose(attn.data[0], weights, atol=1e-12)
    np.testing.assert_allclose(pooled.data[0], expected, atol=1e-12)


def test_mean_pool_is_exact_arithmetic_mean():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((9, 4))
    pooled, attn = mean_pool_forward(Tensor(x))
    np.testing.assert_array_equal(pooled.data[0], x.mean(axis=0))
    np.testing.assert_allclose(attn.data, np.full((1, 9), 1 / 9), atol=1e-15)


# ---------------------------------------------------------------------------
# slide head / align projector
# ---------------------------------------------------------------------------

def make_head(rng, dim, concat_width, with_prompt=True):
    return SlideHeadParams(
        proj_w=Tensor(rng.standard_normal((dim, concat_width)) / np.sqrt(concat_width),
                      requires_grad=True, name="pw"),
        proj_b=Tensor(np.zeros((1, dim)), requires_grad=True, name="pb"),
        prompt=(Tensor(0.02 * rng.standard_normal((1, dim)), requires_grad=True,
                       name="fp") if with_prompt else None))


def test_slide_head_output_unit_norm():
    rng = np.random.default_rng(8)
    head = make_head(rng, 4, 3 * 4)
    fs = Tensor(rng.standard_normal((1, 4)))
    z = Tensor(rng.standard_normal((3, 4)))
    fi, _, _ = slide_head(fs, z, head)
    assert np.linalg.norm(fi.data) == pytest.approx(1.0, abs=1e-12)


def test_slide_head_matches_equal_row():
    rng = np.random.default_rng(9)
    z_val = rng.standard_normal((4, 5))
    fs = Tensor(z_val[2:3].copy())
    head = make_head(rng, 5, 3 * 5)
    fi, match, cos = slide_head(fs, Tensor(z_val), head)
    assert match == 2
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_slide_match_empty_z_rejected():
    with pytest.raises(BankError):
        match_slide_examples(np.ones(3), np.zeros((0, 3)))


def test_align_project_zero_input_defined():
    w = Tensor(np.zeros((2, 4)), requires_grad=True, name="aw")
    out = align_project(Tensor(np.ones((1, 4))), w)
    np.testing.assert_array_equal(out.data, np.zeros((1, 2)))
    assert np.linalg.norm(out.data) == 0.0


def test_align_project_identity_block_recovers_prefix():
    w = np.hstack([np.eye(3), np.zeros((3, 3))])
    x = np.array([[3.0, 0.0, 4.0, 9.0, 9.0, 9.0]])
    out = align_project(Tensor(x), Tensor(w))
    np.testing.assert_allclose(out.data, [[0.6, 0.0, 0.8]], atol=1e-12)


def test_align_project_gradient_check():
    rng = np.random.default_rng(10)
    w = Tensor(rng.standard_normal((3, 6)) / np.sqrt(6), requires_grad=True,
               name="aw")
    z = Tensor(rng.standard_normal((4, 6)))
    root = ad.tsum(ad.mul(align_project(z, w),
                          Tensor(rng.standard_normal((4, 3)))))
    assert grad_check(root, h=1e-5, tol=1e-5).passed


# ---------------------------------------------------------------------------
# composition: example slides and the full visual pipeline
# ---------------------------------------------------------------------------

def pipeline(bag, bank, mp, sp, head, z=None):
    """The production path, for composition tests."""
    _, _, aug = match_patch_examples(bag, bank)
    fml = messenger_forward(Tensor(aug), mp)
    fs, attn = summary_forward(fml, sp)
    if z is None:
        return fs, attn
    return slide_head(fs, z, head)


def test_single_patch_example_slide_composition():
    # an example slide with one patch equal to bank row 0: its summary is
    # the messenger output of the [z0 ; z0] row
    rng = np.random.default_rng(11)
    bank = make_bank(rng.standard_normal((3, 4)), [0, 1, 1])
    mp = rand_messenger(rng, 8)
    sp = rand_summary(rng, 4, 8)
    bag = bank.patch_vectors[0:1].copy()
    fs, _ = pipeline(bag, bank, mp, sp, None)
    row = np.hstack([bag, bag])
    expected = row @ mp.wv.data.T
    np.testing.assert_allclose(fs.data, expected, atol=1e-12)


def test_identical_example_slides_identical_features():
    rng = np.random.default_rng(12)
    bank = make_bank(rng.standard_normal((2, 4)), [0, 1])
    mp = rand_messenger(rng, 8)
    sp = rand_summary(rng, 4, 8)
    bag = rng.standard_normal((5, 4))
    fs1, _ = pipeline(bag, bank, mp, sp, None)
    fs2, _ = pipeline(bag.copy(), bank, mp, sp, None)
    np.testing.assert_array_equal(fs1.data, fs2.data)


def test_gradients_flow_through_example_slide_features():
    # loss built on Z only: messenger weights must still receive gradients
    rng = np.random.default_rng(13)
    bank = make_bank(rng.standard_normal((2, 4)), [0, 1])
    mp = rand_messenger(rng, 8)
    sp = rand_summary(rng, 4, 8)
    rows = [pipeline(rng.standard_normal((3, 4)), bank, mp, sp, None)[0]
            for _ in range(2)]
    z = ad.concat_rows(rows)
    root = ad.tsum(ad.tanh(z))
    grads = backward(root)
    assert np.abs(grads[mp.wq]).max() > 0
    assert grad_check(root, h=1e-5, tol=1e-5).passed


def test_full_pipeline_matches_independent_reimplementation():
    """Scripted numpy re-evaluation of the whole bag -> F_i path, d=8."""
    rng = np.random.default_rng(0)
    d, n, m = 8, 3, 2
    bank = make_bank(rng.standard_normal((4, d)), [0, 0, 1, 1])
    mp = rand_messenger(rng, 2 * d)
    sp = rand_summary(rng, 5, 2 * d)
    head = make_head(rng, d, 2 * (2 * d) + d)
    bag = rng.standard_normal((n, d))
    z_rows = rng.standard_normal((m, 2 * d))
    z = Tensor(z_rows)

    fi, match_idx, _ = pipeline(bag, bank, mp, sp, head, z)

    # ---- independent oracle, plain numpy, no engine calls ----
    bn = bag / np.linalg.norm(bag, axis=1, keepdims=True)
    cos = bn @ bank.patch_vectors.T
    idx = cos.argmax(axis=1)
    aug = np.hstack([bag, bank.patch_vectors[idx]])
    q, k, v = (aug @ mp.wq.data.T, aug @ mp.wk.data.T, aug @ mp.wv.data.T)
    logits = q @ k.T / np.sqrt(2 * d)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    fml = (e / e.sum(axis=1, keepdims=True)) @ v
    scores = np.tanh(fml @ sp.v.data.T) @ sp.w.data.T
    se = np.exp(scores - scores.max())
    a = (se / se.sum()).ravel()
    fs = a @ fml
    zcos = (fs / np.linalg.norm(fs)) @ (z_rows / np.linalg.norm(z_rows, axis=1,
                                                                keepdims=True)).T
    mi = int(zcos.argmax())
    concat = np.concatenate([fs, z_rows[mi], head.prompt.data[0]])
    pre = concat @ head.proj_w.data.T + head.proj_b.data[0]
    expected = pre / np.linalg.norm(pre)

    assert match_idx == mi
    np.testing.assert_allclose(fi.data[0], expected, atol=1e-12)


def test_slide_feature_invariant_to_patch_permutation():
    rng = np.random.default_rng(14)
    d = 6
    bank = make_bank(rng.standard_normal((3, d)), [0, 1, 1])
    mp = rand_messenger(rng, 2 * d)
    sp = rand_summary(rng, 4, 2 * d)
    head = make_head(rng, d, 2 * (2 * d) + d)
    z = Tensor(rng.standard_normal((2, 2 * d)))
    for trial in range(100):
        bag = rng.standard_normal((int(rng.integers(2, 9)), d))
        perm = rng.permutation(bag.shape[0])
        fi, _, _ = pipeline(bag, bank, mp, sp, head, z)
        fi_perm, _, _ = pipeline(bag[perm], bank, mp, sp, head, z)
        np.testing.assert_allclose(fi_perm.data, fi.data, atol=1e-9)


def test_attention_weights_form_distribution():
    rng = np.random.default_rng(15)
    sp = rand_summary(rng, 4, 6)
    for _ in range(100):
        x = Tensor(rng.standard_normal((int(rng.integers(1, 12)), 6)))
        _, attn = summary_forward(x, sp)
        a = attn.data[0]
        assert np.all(a > 0) and np.all(a < 1 + 1e-12)
        assert a.sum() == pytest.approx(1.0, abs=1e-12)
