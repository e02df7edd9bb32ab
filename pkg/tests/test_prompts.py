import numpy as np
import pytest

from promptmil import autodiff as ad
from promptmil.autodiff import backward
from promptmil.encoders import StaticTextFeatures, ToyTextEncoder
from promptmil.prompts import (PromptError, PromptSpec, build_text_features,
                               init_contexts, init_deltas)


def spec_for(u=2, ctx=2):
    return PromptSpec(
        texts={"task": [f"slide of type {c}" for c in range(u)],
               "slide": [f"slide level description {c}" for c in range(u)],
               "patch": [f"patch level description {c}" for c in range(u)]},
        ctx_len={"task": ctx, "slide": ctx, "patch": ctx})


# ---------------------------------------------------------------------------
# init_contexts
# ---------------------------------------------------------------------------

def test_init_contexts_deterministic():
    a = init_contexts(3, 2, 1, 8, seed=4)
    b = init_contexts(3, 2, 1, 8, seed=4)
    assert np.array_equal(a.alpha.data, b.alpha.data)
    assert np.array_equal(a.beta.data, b.beta.data)
    assert np.array_equal(a.gamma.data, b.gamma.data)


def test_init_contexts_zero_length_is_empty():
    ctx = init_contexts(0, 2, 2, 8, seed=0)
    assert ctx.alpha.shape == (0, 8)


def test_init_contexts_statistics():
    # 10^4 N(0, 0.02^2) draws: sample mean within 3 sigma/sqrt(n) of zero
    ctx = init_contexts(1250, 0, 0, 8, seed=7)
    samples = ctx.alpha.data.ravel()
    assert samples.size == 10_000
    assert abs(samples.mean()) <= 3 * 0.02 / np.sqrt(samples.size)
    assert samples.std() == pytest.approx(0.02, rel=0.05)


# ---------------------------------------------------------------------------
# build_text_features
# ---------------------------------------------------------------------------

def test_static_backend_zero_delta_returns_normalized_bases():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((2, 6))
    backend = StaticTextFeatures(groups={g: base.copy()
                                         for g in ("task", "slide", "patch")})
    feats = build_text_features(spec_for(), init_deltas(6), backend)
    expected = base / np.linalg.norm(base, axis=1, keepdims=True)
    for group in ("task", "slide", "patch"):
        np.testing.assert_allclose(feats[group].data, expected, atol=1e-12)


def test_identical_texts_shared_context_identical_rows():
    enc = ToyTextEncoder(dim=8, seed=1)
    spec = PromptSpec(
        texts={"task": ["same words here", "same words here"],
               "slide": ["s", "s"], "patch": ["p", "p"]},
        ctx_len={"task": 2, "slide": 2, "patch": 2})
    ctx = init_contexts(2, 2, 2, 8, seed=0)
    feats = build_text_features(spec, ctx, enc, groups=("task",))
    np.testing.assert_array_equal(feats["task"].data[0], feats["task"].data[1])


def test_changing_one_class_text_changes_only_that_row():
    enc = ToyTextEncoder(dim=8, seed=1)
    ctx = init_contexts(2, 2, 2, 8, seed=0)
    base = build_text_features(spec_for(), ctx, enc, groups=("task", "slide"))
    spec2 = spec_for()
    spec2.texts["task"][1] = "completely different wording now"
    after = build_text_features(spec2, ctx, enc, groups=("task", "slide"))
    np.testing.assert_array_equal(base["task"].data[0], after["task"].data[0])
    assert not np.array_equal(base["task"].data[1], after["task"].data[1])
    np.testing.assert_array_equal(base["slide"].data, after["slide"].data)


def test_rows_unit_norm_both_backends():
    enc = ToyTextEncoder(dim=8, seed=2)
    ctx = init_contexts(2, 2, 2, 8, seed=3)
    toy = build_text_features(spec_for(), ctx, enc)
    rng = np.random.default_rng(1)
    backend = StaticTextFeatures(groups={g: rng.standard_normal((2, 8))
                                         for g in ("task", "slide", "patch")})
    static = build_text_features(spec_for(), init_deltas(8), backend)
    for feats in (toy, static):
        for group, rows in feats.items():
            np.testing.assert_allclose(np.linalg.norm(rows.data, axis=1), 1.0,
                                       atol=1e-12)


def test_gradient_reaches_contexts_not_token_table():
    enc = ToyTextEncoder(dim=8, seed=4)
    ctx = init_contexts(2, 2, 2, 8, seed=5)
    feats = build_text_features(spec_for(), ctx, enc, groups=("task",))
    root = ad.tsum(feats["task"])
    grads = backward(root)
    assert ctx.alpha in grads
    assert np.abs(grads[ctx.alpha]).max() > 0
    names = {t.name for t in grads}
    assert names == {"ctx.alpha"}
    # and the analytic gradient is right
    assert ad.grad_check(root, h=1e-5, tol=1e-5).passed


def test_class_count_mismatch_rejected():
    rng = np.random.default_rng(2)
    backend = StaticTextFeatures(groups={g: rng.standard_normal((3, 8))
                                         for g in ("task", "slide", "patch")})
    with pytest.raises(PromptError, match="rows"):
        build_text_features(spec_for(u=2), init_deltas(8), backend)


def test_spec_validation():
    with pytest.raises(PromptError):
        PromptSpec(texts={"task": ["a"], "slide": ["b"], "patch": ["c"]},
                   ctx_len={"task": 1, "slide": 1, "patch": 1})  # U < 2
    with pytest.raises(PromptError):
        PromptSpec(texts={"task": ["a", ""], "slide": ["b", "b"],
                          "patch": ["c", "c"]},
                   ctx_len={"task": 1, "slide": 1, "patch": 1})  # empty text
