"""Textual prompt assembly: three per-class prompt groups with learnable parts.

Groups: ``task`` (what the slide is, used for classification), ``slide``
(slide-level visual description) and ``patch`` (patch-level visual
description). Under the toy encoder backend each group owns a learnable
context matrix prepended to the class text tokens; under the static backend
a learnable residual row is added to the fixed per-class features instead.
Contexts are shared across classes within a group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .dataio import PROMPT_GROUPS, Manifest
from .encoders import (StaticTextFeatures, ToyTextEncoder, embed_tokens,
                       encode_text, encode_text_static)


class PromptError(ValueError):
    pass


@dataclass
class PromptSpec:
    """Per-class prompt texts and the context lengths for each group."""

    texts: dict[str, list[str]]
    ctx_len: dict[str, int]

    def __post_init__(self):
        counts = {len(v) for v in self.texts.values()}
        if len(counts) != 1:
            raise PromptError("every group needs the same number of class texts")
        if self.n_classes < 2:
            raise PromptError("need at least two classes")
        for group in PROMPT_GROUPS:
            if group not in self.texts:
                raise PromptError(f"missing prompt group {group!r}")
            if any(not t.strip() for t in self.texts[group]):
                raise PromptError(f"empty text in group {group!r}")
            if self.ctx_len.get(group, 0) < 0:
                raise PromptError("context lengths must be >= 0")

    @property
    def n_classes(self) -> int:
        return len(next(iter(self.texts.values())))

    @classmethod
    def from_manifest(cls, manifest: Manifest,
                      ctx_len: dict[str, int] | int = 8) -> "PromptSpec":
        if isinstance(ctx_len, int):
            ctx_len = {g: ctx_len for g in PROMPT_GROUPS}
        return cls(texts={g: list(manifest.prompts[g]) for g in PROMPT_GROUPS},
                   ctx_len=dict(ctx_len))


@dataclass
class LearnableContexts:
    """Per-group context matrices (toy backend), shared across classes."""

    alpha: Tensor   # task group, M_alpha x d
    beta: Tensor    # slide group
    gamma: Tensor   # patch group

    def group(self, name: str) -> Tensor:
        return {"task": self.alpha, "slide": self.beta, "patch": self.gamma}[name]


@dataclass
class StaticDeltas:
    """Per-group learnable residual rows (static backend)."""

    task: Tensor
    slide: Tensor
    patch: Tensor

    def group(self, name: str) -> Tensor:
        return {"task": self.task, "slide": self.slide, "patch": self.patch}[name]


def init_contexts(m_alpha: int, m_beta: int, m_gamma: int, dim: int,
                  seed: int) -> LearnableContexts:
    """Draw N(0, 0.02^2) context matrices from the seeded stream."""

    def draw(tag: str, m: int) -> Tensor:
        if m == 0:
            return Tensor(np.zeros((0, dim)), requires_grad=True,
                          name=f"ctx.{tag}")
        vals = rng.normals(rng.derive_seed(seed, f"ctx/{tag}"), m * dim)
        return Tensor(0.02 * vals.reshape(m, dim), requires_grad=True,
                      name=f"ctx.{tag}")

    return LearnableContexts(alpha=draw("alpha", m_alpha),
                             beta=draw("beta", m_beta),
                             gamma=draw("gamma", m_gamma))


def init_deltas(dim: int) -> StaticDeltas:
    """Zero residuals: the static backend starts exactly at its base features."""
    return StaticDeltas(*(Tensor(np.zeros((1, dim)), requires_grad=True,
                                 name=f"delta.{g}") for g in PROMPT_GROUPS))


def build_text_features(spec: PromptSpec,
                        ctx: LearnableContexts | StaticDeltas,
                        backend: ToyTextEncoder | StaticTextFeatures,
                        groups: tuple[str, ...] = PROMPT_GROUPS,
                        ) -> dict[str, Tensor]:
    """Produce one U x d unit-row feature matrix per requested group."""
    out: dict[str, Tensor] = {}
    u = spec.n_classes
    if isinstance(backend, ToyTextEncoder):
        if not isinstance(ctx, LearnableContexts):
            raise PromptError("toy backend needs LearnableContexts")
        for group in groups:
            prefix = ctx.group(group)
            rows = [encode_text(prefix, embed_tokens(text, backend), backend)
                    for text in spec.texts[group]]
            out[group] = ad.concat_rows(rows)
    elif isinstance(backend, StaticTextFeatures):
        if not isinstance(ctx, StaticDeltas):
            raise PromptError("static backend needs StaticDeltas")
        for group in groups:
            base = backend.groups[group]
            if base.shape[0] != u:
                raise PromptError(f"static features for {group!r} have "
                                  f"{base.shape[0]} rows, spec has {u} classes")
            rows = [encode_text_static(base[c], ctx.group(group))
                    for c in range(u)]
            out[group] = ad.concat_rows(rows)
    else:
        raise PromptError(f"unknown text backend {type(backend).__name__}")
    return out
