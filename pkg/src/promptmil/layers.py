"""The visual pathway: example matching, Messenger, Summary, slide head.

A bag flows through:

    patch features (n x d)
      -> match against the patch example bank, concat -> (n x 2d)
      -> Messenger: single-head self-attention, no residual  -> (n x d_w)
      -> Summary: gated attention pooling                    -> (1 x d_w)
      -> match against example-slide features, concat the best match and the
         learnable slide prompt, project, normalize          -> (1 x d)

Matching is argmax over cosines and is treated as a constant of the current
step (the graph is rebuilt every step); gradients flow through the matched
example-slide rows via one-hot matmuls, never through the argmax itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Manifest, read_examples


class BankError(ValueError):
    pass


@dataclass
class MessengerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @property
    def width(self) -> int:
        return self.wq.shape[0]


@dataclass
class SummaryParams:
    v: Tensor   # hidden x width
    w: Tensor   # 1 x hidden


@dataclass
class SlideHeadParams:
    proj_w: Tensor                 # d x (concat width)
    proj_b: Tensor                 # 1 x d
    prompt: Tensor | None = None   # 1 x d_p, the learnable slide prompt


@dataclass
class ExampleBank:
    """Class-tagged visual prototypes: patch feature rows + slide ids."""

    patch_vectors: np.ndarray      # L x d, unit rows
    patch_tags: list[int]
    slide_ids: list[str]
    slide_tags: list[int]

    def __post_init__(self):
        if self.patch_vectors.ndim != 2 or self.patch_vectors.shape[0] == 0:
            raise BankError("patch bank must be a non-empty matrix")
        if len(self.patch_tags) != self.patch_vectors.shape[0]:
            raise BankError("one class tag per patch example required")
        if not self.slide_ids:
            raise BankError("need at least one slide example")
        norms = np.linalg.norm(self.patch_vectors, axis=1, keepdims=True)
        if np.any(norms < 1e-8):
            raise BankError("patch bank contains a near-zero row")
        self.patch_vectors = self.patch_vectors / norms

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "ExampleBank":
        vectors = read_examples(manifest.resolve(manifest.patch_bank_file))
        if vectors.shape[1] != manifest.dim:
            raise BankError(f"patch bank dim {vectors.shape[1]} != manifest "
                            f"dim {manifest.dim}")
        return cls(vectors, list(manifest.patch_tags),
                   list(manifest.slide_example_ids),
                   list(manifest.slide_example_tags))


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)


def match_patch_examples(bag: np.ndarray, bank: ExampleBank,
                         top_k: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Match every patch to its most similar bank example by cosine.

    Returns (indices, cosines, augmented) where augmented row j is
    [f_j ; matched example] (n x 2d). Ties go to the lowest bank index.
    With top_k > 1 the concatenated example is the mean of the k best rows;
    the reported index/cosine stay top-1.
    """
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise BankError(f"bag must be a non-empty matrix, got {bag.shape}")
    if bag.shape[1] != bank.patch_vectors.shape[1]:
        raise BankError(f"bag dim {bag.shape[1]} != bank dim "
                        f"{bank.patch_vectors.shape[1]}")
    cos = _unit(bag) @ bank.patch_vectors.T            # n x L
    idx = np.argmax(cos, axis=1)
    best = cos[np.arange(len(idx)), idx]
    if top_k <= 1:
        matched = bank.patch_vectors[idx]
    else:
        k = min(top_k, bank.patch_vectors.shape[0])
        order = np.argsort(-cos, axis=1, kind="stable")[:, :k]
        matched = bank.patch_vectors[order].mean(axis=1)
    return idx, best, np.concatenate([bag, matched], axis=1)


def messenger_forward(fe: Tensor, p: MessengerParams) -> Tensor:
    """Single-head self-attention, no residual, no positional encoding."""
    q = ad.matmul_t(fe, p.wq)
    k = ad.matmul_t(fe, p.wk)
    v = ad.matmul_t(fe, p.wv)
    attn = ad.row_softmax(ad.matmul_t(q, k, scale_by=1.0 / np.sqrt(p.width)))
    return ad.matmul(attn, v)


def summary_forward(fml: Tensor, p: SummaryParams) -> tuple[Tensor, Tensor]:
    """Gated attention pooling: a_j = softmax_j(w^T tanh(V f_j^T)).

    Returns (pooled 1 x width, attention 1 x n). The attention row is part
    of the public surface for interpretability reports.
    """
    scores = ad.matmul_t(ad.tanh(ad.matmul_t(fml, p.v)), p.w)     # n x 1
    attn = ad.row_softmax(ad.transpose(scores))                # 1 x n
    return ad.matmul(attn, fml), attn


def mean_pool_forward(fml: Tensor) -> tuple[Tensor, Tensor]:
    """Summary ablation: plain average pooling with uniform weights."""
    n = fml.shape[0]
    return ad.mean_rows(fml), ad.Tensor(np.full((1, n), 1.0 / n))


def match_slide_examples(fs_value: np.ndarray,
                         z_value: np.ndarray) -> tuple[int, float]:
    """Top-1 cosine match of a slide feature against example-slide rows."""
    if z_value.shape[0] == 0:
        raise BankError("empty example-slide matrix")
    cos = (_unit(fs_value.reshape(1, -1)) @ _unit(z_value).T)[0]
    idx = int(np.argmax(cos))
    return idx, float(cos[idx])


def slide_head(fs: Tensor, z: Tensor | None, head: SlideHeadParams,
               ) -> tuple[Tensor, int | None, float | None]:
    """Concat [F^S ; matched Z row ; slide prompt], project, normalize.

    The matched row is selected with a constant one-hot matmul so gradients
    reach the example-slide feature that won the match.
    """
    parts = [fs]
    match_idx: int | None = None
    match_cos: float | None = None
    if z is not None:
        match_idx, match_cos = match_slide_examples(fs.data, z.data)
        onehot = np.zeros((1, z.shape[0]))
        onehot[0, match_idx] = 1.0
        parts.append(ad.matmul(ad.Tensor(onehot), z))
    if head.prompt is not None:
        parts.append(head.prompt)
    concat = parts[0] if len(parts) == 1 else ad.concat_cols(parts)
    fi = ad.l2_normalize_rows(ad.affine(concat, head.proj_w, head.proj_b))
    return fi, match_idx, match_cos


def align_project(z: Tensor, w_align: Tensor) -> Tensor:
    """Map example-slide features into the text space: linear + normalize."""
    return ad.l2_normalize_rows(ad.matmul_t(z, w_align))
