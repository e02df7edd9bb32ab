"""Frozen feature producers: precomputed image features and text backends.

The image side is always precomputed (bags of patch features read from
PBAG files). The text side has two interchangeable backends:

* ``ToyTextEncoder`` — a tiny frozen transformer block with deterministic,
  seed-derived weights. It exists so gradients can flow through a frozen
  encoder into learnable prefix vectors without shipping a pretrained model.
* ``StaticTextFeatures`` — fixed per-class feature rows (e.g. exported from
  a real encoder); a learnable residual stands in for in-encoder contexts.

Nothing in this module ever receives a gradient update: encoder weights and
token tables are plain constants in the graph.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .dataio import Bag, FormatError, Manifest, read_bag, read_examples


class EncodingError(ValueError):
    pass


class ToyTextEncoder:
    """One frozen self-attention block + tanh feed-forward + output map.

    All weights come from a counter-based stream of the seed, scaled by
    1/sqrt(dim), so construction is reproducible bit-for-bit. Token lookup
    hashes whitespace tokens with 64-bit FNV-1a modulo the table size.
    """

    V_TAB = 4096

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        s = 1.0 / math.sqrt(dim)

        def draw(tag: str, rows: int) -> np.ndarray:
            child = rng.derive_seed(seed, f"toy-text/{tag}")
            return rng.normals(child, rows * dim).reshape(rows, dim) * s

        self.wq = draw("wq", dim)
        self.wk = draw("wk", dim)
        self.wv = draw("wv", dim)
        self.wf = draw("wf", dim)
        self.wo = draw("wo", dim)
        self.table = draw("table", self.V_TAB)

    def weight_digest(self) -> str:
        """SHA-256 over the serialized weights; constant for a given seed."""
        h = hashlib.sha256()
        for name in ("wq", "wk", "wv", "wf", "wo", "table"):
            h.update(name.encode())
            h.update(getattr(self, name).tobytes(order="C"))
        return h.hexdigest()


def embed_tokens(text: str, encoder: ToyTextEncoder) -> np.ndarray:
    """Hash whitespace tokens into frozen table rows; returns (k x dim)."""
    tokens = text.split()
    if not tokens:
        raise EncodingError(f"empty text {text!r}")
    idx = [rng.fnv1a64(t.encode("utf-8")) % encoder.V_TAB for t in tokens]
    return encoder.table[idx].copy()


def encode_text(prefix: ad.Tensor | None, tokens: np.ndarray,
                encoder: ToyTextEncoder) -> ad.Tensor:
    """Run [prefix; tokens] through the frozen block; returns a unit 1 x dim feature.

    The prefix rows are the only graph inputs that can require grad; the
    block weights are constants, so no gradient ever reaches the encoder.
    Pooling is a position mean, making the output invariant to permuting
    the sequence rows.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    parts: list[ad.Tensor] = []
    if prefix is not None and prefix.shape[0] > 0:
        if prefix.shape[1] != encoder.dim:
            raise EncodingError(f"prefix dim {prefix.shape[1]} != encoder dim "
                                f"{encoder.dim}")
        parts.append(prefix)
    if tokens.size:
        if tokens.shape[1] != encoder.dim:
            raise EncodingError(f"token dim {tokens.shape[1]} != encoder dim "
                                f"{encoder.dim}")
        parts.append(ad.Tensor(tokens))
    if not parts:
        raise EncodingError("need at least one prefix or token row")
    x = parts[0] if len(parts) == 1 else ad.concat_rows(parts)

    def lin(w: np.ndarray) -> ad.Tensor:
        return ad.matmul(x, ad.Tensor(w.T))

    q, k, v = lin(encoder.wq), lin(encoder.wk), lin(encoder.wv)
    attn = ad.row_softmax(ad.matmul_t(q, k,
                                      scale_by=1.0 / math.sqrt(encoder.dim)))
    mixed = ad.matmul(attn, v)
    hidden = ad.tanh(ad.matmul(mixed, ad.Tensor(encoder.wf.T)))
    pooled = ad.mean_rows(hidden)
    return ad.l2_normalize_rows(ad.matmul(pooled, ad.Tensor(encoder.wo.T)))


def encode_text_static(base: np.ndarray, delta: ad.Tensor) -> ad.Tensor:
    """l2-normalize(base + delta); the residual is the learnable part."""
    base = np.asarray(base, dtype=np.float64).reshape(1, -1)
    if base.shape != delta.shape:
        raise EncodingError(f"static base shape {base.shape} != delta shape "
                            f"{delta.shape}")
    return ad.l2_normalize_rows(ad.add(ad.Tensor(base), delta))


@dataclass
class StaticTextFeatures:
    """Fixed per-class feature rows for each prompt group, unit rows."""

    groups: dict[str, np.ndarray]

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "StaticTextFeatures":
        if not manifest.static_text_files:
            raise EncodingError(
                f"manifest {manifest.name!r} ships no static text features; "
                f"use the toy text backend instead")
        groups = {}
        for group, rel in manifest.static_text_files.items():
            rows = read_examples(manifest.resolve(rel))
            if rows.shape != (manifest.n_classes, manifest.dim):
                raise EncodingError(
                    f"static text {rel}: shape {rows.shape} != "
                    f"({manifest.n_classes}, {manifest.dim})")
            groups[group] = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(groups)

    def digest(self) -> str:
        h = hashlib.sha256()
        for group in sorted(self.groups):
            h.update(group.encode())
            h.update(self.groups[group].tobytes(order="C"))
        return h.hexdigest()


def load_patch_features(path, expected_dim: int | None = None) -> Bag:
    """Read one PBAG bag, optionally enforcing the manifest's dimension."""
    bag = read_bag(path)
    if expected_dim is not None and bag.dim != expected_dim:
        raise FormatError(path, 8,
                          f"bag dim {bag.dim} != manifest dim {expected_dim}")
    return bag


@dataclass
class ImageFeatureSource:
    """slide-id -> Bag lookup over a manifest, with in-memory caching."""

    manifest: Manifest
    _cache: dict[str, Bag] = field(default_factory=dict)

    def bag(self, entry_id: str) -> Bag:
        if entry_id not in self._cache:
            if entry_id in self.manifest.slide_example_ids:
                i = self.manifest.slide_example_ids.index(entry_id)
                rel = self.manifest.slide_example_files[i]
            else:
                rel = self.manifest.entry(entry_id).path
            self._cache[entry_id] = load_patch_features(
                self.manifest.resolve(rel), expected_dim=self.manifest.dim)
        return self._cache[entry_id]
