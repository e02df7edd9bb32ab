"""Bit-exact storage formats, the dataset manifest, and synthetic data.

Two tiny binary containers cover everything the engine consumes:

* PBAG — one slide's bag of patch features plus label/survival metadata.
  Header (28 bytes): magic ``PBAG``, version u32=1, dim u32, n_patches u32,
  label u32, time f32, event u8, 3 pad bytes; payload is n*dim little-endian
  f32, row-major. Total file length is exactly ``28 + 4*n*dim``.
* PEB1 — a flat bank of feature rows (patch examples, static text features).
  Header (20 bytes): magic ``PEB1``, version u32=1, dim u32, count u64;
  payload is count*dim little-endian f32.

Storage is f32; all compute upstream is f64.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PBAG_MAGIC = b"PBAG"
PEB1_MAGIC = b"PEB1"
_PBAG_HEADER = struct.Struct("<4sIIIIfB3x")
_PEB1_HEADER = struct.Struct("<4sIIQ")
SPLITS = ("train-pool", "test")
PROMPT_GROUPS = ("task", "slide", "patch")


class FormatError(ValueError):
    """A binary file failed validation; carries the byte offset of the fault."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class ManifestError(ValueError):
    """The manifest JSON violates its schema or cross-reference invariants."""


@dataclass
class Bag:
    """One slide: n x d patch features plus slide-level metadata."""

    features: np.ndarray
    label: int
    time: float | None = None
    event: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag needs at least one patch row, got shape "
                             f"{self.features.shape}")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_json_atomic(path: Path, obj) -> None:
    _write_atomic(Path(path), (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def write_bag(path, bag: Bag) -> None:
    path = Path(path)
    n, dim = bag.features.shape
    header = _PBAG_HEADER.pack(
        PBAG_MAGIC, 1, dim, n, int(bag.label),
        float(bag.time) if bag.time is not None else 0.0,
        int(bag.event) if bag.event is not None else 0,
    )
    payload = bag.features.astype("<f4").tobytes(order="C")
    _write_atomic(path, header + payload)


def read_bag(path, with_survival: bool = True) -> Bag:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PBAG_HEADER.size:
        raise FormatError(path, len(raw),
                          f"truncated header: {len(raw)} < {_PBAG_HEADER.size} bytes")
    magic, version, dim, n, label, time, event = _PBAG_HEADER.unpack_from(raw, 0)
    if magic != PBAG_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {PBAG_MAGIC!r}")
    if version != 1:
        raise FormatError(path, 4, f"unsupported version {version}")
    if n < 1:
        raise FormatError(path, 12, "empty bag (n_patches = 0)")
    expected = _PBAG_HEADER.size + 4 * n * dim
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected),
                          f"length {len(raw)} != expected {expected} "
                          f"({n} patches x {dim} dims)")
    feats = np.frombuffer(raw, dtype="<f4", offset=_PBAG_HEADER.size)
    feats = feats.reshape(n, dim).astype(np.float64)
    return Bag(feats, label,
               time=float(time) if with_survival else None,
               event=int(event) if with_survival else None)


def write_examples(path, rows: np.ndarray) -> None:
    path = Path(path)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"example bank needs at least one row, got {rows.shape}")
    header = _PEB1_HEADER.pack(PEB1_MAGIC, 1, rows.shape[1], rows.shape[0])
    _write_atomic(path, header + rows.astype("<f4").tobytes(order="C"))


def read_examples(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PEB1_HEADER.size:
        raise FormatError(path, len(raw),
                          f"truncated header: {len(raw)} < {_PEB1_HEADER.size} bytes")
    magic, version, dim, count = _PEB1_HEADER.unpack_from(raw, 0)
    if magic != PEB1_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {PEB1_MAGIC!r}")
    if version != 1:
        raise FormatError(path, 4, f"unsupported version {version}")
    if count < 1:
        raise FormatError(path, 12, "empty bank (count = 0)")
    expected = _PEB1_HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected),
                          f"length {len(raw)} != expected {expected} "
                          f"({count} rows x {dim} dims)")
    rows = np.frombuffer(raw, dtype="<f4", offset=_PEB1_HEADER.size)
    return rows.reshape(count, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _manifest_schema() -> dict:
    ref = resources.files("promptmil").joinpath("schema/manifest.schema.json")
    return json.loads(ref.read_text(encoding="utf-8"))


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int
    split: str
    time: float | None = None
    event: int | None = None


@dataclass
class Manifest:
    """Validated dataset index; all stored paths are relative to `root`."""

    root: Path
    name: str
    dim: int
    classes: list[str]
    entries: list[ManifestEntry]
    patch_bank_file: str
    patch_tags: list[int]
    slide_example_ids: list[str]
    slide_example_files: list[str]
    slide_example_tags: list[int]
    prompts: dict[str, list[str]]
    static_text_files: dict[str, str] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def entry(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise ManifestError(f"unknown entry id {entry_id!r}")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def is_survival(self) -> bool:
        return all(e.time is not None and e.event is not None for e in self.entries)


def load_manifest(path) -> Manifest:
    import jsonschema

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: not valid JSON: {err}") from err
    try:
        jsonschema.validate(doc, _manifest_schema())
    except jsonschema.ValidationError as err:
        raise ManifestError(f"{path}: schema violation at "
                            f"{'/'.join(str(p) for p in err.absolute_path)}: "
                            f"{err.message}") from err

    root = path.parent
    classes = doc["classes"]
    n_classes = len(classes)
    entries = [ManifestEntry(id=e["id"], path=e["path"], label=e["label"],
                             split=e["split"], time=e.get("time"),
                             event=e.get("event"))
               for e in doc["entries"]]

    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate entry ids")
    if not any(e.split == "test" for e in entries):
        raise ManifestError(f"{path}: test split is empty")
    for e in entries:
        if not (0 <= e.label < n_classes):
            raise ManifestError(f"{path}: entry {e.id!r} label {e.label} out of "
                                f"range for {n_classes} classes")

    bank = doc["example_bank"]
    manifest = Manifest(
        root=root, name=doc["name"], dim=doc["dim"], classes=classes,
        entries=entries,
        patch_bank_file=bank["patch_bank"],
        patch_tags=bank["patch_tags"],
        slide_example_ids=bank["slide_ids"],
        slide_example_files=bank["slide_files"],
        slide_example_tags=bank["slide_tags"],
        prompts=doc["prompts"],
        static_text_files=doc.get("static_text", {}),
    )
    for tags, what in ((manifest.patch_tags, "patch_tags"),
                       (manifest.slide_example_tags, "slide_tags")):
        if any(not (0 <= t < n_classes) for t in tags):
            raise ManifestError(f"{path}: {what} out of class range")
        if set(range(n_classes)) - set(tags):
            raise ManifestError(f"{path}: {what} must cover every class")
    if len(manifest.slide_example_ids) != len(manifest.slide_example_files) or \
            len(manifest.slide_example_ids) != len(manifest.slide_example_tags):
        raise ManifestError(f"{path}: slide example ids/files/tags length mismatch")
    for group in PROMPT_GROUPS:
        if len(manifest.prompts[group]) != n_classes:
            raise ManifestError(f"{path}: prompts[{group}] needs one text per class")
        if any(not t.strip() for t in manifest.prompts[group]):
            raise ManifestError(f"{path}: prompts[{group}] contains empty text")

    referenced = ([e.path for e in entries] + [manifest.patch_bank_file]
                  + manifest.slide_example_files
                  + list(manifest.static_text_files.values()))
    for rel in referenced:
        if not (root / rel).exists():
            raise ManifestError(f"{path}: referenced file missing: {rel}")
    test_ids = {e.id for e in entries if e.split == "test"}
    leaked = test_ids & set(manifest.slide_example_ids)
    if leaked:
        raise ManifestError(f"{path}: example slides leak into test split: "
                            f"{sorted(leaked)}")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Planted-pattern bag generator settings.

    Each class owns unit prototypes built as a shared "lesion" direction
    plus a class-specific orthogonal component whose weight is
    ``class_separation``. A bag of class c mixes key patches (noisy class
    prototypes, prevalence ``prevalence[c]``) with background patches shared
    across classes. Keys are therefore easy to tell from background but the
    class identity rides on a weak component, so single-patch evidence is
    ambiguous, aggregation matters, and few-shot discrimination is hard
    without prior knowledge of the class axes.
    """

    n_classes: int = 2
    dim: int = 64
    train_per_class: int = 40
    test_per_class: int = 100
    patch_range: tuple[int, int] = (50, 200)
    prevalence: tuple[float, ...] | float = 0.1
    noise: float = 0.2
    class_separation: float = 0.4
    prototypes_per_class: int = 1
    background_prototypes: int = 8
    patch_examples_per_class: int = 3
    slide_examples_per_class: int = 3
    example_prevalence: float = 0.9
    text_noise: float = 0.02
    censor_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("dim must be >= 4")
        if self.n_classes + 1 > self.dim:
            raise ValueError("dim too small for orthogonal class axes")
        if isinstance(self.prevalence, (int, float)):
            self.prevalence = tuple([float(self.prevalence)] * self.n_classes)
        if len(self.prevalence) != self.n_classes:
            raise ValueError("need one prevalence per class")
        if any(not (0.0 < p <= 1.0) for p in self.prevalence):
            raise ValueError("prevalence must lie in (0, 1]")
        if not (0.0 < self.class_separation <= 1.0):
            raise ValueError("class_separation must lie in (0, 1]")
        if self.patch_range[0] < 1 or self.patch_range[0] > self.patch_range[1]:
            raise ValueError(f"bad patch_range {self.patch_range}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        if "patch_range" in doc:
            doc = dict(doc, patch_range=tuple(doc["patch_range"]))
        if "prevalence" in doc and isinstance(doc["prevalence"], list):
            doc = dict(doc, prevalence=tuple(doc["prevalence"]))
        return cls(**doc)


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _noisy(proto: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return proto.copy()
    return _unit_rows((proto + sigma * rng.standard_normal(proto.shape[-1]))
                      .reshape(1, -1))[0]


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> Path:
    """Write a complete synthetic dataset tree; returns the manifest path.

    Deterministic for a fixed config: rerunning with the same seed produces a
    byte-identical tree. A ``ground_truth.json`` sidecar records which patch
    rows carry the planted class pattern (for interpretability scoring) and
    where the per-class prototype means live (for oracle baselines).
    """
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    u, d = cfg.n_classes, cfg.dim

    # orthonormal frame: column 0 is the shared lesion direction, the next
    # u columns are class-specific axes
    frame, _ = np.linalg.qr(rng.standard_normal((d, u + 1)))
    lesion, axes = frame[:, 0], frame[:, 1:]
    beta = cfg.class_separation
    protos = []
    for c in range(u):
        rows = []
        for _ in range(cfg.prototypes_per_class):
            direction = axes[:, c]
            if cfg.prototypes_per_class > 1:
                direction = direction + 0.3 * rng.standard_normal(d)
                direction = direction / np.linalg.norm(direction)
            rows.append(math.sqrt(1.0 - beta * beta) * lesion + beta * direction)
        protos.append(_unit_rows(np.array(rows)))
    background = _unit_rows(rng.standard_normal((cfg.background_prototypes, d)))
    risks = [1.0 - (c / (u - 1) if u > 1 else 0.0) for c in range(u)]

    def sample_bag(label: int, prevalence: float) -> tuple[Bag, list[int]]:
        n = int(rng.integers(cfg.patch_range[0], cfg.patch_range[1] + 1))
        keys: list[int] = []
        feats = np.empty((n, d))
        for j in range(n):
            if rng.random() < prevalence:
                proto = protos[label][rng.integers(cfg.prototypes_per_class)]
                feats[j] = _noisy(proto, cfg.noise, rng)
                keys.append(j)
            else:
                proto = background[rng.integers(cfg.background_prototypes)]
                feats[j] = _noisy(proto, cfg.noise, rng)
        time = float(np.exp(-risks[label] + 0.25 * rng.standard_normal()))
        event = int(rng.random() >= cfg.censor_rate)
        return Bag(feats, label, time=time, event=event), keys

    entries = []
    key_patches: dict[str, list[int]] = {}
    for label in range(u):
        for i in range(cfg.train_per_class + cfg.test_per_class):
            bag, keys = sample_bag(label, cfg.prevalence[label])
            split = "train-pool" if i < cfg.train_per_class else "test"
            bag_id = f"slide-c{label}-{i:04d}"
            rel = f"bags/{bag_id}.pbag"
            write_bag(out / rel, bag)
            entries.append({"id": bag_id, "path": rel, "label": label,
                            "time": bag.time, "event": bag.event, "split": split})
            key_patches[bag_id] = keys

    bank_rows = []
    patch_tags = []
    for label in range(u):
        for j in range(cfg.patch_examples_per_class):
            proto = protos[label][j % cfg.prototypes_per_class]
            bank_rows.append(_noisy(proto, cfg.noise / 4.0, rng))
            patch_tags.append(label)
    write_examples(out / "patch_bank.peb1", np.array(bank_rows))

    slide_ids, slide_files, slide_tags = [], [], []
    for label in range(u):
        for j in range(cfg.slide_examples_per_class):
            prevalence = max(cfg.prevalence[label], cfg.example_prevalence)
            bag, keys = sample_bag(label, prevalence)
            sid = f"example-c{label}-{j}"
            rel = f"bags/{sid}.pbag"
            write_bag(out / rel, bag)
            slide_ids.append(sid)
            slide_files.append(rel)
            slide_tags.append(label)
            key_patches[sid] = keys

    static_text: dict[str, str] = {}
    for group in PROMPT_GROUPS:
        rows = np.array([
            _noisy(_unit_rows(protos[c].mean(axis=0, keepdims=True))[0],
                   cfg.text_noise, rng)
            for c in range(u)
        ])
        rel = f"text_{group}.peb1"
        write_examples(out / rel, rows)
        static_text[group] = rel

    class_names = [f"class-{c}" for c in range(u)]
    prompts = {
        "task": [f"a whole slide image of pattern family {c}" for c in range(u)],
        "slide": [f"slide level appearance dominated by pattern family {c} "
                  f"regions spread across the tissue" for c in range(u)],
        "patch": [f"patch level texture showing pattern family {c} "
                  f"cell structure" for c in range(u)],
    }
    manifest_doc = {
        "schema_version": 1,
        "name": f"synthetic-u{u}-d{d}-seed{cfg.seed}",
        "dim": d,
        "classes": class_names,
        "entries": entries,
        "example_bank": {
            "patch_bank": "patch_bank.peb1",
            "patch_tags": patch_tags,
            "slide_ids": slide_ids,
            "slide_files": slide_files,
            "slide_tags": slide_tags,
        },
        "prompts": prompts,
        "static_text": static_text,
    }
    write_json_atomic(out / "manifest.json", manifest_doc)

    proto_means = _unit_rows(np.array([protos[c].mean(axis=0) for c in range(u)]))
    write_examples(out / "prototype_means.peb1", proto_means)
    write_json_atomic(out / "ground_truth.json", {
        "key_patches": key_patches,
        "prototype_means": "prototype_means.peb1",
    })
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# K-shot sampling
# ---------------------------------------------------------------------------

def kshot_sample(manifest: Manifest, k: int, seed: int) -> list[str]:
    """Pick exactly k train-pool entry ids per class, uniformly, seeded.

    The training subset is disjoint from the test split by construction
    (only train-pool entries are candidates).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    chosen: list[str] = []
    pool = manifest.split_entries("train-pool")
    for label in range(manifest.n_classes):
        ids = sorted(e.id for e in pool if e.label == label)
        if len(ids) < k:
            raise ValueError(
                f"train pool has {len(ids)} bags for class {label}, need {k}; "
                f"availability: "
                + ", ".join(
                    f"class {c}: {sum(1 for e in pool if e.label == c)}"
                    for c in range(manifest.n_classes)))
        picked = rng.choice(np.array(ids, dtype=object), size=k, replace=False)
        chosen.extend(str(x) for x in picked)
    return chosen
