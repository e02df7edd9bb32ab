"""Experiment orchestration: few-shot training, evaluation, baselines.

A run directory holds everything one experiment produced: the resolved
config snapshot, per-seed checkpoints, loss curves and a result JSON whose
deterministic payload (everything except wall-clock) is digest-stable for a
fixed config and seed. Files are written atomically.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from hashlib import sha256
from pathlib import Path

import numpy as np


@contextmanager
def _single_thread_blas():
    """Pin BLAS to one thread for the duration.

    The model's matrices are small enough that OpenBLAS threading costs more
    in synchronization than it buys, and single-threaded workers are what
    lets independent runs scale across cores.
    """
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(1, user_api="blas"):
        yield

from . import autodiff as ad
from .autodiff import AdamState, adam_step, backward, grad_check
from .dataio import (Manifest, SyntheticConfig, generate_synthetic,
                     kshot_sample, load_manifest, write_json_atomic)
from .losses import LossConfig
from .metrics import auc, c_index, macro_ovr_auc
from .losses import SurvivalRecord
from .model import ConfigError, Model, ModelConfig

METHODS = ("pemp", "linearprobe", "vpt", "coop", "kgcoop")

# Eight ablation variants plus the full model; each entry is the set of
# structural switches it flips relative to full PEMP.
VARIANTS: dict[str, dict] = {
    "pemp": {},
    "wo_vt_examples": {"use_patch_examples": False, "use_slide_examples": False,
                       "use_text_examples": False, "zero_lambdas": True},
    "vision_only": {"head": "vision"},
    "wo_vision_examples": {"use_patch_examples": False,
                           "use_slide_examples": False},
    "wo_text_examples": {"use_text_examples": False},
    "wo_summary": {"use_summary": False},
    "wo_messenger": {"use_messenger": False},
    "wo_slide_prompt": {"use_slide_prompt": False},
    "wo_example_ac_loss": {"use_example_loss": False},
}


class NumericsError(RuntimeError):
    """Training hit a non-finite loss; carries the last-good checkpoint path."""

    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message)


@dataclass
class ExperimentConfig:
    manifest: str
    out_dir: str = "runs"
    method: str = "pemp"
    variant: str = "pemp"
    shots: int = 4
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau_init: float = 0.07
    symmetric_loss: bool = False
    kg_mu: float = 1.0
    summary_hidden: int = 128
    prompt_dim: int | None = None
    ctx_len: tuple[int, int, int] = (8, 8, 8)
    match_top_k: int = 1
    text_backend: str = "static"
    encoder_seed: int = 7
    ablation_shots: tuple[int, ...] = (2, 4)
    jobs: int = 0   # parallel jobs for the ablation matrix; 0 = one per core

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {METHODS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: "
                              f"{tuple(VARIANTS)}")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ctx_len = tuple(self.ctx_len)  # type: ignore[assignment]
        self.ablation_shots = tuple(self.ablation_shots)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if "experiment" in doc:
            doc = doc["experiment"]
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if "manifest" not in doc:
            raise ConfigError("experiment config needs a manifest path")
        cfg = cls(**doc)
        # paths are relative to the config file
        cfg.manifest = str((path.parent / cfg.manifest).resolve())
        cfg.out_dir = str((path.parent / cfg.out_dir).resolve())
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def build_model_config(exp: ExperimentConfig, manifest: Manifest,
                       ) -> tuple[ModelConfig, LossConfig]:
    """Translate method + variant into the structural model config."""
    base = dict(dim=manifest.dim, n_classes=manifest.n_classes,
                summary_hidden=exp.summary_hidden, prompt_dim=exp.prompt_dim,
                ctx_len=exp.ctx_len, match_top_k=exp.match_top_k,
                text_backend=exp.text_backend, encoder_seed=exp.encoder_seed)
    lam1, lam2 = exp.lambda1, exp.lambda2

    if exp.method == "linearprobe":
        base["head"] = "linear"
    elif exp.method == "vpt":
        base["head"] = "vpt"
    elif exp.method in ("coop", "kgcoop"):
        base.update(use_patch_examples=False, use_slide_examples=False,
                    use_text_examples=False)
        lam1 = lam2 = 0.0
        if exp.method == "kgcoop":
            base["kg_mu"] = exp.kg_mu
    else:  # pemp family, possibly ablated
        flags = dict(VARIANTS[exp.variant])
        if flags.pop("zero_lambdas", False):
            lam1 = lam2 = 0.0
        base.update(flags)

    mc = ModelConfig(**base)
    lc = LossConfig(lambda1=lam1, lambda2=lam2, tau_init=exp.tau_init,
                    symmetric=exp.symmetric_loss)
    return mc, lc


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    train_ids: list[str]
    metrics: dict[str, float]
    curve: list[dict[str, float]]
    params_digest: str
    frozen_digest: str
    best_epoch: int
    wall_clock: float

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class RunResult:
    method: str
    variant: str
    shots: int
    per_seed: list[SeedResult]
    aggregate: dict[str, dict[str, float]]
    wall_clock: float

    def deterministic(self) -> dict:
        return {"method": self.method, "variant": self.variant,
                "shots": self.shots,
                "per_seed": [s.deterministic() for s in self.per_seed],
                "aggregate": self.aggregate}

    def digest(self) -> str:
        blob = json.dumps(self.deterministic(), sort_keys=True)
        return sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        d = self.deterministic()
        d["digest"] = self.digest()
        d["wall_clock"] = self.wall_clock
        d["per_seed"] = [dict(s.deterministic(), wall_clock=s.wall_clock)
                         for s in self.per_seed]
        return d


def train_one_seed(manifest: Manifest, mc: ModelConfig, lc: LossConfig,
                   exp: ExperimentConfig, seed: int,
                   checkpoint_dir: Path | None = None) -> tuple[Model, SeedResult]:
    """Full-batch Adam over the K-shot set; best-loss parameter selection."""
    t0 = time.perf_counter()
    train_ids = kshot_sample(manifest, exp.shots, seed)
    test_ids = {e.id for e in manifest.split_entries("test")}
    overlap = test_ids & set(train_ids)
    if overlap:
        raise ConfigError(f"K-shot set leaks into test split: {sorted(overlap)}")

    model = Model(manifest, mc, lc, seed=seed)
    frozen_before = model.frozen_digest()
    bags = [model.source.bag(i).features for i in train_ids]
    labels = [manifest.entry(i).label for i in train_ids]

    adam = AdamState(lr=exp.lr, beta1=exp.beta1, beta2=exp.beta2,
                     eps=exp.adam_eps)
    curve: list[dict[str, float]] = []
    best_loss = math.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    last_good: dict[str, np.ndarray] = {n: t.data.copy()
                                        for n, t in model.params.items()}

    def abort(epoch: int, detail: str) -> NumericsError:
        ckpt = None
        if checkpoint_dir is not None:
            ckpt_path = checkpoint_dir / f"last_good_seed{seed}.npz"
            np.savez(ckpt_path, **last_good)
            ckpt = str(ckpt_path)
        return NumericsError(
            f"non-finite loss at epoch {epoch} (seed {seed}): {detail}; "
            f"last-good checkpoint: {ckpt}", checkpoint=ckpt)

    for epoch in range(exp.epochs):
        try:
            root, bd = model.training_loss(bags, labels)
        except ad.NonFiniteError as err:
            raise abort(epoch, str(err)) from err
        if not math.isfinite(bd["total"]):
            raise abort(epoch, str(bd))
        curve.append({"epoch": epoch, **bd})
        if bd["total"] < best_loss:
            best_loss = bd["total"]
            best_epoch = epoch
            best_params = {n: t.data.copy() for n, t in model.params.items()}
        last_good = {n: t.data.copy() for n, t in model.params.items()}
        grad_map = backward(root)
        grads = {name: grad_map.get(t) for name, t in model.params.items()}
        adam_step(model.params, {n: g for n, g in grads.items() if g is not None},
                  adam)
        model.clamp()

    for name, data in best_params.items():
        model.params[name].data = data

    frozen_after = model.frozen_digest()
    if frozen_after != frozen_before:
        raise NumericsError(f"frozen components changed during training "
                            f"(seed {seed}): {frozen_before} -> {frozen_after}")

    metrics = evaluate(model, manifest, "test")
    result = SeedResult(seed=seed, train_ids=list(train_ids), metrics=metrics,
                        curve=curve, params_digest=model.params_digest(),
                        frozen_digest=frozen_after, best_epoch=best_epoch,
                        wall_clock=time.perf_counter() - t0)
    return model, result


def evaluate(model: Model, manifest: Manifest, split: str) -> dict[str, float]:
    """Metrics over one split: AUC for binary, C-index when survival data
    is present, macro one-vs-rest AUC for three or more classes."""
    entries = manifest.split_entries(split)
    if not entries:
        raise ConfigError(f"split {split!r} is empty")
    labels = [e.label for e in entries]
    if len(set(labels)) < 2:
        raise ConfigError(f"split {split!r} contains a single class; "
                          f"metrics are undefined")
    snap = model.snapshot()
    probs = np.stack([model.predict_bag(model.source.bag(e.id).features, snap)[0]
                      for e in entries])
    out: dict[str, float] = {}
    if manifest.n_classes == 2:
        out["auc"] = auc(probs[:, 1], [int(l == 1) for l in labels])
    else:
        out["macro_auc"] = macro_ovr_auc(probs, labels)
    if manifest.is_survival:
        records = [SurvivalRecord(e.time, e.event) for e in entries]
        # class 0 is the poor-prognosis class; its probability is the risk
        out["c_index"] = c_index(probs[:, 0], records)
    return out


def aggregate_metrics(per_seed: list[SeedResult]) -> dict[str, dict[str, float]]:
    keys = sorted({k for s in per_seed for k in s.metrics})
    agg = {}
    for k in keys:
        vals = np.array([s.metrics[k] for s in per_seed])
        agg[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return agg


def run_experiment(exp: ExperimentConfig, run_dir: Path | None = None) -> RunResult:
    """Train/evaluate over every seed and persist the run directory."""
    t0 = time.perf_counter()
    manifest = load_manifest(exp.manifest)
    mc, lc = build_model_config(exp, manifest)
    label = exp.method if exp.method != "pemp" else exp.variant
    if run_dir is None:
        run_dir = Path(exp.out_dir) / f"{label}-k{exp.shots}"
    run_dir.mkdir(parents=True, exist_ok=True)

    per_seed = []
    with _single_thread_blas():
        for seed in exp.seeds:
            model, result = train_one_seed(manifest, mc, lc, exp, seed,
                                           checkpoint_dir=run_dir)
            model.save_params(run_dir / f"params_seed{seed}.npz")
            per_seed.append(result)

    run = RunResult(method=exp.method, variant=exp.variant, shots=exp.shots,
                    per_seed=per_seed,
                    aggregate=aggregate_metrics(per_seed),
                    wall_clock=time.perf_counter() - t0)
    write_json_atomic(run_dir / "config.json", exp.to_dict())
    write_json_atomic(run_dir / "result.json", run.to_dict())
    _write_curves_csv(run_dir / "loss_curve.csv", per_seed)
    return run


def _write_curves_csv(path: Path, per_seed: list[SeedResult]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["seed", "epoch", "total", "l_t", "l_s", "l_p", "kg"])
    for s in per_seed:
        for row in s.curve:
            writer.writerow([s.seed, row["epoch"], row["total"], row["l_t"],
                             row["l_s"], row["l_p"], row["kg"]])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    tmp.replace(path)


def run_baseline(name: str, exp: ExperimentConfig) -> RunResult:
    if name not in METHODS:
        raise ConfigError(f"unknown baseline {name!r}; valid names: "
                          f"{', '.join(METHODS)}")
    return run_experiment(replace(exp, method=name, variant="pemp"))


def run_ablation_matrix(exp: ExperimentConfig) -> dict[str, dict[int, dict[str, float]]]:
    """All eight variants (plus full PEMP) across the configured shot counts.

    Returns {variant: {shots: aggregate metrics}} and writes a CSV table
    shaped rows=variants, columns=shot counts. Cells are independent jobs
    (each internally single-worker and deterministic) and run in parallel
    across `exp.jobs` processes.
    """
    cells = [(variant, shots) for variant in VARIANTS
             for shots in exp.ablation_shots]
    configs = [replace(exp, method="pemp", variant=variant, shots=shots)
               for variant, shots in cells]
    jobs = exp.jobs if exp.jobs > 0 else (os.cpu_count() or 1)
    jobs = min(jobs, len(configs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_experiment, configs))
    else:
        runs = [run_experiment(cfg) for cfg in configs]

    table: dict[str, dict[int, dict[str, float]]] = {v: {} for v in VARIANTS}
    for (variant, shots), run in zip(cells, runs):
        table[variant][shots] = {k: v["mean"] for k, v in run.aggregate.items()}
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_keys = sorted({k for per in table.values()
                          for m in per.values() for k in m})
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant"] + [f"{k}@{s}-shot" for s in exp.ablation_shots
                                   for k in metric_keys])
    for variant, per in table.items():
        row = [variant]
        for shots in exp.ablation_shots:
            for k in metric_keys:
                row.append(f"{per[shots].get(k, float('nan')):.4f}")
        writer.writerow(row)
    tmp = out / "ablation_table.csv.tmp"
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    tmp.replace(out / "ablation_table.csv")
    write_json_atomic(out / "ablation_table.json", {
        v: {str(s): m for s, m in per.items()} for v, per in table.items()})
    return table


# ---------------------------------------------------------------------------
# Match / retrieval report
# ---------------------------------------------------------------------------

def match_report(model: Model, manifest: Manifest, top_k: int = 5) -> list[dict]:
    """Per test bag: the matched slide example and the top-attention patches
    with their matched patch examples, for retrieval-style analysis."""
    snap = model.snapshot()
    rows = []
    for entry in manifest.split_entries("test"):
        feats = model.source.bag(entry.id).features
        probs, fwd = model.predict_bag(feats, snap)
        order = np.argsort(-fwd.attention, kind="stable")[:top_k]
        patches = []
        for j in order:
            patches.append({
                "patch_index": int(j),
                "attention": float(fwd.attention[j]),
                "matched_example": (int(fwd.patch_match[j])
                                    if fwd.patch_match is not None else None),
                "cosine": (float(fwd.patch_cos[j])
                           if fwd.patch_cos is not None else None),
            })
        slide_match_id = None
        if fwd.slide_match is not None and model.bank is not None:
            slide_match_id = model.bank.slide_ids[fwd.slide_match]
        rows.append({
            "id": entry.id,
            "label": entry.label,
            "predicted": int(np.argmax(probs)),
            "probs": [float(p) for p in probs],
            "slide_match": slide_match_id,
            "slide_cosine": fwd.slide_cos,
            "top_patches": patches,
        })
    return rows


def write_match_report(rows: list[dict], out_dir: Path, tag: str = "") -> None:
    suffix = f"_{tag}" if tag else ""
    write_json_atomic(out_dir / f"match_report{suffix}.json", rows)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "label", "predicted", "slide_match", "slide_cosine",
                     "rank", "patch_index", "attention", "matched_example",
                     "cosine"])
    for row in rows:
        for rank, patch in enumerate(row["top_patches"]):
            writer.writerow([row["id"], row["label"], row["predicted"],
                             row["slide_match"], row["slide_cosine"], rank,
                             patch["patch_index"], patch["attention"],
                             patch["matched_example"], patch["cosine"]])
    tmp = out_dir / f"match_report{suffix}.csv.tmp"
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    tmp.replace(out_dir / f"match_report{suffix}.csv")


def load_run(run_dir, seed: int) -> tuple[Model, ExperimentConfig, Manifest]:
    """Rebuild the model of one seed from a run directory."""
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    known = set(ExperimentConfig.__dataclass_fields__)
    exp = ExperimentConfig(**{k: v for k, v in doc.items() if k in known})
    manifest = load_manifest(exp.manifest)
    mc, lc = build_model_config(exp, manifest)
    model = Model(manifest, mc, lc, seed=seed)
    params = run_dir / f"params_seed{seed}.npz"
    if not params.exists():
        raise ConfigError(f"no checkpoint for seed {seed} under {run_dir}")
    model.load_params(params)
    return model, exp, manifest


# ---------------------------------------------------------------------------
# Gradient-check harness
# ---------------------------------------------------------------------------

def run_gradcheck(trials: int = 20, tol: float = 1e-5, h: float = 1e-5,
                  seed: int = 0) -> list[dict]:
    """Random small configurations, full-coordinate central differences.

    Alternates the static and toy text backends so every trainable group
    (messenger, summary, slide prompt, projectors, contexts or residuals,
    log tau) gets audited.
    """
    rng = np.random.default_rng(seed)
    results = []
    with _single_thread_blas():
        for trial in range(trials):
            d = int(rng.choice([8, 16]))
            n = int(rng.choice([3, 7]))
            u = int(rng.choice([2, 3]))
            backend = "static" if trial % 2 == 0 else "toy"
            with tempfile.TemporaryDirectory(prefix="gradcheck-") as tmp:
                syn = SyntheticConfig(
                    n_classes=u, dim=d, train_per_class=2, test_per_class=1,
                    patch_range=(n, n), prototypes_per_class=2,
                    patch_examples_per_class=1, slide_examples_per_class=1,
                    seed=int(rng.integers(1 << 31)))
                manifest = load_manifest(generate_synthetic(syn, tmp))
                mc = ModelConfig(dim=d, n_classes=u, summary_hidden=8,
                                 ctx_len=(2, 2, 2), text_backend=backend)
                model = Model(manifest, mc, LossConfig(),
                              seed=int(rng.integers(1 << 31)))
                ids = kshot_sample(manifest, 1, seed=trial)
                bags = [model.source.bag(i).features for i in ids]
                labels = [manifest.entry(i).label for i in ids]
                root, _ = model.training_loss(bags, labels)
                report = grad_check(root, h=h, tol=tol)
            results.append({"trial": trial, "dim": d, "patches": n,
                            "classes": u, "backend": backend,
                            "worst": report.worst, "passed": report.passed,
                            "per_group": dict(report.max_rel_err),
                            "non_finite": list(report.non_finite)})
    return results
