"""Acceptance gate: one test per criterion, at the stated tolerances.

Each test prints a single PASS line on success so a plain `pytest -s
tests/test_acceptance.py` reads as a checklist.
"""

import json
import math
import time
from dataclasses import replace
import numpy as np
import pytest

from promptmil import autodiff as ad
from promptmil.autodiff import Tensor
from promptmil.dataio import (Bag, SyntheticConfig, generate_synthetic,
                              kshot_sample, load_manifest, read_bag,
                              read_examples, write_bag, write_examples)
from promptmil.harness import (ExperimentConfig, build_model_config,
                               load_run, match_report, run_experiment,
                               run_gradcheck)
from promptmil.losses import SurvivalRecord, total_loss
from promptmil.metrics import auc, c_index
from promptmil.model import Model
from tests.test_metrics import auc_bruteforce, c_index_bruteforce


def report(name: str, detail: str = ""):
    print(f"\nACCEPT PASS {name}" + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------

def test_gradient_integrity():
    """gradcheck over >=20 random configurations (d in {8,16}, n in {3,7},
    U in {2,3}), every trainable group <= 1e-5, under 60 s."""
    t0 = time.perf_counter()
    results = run_gradcheck(trials=20, tol=1e-5, h=1e-5, seed=0)
    elapsed = time.perf_counter() - t0
    dims = {r["dim"] for r in results}
    patches = {r["patches"] for r in results}
    classes = {r["classes"] for r in results}
    assert dims <= {8, 16} and patches <= {3, 7} and classes <= {2, 3}
    worst = max(r["worst"] for r in results)
    for r in results:
        assert r["passed"], r
        assert not r["non_finite"]
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report("gradient-integrity",
           f"20 configs, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_mil_invariance(default_manifest):
    """100 random bags: patch permutation moves F_i by <= 1e-9 and the
    Summary weights sum to 1 +- 1e-12."""
    exp = ExperimentConfig(manifest="unused", out_dir="unused")
    mc, lc = build_model_config(exp, default_manifest)
    model = Model(default_manifest, mc, lc, seed=0)
    z = model.example_slide_features()
    rng = np.random.default_rng(0)
    worst_move = 0.0
    worst_sum = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        bag = rng.standard_normal((n, default_manifest.dim))
        perm = rng.permutation(n)
        out = model.bag_forward(bag, z)
        out_perm = model.bag_forward(bag[perm], z)
        worst_move = max(worst_move,
                         float(np.abs(out.feature.data
                                      - out_perm.feature.data).max()))
        worst_sum = max(worst_sum, abs(out.attention.sum() - 1.0))
    assert worst_move <= 1e-9, worst_move
    assert worst_sum <= 1e-12, worst_sum
    report("mil-invariance",
           f"max |dF_i| {worst_move:.1e}, max |sum(a)-1| {worst_sum:.1e}")


def test_symmetric_init_loss(tmp_path):
    """Equal cosines: L_t = ln U within 1e-9 and total = (1+l1+l2) ln U."""
    cfg = SyntheticConfig(n_classes=2, dim=8, train_per_class=2,
                          test_per_class=2, patch_range=(3, 4), seed=100)
    manifest = load_manifest(generate_synthetic(cfg, tmp_path))
    exp = ExperimentConfig(manifest=str(tmp_path / "manifest.json"),
                           out_dir="unused", summary_hidden=4,
                           lambda1=0.8, lambda2=0.4)
    mc, lc = build_model_config(exp, manifest)
    model = Model(manifest, mc, lc, seed=0)
    # identical class text rows -> every cosine equal across classes
    model.text_backend.groups = {
        g: np.repeat(model.text_backend.groups[g][:1], 2, axis=0)
        for g in model.text_backend.groups}
    ids = kshot_sample(manifest, 1, seed=0)
    bags = [model.source.bag(i).features for i in ids]
    labels = [manifest.entry(i).label for i in ids]
    _, bd = total_loss(model, bags, labels)
    ln2 = math.log(2.0)
    assert bd["l_t"] == pytest.approx(ln2, abs=1e-9)
    assert bd["total"] == pytest.approx((1 + 0.8 + 0.4) * ln2, abs=1e-9)
    assert ln2 == pytest.approx(0.6931471805599453, abs=1e-15)
    report("symmetric-init-loss",
           f"L_t={bd['l_t']:.12f}, total={(bd['total']):.12f}")


def test_metric_oracles():
    """AUC and C-index match O(n^2) brute force exactly on 200 instances."""
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(4, 51))
        labels = rng.integers(0, 2, n)
        while labels.min() == labels.max():
            labels = rng.integers(0, 2, n)
        scores = np.round(rng.standard_normal(n), 1)
        assert auc(scores, labels) == auc_bruteforce(scores.tolist(),
                                                     labels.tolist())
    checked = 0
    while checked < 200:
        n = int(rng.integers(3, 51))
        times = np.round(rng.exponential(1.0, n) + 0.05, 2)
        events = rng.integers(0, 2, n)
        risks = np.round(rng.random(n), 1)
        records = [SurvivalRecord(float(t), int(e))
                   for t, e in zip(times, events)]
        if not any(records[a].time < records[b].time and records[a].event == 1
                   for a in range(n) for b in range(n)):
            continue
        assert c_index(risks, records) == c_index_bruteforce(risks.tolist(),
                                                             records)
        checked += 1
    report("metric-oracles", "200 AUC + 200 C-index instances, exact")


def test_structural_equivalences(tiny_dir):
    """CoOp == PEMP{no examples, lambdas 0} bit-exactly; KgCoOp(mu=0) == CoOp;
    Summary-ablated model == mean pooling exactly."""
    manifest = load_manifest(tiny_dir / "manifest.json")
    base = ExperimentConfig(manifest=str(tiny_dir / "manifest.json"),
                            out_dir="unused", shots=2, seeds=(0,), epochs=1,
                            summary_hidden=8)
    ids = kshot_sample(manifest, 2, seed=0)
    labels = [manifest.entry(i).label for i in ids]

    def loss_of(exp):
        mc, lc = build_model_config(exp, manifest)
        model = Model(manifest, mc, lc, seed=0)
        bags = [model.source.bag(i).features for i in ids]
        _, bd = model.training_loss(bags, labels)
        return bd["total"]

    l_coop = loss_of(replace(base, method="coop"))
    l_flags = loss_of(replace(base, variant="wo_vt_examples"))
    l_kg0 = loss_of(replace(base, method="kgcoop", kg_mu=0.0))
    assert l_coop == l_flags  # bit-exact
    assert l_kg0 == l_coop    # bit-exact

    exp = replace(base, variant="wo_summary")
    mc, lc = build_model_config(exp, manifest)
    model = Model(manifest, mc, lc, seed=0)
    from promptmil.layers import match_patch_examples, messenger_forward
    bag = model.source.bag(ids[0]).features
    fs, _, _, _ = model.summary_feature(bag)
    _, _, aug = match_patch_examples(bag, model.bank)
    fml = messenger_forward(Tensor(aug), model._messenger())
    assert np.array_equal(fs.data[0], fml.data.mean(axis=0))
    report("structural-equivalences",
           f"coop==flags=={l_coop:.12f}, kg0 equal, mean-pool exact")


def test_few_shot_knowledge_gain(knowledge_gain):
    """4-shot PEMP beats LinearProbe by >= 0.05 and the no-examples ablation
    by >= 0.03 in mean AUC over seeds 0..4; whole experiment <= 5 min."""
    runs = knowledge_gain["runs"]
    pemp = runs["pemp"].aggregate["auc"]["mean"]
    lp = runs["linearprobe"].aggregate["auc"]["mean"]
    ablated = runs["wo_vt_examples"].aggregate["auc"]["mean"]
    assert pemp - lp >= 0.05, (pemp, lp)
    assert pemp - ablated >= 0.03, (pemp, ablated)
    assert knowledge_gain["elapsed"] <= 300.0
    report("few-shot-knowledge-gain",
           f"pemp {pemp:.3f} vs lp {lp:.3f} vs no-examples {ablated:.3f}, "
           f"{knowledge_gain['elapsed']:.0f}s")


def test_determinism_and_formats(tiny_dir, tmp_path):
    """Same config+seed => identical deterministic run payloads; PBAG/PEB1
    round trips bit-exact; frozen digests unchanged by training."""
    exp = ExperimentConfig(manifest=str(tiny_dir / "manifest.json"),
                           out_dir="unused", shots=2, seeds=(0,), epochs=4,
                           summary_hidden=8)
    run_a = run_experiment(exp, run_dir=tmp_path / "a")
    run_b = run_experiment(exp, run_dir=tmp_path / "b")
    assert run_a.digest() == run_b.digest()

    rng = np.random.default_rng(8)
    feats32 = rng.standard_normal((23, 16)).astype(np.float32).astype(np.float64)
    write_bag(tmp_path / "t.pbag", Bag(feats32, label=1, time=1.5, event=0))
    assert np.array_equal(read_bag(tmp_path / "t.pbag").features, feats32)
    rows32 = rng.standard_normal((6, 16)).astype(np.float32).astype(np.float64)
    write_examples(tmp_path / "t.peb1", rows32)
    assert np.array_equal(read_examples(tmp_path / "t.peb1"), rows32)

    manifest = load_manifest(tiny_dir / "manifest.json")
    mc, lc = build_model_config(exp, manifest)
    fresh = Model(manifest, mc, lc, seed=0)
    assert run_a.per_seed[0].frozen_digest == fresh.frozen_digest()
    report("determinism-and-formats",
           f"run digest {run_a.digest()[:12]}..., round trips bit-exact")


def test_interpretability(knowledge_gain, ground_truth):
    """Top-attention patch is a planted key patch in >= 80% of test bags,
    mean over the 5 trained seeds."""
    manifest = load_manifest(knowledge_gain["manifest_dir"] / "manifest.json")
    keys = ground_truth["key_patches"]
    run_dir = knowledge_gain["out"] / "pemp-k4"
    rates = []
    for seed in range(5):
        model, _, _ = load_run(run_dir, seed)
        rows = match_report(model, manifest, top_k=1)
        hit = sum(1 for r in rows
                  if r["top_patches"][0]["patch_index"] in keys[r["id"]])
        rates.append(hit / len(rows))
    mean_rate = float(np.mean(rates))
    assert mean_rate >= 0.80, rates
    report("interpretability",
           f"top-attention key-patch rate {mean_rate:.3f} "
           f"(per seed {[f'{r:.2f}' for r in rates]})")
