"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. The heavyweight fixtures (synthetic training, the acquisition
comparison) are module-scoped and shared.
"""

import math
import time

import numpy as np
import pytest

from probe import nn
from probe.active_learning import (HIGH_ERROR_CLUSTER, planted_al_config,
                                   run_cycles)
from probe.cli import main as cli_main
from probe.data import (ClusterSpec, SynthSpec, assign_labels, collate,
                        make_batches, read_container, split_train_val,
                        synth_generate, write_container)
from probe.evaluation import (EnsembleInput, calibration, confusion_metrics,
                              ensemble_baseline, selective_curve, spearman_rho)
from probe.model import ProbeConfig, ProbeModel, atom_importance, init_model
from probe.training import TrainConfig, fit, load_checkpoint, probe_loss, save_checkpoint
from conftest import TINY_CONFIG, random_record

from test_evaluation import oracle_confusion, oracle_ece_brier


def check(criterion: int, description: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {criterion:2d}] {status}: {description}{suffix}")
    assert passed, f"criterion {criterion} failed: {description}{suffix}"


# ---------------------------------------------------------------------------
# shared fixtures


SYNTH_SPEC = SynthSpec(
    n_molecules=5000, embed_dim=8,
    clusters=[ClusterSpec(0.0, 0.5, 0.5, 0.1, 0.5),
              ClusterSpec(0.4, 0.5, 5.0, 0.5, 0.5)],  # overlapping embeddings
    size_range=(3, 20))


@pytest.fixture(scope="module")
def synthetic_run():
    """Criterion-3 training run; reused for the selective-shape criterion."""
    records = synth_generate(SYNTH_SPEC, seed=11)
    dataset = assign_labels(records, p=50.0)
    train_set, val_set = split_train_val(dataset, 0.9, seed=11)
    cfg = ProbeConfig(input_dim=8, encoder_widths=(32, 16, 16), heads=4,
                      head_dim=4, embedding_dim=16, classifier_widths=(16, 8))
    model = ProbeModel(cfg, seed=11)
    tc = TrainConfig(lr=1e-3, max_epochs=50, batch_size=256, seed=11)
    start = time.monotonic()
    model, state, ckpt = fit(model, train_set, val_set, tc)
    elapsed = time.monotonic() - start

    held = synth_generate(SYNTH_SPEC, seed=99)[:1500]
    errors = np.array([abs(r.e_pred - r.e_ref) for r in held])
    labels = (errors >= dataset.boundary).astype(int)
    probs = np.concatenate([model.eval().forward(b).probs
                            for b in make_batches(held, 256)])
    accuracy = float(((probs[:, 1] >= 0.5).astype(int) == labels).mean())
    return {"model": model, "state": state, "elapsed": elapsed,
            "accuracy": accuracy, "probs": probs, "labels": labels,
            "errors": errors}


@pytest.fixture(scope="module")
def al_comparison():
    """Criterion-10 run: planted task, 3 seeds, probe vs random."""
    start = time.monotonic()
    out = {"probe": [], "random": []}
    fracs = []
    for seed in (0, 1, 2):
        for strategy in ("probe", "random"):
            results = run_cycles(planted_al_config(strategy, seed=seed))
            out[strategy].append(results)
            if strategy == "probe":
                c1 = results[1]
                frac = (c1.per_cluster_counts.get(HIGH_ERROR_CLUSTER, 0)
                        / len(c1.acquired_mol_ids))
                fracs.append(frac)
    return {"results": out, "fracs": fracs,
            "elapsed": time.monotonic() - start}


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(42)
    records = [random_record(rng, mol_id=i, n_atoms=n)
               for i, n in enumerate([2, 5, 3])]
    batch = collate(records)
    labels = np.array([0, 1, 0])
    model = ProbeModel(ProbeConfig(**TINY_CONFIG), seed=7).eval()

    def closure():
        model.zero_grad()
        out = model.forward(batch)
        loss, grad = probe_loss(out.logits, labels, batch.n_atoms, (1.0, 1.0))
        model.backward(grad)
        return loss

    start = time.monotonic()
    report = nn.finite_difference_check(closure, model.parameters(), h=1e-5)
    elapsed = time.monotonic() - start
    check(1, "full-model gradients match finite differences",
          report.max_rel_err < 1e-4 and elapsed < 60.0,
          f"max rel err {report.max_rel_err:.2e} over "
          f"{len(report.per_param)} parameters in {elapsed:.1f}s")


def test_criterion_2_parameter_count():
    model = init_model(ProbeConfig(), seed=0)
    count = model.num_parameters()
    check(2, "default configuration has exactly 566,178 parameters",
          count == 566178 and abs(count - 567000) / 567000 < 0.002,
          f"count {count}")


def test_criterion_3_synthetic_end_to_end(synthetic_run):
    check(3, "synthetic 2-cluster task reaches held-out accuracy >= 0.95 "
             "within 50 epochs",
          synthetic_run["accuracy"] >= 0.95
          and synthetic_run["state"].epoch <= 50
          and synthetic_run["elapsed"] < 300.0,
          f"accuracy {synthetic_run['accuracy']:.3f} after "
          f"{synthetic_run['state'].epoch} epochs in {synthetic_run['elapsed']:.0f}s")


def _monotone_with_tolerance(values, direction, rel_tol=0.05, noise_tol=1e-3):
    """At most one adjacent inversion, and it must be <= rel_tol relative.

    Relative steps below noise_tol count as equal (flat curve segments are
    monotone within sampling noise).
    """
    vals = [v for v in values if v is not None]
    inversions = []
    for a, b in zip(vals, vals[1:]):
        bad = (b > a) if direction == "decreasing" else (b < a)
        rel = abs(b - a) / max(abs(a), 1e-300)
        if bad and rel > noise_tol:
            inversions.append(rel)
    if len(inversions) > 1:
        return False
    return all(v <= rel_tol for v in inversions)


def test_criterion_4_selective_prediction_shape(synthetic_run):
    cutoffs = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
    points = selective_curve(synthetic_run["probs"], synthetic_run["labels"],
                             synthetic_run["errors"], cutoffs)
    coverage = [p.coverage for p in points]
    e_rel = [p.mean_err_reliable for p in points]
    e_unrel = [p.mean_err_unreliable for p in points]
    ok = (points[0].coverage == 1.0
          and all(a >= b for a, b in zip(coverage, coverage[1:]))
          and _monotone_with_tolerance(e_rel, "decreasing")
          and _monotone_with_tolerance(e_unrel, "increasing"))
    check(4, "coverage(0.5)=1, coverage non-increasing, mean errors monotone",
          ok, f"coverage {coverage[0]:.2f}->{coverage[-1]:.2f}, "
              f"e_rel {e_rel[0]:.2f}->{e_rel[-1]:.2f}, "
              f"e_unrel {e_unrel[0]:.2f}->{e_unrel[-1]:.2f}")


def test_hc_accuracy_monotone_within_sampling_noise(synthetic_run):
    """Module invariant (not a numbered criterion): high-confidence accuracy
    is non-decreasing in the cutoff over subsets of >= 500 samples."""
    points = selective_curve(synthetic_run["probs"], synthetic_run["labels"],
                             synthetic_run["errors"],
                             [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
    kept = [p for p in points if p.n_covered >= 500]
    assert len(kept) >= 2
    for a, b in zip(kept, kept[1:]):
        noise = math.sqrt(max(a.accuracy * (1 - a.accuracy), 1e-12) / b.n_covered)
        assert b.accuracy >= a.accuracy - noise


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        p1 = rng.random(n)
        probs = np.stack([1 - p1, p1], axis=1)
        labels = rng.integers(0, 2, size=n)
        errors = rng.random(n) * 10
        preds = probs.argmax(axis=1)

        m = confusion_metrics(labels, preds)
        acc, mcc, f1 = oracle_confusion(list(labels), list(preds))
        worst = max(worst, abs(m["accuracy"] - acc), abs(m["mcc"] - mcc),
                    abs(m["f1"] - f1))

        cal = calibration(p1, labels, n_bins=10)
        ece, brier = oracle_ece_brier(list(p1), list(labels), 10)
        worst = max(worst, abs(cal["ece"] - ece), abs(cal["brier"] - brier))

        other = rng.random(n)
        rho = spearman_rho(p1, other)
        ra = np.asarray([sorted(p1).index(v) for v in p1], dtype=float)
        from scipy import stats
        ref = stats.spearmanr(p1, other).statistic
        if rho is not None and not math.isnan(ref):
            worst = max(worst, abs(rho - ref))

        for point in selective_curve(probs, labels, errors, cutoffs=[0.5, 0.8]):
            covered = [i for i in range(n) if max(probs[i]) >= point.cutoff]
            worst = max(worst, abs(point.coverage - len(covered) / n))
            if covered:
                sub_preds = [int(preds[i]) for i in covered]
                acc, mcc, f1 = oracle_confusion([labels[i] for i in covered],
                                                sub_preds)
                worst = max(worst, abs(point.accuracy - acc),
                            abs(point.mcc - mcc), abs(point.f1 - f1))
    check(5, "all metrics match brute-force oracles on 1000 random fixtures",
          worst < 1e-12, f"worst abs deviation {worst:.2e}")


def test_criterion_6_invariances():
    rng = np.random.default_rng(77)
    model = ProbeModel(ProbeConfig(**TINY_CONFIG), seed=5).eval()
    worst_pad = worst_perm = worst_sum = 0.0
    importance_ok = True
    for i in range(100):
        n = int(rng.integers(1, 12))
        rec = random_record(rng, mol_id=i, n_atoms=n)
        base = model.forward(collate([rec]))
        padded = model.forward(collate([rec], pad_to=n + int(rng.integers(1, 6))))
        worst_pad = max(worst_pad,
                        float(np.abs(base.probs - padded.probs).max()),
                        float(np.abs(base.mol_embedding - padded.mol_embedding).max()))
        perm = rng.permutation(n)
        from probe.data import MoleculeRecord
        permuted = MoleculeRecord(mol_id=i, embeddings=rec.embeddings[perm],
                                  e_pred=rec.e_pred, e_ref=rec.e_ref,
                                  charges=rec.charges[perm],
                                  atomic_numbers=rec.atomic_numbers[perm])
        shuffled = model.forward(collate([permuted]))
        worst_perm = max(worst_perm,
                         float(np.abs(base.probs - shuffled.probs).max()),
                         float(np.abs(base.mol_embedding - shuffled.mol_embedding).max()))
        scores = atom_importance(model, collate([rec]))[0]
        worst_sum = max(worst_sum, abs(float(scores.sum()) - 1.0))
        importance_ok = importance_ok and bool(np.all(scores >= 0.0))
    check(6, "padding/permutation invariance within 1e-9; importance "
             "normalized and non-negative",
          worst_pad < 1e-9 and worst_perm < 1e-9 and worst_sum < 1e-9
          and importance_ok,
          f"pad {worst_pad:.1e}, perm {worst_perm:.1e}, sum {worst_sum:.1e}")


def test_criterion_7_label_machinery():
    rng = np.random.default_rng(8)
    # distinct errors, even count: p=50 must balance exactly
    n = 1000
    errors = rng.permutation(np.linspace(0.1, 10.0, n))
    records = []
    for i, e in enumerate(errors):
        r = random_record(rng, mol_id=i, n_atoms=3)
        r.e_ref, r.e_pred = 0.0, float(e)
        records.append(r)
    ds = assign_labels(records, p=50)
    n1 = int(ds.labels.sum())
    balanced_ok = (abs((n - n1) - n1) <= 1
                   and abs(ds.class_weights[0] - 1.0) < 1e-12
                   and abs(ds.class_weights[1] - 1.0) < 1e-12)

    # 60/40 fixture: 10 records, 4 unreliable
    fixture = []
    for i, e in enumerate([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 2.0, 2.1, 2.2, 2.3]):
        r = random_record(rng, mol_id=i, n_atoms=2)
        r.e_ref, r.e_pred = 0.0, float(e)
        fixture.append(r)
    ds2 = assign_labels(fixture, p=60)
    sixty_forty_ok = (ds2.class_weights[0] == 10 / 12
                      and ds2.class_weights[1] == 10 / 8)
    check(7, "p=50 balances classes with unit weights; 60/40 fixture gives "
             "w = (10/12, 10/8) exactly",
          balanced_ok and sixty_forty_ok,
          f"counts {n - n1}/{n1}, weights {ds2.class_weights}")


def test_criterion_8_format_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    records = [random_record(rng, mol_id=i, n_atoms=int(rng.integers(1, 8)))
               for i in range(20)]
    p1, p2 = tmp_path / "a.pec", tmp_path / "b.pec"
    write_container(records, p1)
    write_container(read_container(p1), p2)
    pec_ok = p1.read_bytes() == p2.read_bytes()

    for i, r in enumerate(records):
        r.e_pred = float(i)
        r.e_ref = 0.0
    ds = assign_labels(records, p=50)
    train, val = split_train_val(ds, 0.9, seed=1)
    model = ProbeModel(ProbeConfig(**TINY_CONFIG), seed=3)
    model, _, ckpt = fit(model, train, val,
                         TrainConfig(lr=1e-3, max_epochs=2, batch_size=8, seed=3))
    c1, c2 = tmp_path / "m1.prbc", tmp_path / "m2.prbc"
    save_checkpoint(ckpt, c1)
    save_checkpoint(ckpt, c2)
    ckpt_ok = c1.read_bytes() == c2.read_bytes()

    loaded, _ = load_checkpoint(c1)
    batch = collate(records[:5])
    out1 = model.eval().forward(batch)
    out2 = loaded.forward(batch)
    forward_ok = (np.array_equal(out1.logits, out2.logits)
                  and np.array_equal(out1.probs, out2.probs))
    check(8, "container and checkpoint round trips are byte-identical; "
             "loaded model reproduces forward bit-for-bit",
          pec_ok and ckpt_ok and forward_ok)


def test_criterion_9_training_determinism(tmp_path):
    data_path = tmp_path / "train.pec"
    assert cli_main(["dataset", "gen-synthetic", "--out", str(data_path),
                     "--n", "300", "--dim", "8", "--size-min", "2",
                     "--size-max", "8", "--seed", "4"]) == 0
    flags = ["--max-epochs", "3", "--batch-size", "64", "--lr", "1e-3",
             "--seed", "5", "--encoder-widths", "16,8,8", "--heads", "2",
             "--head-dim", "4", "--embedding-dim", "8",
             "--classifier-widths", "8,4"]
    m1, m2 = tmp_path / "r1.prbc", tmp_path / "r2.prbc"
    assert cli_main(["train", "--data", str(data_path), "--out", str(m1), *flags]) == 0
    assert cli_main(["train", "--data", str(data_path), "--out", str(m2),
                     "--config", str(tmp_path / "r1.prbc.manifest.json")]) == 0
    same_ckpt = m1.read_bytes() == m2.read_bytes()
    h1 = (tmp_path / "r1.losses.csv").read_text().splitlines()[1:]
    h2 = (tmp_path / "r2.losses.csv").read_text().splitlines()[1:]
    check(9, "re-running train from the manifest reproduces checkpoint and "
             "loss history bit-identically",
          same_ckpt and h1 == h2)


def test_criterion_10_active_learning(al_comparison):
    fracs = al_comparison["fracs"]
    base_rate = 0.10  # planted fraction of the pool
    oversampled = all(f >= 2 * base_rate for f in fracs)
    probe_delta = np.mean([r[-1].delta_rmse
                           for r in al_comparison["results"]["probe"]])
    random_delta = np.mean([r[-1].delta_rmse
                            for r in al_comparison["results"]["random"]])
    check(10, "planted-cluster oversampling >= 2x base rate and 2-cycle "
              "delta-RMSE <= random in seed aggregate",
          oversampled and probe_delta <= random_delta
          and al_comparison["elapsed"] < 600.0,
          f"fracs {[round(f, 2) for f in fracs]}, probe {probe_delta:.3f} vs "
          f"random {random_delta:.3f} in {al_comparison['elapsed']:.0f}s")


def test_criterion_11_ensemble_baseline():
    rng = np.random.default_rng(12)
    n = 50
    errors = rng.random(n) * 4 + 0.1
    offsets = np.array([-1.5, -0.5, 0.5, 1.5])
    offsets /= np.std(offsets, ddof=1)
    preds = rng.normal(size=n)[None, :] + offsets[:, None] * errors[None, :]
    ens = EnsembleInput(predictions=preds, n_atoms=np.ones(n, dtype=int))
    labels = (errors >= np.median(errors)).astype(int)
    out = ensemble_baseline(ens, errors, labels)
    rho_one = abs(out["spearman_rho"] - 1.0) < 1e-12
    med_preds = (out["scaled_sigma"] >= out["median_threshold"]).astype(int)
    acc, mcc, f1 = oracle_confusion(list(labels), list(med_preds))
    classifier_ok = (abs(out["median_classifier"]["accuracy"] - acc) < 1e-12
                     and abs(out["median_classifier"]["mcc"] - mcc) < 1e-12
                     and abs(out["median_classifier"]["f1"] - f1) < 1e-12)

    n2 = 10000
    errors2 = rng.random(n2) * 4
    noise_preds = rng.normal(size=(4, n2))  # spread independent of error
    ens2 = EnsembleInput(predictions=noise_preds, n_atoms=np.ones(n2, dtype=int))
    labels2 = (errors2 >= np.median(errors2)).astype(int)
    out2 = ensemble_baseline(ens2, errors2, labels2)
    independent_ok = abs(out2["spearman_rho"]) < 0.1
    check(11, "monotone-sigma fixture gives rho = 1; independent noise gives "
              "|rho| < 0.1; median classifier matches the confusion oracle",
          rho_one and classifier_ok and independent_ok,
          f"rho_mono {out['spearman_rho']:.12f}, rho_indep {out2['spearman_rho']:.3f}")
