"""Retrospective active-learning harness over a synthetic surrogate backbone.

A small per-atom regressor stands in for the expensive backbone: per-atom
features pass through one hidden layer whose activations double as the
embeddings fed to the reliability classifier; per-atom contributions sum to
the molecular energy. Acquisition strategies (classifier rank, ensemble
spread rank, random) are compared across retraining cycles on a fixed pool
with planted high-error clusters.

The harness reproduces the protocol and a directional result on the
constructed task; it does not claim externally comparable RMSE numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import (ClusterSpec, MoleculeRecord, SynthSpec, assign_labels,
                   make_batches, split_train_val, synth_cluster_id,
                   synth_generate)
from .errors import ConfigError, DataError, StateError
from .model import ProbeConfig, ProbeModel
from .training import TrainConfig, fit
from .nn import AdamW, clip_grad_norm, seeded_rng

STRATEGIES = ("probe", "ensemble", "random")

HIGH_ERROR_CLUSTER = 1  # index of the planted hard cluster below


def planted_pool_spec(n_molecules: int, high_fraction: float = 0.10) -> SynthSpec:
    """Standard planted task for acquisition experiments.

    One broad easy cluster plus a hard cluster at the edge of its support
    (index HIGH_ERROR_CLUSTER, meant to be excluded from the initial
    labeled set). Reference energies combine a smooth learnable part, a
    superlinear term that is badly extrapolated into the hard cluster, and
    noise whose spread grows along the hard cluster's direction so the
    labeled set carries a clear unreliability gradient for the classifier
    to pick up.
    """
    return SynthSpec(
        n_molecules=n_molecules, embed_dim=4,
        clusters=[
            ClusterSpec(0.0, 1.0, 0.0, 0.01, 1.0 - high_fraction),
            ClusterSpec(1.6, 0.4, 0.0, 0.01, high_fraction),
        ],
        size_range=(3, 8), with_charges=False, with_atomic_numbers=False,
        target="atomwise", target_amp=1.0, target_freq=1.0, target_lin=1.0,
        target_noise=0.05, target_noise_slope=16.0, target_phase_power=1.0,
        target_quad=2.0)


def planted_al_config(strategy: str, seed: int = 0, pool_size: int = 2500,
                      n_cycles: int = 2) -> ALConfig:
    """Canonical harness settings for the planted task (all strategies)."""
    return ALConfig(
        pool_spec=planted_pool_spec(pool_size), initial_size=500,
        acquisition_size=150, n_cycles=n_cycles, strategy=strategy,
        test_size=800, seed=seed, initial_exclude_cluster=HIGH_ERROR_CLUSTER,
        surrogate=SurrogateTrainConfig(hidden_dim=32, epochs=120, lr=5e-3,
                                       clip_norm=20.0),
        probe_epochs=100, probe_lr=2e-3)


class SurrogateBackbone:
    """Per-atom feature -> hidden layer -> per-atom energy, summed per molecule.

    The post-activation hidden vector is the per-atom embedding exposed to
    the reliability classifier, mirroring how a real backbone exposes its
    internal representation.
    """

    def __init__(self, input_dim: int, hidden_dim: int = 64, seed: int = 0):
        rng = seeded_rng(seed, 0x5B06)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.l1 = nn.Linear(input_dim, hidden_dim, rng, "surrogate.l1")
        self.act = nn.Gelu()
        self.l2 = nn.Linear(hidden_dim, 1, rng, "surrogate.l2")
        self._cache = None

    def parameters(self) -> list[nn.Parameter]:
        return self.l1.parameters() + self.l2.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch) -> tuple[np.ndarray, np.ndarray]:
        """Returns (energies (B,), hidden activations (B, N, hidden))."""
        hidden = self.act.forward(self.l1.forward(batch.embeddings))
        contrib = self.l2.forward(hidden)[..., 0]
        energies = (contrib * batch.mask).sum(axis=1)
        self._cache = batch.mask
        return energies, hidden

    def backward(self, grad_energy: np.ndarray) -> None:
        mask = self._cache
        d_contrib = grad_energy[:, None] * mask
        d_hidden = self.l2.backward(d_contrib[..., None])
        self.l1.backward(self.act.backward(d_hidden))

    def predict(self, records: list[MoleculeRecord],
                batch_size: int = 512) -> tuple[np.ndarray, list[np.ndarray]]:
        """Energies and per-molecule embedding matrices (real atoms only)."""
        energies = np.empty(len(records))
        embeddings = [None] * len(records)
        pos = 0
        for batch in make_batches(records, batch_size=batch_size):
            e, hidden = self.forward(batch)
            for i in range(len(batch)):
                energies[pos] = e[i]
                embeddings[pos] = hidden[i, :batch.n_atoms[i]].copy()
                pos += 1
        return energies, embeddings


@dataclass
class SurrogateTrainConfig:
    hidden_dim: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    epochs: int = 40
    batch_size: int = 64


def train_surrogate(surrogate: SurrogateBackbone, records: list[MoleculeRecord],
                    cfg: SurrogateTrainConfig, rng: np.random.Generator) -> float:
    """Minimize mean squared energy error; returns the final epoch MSE."""
    e_ref = {r.mol_id: r.e_ref for r in records}
    optimizer = AdamW(surrogate.parameters(), lr=cfg.lr,
                      weight_decay=cfg.weight_decay)
    last = float("nan")
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for batch in make_batches(records, cfg.batch_size, shuffle=True, rng=rng):
            target = np.array([e_ref[int(m)] for m in batch.mol_ids])
            pred, _ = surrogate.forward(batch)
            resid = pred - target
            loss = float((resid * resid).mean())
            surrogate.zero_grad()
            surrogate.backward(2.0 * resid / len(batch))
            clip_grad_norm(surrogate.parameters(), cfg.clip_norm)
            optimizer.step()
            total += loss * len(batch)
            count += len(batch)
        last = total / count
    return last


def surrogate_rmse(surrogate: SurrogateBackbone,
                   records: list[MoleculeRecord]) -> float:
    pred, _ = surrogate.predict(records)
    ref = np.array([r.e_ref for r in records])
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class ALConfig:
    pool_spec: SynthSpec
    initial_size: int
    acquisition_size: int
    n_cycles: int
    strategy: str = "probe"
    ensemble_size: int = 4
    test_size: int = 1000
    seed: int = 0
    percentile: float = 50.0
    initial_exclude_cluster: int | None = None
    surrogate: SurrogateTrainConfig = field(default_factory=SurrogateTrainConfig)
    probe_epochs: int = 40
    probe_lr: float = 1e-3
    probe_batch_size: int = 64

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; pick from {STRATEGIES}")
        if self.initial_size + self.acquisition_size * self.n_cycles > self.pool_spec.n_molecules:
            raise ConfigError("initial + acquisition * cycles exceeds the pool size")
        if self.ensemble_size < 2:
            raise ConfigError("ensemble_size must be >= 2")


@dataclass
class CycleResult:
    cycle: int
    strategy: str
    acquired_mol_ids: list[int]
    rmse: float
    delta_rmse: float
    per_cluster_counts: dict
    rmse_ensemble_mean: float | None = None

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "strategy": self.strategy,
                "acquired_mol_ids": [int(m) for m in self.acquired_mol_ids],
                "rmse": self.rmse, "delta_rmse": self.delta_rmse,
                "per_cluster_counts": {str(k): v for k, v in self.per_cluster_counts.items()},
                "rmse_ensemble_mean": self.rmse_ensemble_mean}


def rank_pool(mol_ids, scores) -> list[tuple[int, float]]:
    """Order molecules by descending score, ties broken by ascending mol_id."""
    mol_ids = np.asarray(mol_ids, dtype=np.uint64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(mol_ids) != len(scores):
        raise DataError("rank_pool: mol_ids and scores differ in length")
    order = np.lexsort((mol_ids, -scores))
    return [(int(mol_ids[i]), float(scores[i])) for i in order]


def _probe_classifier_config(hidden_dim: int) -> ProbeConfig:
    return ProbeConfig(input_dim=hidden_dim, encoder_widths=(32, 16, 16),
                       heads=4, head_dim=4, embedding_dim=16,
                       classifier_widths=(16, 8), dropout=0.1, use_charges=False)


def _hidden_records(records, energies, embeddings) -> list[MoleculeRecord]:
    """Re-express molecules with surrogate activations as their embeddings."""
    return [MoleculeRecord(mol_id=r.mol_id, embeddings=emb, e_pred=float(e),
                           e_ref=r.e_ref)
            for r, e, emb in zip(records, energies, embeddings)]


def score_pool(strategy: str, pool: list[MoleculeRecord],
               labeled: list[MoleculeRecord],
               surrogates: list[SurrogateBackbone],
               config: ALConfig, rng: np.random.Generator) -> np.ndarray:
    """Acquisition scores for the pool under the given strategy."""
    if strategy == "random":
        return rng.random(len(pool))
    if not surrogates:
        raise StateError("score_pool: no trained surrogate available")
    if strategy == "ensemble":
        preds = np.stack([s.predict(pool)[0] for s in surrogates])
        if preds.shape[0] < 2:
            raise StateError("ensemble strategy needs at least 2 surrogates")
        sigma = preds.std(axis=0, ddof=1)
        return sigma / np.sqrt(np.array([r.n_atoms for r in pool], dtype=np.float64))
    # probe: train the reliability classifier on the labeled set and rank
    # the pool by P(unreliable)
    surrogate = surrogates[0]
    energies, embeddings = surrogate.predict(labeled)
    hidden = _hidden_records(labeled, energies, embeddings)
    dataset = assign_labels(hidden, p=config.percentile)
    train_set, val_set = split_train_val(dataset, fraction=0.9, seed=config.seed)
    clf = ProbeModel(_probe_classifier_config(surrogate.hidden_dim),
                     seed=config.seed)
    tc = TrainConfig(lr=config.probe_lr, max_epochs=config.probe_epochs,
                     batch_size=config.probe_batch_size,
                     early_stop_patience=max(5, config.probe_epochs // 4),
                     percentile=config.percentile, seed=config.seed)
    fit(clf, train_set, val_set, tc)
    pool_energies, pool_embeddings = surrogate.predict(pool)
    pool_hidden = _hidden_records(
        pool, pool_energies, pool_embeddings)
    clf.eval()
    scores = np.empty(len(pool))
    pos = 0
    for batch in make_batches(pool_hidden, batch_size=256):
        out = clf.forward(batch)
        scores[pos:pos + len(batch)] = out.probs[:, 1]
        pos += len(batch)
    return scores


def _cluster_counts(records) -> dict:
    counts: dict[int, int] = {}
    for r in records:
        c = synth_cluster_id(r.mol_id)
        counts[c] = counts.get(c, 0) + 1
    return counts


def run_cycles(config: ALConfig) -> list[CycleResult]:
    """Run the full retrospective acquisition loop.

    Cycle 0 trains the surrogate(s) on the initial labeled set; each later
    cycle scores the remaining pool, moves the top-ranked molecules into
    the labeled set, and retrains with parameters warm-started from the
    previous cycle. RMSE is measured on a held-out test split every cycle.
    """
    config.validate()
    all_records = synth_generate(
        replace(config.pool_spec,
                n_molecules=config.pool_spec.n_molecules + config.test_size),
        seed=config.seed)
    pool = all_records[:config.pool_spec.n_molecules]
    test = all_records[config.pool_spec.n_molecules:]

    pick_rng = seeded_rng(config.seed, 0xA11)
    random_rng = seeded_rng(config.seed, 0xA12)
    shuffle_rng = seeded_rng(config.seed, 0xA13)

    candidates = [i for i, r in enumerate(pool)
                  if config.initial_exclude_cluster is None
                  or synth_cluster_id(r.mol_id) != config.initial_exclude_cluster]
    if len(candidates) < config.initial_size:
        raise DataError("not enough pool molecules for the initial labeled set")
    chosen = pick_rng.choice(len(candidates), size=config.initial_size, replace=False)
    labeled_idx = {candidates[i] for i in chosen}
    labeled = [pool[i] for i in sorted(labeled_idx)]
    remaining = [pool[i] for i in range(len(pool)) if i not in labeled_idx]

    n_models = config.ensemble_size if config.strategy == "ensemble" else 1
    d = config.pool_spec.embed_dim
    surrogates = [SurrogateBackbone(d, config.surrogate.hidden_dim,
                                    seed=config.seed * 1000 + k)
                  for k in range(n_models)]
    for s in surrogates:
        train_surrogate(s, labeled, config.surrogate, shuffle_rng)

    rmse0 = surrogate_rmse(surrogates[0], test)
    ens_rmse = None
    if n_models > 1:
        mean_pred = np.mean([s.predict(test)[0] for s in surrogates], axis=0)
        ref = np.array([r.e_ref for r in test])
        ens_rmse = float(np.sqrt(np.mean((mean_pred - ref) ** 2)))
    results = [CycleResult(cycle=0, strategy=config.strategy, acquired_mol_ids=[],
                           rmse=rmse0, delta_rmse=0.0, per_cluster_counts={},
                           rmse_ensemble_mean=ens_rmse)]

    for cycle in range(1, config.n_cycles + 1):
        if len(remaining) < config.acquisition_size:
            raise DataError(f"pool exhausted at cycle {cycle}")
        scores = score_pool(config.strategy, remaining, labeled, surrogates,
                            config, random_rng)
        ranked = rank_pool([r.mol_id for r in remaining], scores)
        take = {mid for mid, _ in ranked[:config.acquisition_size]}
        acquired = [r for r in remaining if int(r.mol_id) in take]
        remaining = [r for r in remaining if int(r.mol_id) not in take]
        labeled = labeled + acquired

        for s in surrogates:  # warm start from the previous cycle's weights
            train_surrogate(s, labeled, config.surrogate, shuffle_rng)

        rmse = surrogate_rmse(surrogates[0], test)
        ens_rmse = None
        if n_models > 1:
            mean_pred = np.mean([s.predict(test)[0] for s in surrogates], axis=0)
            ref = np.array([r.e_ref for r in test])
            ens_rmse = float(np.sqrt(np.mean((mean_pred - ref) ** 2)))
        results.append(CycleResult(
            cycle=cycle, strategy=config.strategy,
            acquired_mol_ids=[int(r.mol_id) for r in acquired],
            rmse=rmse, delta_rmse=rmse - rmse0,
            per_cluster_counts=_cluster_counts(acquired),
            rmse_ensemble_mean=ens_rmse))
    return results


def write_cycle_csv(results: list[CycleResult], path) -> None:
    with open(path, "w") as fh:
        fh.write("cycle,strategy,rmse,delta\n")
        for r in results:
            fh.write(f"{r.cycle},{r.strategy},{r.rmse!r},{r.delta_rmse!r}\n")


def write_acquisition_log(results: list[CycleResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict()) + "\n")
