"""Embedding containers, labeling, splits, batching, and synthetic data.

The PEC binary container stores one molecule per record: per-atom
embeddings exported from a frozen backbone plus the backbone's predicted
energy, optional partial charges, optional reference energy, and optional
atomic numbers. Everything is little-endian; embeddings and charges are
stored as binary32 and upconverted to float64 on load. A line-delimited
JSON twin format is accepted/produced for files ending in ``.jsonl``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .nn import seeded_rng

MAGIC = b"PRBE"
VERSION = 1

FLAG_CHARGES = 0x1
FLAG_REF_ENERGY = 0x2
FLAG_ATOMIC_NUMBERS = 0x4
_KNOWN_FLAGS = FLAG_CHARGES | FLAG_REF_ENERGY | FLAG_ATOMIC_NUMBERS

_HEADER = struct.Struct("<4sHHIQ")  # magic, version, flags, embed_dim, record_count


@dataclass
class MoleculeRecord:
    """One molecule as exported by a backbone: embeddings plus energies."""

    mol_id: int
    embeddings: np.ndarray            # (n_atoms, d) float64
    e_pred: float                     # predicted total energy, kcal/mol
    e_ref: float | None = None        # reference energy, kcal/mol
    charges: np.ndarray | None = None  # (n_atoms,) float64
    atomic_numbers: np.ndarray | None = None  # (n_atoms,) uint8

    @property
    def n_atoms(self) -> int:
        return self.embeddings.shape[0]

    def validate(self) -> None:
        if self.embeddings.ndim != 2 or self.n_atoms < 1:
            raise DataError(f"record {self.mol_id}: embeddings must be (N>=1, d)")
        if self.charges is not None and len(self.charges) != self.n_atoms:
            raise DataError(f"record {self.mol_id}: charge count != atom count")
        if self.atomic_numbers is not None and len(self.atomic_numbers) != self.n_atoms:
            raise DataError(f"record {self.mol_id}: atomic-number count != atom count")


def container_flags(records: list[MoleculeRecord]) -> int:
    """Derive the header flag bits, checking the records are homogeneous."""
    if not records:
        return 0
    first = records[0]
    flags = 0
    if first.charges is not None:
        flags |= FLAG_CHARGES
    if first.e_ref is not None:
        flags |= FLAG_REF_ENERGY
    if first.atomic_numbers is not None:
        flags |= FLAG_ATOMIC_NUMBERS
    d = first.embeddings.shape[1]
    for r in records:
        r.validate()
        if r.embeddings.shape[1] != d:
            raise DataError(
                f"record {r.mol_id}: embedding width {r.embeddings.shape[1]} != {d}")
        got = ((FLAG_CHARGES if r.charges is not None else 0)
               | (FLAG_REF_ENERGY if r.e_ref is not None else 0)
               | (FLAG_ATOMIC_NUMBERS if r.atomic_numbers is not None else 0))
        if got != flags:
            raise DataError(f"record {r.mol_id}: optional fields differ across records")
    return flags


def write_container(records: list[MoleculeRecord], path) -> None:
    """Write records to ``path`` (PEC binary, or JSONL if path ends in .jsonl)."""
    if str(path).endswith(".jsonl"):
        _write_jsonl(records, path)
        return
    flags = container_flags(records)
    d = records[0].embeddings.shape[1] if records else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, d, len(records)))
        for r in records:
            fh.write(struct.pack("<QI", r.mol_id, r.n_atoms))
            if flags & FLAG_ATOMIC_NUMBERS:
                fh.write(np.asarray(r.atomic_numbers, dtype=np.uint8).tobytes())
            fh.write(np.asarray(r.embeddings, dtype="<f4").tobytes())
            if flags & FLAG_CHARGES:
                fh.write(np.asarray(r.charges, dtype="<f4").tobytes())
            fh.write(struct.pack("<d", r.e_pred))
            if flags & FLAG_REF_ENERGY:
                fh.write(struct.pack("<d", r.e_ref))


def read_container(path) -> list[MoleculeRecord]:
    """Read a PEC container (or .jsonl twin) into memory.

    Embeddings and charges come back as float64 (exact upconversion from
    the stored binary32 values).
    """
    if str(path).endswith(".jsonl"):
        return _read_jsonl(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    magic, version, flags, d, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"{path}: unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}", offset=6)

    records = []
    off = _HEADER.size
    for i in range(count):
        try:
            mol_id, n = struct.unpack_from("<QI", buf, off)
        except struct.error:
            raise FormatError(f"{path}: truncated record {i}", offset=off) from None
        off += 12
        if n < 1:
            raise FormatError(f"{path}: record {i} has zero atoms", offset=off - 4)
        atomic_numbers = None
        if flags & FLAG_ATOMIC_NUMBERS:
            end = off + n
            if end > len(buf):
                raise FormatError(f"{path}: truncated record {i}", offset=off)
            atomic_numbers = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
            off = end
        end = off + 4 * n * d
        if end > len(buf):
            raise FormatError(f"{path}: truncated record {i}", offset=off)
        emb = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off)
        emb = emb.astype(np.float64).reshape(n, d)
        off = end
        charges = None
        if flags & FLAG_CHARGES:
            end = off + 4 * n
            if end > len(buf):
                raise FormatError(f"{path}: truncated record {i}", offset=off)
            charges = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
            off = end
        try:
            (e_pred,) = struct.unpack_from("<d", buf, off)
            off += 8
            e_ref = None
            if flags & FLAG_REF_ENERGY:
                (e_ref,) = struct.unpack_from("<d", buf, off)
                off += 8
        except struct.error:
            raise FormatError(f"{path}: truncated record {i}", offset=off) from None
        records.append(MoleculeRecord(mol_id=mol_id, embeddings=emb, e_pred=e_pred,
                                      e_ref=e_ref, charges=charges,
                                      atomic_numbers=atomic_numbers))
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes", offset=off)
    return records


def _write_jsonl(records: list[MoleculeRecord], path) -> None:
    container_flags(records)
    with open(path, "w") as fh:
        for r in records:
            obj = {"mol_id": r.mol_id, "n_atoms": r.n_atoms,
                   "embeddings": np.asarray(r.embeddings, dtype="<f4").tolist(),
                   "e_pred": r.e_pred}
            if r.atomic_numbers is not None:
                obj["atomic_numbers"] = np.asarray(r.atomic_numbers).tolist()
            if r.charges is not None:
                obj["charges"] = np.asarray(r.charges, dtype="<f4").tolist()
            if r.e_ref is not None:
                obj["e_ref"] = r.e_ref
            fh.write(json.dumps(obj) + "\n")


def _read_jsonl(path) -> list[MoleculeRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            emb = np.asarray(obj["embeddings"], dtype=np.float64)
            rec = MoleculeRecord(
                mol_id=int(obj["mol_id"]), embeddings=emb, e_pred=float(obj["e_pred"]),
                e_ref=float(obj["e_ref"]) if "e_ref" in obj else None,
                charges=np.asarray(obj["charges"], dtype=np.float64) if "charges" in obj else None,
                atomic_numbers=np.asarray(obj["atomic_numbers"], dtype=np.uint8)
                if "atomic_numbers" in obj else None)
            if "n_atoms" in obj and int(obj["n_atoms"]) != rec.n_atoms:
                raise FormatError(f"{path}:{lineno}: n_atoms does not match embeddings")
            records.append(rec)
    container_flags(records)
    return records


def inspect_container(path) -> dict:
    """Validate a container and summarize its contents."""
    records = read_container(path)
    flags = container_flags(records)
    sizes = np.array([r.n_atoms for r in records]) if records else np.zeros(0, dtype=int)
    return {
        "path": str(path),
        "records": len(records),
        "embed_dim": records[0].embeddings.shape[1] if records else 0,
        "has_charges": bool(flags & FLAG_CHARGES),
        "has_ref_energy": bool(flags & FLAG_REF_ENERGY),
        "has_atomic_numbers": bool(flags & FLAG_ATOMIC_NUMBERS),
        "atoms_min": int(sizes.min()) if len(sizes) else 0,
        "atoms_max": int(sizes.max()) if len(sizes) else 0,
        "atoms_mean": float(sizes.mean()) if len(sizes) else 0.0,
    }


# ---------------------------------------------------------------------------
# labels


def quantile_boundary(errors, p: float) -> float:
    """Linear-interpolation quantile (R type 7) of the error distribution."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 2:
        raise DataError("quantile_boundary: need at least 2 error values")
    if not np.all(np.isfinite(errors)):
        raise DataError("quantile_boundary: errors contain non-finite values")
    if not 0.0 < p < 100.0:
        raise ConfigError(f"percentile must be in (0, 100), got {p}")
    return float(np.percentile(errors, p, method="linear"))


@dataclass
class LabeledDataset:
    """Records with reliability labels derived from the error distribution."""

    records: list[MoleculeRecord]
    errors: np.ndarray        # per-molecule |e_pred - e_ref|
    boundary: float           # error percentile separating the classes
    percentile: float
    labels: np.ndarray        # 0 = reliable, 1 = unreliable
    class_weights: tuple[float, float]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def embed_dim(self) -> int:
        return self.records[0].embeddings.shape[1]

    @property
    def label_fractions(self) -> tuple[float, float]:
        n = len(self.labels)
        n1 = int(self.labels.sum())
        return ((n - n1) / n, n1 / n)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return replace(self, records=[self.records[i] for i in indices],
                       errors=self.errors[indices], labels=self.labels[indices])


def assign_labels(records: list[MoleculeRecord], p: float = 50.0,
                  per_atom_errors: bool = False) -> LabeledDataset:
    """Label each molecule unreliable iff its error reaches the p-th percentile.

    Class weights follow w_c = |D| / (2 |D_c|). When ``per_atom_errors``
    is set the error is divided by the atom count before thresholding.
    """
    if not records:
        raise DataError("assign_labels: empty record list")
    for r in records:
        if r.e_ref is None:
            raise DataError(f"record {r.mol_id}: reference energy required for labeling")
    errors = np.array([abs(r.e_pred - r.e_ref) for r in records], dtype=np.float64)
    if per_atom_errors:
        errors = errors / np.array([r.n_atoms for r in records], dtype=np.float64)
    boundary = quantile_boundary(errors, p)
    labels = (errors >= boundary).astype(np.int64)
    n = len(records)
    n1 = int(labels.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DataError(
            f"labeling at p={p} left one class empty ({n0} reliable / {n1} unreliable); "
            "choose a different percentile")
    weights = (n / (2.0 * n0), n / (2.0 * n1))
    return LabeledDataset(records=list(records), errors=errors, boundary=boundary,
                          percentile=p, labels=labels, class_weights=weights)


def split_train_val(dataset: LabeledDataset, fraction: float = 0.9,
                    seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle then split; boundary and class weights are inherited."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 10:
        raise DataError(f"split_train_val: need at least 10 records, got {n}")
    perm = seeded_rng(seed, 0x5B11).permutation(n)
    k = int(fraction * n)
    return dataset.subset(perm[:k]), dataset.subset(perm[k:])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded, masked tensor bundle of variable-size molecules."""

    embeddings: np.ndarray   # (B, N_max, d), padded slots zero
    charges: np.ndarray      # (B, N_max), zeros when charges absent
    mask: np.ndarray         # (B, N_max) bool, True for real atoms
    e_pred: np.ndarray       # (B,)
    n_atoms: np.ndarray      # (B,)
    mol_ids: np.ndarray      # (B,)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def collate(records: list[MoleculeRecord], labels=None, pad_to: int | None = None) -> Batch:
    """Pad a list of records into one Batch. ``pad_to`` overrides N_max."""
    b = len(records)
    d = records[0].embeddings.shape[1]
    n_atoms = np.array([r.n_atoms for r in records], dtype=np.int64)
    n_max = pad_to if pad_to is not None else int(n_atoms.max())
    if n_max < n_atoms.max():
        raise DataError(f"pad_to={pad_to} smaller than largest molecule ({n_atoms.max()})")
    emb = np.zeros((b, n_max, d), dtype=np.float64)
    charges = np.zeros((b, n_max), dtype=np.float64)
    mask = np.zeros((b, n_max), dtype=bool)
    for i, r in enumerate(records):
        emb[i, :r.n_atoms] = r.embeddings
        if r.charges is not None:
            charges[i, :r.n_atoms] = r.charges
        mask[i, :r.n_atoms] = True
    return Batch(
        embeddings=emb, charges=charges, mask=mask,
        e_pred=np.array([r.e_pred for r in records], dtype=np.float64),
        n_atoms=n_atoms,
        mol_ids=np.array([r.mol_id for r in records], dtype=np.uint64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64))


def make_batches(dataset, batch_size: int, shuffle: bool = False,
                 seed: int = 0, rng: np.random.Generator | None = None) -> list[Batch]:
    """Chunk a LabeledDataset (or plain record list) into padded batches.

    Every record appears exactly once; the final batch may be short.
    Pass ``rng`` to draw the shuffle order from a live stream (training
    uses this so each epoch reshuffles deterministically).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if isinstance(dataset, LabeledDataset):
        records, labels = dataset.records, dataset.labels
    else:
        records, labels = list(dataset), None
    n = len(records)
    order = np.arange(n)
    if shuffle:
        gen = rng if rng is not None else seeded_rng(seed, 0xBA7C)
        order = gen.permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        chunk = [records[i] for i in idx]
        chunk_labels = labels[idx] if labels is not None else None
        batches.append(collate(chunk, labels=chunk_labels))
    return batches


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class ClusterSpec:
    """One latent cluster: embedding distribution plus planted error distribution."""

    embedding_mean: float
    embedding_sigma: float
    error_mean: float
    error_sigma: float
    fraction: float


@dataclass
class SynthSpec:
    """Generator settings for desk-scale verification datasets.

    ``target="random"`` draws reference energies independent of the
    embeddings (classifier tests). ``target="atomwise"`` makes the
    reference energy a smooth per-atom function of the embeddings so a
    regressor can actually learn it (active-learning harness); the
    planted e_pred errors are still produced and simply ignored there.
    """

    n_molecules: int
    embed_dim: int
    clusters: list[ClusterSpec]
    size_range: tuple[int, int] = (3, 20)
    with_charges: bool = True
    with_atomic_numbers: bool = True
    ref_energy_sigma: float = 10.0
    target: str = "random"           # "random" | "atomwise"
    target_amp: float = 3.0          # amplitude of the sine part (atomwise)
    target_freq: float = 2.0         # base angular frequency (atomwise)
    target_lin: float = 1.0          # linear slope (atomwise)
    target_noise: float = 0.0        # noise sd added to e_ref (atomwise)
    target_noise_slope: float = 0.0  # noise sd grows with the molecule's mean s (positive side)
    target_phase_power: float = 1.0  # phase grows as freq * s * |s|**(power-1)
    target_quad: float = 0.0         # superlinear term quad * s * |s|

    def validate(self) -> None:
        if self.n_molecules < 1 or self.embed_dim < 1:
            raise ConfigError("synth spec: n_molecules and embed_dim must be >= 1")
        if not self.clusters:
            raise ConfigError("synth spec: need at least one cluster")
        total = sum(c.fraction for c in self.clusters)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"synth spec: cluster fractions sum to {total}, not 1")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"synth spec: bad size range {self.size_range}")
        if self.target not in ("random", "atomwise"):
            raise ConfigError(f"synth spec: unknown target mode {self.target!r}")


CLUSTER_ID_SHIFT = 48  # cluster index lives in the top 16 bits of mol_id


def synth_cluster_id(mol_id: int) -> int:
    return int(mol_id) >> CLUSTER_ID_SHIFT


def atomwise_target(embeddings: np.ndarray, spec: SynthSpec) -> float:
    """Smooth per-atom energy summed over the molecule (atomwise mode).

    With ``target_phase_power > 1`` the sine turns into a chirp whose local
    frequency grows away from the origin, so outlying feature clusters need
    dense sampling to fit (the planted hard region for acquisition tests).
    """
    s = embeddings.mean(axis=1)
    phase = spec.target_freq * s * np.abs(s) ** (spec.target_phase_power - 1.0)
    contrib = (spec.target_amp * np.sin(phase) + spec.target_lin * s
               + spec.target_quad * s * np.abs(s))
    return float(contrib.sum())


def synth_generate(spec: SynthSpec, seed: int = 0) -> list[MoleculeRecord]:
    """Draw a synthetic dataset; the cluster index is recorded in the
    high bits of mol_id so tests can use it as an oracle."""
    spec.validate()
    rng = seeded_rng(seed, 0x5717)
    fractions = np.array([c.fraction for c in spec.clusters])
    assignments = rng.choice(len(spec.clusters), size=spec.n_molecules, p=fractions)
    lo, hi = spec.size_range
    records = []
    for serial, ci in enumerate(assignments):
        c = spec.clusters[ci]
        n = int(rng.integers(lo, hi + 1))
        emb = rng.normal(c.embedding_mean, c.embedding_sigma, size=(n, spec.embed_dim))
        if spec.target == "atomwise":
            e_ref = atomwise_target(emb, spec)
            if spec.target_noise > 0:
                sd = spec.target_noise * (1.0 + spec.target_noise_slope
                                          * max(float(emb.mean()), 0.0))
                e_ref += rng.normal(0.0, sd)
        else:
            e_ref = rng.normal(0.0, spec.ref_energy_sigma)
        err = rng.normal(c.error_mean, c.error_sigma)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        e_pred = e_ref + sign * err
        charges = rng.normal(0.0, 0.1, size=n) if spec.with_charges else None
        numbers = rng.integers(1, 10, size=n).astype(np.uint8) if spec.with_atomic_numbers else None
        mol_id = (int(ci) << CLUSTER_ID_SHIFT) | serial
        records.append(MoleculeRecord(mol_id=mol_id, embeddings=emb, e_pred=e_pred,
                                      e_ref=e_ref, charges=charges,
                                      atomic_numbers=numbers))
    return records
