"""Batch extraction: structures + frozen checkpoint -> PEC container."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import (BackboneError, UnsupportedElementError, load_backbone,
                        run_backbone, symbols_to_numbers)
from .pec import PecRecord, write_pec
from .xyz import parse_xyz

log = logging.getLogger("probe_extractors")


@dataclass
class ExtractorSpec:
    backbone: str                 # "aimnet2-like" | "mace-like"
    checkpoint: str | Path
    structures: str | Path        # XYZ file (charge/energy comment fields)
    out: str | Path               # PEC output path
    embed_key: str = "embeddings"
    hook_path: str | None = None


@dataclass
class ExtractionSummary:
    written: int = 0
    embed_dim: int = 0
    has_charges: bool = False
    has_ref_energy: bool = False
    skipped: list = field(default_factory=list)   # (mol_id, reason)


def extract(spec: ExtractorSpec) -> ExtractionSummary:
    """Run the frozen backbone over every structure and write one PEC file.

    Individual structures that fail (unsupported elements, backbone errors)
    are skipped and logged rather than aborting the batch. Reference
    energies are stored only when every kept structure carries one, since
    the container's optional fields are all-or-nothing.
    """
    structures = parse_xyz(spec.structures)
    adapter = load_backbone(spec.backbone, spec.checkpoint,
                            embed_key=spec.embed_key, hook_path=spec.hook_path)
    summary = ExtractionSummary()
    rows = []
    for structure in structures:
        try:
            numbers = symbols_to_numbers(structure.symbols)
            coords = np.asarray(structure.coords, dtype=np.float32)
            emb, charges, energy = run_backbone(adapter, numbers, coords,
                                                structure.charge)
        except (UnsupportedElementError, BackboneError) as exc:
            log.warning("skipping molecule %s: %s", structure.mol_id, exc)
            summary.skipped.append((structure.mol_id, str(exc)))
            continue
        rows.append((structure, numbers, emb, charges, energy))
    if not rows:
        first_reason = summary.skipped[0][1] if summary.skipped else "empty input"
        raise BackboneError(f"no structures survived extraction ({first_reason})")

    keep_ref = all(s.energy is not None for s, *_ in rows)
    keep_charges = all(r[3] is not None for r in rows)
    records = []
    for structure, numbers, emb, charges, energy in rows:
        records.append(PecRecord(
            mol_id=int(structure.mol_id),
            atomic_numbers=numbers.astype(np.uint8),
            embeddings=emb,
            charges=charges if keep_charges else None,
            e_pred=energy,
            e_ref=structure.energy if keep_ref else None))
    write_pec(records, spec.out)
    summary.written = len(records)
    summary.embed_dim = records[0].embeddings.shape[1]
    summary.has_charges = keep_charges
    summary.has_ref_energy = keep_ref
    if not keep_ref and any(s.energy is not None for s, *_ in rows):
        log.warning("reference energies dropped: not present for every structure")
    return summary
