"""Standalone PEC container writer.

Implements the wire format directly (little-endian: 20-byte header with
magic "PRBE", version 1, flag bits for charges / reference energy / atomic
numbers, embedding width, record count; then per-record mol_id u64,
atom count u32, optional atomic numbers u8, embeddings binary32 row-major,
optional charges binary32, predicted energy binary64, optional reference
energy binary64). Kept independent of the consumer package on purpose:
the file format is the interface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PRBE"
VERSION = 1

FLAG_CHARGES = 0x1
FLAG_REF_ENERGY = 0x2
FLAG_ATOMIC_NUMBERS = 0x4

_HEADER = struct.Struct("<4sHHIQ")


@dataclass
class PecRecord:
    mol_id: int
    atomic_numbers: np.ndarray | None   # (N,) uint8
    embeddings: np.ndarray              # (N, d)
    charges: np.ndarray | None          # (N,)
    e_pred: float
    e_ref: float | None


def write_pec(records: list[PecRecord], path) -> None:
    if not records:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, 0, 0, 0))
        return
    d = records[0].embeddings.shape[1]
    flags = 0
    if records[0].charges is not None:
        flags |= FLAG_CHARGES
    if records[0].e_ref is not None:
        flags |= FLAG_REF_ENERGY
    if records[0].atomic_numbers is not None:
        flags |= FLAG_ATOMIC_NUMBERS
    for r in records:
        present = ((FLAG_CHARGES if r.charges is not None else 0)
                   | (FLAG_REF_ENERGY if r.e_ref is not None else 0)
                   | (FLAG_ATOMIC_NUMBERS if r.atomic_numbers is not None else 0))
        if present != flags or r.embeddings.shape[1] != d:
            raise ValueError(f"record {r.mol_id}: inhomogeneous fields for container")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, d, len(records)))
        for r in records:
            n = r.embeddings.shape[0]
            fh.write(struct.pack("<QI", r.mol_id, n))
            if flags & FLAG_ATOMIC_NUMBERS:
                fh.write(np.ascontiguousarray(r.atomic_numbers, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(r.embeddings, dtype="<f4").tobytes())
            if flags & FLAG_CHARGES:
                fh.write(np.ascontiguousarray(r.charges, dtype="<f4").tobytes())
            fh.write(struct.pack("<d", r.e_pred))
            if flags & FLAG_REF_ENERGY:
                fh.write(struct.pack("<d", r.e_ref))
