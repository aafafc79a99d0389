"""Multi-frame XYZ parsing with key=value metadata in the comment line.

Recognized comment fields: ``charge=<float>`` (total molecular charge,
default 0), ``energy=<float>`` (reference energy, kcal/mol), and
``id=<int>`` (molecule id; defaults to the frame index).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class XyzFormatError(ValueError):
    pass


@dataclass
class Structure:
    symbols: list[str]
    coords: list[list[float]]      # N x 3
    charge: float = 0.0
    energy: float | None = None
    mol_id: int | None = None

    @property
    def n_atoms(self) -> int:
        return len(self.symbols)


def _parse_comment(line: str) -> dict:
    fields = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if sep:
            fields[key.strip().lower()] = value.strip()
    return fields


def parse_xyz(path) -> list[Structure]:
    """Parse all frames of an XYZ file."""
    lines = Path(path).read_text().splitlines()
    structures = []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise XyzFormatError(
                f"{path}:{pos + 1}: expected an atom count, got {lines[pos]!r}")
        if n < 1:
            raise XyzFormatError(f"{path}:{pos + 1}: atom count must be >= 1")
        if pos + 1 >= len(lines):
            raise XyzFormatError(f"{path}:{pos + 2}: missing comment line")
        meta = _parse_comment(lines[pos + 1])
        symbols, coords = [], []
        for i in range(n):
            lineno = pos + 2 + i
            if lineno >= len(lines):
                raise XyzFormatError(f"{path}:{lineno + 1}: truncated frame")
            tokens = lines[lineno].split()
            if len(tokens) < 4:
                raise XyzFormatError(
                    f"{path}:{lineno + 1}: atom line needs symbol and 3 coordinates")
            try:
                xyz = [float(t) for t in tokens[1:4]]
            except ValueError:
                raise XyzFormatError(
                    f"{path}:{lineno + 1}: invalid coordinates") from None
            symbols.append(tokens[0])
            coords.append(xyz)
        structures.append(Structure(
            symbols=symbols, coords=coords,
            charge=float(meta["charge"]) if "charge" in meta else 0.0,
            energy=float(meta["energy"]) if "energy" in meta else None,
            mol_id=int(meta["id"]) if "id" in meta else frame))
        pos += 2 + n
        frame += 1
    if not structures:
        raise XyzFormatError(f"{path}: no structures found")
    return structures
