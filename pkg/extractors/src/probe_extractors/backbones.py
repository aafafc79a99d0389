"""Frozen-backbone loading and the per-structure inference call.

Checkpoints are TorchScript archives or pickled torch modules. The adapter
contract: ``forward(numbers int64[N], coords float32[N,3], charge float32
scalar) -> dict of tensors`` containing at least an ``energy`` scalar. Per-
atom embeddings are read from the output dict under a user-selected key,
or captured with a forward hook on a named submodule (eager checkpoints
only; TorchScript does not support hooks). Charges are read from a
``charges`` entry when the backbone exposes one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al",
    "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr",
    "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm",
    "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn")

ATOMIC_NUMBERS = {s: i + 1 for i, s in enumerate(_SYMBOLS)}

# element coverage per backbone family
SUPPORTED_ELEMENTS = {
    "aimnet2-like": frozenset(
        ATOMIC_NUMBERS[s] for s in
        ("H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "As", "Se", "Br", "I")),
    "mace-like": frozenset(
        ATOMIC_NUMBERS[s] for s in
        ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")),
}

BACKBONE_KINDS = tuple(SUPPORTED_ELEMENTS)


class BackboneError(RuntimeError):
    pass


class MissingDependencyError(BackboneError):
    pass


class UnsupportedElementError(BackboneError):
    pass


def _import_torch():
    try:
        import torch
    except ModuleNotFoundError:
        raise MissingDependencyError(
            "extraction needs the 'torch' package; install it with "
            "'pip install torch'") from None
    return torch


@dataclass
class BackboneAdapter:
    kind: str
    module: object
    embed_key: str
    hook_path: str | None
    scripted: bool

    @property
    def supported_elements(self) -> frozenset:
        return SUPPORTED_ELEMENTS[self.kind]


def load_backbone(kind: str, checkpoint, embed_key: str = "embeddings",
                  hook_path: str | None = None) -> BackboneAdapter:
    """Load a frozen checkpoint (TorchScript first, pickled module second)."""
    if kind not in SUPPORTED_ELEMENTS:
        raise BackboneError(
            f"unknown backbone kind {kind!r}; expected one of {BACKBONE_KINDS}")
    torch = _import_torch()
    scripted = True
    try:
        module = torch.jit.load(str(checkpoint), map_location="cpu")
    except RuntimeError:
        scripted = False
        try:
            module = torch.load(str(checkpoint), map_location="cpu",
                                weights_only=False)
        except ModuleNotFoundError as exc:
            raise MissingDependencyError(
                f"checkpoint {checkpoint} requires the '{exc.name}' package; "
                f"install it to load this backbone") from None
    if scripted and hook_path:
        raise BackboneError(
            "TorchScript checkpoints do not support forward hooks; select the "
            "embedding via an output key (--embed-key) instead")
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return BackboneAdapter(kind=kind, module=module, embed_key=embed_key,
                           hook_path=hook_path, scripted=scripted)


def _resolve_submodule(module, path: str):
    node = module
    for part in path.split("."):
        if not hasattr(node, part):
            raise BackboneError(f"no submodule {path!r} in the checkpoint")
        node = getattr(node, part)
    return node


def symbols_to_numbers(symbols: list[str]) -> np.ndarray:
    numbers = []
    for s in symbols:
        if s not in ATOMIC_NUMBERS:
            raise UnsupportedElementError(f"unknown element symbol {s!r}")
        numbers.append(ATOMIC_NUMBERS[s])
    return np.array(numbers, dtype=np.int64)


def run_backbone(adapter: BackboneAdapter, numbers: np.ndarray,
                 coords: np.ndarray, charge: float):
    """One frozen forward pass.

    Returns (embeddings (N, d) float32, charges (N,) float32 or None,
    energy float).
    """
    torch = _import_torch()
    unsupported = sorted(set(int(z) for z in numbers) - set(adapter.supported_elements))
    if unsupported:
        raise UnsupportedElementError(
            f"elements {unsupported} outside {adapter.kind} support")
    t_numbers = torch.from_numpy(np.ascontiguousarray(numbers))
    t_coords = torch.from_numpy(np.ascontiguousarray(coords, dtype=np.float32))
    t_charge = torch.tensor(float(charge), dtype=torch.float32)

    captured = {}
    handle = None
    if adapter.hook_path:
        target = _resolve_submodule(adapter.module, adapter.hook_path)
        handle = target.register_forward_hook(
            lambda mod, inp, out: captured.__setitem__("value", out))
    try:
        with torch.no_grad():
            out = adapter.module(t_numbers, t_coords, t_charge)
    finally:
        if handle is not None:
            handle.remove()

    if not isinstance(out, dict) or "energy" not in out:
        raise BackboneError("backbone output must be a dict with an 'energy' entry")
    if adapter.hook_path:
        if "value" not in captured:
            raise BackboneError(f"hook on {adapter.hook_path!r} captured nothing")
        emb = captured["value"]
    else:
        if adapter.embed_key not in out:
            raise BackboneError(
                f"backbone output has no {adapter.embed_key!r} entry; available: "
                f"{sorted(out)} (pick one with --embed-key)")
        emb = out[adapter.embed_key]
    emb = emb.detach().cpu().to(torch.float32).numpy()
    if emb.ndim != 2 or emb.shape[0] != len(numbers):
        raise BackboneError(
            f"embedding tensor has shape {tuple(emb.shape)}, expected "
            f"({len(numbers)}, d)")
    charges = None
    if adapter.kind == "aimnet2-like" and "charges" in out:
        charges = out["charges"].detach().cpu().to(torch.float32).numpy()
    energy = float(out["energy"].detach().cpu().item())
    return emb, charges, energy
