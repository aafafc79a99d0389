import numpy as np
import pytest

from probe.data import MoleculeRecord, collate
from probe.model import ProbeConfig, ProbeModel


TINY_CONFIG = dict(input_dim=8, encoder_widths=(16, 8, 8), heads=2, head_dim=4,
                   embedding_dim=8, classifier_widths=(8, 4))


def random_record(rng, mol_id=0, n_atoms=4, dim=8, with_charges=True,
                  with_ref=True):
    return MoleculeRecord(
        mol_id=mol_id,
        embeddings=rng.normal(size=(n_atoms, dim)),
        e_pred=float(rng.normal()),
        e_ref=float(rng.normal()) if with_ref else None,
        charges=rng.normal(scale=0.1, size=n_atoms) if with_charges else None,
        atomic_numbers=rng.integers(1, 10, size=n_atoms).astype(np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ProbeModel(ProbeConfig(**TINY_CONFIG), seed=7)


@pytest.fixture
def tiny_batch(rng):
    records = [random_record(rng, mol_id=i, n_atoms=n)
               for i, n in enumerate([2, 5, 3])]
    return collate(records)
