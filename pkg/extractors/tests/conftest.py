import pytest
import torch

from backbone_fixtures import TinyAimnetLike, TinyMaceLike

WATER_XYZ = """3
charge=0 energy=-76.41 id=10
O 0.000 0.000 0.117
H 0.000 0.757 -0.469
H 0.000 -0.757 -0.469
5
charge=0 energy=-40.52 id=11
C 0.000 0.000 0.000
H 0.629 0.629 0.629
H -0.629 -0.629 0.629
H -0.629 0.629 -0.629
H 0.629 -0.629 -0.629
"""


@pytest.fixture(scope="session")
def aimnet_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "aimnet_like.jpt"
    torch.jit.script(TinyAimnetLike(dim=256)).save(str(path))
    return path


@pytest.fixture(scope="session")
def mace_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "mace_like.jpt"
    torch.jit.script(TinyMaceLike(dim=64)).save(str(path))
    return path


@pytest.fixture(scope="session")
def eager_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "aimnet_like_eager.pt"
    torch.save(TinyAimnetLike(dim=32), str(path))
    return path


@pytest.fixture
def water_xyz(tmp_path):
    path = tmp_path / "mols.xyz"
    path.write_text(WATER_XYZ)
    return path
