import pytest
from src.data.field_io import DatasetReader
from src.services.synthworld import generate_dataset
from tests.helpers import tiny_grid, tiny_world


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "dataset"
    manifest = generate_dataset(tiny_world(), tiny_grid(), root)
    return root, manifest


@pytest.fixture
def tiny_reader(tiny_dataset):
    root, _ = tiny_dataset
    return DatasetReader(root)
