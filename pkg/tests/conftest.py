import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # tests import shared helpers

from voxtrack import bench


@pytest.fixture(scope="session")
def standard_scene():
    """The pinned desk-scale fixture every acceptance number refers to."""
    spec = bench.load_scene(bench.standard_scene_path())
    return bench.build_scene(spec, seed=0)
