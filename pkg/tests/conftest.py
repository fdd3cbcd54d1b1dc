from pathlib import Path
from typing import Callable, List, Optional, Sequence

import pytest
import torch

from app.src.models.body_model import SkinnedTemplate
from app.src.schemas.base import Segment
from app.src.schemas.config import StudioConfig, SyntheticConfig
from app.src.studios.avatar_studio.synthetic import SyntheticScene, toy_rig, write_synthetic_scene


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


def make_template(
    vertices: Sequence[Sequence[float]],
    faces: Sequence[Sequence[int]],
    joints: Sequence[Sequence[float]],
    parents: List[int],
    weights: Sequence[Sequence[float]],
    segments: Optional[List[Segment]] = None,
    limits: Optional[torch.Tensor] = None,
    joint_segments: Optional[List[Segment]] = None,
) -> SkinnedTemplate:
    dtype = torch.float64
    n_v = len(vertices)
    n_j = len(joints)
    segments = segments or [Segment.BODY] * n_v
    template = SkinnedTemplate(
        rest_vertices=torch.tensor(vertices, dtype=dtype),
        faces=torch.tensor(faces, dtype=torch.long),
        joints=torch.tensor(joints, dtype=dtype),
        parents=list(parents),
        joint_names=[f"joint_{j}" for j in range(n_j)],
        joint_segments=joint_segments or [Segment.BODY] * n_j,
        skin_weights=torch.tensor(weights, dtype=dtype),
        shape_basis=torch.zeros(n_v, 3, 0, dtype=dtype),
        expression_basis=torch.zeros(n_v, 3, 0, dtype=dtype),
        segment=torch.tensor([s.code for s in segments], dtype=torch.long),
        joint_limits=limits if limits is not None else torch.tensor([[[-3.0, 3.0]] * 3] * n_j, dtype=dtype),
        locked=torch.zeros(n_j, 3, dtype=torch.bool),
        n_original_vertices=n_v,
        name="test",
    )
    template.validate()
    return template


@pytest.fixture
def template_factory() -> Callable[..., SkinnedTemplate]:
    return make_template


@pytest.fixture
def triangle_rig() -> SkinnedTemplate:
    """One counter-clockwise triangle in z = 0, normal +z, on a single joint."""
    return make_template(
        vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        faces=[[0, 1, 2]],
        joints=[[0.0, 0.0, 0.0]],
        parents=[-1],
        weights=[[1.0], [1.0], [1.0]],
    )


@pytest.fixture
def elbow_rig() -> SkinnedTemplate:
    """Shoulder at (-1, 0, 0), elbow at the origin, forearm vertices on the elbow."""
    return make_template(
        vertices=[[1.0, 0.0, 0.0], [1.0, 0.0, 0.1], [1.1, 0.0, 0.0]],
        faces=[[0, 1, 2]],
        joints=[[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
        parents=[-1, 0],
        weights=[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
    )


@pytest.fixture(scope="session")
def small_toy_rig() -> SkinnedTemplate:
    return toy_rig(dtype=torch.float64, sides=6, cap_rings=1, body_rings=2)


TINY_SCENE = SyntheticConfig(width=16, height=16, n_poses=2, n_views=2, held_out_views=[1])


def tiny_config(output: Path, **sections) -> StudioConfig:
    """Fast settings for the tiny scene: no upsampling, float64, a handful of iterations."""
    data = {
        "paths": {"output": str(output), "journal_dir": None},
        "body": {"face_area_thresh": 10.0, "edge_len_thresh": 10.0},
        "splats": {"hidden_width": 4},
        "trainer": {"iterations": 3, "batch": 2, "dtype": "float64", "log_interval": 1, "lr_pose": 0.0},
        "densify": {"start": 1, "interval": 2, "stop": 3},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return StudioConfig.model_validate(data)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory) -> SyntheticScene:
    """A 2-pose, 2-view, 16x16 synthetic dataset; view 1 is held out."""
    return write_synthetic_scene(tmp_path_factory.mktemp("tiny_scene"), TINY_SCENE)


@pytest.fixture
def config_factory(tmp_path) -> Callable[..., StudioConfig]:
    return lambda **sections: tiny_config(tmp_path / "run", **sections)
