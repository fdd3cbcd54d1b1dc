import json
import shutil
import struct

import pytest
import torch

from app.src.models.avatar import AvatarModel
from app.src.models.checkpoint import (
    META_FILE,
    RIG_FILE,
    WEIGHTS_FILE,
    WEIGHTS_MAGIC,
    CheckpointError,
    load_checkpoint,
    read_weights,
    save_checkpoint,
)
from app.src.rendering.rasterizer import RenderSettings
from app.src.schemas.base import CheckpointMeta, DatasetSplit
from app.src.studios.avatar_studio.trainer import render_frame
from app.src.training.dataset import CAMERAS_FILE, DatasetError, frame_path, load_dataset


@pytest.fixture
def dataset(tiny_scene):
    return load_dataset(tiny_scene.root, dtype=torch.float64)


@pytest.fixture
def trained_looking_avatar(dataset, config_factory):
    cfg = config_factory()
    avatar = AvatarModel.create(dataset.rig, cfg.splats, cfg.body)
    gen = torch.Generator().manual_seed(0)
    splats = avatar.splats
    with torch.no_grad():
        splats.opacity.copy_(torch.randn(splats.capacity, generator=gen, dtype=torch.float64))
        splats.sh_dc.copy_(0.5 * torch.randn(splats.sh_dc.shape, generator=gen, dtype=torch.float64))
        splats.log_scale.add_(0.1 * torch.randn(splats.log_scale.shape, generator=gen, dtype=torch.float64))
        avatar.displacement.copy_(0.001 * torch.randn(avatar.displacement.shape, generator=gen, dtype=torch.float64))
    return avatar, cfg


def meta_for(avatar, cfg) -> CheckpointMeta:
    return CheckpointMeta(
        iteration=7,
        active_sh_degree=1,
        n_splats=avatar.splats.n_active,
        dtype="float64",
        config=cfg.model_dump(mode="json"),
    )


class TestCheckpoint:
    def test_reload_renders_identically(self, tmp_path, dataset, trained_looking_avatar):
        avatar, cfg = trained_looking_avatar
        frame = dataset.train_frames[0]
        settings = RenderSettings.from_config(cfg.render)
        with torch.no_grad():
            before = render_frame(avatar, frame.pose, frame.camera, dataset.background, settings, 1).image

        path = save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg), extra={"note": torch.ones(2)})
        checkpoint = load_checkpoint(path)
        with torch.no_grad():
            after = render_frame(checkpoint.avatar, frame.pose, frame.camera, dataset.background, settings, 1).image

        assert torch.equal(before, after)
        assert checkpoint.meta.iteration == 7
        assert checkpoint.meta.active_sh_degree == 1
        assert checkpoint.config.trainer.dtype == "float64"
        assert torch.equal(checkpoint.extra["note"], torch.ones(2))

    def test_deactivated_splats_are_dropped(self, tmp_path, trained_looking_avatar):
        avatar, cfg = trained_looking_avatar
        avatar.splats.active[0] = False
        checkpoint = load_checkpoint(save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg)))
        assert checkpoint.avatar.splats.capacity == avatar.splats.n_active
        assert checkpoint.meta.n_splats == avatar.splats.n_active

    def test_truncated_weights_name_the_section(self, tmp_path, trained_looking_avatar):
        avatar, cfg = trained_looking_avatar
        path = save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg))
        _, header = read_weights(path / WEIGHTS_FILE)
        last = header["sections"][-1]["name"]
        blob = (path / WEIGHTS_FILE).read_bytes()
        (path / WEIGHTS_FILE).write_bytes(blob[:-4])
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.section == last
        assert last in str(excinfo.value)

    def test_bad_magic(self, tmp_path, trained_looking_avatar):
        avatar, cfg = trained_looking_avatar
        path = save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg))
        blob = (path / WEIGHTS_FILE).read_bytes()
        (path / WEIGHTS_FILE).write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    @pytest.mark.parametrize("key", ["offset", "dtype", "shape"])
    def test_incomplete_section_entry_is_a_header_error(self, tmp_path, trained_looking_avatar, key):
        avatar, cfg = trained_looking_avatar
        path = save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg))
        blob = (path / WEIGHTS_FILE).read_bytes()
        (header_len,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8 : 8 + header_len])
        del header["sections"][0][key]
        raw = json.dumps(header).encode("utf-8")
        (path / WEIGHTS_FILE).write_bytes(WEIGHTS_MAGIC + struct.pack("<I", len(raw)) + raw + blob[8 + header_len :])
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.section == "header"

    @pytest.mark.parametrize("missing", [META_FILE, RIG_FILE, WEIGHTS_FILE])
    def test_missing_file_is_named(self, tmp_path, trained_looking_avatar, missing):
        avatar, cfg = trained_looking_avatar
        path = save_checkpoint(tmp_path / "ckpt", avatar, meta_for(avatar, cfg))
        (path / missing).unlink()
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.section == missing

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError, match="does not exist"):
            load_checkpoint(tmp_path / "nowhere")


class TestDataset:
    def test_frames_and_splits(self, tiny_scene, dataset):
        assert len(dataset.frames) == tiny_scene.n_frames == 4
        assert len(dataset.train_frames) == 2
        assert len(dataset.test_frames) == 2
        assert all(f.split == DatasetSplit.TEST for f in dataset.test_frames)
        assert dataset.frames[0].image.shape == (16, 16, 3)
        # Frames 0 and 1 are two views of the same instant.
        assert dataset.frames[0].frame_id == dataset.frames[1].frame_id == 0
        assert dataset.frames[0].pose is dataset.frames[1].pose
        assert dataset.keypoints is not None

    def test_images_can_be_skipped(self, tiny_scene):
        dataset = load_dataset(tiny_scene.root, dtype=torch.float64, load_images=False)
        assert dataset.frames[0].image.numel() == 0

    def test_missing_cameras_file_is_named(self, tiny_scene, tmp_path):
        root = tmp_path / "scene"
        shutil.copytree(tiny_scene.root, root)
        (root / CAMERAS_FILE).unlink()
        with pytest.raises(DatasetError) as excinfo:
            load_dataset(root)
        assert excinfo.value.path.name == CAMERAS_FILE

    def test_missing_frame_is_named(self, tiny_scene, tmp_path):
        root = tmp_path / "scene"
        shutil.copytree(tiny_scene.root, root)
        frame_path(root, 2).unlink()
        with pytest.raises(DatasetError, match="0002.png"):
            load_dataset(root)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="does not exist"):
            load_dataset(tmp_path / "nowhere")
