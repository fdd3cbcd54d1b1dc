import shutil
from pathlib import Path

import pytest
from pydantic import ValidationError

from app.src.cli import EXIT_INVALID_INPUT, EXIT_OK, build_parser, main, stage_kwargs
from app.src.schemas.config import ConfigError, StudioConfig, config_keys, load_config
from app.src.studios.avatar_studio.stitcher import GLOSS_DIR
from app.src.training.dataset import CAMERAS_FILE

CONFIG_DIR = Path(__file__).resolve().parents[1] / "app" / "config"

TINY_SYNTHETIC = [
    "synthetic.width=16",
    "synthetic.height=16",
    "synthetic.n_poses=2",
    "synthetic.n_views=2",
    "synthetic.held_out_views=[1]",
]
FAST_TRAINING = [
    "body.face_area_thresh=10.0",
    "body.edge_len_thresh=10.0",
    "splats.hidden_width=4",
    "trainer.iterations=2",
    "trainer.batch=1",
    'trainer.dtype="float64"',
    "densify.start=1",
    "densify.stop=2",
]


def with_overrides(*overrides: str) -> list:
    flags = []
    for override in overrides:
        flags += ["-o", override]
    return flags


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg == StudioConfig()
        assert cfg.trainer.batch == 4
        assert cfg.stitch.omega == 0.05

    @pytest.mark.parametrize("name", ["default.toml", "synthetic.toml"])
    def test_shipped_configs_validate(self, name):
        assert isinstance(load_config(CONFIG_DIR / name), StudioConfig)

    def test_overrides_are_parsed_as_toml_values(self):
        cfg = load_config(overrides=["trainer.iterations=5", "paths.output=runs/x", "synthetic.held_out_views=[0, 2]"])
        assert cfg.trainer.iterations == 5
        assert cfg.paths.output == "runs/x"
        assert cfg.synthetic.held_out_views == [0, 2]

    def test_overrides_win_over_the_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[trainer]\niterations = 10\nbatch = 2\n", encoding="utf-8")
        cfg = load_config(path, ["trainer.iterations=3"])
        assert cfg.trainer.iterations == 3
        assert cfg.trainer.batch == 2

    def test_unknown_override_key_gets_a_suggestion(self):
        with pytest.raises(ConfigError, match="Did you mean 'trainer.iterations'"):
            load_config(overrides=["trainer.iteratons=5"])

    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[render]\ntile = 8\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="render.tile"):
            load_config(path)

    def test_override_without_value(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["trainer.iterations"])

    def test_missing_and_broken_files(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.toml")
        broken = tmp_path / "broken.toml"
        broken.write_text("[trainer\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid TOML"):
            load_config(broken)

    def test_invalid_values_fail_validation(self):
        with pytest.raises(ValidationError):
            load_config(overrides=["trainer.batch=0"])
        with pytest.raises(ValidationError):
            load_config(overrides=["densify.start=100", "densify.stop=50"])

    def test_config_keys_by_section(self):
        keys = config_keys(["stitch"])
        assert keys == ["stitch.omega", "stitch.min_frames", "stitch.fps"]


class TestParser:
    def test_help_lists_the_keys_a_command_reads(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["stitch", "--help"])
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        assert "stitch.omega" in out
        assert "trainer.iterations" not in out

    def test_flags_map_to_stage_arguments(self):
        args = build_parser().parse_args(["stitch", "hello", "you", "--gloss-dir", "g", "--output", "a.json"])
        assert stage_kwargs(args) == {"gloss_dir": "g", "output": "a.json", "tokens": ["hello", "you"]}
        args = build_parser().parse_args(["make-synthetic", "--outdir", "d"])
        assert stage_kwargs(args) == {"output_dir": "d"}

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["dance"])
        assert excinfo.value.code == 2


class TestMain:
    def test_missing_cameras_file_is_invalid_input(self, tiny_scene, tmp_path, capsys):
        root = tmp_path / "scene"
        shutil.copytree(tiny_scene.root, root)
        (root / CAMERAS_FILE).unlink()
        code = main(["train", "--dataset", str(root), *with_overrides(f"paths.journal_dir={tmp_path / 'journal'}")])
        assert code == EXIT_INVALID_INPUT
        assert CAMERAS_FILE in capsys.readouterr().err

    def test_unknown_override_is_invalid_input(self, capsys):
        assert main(["stitch", "hello", "-o", "stitch.omgea=0.1"]) == EXIT_INVALID_INPUT
        assert "stitch.omega" in capsys.readouterr().err

    def test_missing_checkpoint_is_invalid_input(self, tiny_scene, tmp_path):
        code = main(
            [
                "eval",
                "--dataset",
                str(tiny_scene.root),
                "--checkpoint",
                str(tmp_path / "none"),
                *with_overrides(f"paths.journal_dir={tmp_path / 'journal'}"),
            ]
        )
        assert code == EXIT_INVALID_INPUT

    def test_make_synthetic_writes_a_journal(self, tmp_path):
        journal = tmp_path / "journal"
        code = main(
            [
                "make-synthetic",
                "--outdir",
                str(tmp_path / "scene"),
                "--seed",
                "3",
                "--run-id",
                "t1",
                *with_overrides(*TINY_SYNTHETIC, f"paths.journal_dir={journal}"),
            ]
        )
        assert code == EXIT_OK
        assert (tmp_path / "scene" / CAMERAS_FILE).is_file()
        text = (journal / "make-synthetic_t1.log").read_text(encoding="utf-8")
        assert "Starting execution for SceneMaker" in text
        assert "Finished execution for SceneMaker" in text

    @pytest.mark.slow
    def test_every_command_end_to_end(self, tmp_path):
        scene = tmp_path / "scene"
        run = tmp_path / "run"
        common = with_overrides(f"paths.journal_dir={tmp_path / 'journal'}", f"paths.output={run}")
        assert main(["make-synthetic", "--outdir", str(scene), *common, *with_overrides(*TINY_SYNTHETIC)]) == EXIT_OK
        assert main(["train", "--dataset", str(scene), *common, *with_overrides(*FAST_TRAINING)]) == EXIT_OK
        checkpoint = run / "checkpoint"
        assert (checkpoint / "splats.ply").is_file()
        assert main(["eval", "--dataset", str(scene), "--checkpoint", str(checkpoint), *common]) == EXIT_OK
        assert (run / "eval.json").is_file()
        outdir = tmp_path / "renders"
        assert (
            main(["render", "--dataset", str(scene), "--checkpoint", str(checkpoint), "--outdir", str(outdir), *common])
            == EXIT_OK
        )
        assert len(list(outdir.glob("*.png"))) == 4
        animation = tmp_path / "animation.json"
        assert (
            main(["stitch", "hello", "thanks", "--gloss-dir", str(scene / GLOSS_DIR), "--output", str(animation), *common])
            == EXIT_OK
        )
        assert animation.is_file()
        assert main(["fit2d", "--dataset", str(scene), *common, "-o", "fit2d.max_steps=5"]) == EXIT_OK
