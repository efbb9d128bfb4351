import json

import numpy as np
import pytest

from volsr.cli import main as cli_main
from volsr.harness import (
    EvaluationConfig,
    ExperimentConfig,
    HarnessError,
    PhantomSetConfig,
    ScheduleConfig,
    checkpoint_paths,
    cmd_corrupt,
    cmd_evaluate,
    cmd_generate,
    cmd_reconstruct,
    cmd_train,
    load_split,
    run_pipeline,
)
from volsr.autoencoder import AutoencoderConfig
from volsr.diffusion import DenoiserConfig, DiffusionTrainConfig
from volsr.inversion import InversionConfig
from volsr.metrics import evaluate_cohort
from volsr.volume import load_volume


def tiny_config(tmp_path, seed=3, corruptions=(("k2", {"kind": "slice_mask", "axis": 0, "k": 2}),)):
    return ExperimentConfig(
        output_dir=str(tmp_path / "run"),
        seed=seed,
        phantoms=PhantomSetConfig(shape=(16, 16, 16), count_range=(1, 3), smooth_sigma=0.8, train_count=6, test_count=3),
        autoencoder=AutoencoderConfig(volume_shape=(16, 16, 16), base_channels=2, epochs=3, batch_size=4),
        schedule=ScheduleConfig(t_train=50),
        diffusion=DiffusionTrainConfig(
            denoiser=DenoiserConfig(latent_shape=(2, 2, 2), channels=4, blocks=1, hidden_dim=8),
            steps=30,
            batch_size=4,
        ),
        corruptions=corruptions,
        inversion_ldm=InversionConfig(mode="ldm", steps=2, t_infer=2, lr=0.05),
        inversion_decoder=InversionConfig(mode="decoder", steps=2, lr=0.05),
        mean_latent_samples=4,
        evaluation=EvaluationConfig(region=12),
    )


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One fully executed tiny pipeline shared by the read-only tests."""
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config(tmp)
    run_pipeline(cfg)
    return cfg


class TestConfig:
    def test_dict_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_from_file(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_file(path) == cfg

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{oops")
        with pytest.raises(HarnessError, match="JSON"):
            ExperimentConfig.from_file(path)

    def test_hash_changes_with_seed(self, tmp_path):
        a = tiny_config(tmp_path, seed=1)
        b = tiny_config(tmp_path, seed=2)
        assert a.config_hash() != b.config_hash()


class TestGenerate:
    def test_counts_and_manifest(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        train = list((cfg.root / "data" / "train").glob("*.vol"))
        test = list((cfg.root / "data" / "test").glob("*.vol"))
        assert len(train) == 6 and len(test) == 3
        manifest = json.loads((cfg.root / "data" / "manifest.json").read_text())
        assert len(manifest["files"]) == 9
        assert manifest["seed"] == cfg.seed
        assert manifest["config_hash"] == cfg.config_hash()

    def test_rerun_same_seed_identical_hashes(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        first = json.loads((cfg.root / "data" / "manifest.json").read_text())["files"]
        cmd_generate(cfg, force=True)
        second = json.loads((cfg.root / "data" / "manifest.json").read_text())["files"]
        assert first == second

    def test_existing_dir_requires_force(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        with pytest.raises(HarnessError, match="--force"):
            cmd_generate(cfg)
        cmd_generate(cfg, force=True)


class TestTrain:
    def test_ldm_requires_ae_checkpoint(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        with pytest.raises(HarnessError, match="autoencoder checkpoint missing"):
            cmd_train(cfg, "ldm")

    def test_unknown_stage(self, tmp_path):
        cfg = tiny_config(tmp_path)
        with pytest.raises(HarnessError, match="unknown training stage"):
            cmd_train(cfg, "vae")

    def test_loss_csv_rows_match_epochs(self, pipeline_dir):
        cfg = pipeline_dir
        csv = (cfg.root / "checkpoints" / "ae_loss.csv").read_text().strip().splitlines()
        assert len(csv) - 1 == cfg.autoencoder.epochs

    def test_same_seed_identical_checkpoints(self, tmp_path):
        from volsr.autoencoder import load_autoencoder

        cfg_a = tiny_config(tmp_path / "a")
        cfg_b = tiny_config(tmp_path / "b")
        for cfg in (cfg_a, cfg_b):
            cmd_generate(cfg)
            cmd_train(cfg, "ae")
        ae_a = load_autoencoder(checkpoint_paths(cfg_a)[0])
        ae_b = load_autoencoder(checkpoint_paths(cfg_b)[0])
        for key, val in ae_a.state_dict().items():
            np.testing.assert_array_equal(val.numpy(), ae_b.state_dict()[key].numpy())


class TestCorruptReconstruct:
    def test_corrupted_inputs_match_operator(self, pipeline_dir):
        cfg = pipeline_dir
        truths = load_split(cfg, "test")
        corrupted = load_volume(cfg.root / "corrupted" / "k2" / "case_000.vol")
        expected = truths[0].data * (np.arange(16) % 2 == 0)[:, None, None]
        np.testing.assert_array_equal(corrupted.data, expected)

    def test_cubic_ignores_checkpoints(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        cmd_corrupt(cfg)
        paths = cmd_reconstruct(cfg, "cubic")  # no checkpoints exist
        assert len(paths) == 3

    def test_missing_corrupted_input(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        with pytest.raises(HarnessError, match="corrupted input missing"):
            cmd_reconstruct(cfg, "cubic")

    def test_trace_rows_match_steps(self, pipeline_dir):
        cfg = pipeline_dir
        trace = (cfg.root / "recon" / "k2" / "ldm" / "case_000_trace.csv").read_text().strip().splitlines()
        assert len(trace) - 1 == cfg.inversion_ldm.steps

    def test_run_descriptor_embeds_seed_and_hash(self, pipeline_dir):
        cfg = pipeline_dir
        desc = json.loads((cfg.root / "recon" / "k2" / "decoder" / "case_001_run.json").read_text())
        assert desc["config_hash"] == cfg.config_hash()
        assert desc["seed"] == cfg.seed + 200000 + 1
        assert desc["method"] == "decoder"

    def test_rerun_identical_bundle(self, pipeline_dir):
        cfg = pipeline_dir
        path = cfg.root / "recon" / "k2" / "ldm" / "case_000.vol"
        before = path.read_bytes()
        cmd_reconstruct(cfg, "ldm", case=0, corruption="k2")
        assert path.read_bytes() == before

    def test_unknown_method(self, tmp_path):
        cfg = tiny_config(tmp_path)
        with pytest.raises(HarnessError, match="unknown method"):
            cmd_reconstruct(cfg, "bicubic")


class TestEvaluate:
    def test_missing_reconstructions_listed(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cmd_generate(cfg)
        with pytest.raises(HarnessError, match="missing"):
            cmd_evaluate(cfg)

    def test_tables_match_evaluate_cohort(self, pipeline_dir):
        cfg = pipeline_dir
        truths = load_split(cfg, "test")
        rows = (cfg.root / "reports" / "table_k2.csv").read_text().strip().splitlines()
        assert len(rows) - 1 == len(cfg.evaluation.methods)
        for line in rows[1:]:
            fields = line.split(",")
            method = fields[1]
            recons = [load_volume(cfg.root / "recon" / "k2" / method / f"case_{i:03d}.vol") for i in range(3)]
            rep = evaluate_cohort(truths, recons, region=cfg.evaluation.region, method=method, corruption="k2")
            assert float(fields[3]) == rep.ssim_mean
            assert float(fields[5]) == rep.psnr_mean

    def test_renders_exist_per_case(self, pipeline_dir):
        cfg = pipeline_dir
        for i in range(3):
            assert (cfg.root / "reports" / "renders" / "k2" / f"case_{i:03d}.png").exists()

    def test_two_corruption_levels_two_tables(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            corruptions=(
                ("k2", {"kind": "slice_mask", "axis": 0, "k": 2}),
                ("k4", {"kind": "slice_mask", "axis": 0, "k": 4}),
            ),
        )
        run_pipeline(cfg)
        for name in ("k2", "k4"):
            table = cfg.root / "reports" / f"table_{name}.txt"
            assert table.exists()
            body = [l for l in table.read_text().splitlines() if not l.startswith("#")]
            assert len(body) == len(cfg.evaluation.methods)


class TestEndToEndDeterminism:
    def test_pipeline_twice_byte_identical_tables(self, tmp_path):
        cfg_a = tiny_config(tmp_path / "a", seed=5)
        cfg_b = tiny_config(tmp_path / "b", seed=5)
        run_pipeline(cfg_a)
        run_pipeline(cfg_b)
        for name in ("table_k2.txt", "table_k2.csv", "cases_k2.csv"):
            a = (cfg_a.root / "reports" / name).read_bytes()
            b = (cfg_b.root / "reports" / name).read_bytes()
            assert a == b, name


class TestCli:
    def _write_config(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        return cfg, path

    def test_full_verbs(self, tmp_path, capsys):
        cfg, path = self._write_config(tmp_path)
        assert cli_main(["generate", "--config", str(path)]) == 0
        assert cli_main(["train", "--config", str(path), "--stage", "ae"]) == 0
        assert cli_main(["train", "--config", str(path), "--stage", "ldm"]) == 0
        assert cli_main(["corrupt", "--config", str(path)]) == 0
        for method in ("cubic", "decoder", "ldm"):
            assert cli_main(["reconstruct", "--config", str(path), "--method", method]) == 0
        assert cli_main(["evaluate", "--config", str(path)]) == 0
        assert (cfg.root / "reports" / "table_k2.txt").exists()

    def test_error_exit_code_and_message(self, tmp_path, capsys):
        cfg, path = self._write_config(tmp_path)
        assert cli_main(["evaluate", "--config", str(path)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli_main(["generate", "--config", str(tmp_path / "nope.json")])
        assert code == 2

    def test_seed_override(self, tmp_path):
        cfg, path = self._write_config(tmp_path)
        assert cli_main(["generate", "--config", str(path), "--seed", "9"]) == 0
        manifest = json.loads((cfg.root / "data" / "manifest.json").read_text())
        assert manifest["seed"] == 9
