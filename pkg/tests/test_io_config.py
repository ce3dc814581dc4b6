import numpy as np
import pytest

from dcinv import io
from dcinv.completion import CompletionEntry, complete_all
from dcinv.config import ConfigError, load_config, spec_from_sources
from dcinv.harness import ExperimentSpec, generate_data
from dcinv.rng import RngHub


def small_dataset():
    spec = ExperimentSpec(n=8, p=2, noise_pct=5.0, missing_pct=25.0, seed=5)
    return spec, generate_data(spec, RngHub(spec.seed))


class TestRaster:
    def test_toy_format(self, tmp_path):
        path = tmp_path / "model.txt"
        io.emit_model_raster(np.array([[0.1, 1.0], [0.5, 2.0]]), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "2 2 2"
        assert len(lines) == 5
        assert float(lines[1]) == pytest.approx(np.log(0.1))

    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        sigma = np.exp(rng.standard_normal((5, 4, 3)))
        path = tmp_path / "model.txt"
        io.emit_model_raster(sigma, path)
        back = io.read_model_raster(path)
        assert back.shape == (5, 4, 3)
        assert np.array_equal(back, sigma)  # 17 significant digits round-trip

    def test_rejects_bad_values(self, tmp_path):
        with pytest.raises(ValueError):
            io.emit_model_raster(np.array([[1.0, -2.0]]), tmp_path / "x.txt")


class TestDatasetFiles:
    def test_dataset_roundtrip(self, tmp_path):
        spec, ds = small_dataset()
        path = tmp_path / "dataset.npz"
        io.save_dataset(path, spec.echo(), ds.experiments, ds.noisy_full,
                        ds.mask, ds.sigma_true_coarse)
        echo, ex, noisy, mask, sigma = io.load_dataset(path)
        assert echo["n"] == spec.n
        assert np.array_equal(noisy, ds.noisy_full)
        assert np.array_equal(mask, ds.mask)
        assert np.array_equal(sigma, ds.sigma_true_coarse)
        assert ex.n_experiments == ds.experiments.n_experiments
        for i in range(ex.n_experiments):
            assert np.array_equal(ex.receivers[i], ds.experiments.receivers[i])
            assert np.array_equal(ex.data[i], ds.experiments.data[i])
        assert ex.sd == ds.experiments.sd

    def test_completed_roundtrip(self, tmp_path):
        spec, ds = small_dataset()
        result = complete_all(ds.experiments, "gradient")
        path = tmp_path / "completed.npz"
        io.save_completed(path, result.experiments, result.rho_factor)
        ex, factor = io.load_completed(path)
        assert factor == result.rho_factor
        assert ex.completed_fraction == result.experiments.completed_fraction
        assert np.array_equal(ex.data_matrix(), result.experiments.data_matrix())

    def test_completion_csv_roundtrip(self, tmp_path):
        entries = [
            CompletionEntry(0, "top", np.zeros(3), 0.125, 2.5, 3.0, False),
            CompletionEntry(1, "bottom", np.zeros(3), 13.25, 0.5, 0.75, True),
        ]
        path = tmp_path / "completion.csv"
        io.write_completion_csv(entries, path)
        rows = io.read_completion_csv(path)
        assert rows[0] == {"exp_id": 0, "lambda": 0.125, "residual": 2.5,
                           "eta": 3.0, "flagged": False}
        assert rows[1]["flagged"] is True

    def test_misfit_table_roundtrip(self, tmp_path):
        rows = [(-1, 0, 26740.94), (0, 30, 5401.139999999)]
        path = tmp_path / "misfit.csv"
        io.write_misfit_table(rows, path)
        assert io.read_misfit_table(path) == rows


CONFIG_TEXT = """
[experiment]
dim = 2
grid_n = 21
sources_p = 4
model = two-blobs-2d
noise_pct = 5.0
missing_pct = 30.0
seed = 9

[completion]
kind = laplacian
patch_mode = hull

[inversion]
variant = ii
stop = b
kappa = 0.85
rho_factor = 12.0

[solver]
preconditioner = cholesky
"""


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(CONFIG_TEXT)
        spec = spec_from_sources(path)
        assert spec.n == 21
        assert spec.p == 4
        assert spec.completion == "laplacian"
        assert spec.variant == "ii"
        assert spec.stop == "b"
        assert spec.kappa == 0.85
        assert spec.rho_factor == 12.0
        assert spec.preconditioner == "cholesky"

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(CONFIG_TEXT)
        spec = spec_from_sources(path, {"seed": 42, "missing_pct": 50.0})
        assert spec.seed == 42
        assert spec.missing_pct == 50.0
        assert spec.n == 21  # untouched keys stay

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[experiment]\nwarp_drive = on\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            spec_from_sources(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[experiment]\ngrid_n = tiny\n")
        with pytest.raises(ConfigError, match="bad value"):
            spec_from_sources(path)

    def test_invalid_spec_becomes_config_error(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[experiment]\nnoise_pct = 150\n")
        with pytest.raises(ConfigError):
            spec_from_sources(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/run.cfg")

    def test_comments_and_defaults(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[experiment]\nseed = 3  # lucky\n")
        spec = spec_from_sources(path)
        assert spec.seed == 3
        assert spec.n == ExperimentSpec().n


class TestShippedConfigs:
    def test_example_configs_parse(self):
        from pathlib import Path

        root = Path(__file__).resolve().parent.parent / "examples-configs"
        specs = {p.name: spec_from_sources(p) for p in sorted(root.glob("*.cfg"))}
        assert len(specs) >= 4
        # the blob-contact examples complete with the gradient penalty, the
        # smooth-boundary one with the Laplacian penalty
        assert specs["example1_desk.cfg"].completion == "gradient"
        assert specs["example1_desk.cfg"].blob_contact is True
        assert specs["example2_desk.cfg"].missing_pct == 50.0
        assert specs["example3_desk.cfg"].completion == "laplacian"
        assert specs["example3_desk.cfg"].blob_contact is False
        assert specs["example4_desk_3d.cfg"].dim == 3
        assert specs["example4_desk_3d.cfg"].missing_pct == 50.0
        assert specs["example4_desk_3d.cfg"].variant == "ii"
