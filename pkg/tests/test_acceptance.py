"""Scaled-down ordering run on synthetic phantoms; enabled with SHUFFLEUNET_RUN_SLOW=1."""
import numpy as np
import pytest

from app.core.schemas import ModelConfig, TrainConfig
from app.models import build_model
from app.services.baselines import interpolate
from app.services.data_pipeline import prepare_dataset, prepared_paths
from app.services.metrics_service import evaluate_studies
from app.services.phantoms import write_subjects
from app.services.training_service import infer_study, load_training_data, train
from app.storage.checkpoints import BEST_CHECKPOINT, load_model
from app.storage.volumes import load_dwi_study

PATCH = (32, 32, 32)


@pytest.mark.slow
def test_shuffleunet_beats_trilinear_on_phantoms(tmp_path):
    write_subjects(tmp_path / "raw", subjects=8, shape=(64, 64, 64), seed=0, n_directions=6)
    manifest = prepare_dataset(tmp_path / "raw", tmp_path / "prepared", factor=2, seed=0, counts=(6, 1, 1))

    model_config = ModelConfig(levels=2, base_filters=16, global_residual=True)
    train_config = TrainConfig(
        epochs=10,
        batch_size=4,
        learning_rate=1e-3,
        patches_per_volume=4,
        validation_patches_per_volume=2,
        patch_size=PATCH,
        checkpoint_dir=tmp_path / "checkpoints",
    )
    data = load_training_data(tmp_path / "prepared", train_config)
    train(build_model(model_config), data, train_config, model_config)
    model = load_model(tmp_path / "checkpoints" / BEST_CHECKPOINT, model_config)

    (subject,) = manifest.test
    paths = prepared_paths(tmp_path / "prepared", subject)
    truth = load_dwi_study(paths.hr_path)
    predicted = infer_study(model, load_dwi_study(paths.interp_path), PATCH)
    trilinear = [interpolate("trilinear", v, truth.shape) for v in load_dwi_study(paths.lr_path).volumes]

    ours = {r.metric: r.value for r in evaluate_studies(truth.volumes, predicted.volumes, subject, "shuffleunet")}
    baseline = {r.metric: r.value for r in evaluate_studies(truth.volumes, trilinear, subject, "trilinear")}
    assert ours["ssim"] > baseline["ssim"]
    assert ours["rmse"] < baseline["rmse"]
    assert np.isfinite(list(ours.values())).all()
