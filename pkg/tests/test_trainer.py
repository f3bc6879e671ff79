import os

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from teed import train_and_evaluate, trainer
from teed.architecture import build, predict_maps
from teed.benchmark import evaluate
from teed.checkpoint import load_checkpoint, load_training_state, save_checkpoint
from teed.data import DatasetManifest, batches
from teed.optimizer import init_state
from teed.trainer import checkpoint_path, predict, train, train_step
from teed.utils import utils
from teed.utils.config import AdamConfig, AugmentConfig, ModelConfig, RunConfig
from teed.utils.errors import ConfigError, ContractError, DataError, NonFiniteError
from teed.utils.image_io import Converter, quantize

from conftest import ellipse_sample, rectangle_sample, write_png

# no flips, turns, rotation or gamma: crops only
STILL = dict(hflip_p=0.0, rot90=False, max_angle=0.0, gamma_range=(1.0, 1.0))


def run_config(root, out, **kwargs) -> RunConfig:
    settings = dict(train_root=root, epochs=1, batch_size=2, checkpoint_dir=os.path.join(out, "ckpt"),
                    output_dir=os.path.join(out, "logs"), augment=AugmentConfig(crop_size=32))
    settings.update(kwargs)
    return RunConfig(**settings)

def read_bytes(fn):
    with open(fn, "rb") as f:
        return f.read()


class TestTraining:

    def test_step_updates_parameters(self, make_dataset):
        manifest = DatasetManifest.from_directory(make_dataset(n=2, size=32))
        batch = next(batches(manifest, 2, config=AugmentConfig(crop_size=32)))
        params = build(seed=0)
        new, state, terms = train_step(params, init_state(params), batch)
        assert state.step == 1
        assert set(terms) == {"dloss", "wce1", "wce2", "wce3", "trcg"}
        assert terms["dloss"] == pytest.approx(terms["wce1"] + terms["wce2"] + terms["wce3"] + terms["trcg"])
        assert not new.equals(params)

    def test_loss_decreases_on_one_image(self, make_dataset, tmp_path):
        root = make_dataset(n=1, size=64)
        config = run_config(root, str(tmp_path), epochs=40, batch_size=1,
                            adam=AdamConfig(decay_epoch=100), augment=AugmentConfig(crop_size=64, **STILL))
        result = train(config, quiet=True)
        losses = result.history["dloss"].values
        assert len(losses) == 40
        assert losses[-5:].mean() < losses[:5].mean()
        assert losses[-1] < losses[0]

    def test_outputs(self, make_dataset, tmp_path):
        config = run_config(make_dataset(n=4), str(tmp_path), epochs=2)
        result = train(config, quiet=True)
        assert result.checkpoints == [checkpoint_path(config, 0), checkpoint_path(config, 1)]
        assert [os.path.basename(c) for c in result.checkpoints] == ["epoch_1.ckpt", "epoch_2.ckpt"]
        log = pd.read_csv(result.loss_log)
        assert list(log.columns) == utils.LOSS_LOG_COLUMNS
        assert log["iter"].tolist() == [1, 2, 3, 4]
        assert log["epoch"].tolist() == [0, 0, 1, 1]
        assert (log["lr"] == 8e-4).all()

        params, state, meta = load_training_state(result.checkpoints[-1])
        assert params.equals(result.params)
        assert state.step == 4
        assert meta["epoch"] == 1 and meta["step"] == 4
        assert meta["config"]["batch_size"] == 2

    def test_max_steps(self, make_dataset, tmp_path):
        result = train(run_config(make_dataset(n=4), str(tmp_path), epochs=3), max_steps=1, quiet=True)
        assert result.state.step == 1
        assert len(result.checkpoints) == 1 and len(result.history) == 1

    def test_deterministic_runs_are_bit_identical(self, make_dataset, tmp_path):
        config = run_config(make_dataset(n=4), str(tmp_path), epochs=5)
        train(config, deterministic=True, quiet=True)
        first = [read_bytes(checkpoint_path(config, e)) for e in range(5)]
        first_log = read_bytes(os.path.join(config.output_dir, trainer.LOSS_LOG))
        result = train(config, deterministic=True, quiet=True)
        assert result.state.step == 10
        assert [read_bytes(checkpoint_path(config, e)) for e in range(5)] == first
        assert read_bytes(os.path.join(config.output_dir, trainer.LOSS_LOG)) == first_log

    def test_resume_matches_uninterrupted_run(self, make_dataset, tmp_path):
        root = make_dataset(n=2)
        full = train(run_config(root, str(tmp_path / "full"), epochs=3), deterministic=True, quiet=True)

        interrupted = run_config(root, str(tmp_path / "part"), epochs=2)
        train(interrupted, deterministic=True, quiet=True)
        resumed = train(run_config(root, str(tmp_path / "part"), epochs=3), resume=checkpoint_path(interrupted, 1),
                        deterministic=True, quiet=True)

        assert resumed.params.equals(full.params)
        assert resumed.checkpoints == [checkpoint_path(interrupted, 2)]
        assert resumed.history["iter"].tolist() == full.history["iter"].tolist() == [1, 2, 3]
        np.testing.assert_allclose(resumed.history["dloss"], full.history["dloss"], rtol=1e-12)

    def test_resume_needs_optimizer_state(self, make_dataset, tmp_path):
        fn = str(tmp_path / "weights.ckpt")
        save_checkpoint(build(seed=0), fn)
        with pytest.raises(DataError):
            train(run_config(make_dataset(n=2), str(tmp_path)), resume=fn, quiet=True)

    def test_resume_with_other_model(self, make_dataset, tmp_path):
        params = build(seed=0)
        fn = str(tmp_path / "train.ckpt")
        save_checkpoint(params, fn, optim_state=init_state(params), meta={"epoch": 0})
        config = run_config(make_dataset(n=2), str(tmp_path), epochs=2, model=ModelConfig(block_channels=(8, 16, 24)))
        with pytest.raises(ContractError):
            train(config, resume=fn, quiet=True)

    def test_non_finite_aborts_with_batch_ids(self, make_dataset, tmp_path, monkeypatch, capsys):
        def poisoned(params, grads, state):
            raise NonFiniteError("adam_step: non-finite gradient", where="block1.conv1.bias")

        monkeypatch.setattr(trainer, "adam_step", poisoned)
        with pytest.raises(NonFiniteError) as err:
            train(run_config(make_dataset(n=2), str(tmp_path)), quiet=True)
        assert sorted(err.value.batch_ids) == ["img_00", "img_01"]
        assert err.value.where == "block1.conv1.bias"
        assert "Aborting" in capsys.readouterr().out
        assert not os.path.exists(checkpoint_path(run_config("", str(tmp_path)), 0))

    def test_invalid_config(self, make_dataset, tmp_path):
        with pytest.raises(ConfigError):
            train(run_config(make_dataset(n=2), str(tmp_path), epochs=0))
        with pytest.raises(ConfigError):
            train(run_config(make_dataset(n=2), str(tmp_path), augment=AugmentConfig(crop_size=30)))
        with pytest.raises(ConfigError, match="epochs"):
            train(run_config(make_dataset(n=2), str(tmp_path), epochs="six"))
        with pytest.raises(ConfigError, match="gamma_range"):
            train(run_config(make_dataset(n=2), str(tmp_path), augment=AugmentConfig(crop_size=32, gamma_range=("a", 1.0))))
        with pytest.raises(FileNotFoundError):
            train(run_config(str(tmp_path / "nowhere"), str(tmp_path)))

    def test_validation_log(self, make_dataset, tmp_path):
        val_root = make_dataset(n=2, split="test", name="val")
        config = run_config(make_dataset(n=2), str(tmp_path), epochs=2, val_root=val_root)
        result = train(config, quiet=True)
        log = pd.read_csv(os.path.join(config.output_dir, trainer.VAL_LOG))
        assert log["epoch"].tolist() == [0, 1]
        assert {"ods", "ois", "mse", "mae", "psnr", "n_images"} <= set(log.columns)
        assert (log["n_images"] == 2).all()
        assert log["ods"].between(0, 1).all()
        # scoring leaves the trained parameters alone
        assert load_checkpoint(result.checkpoints[-1]).equals(result.params)


class TestPredict:

    @pytest.fixture
    def images(self, tmp_path, rng):
        folder = tmp_path / "images"
        for name, size in (("a", 32), ("b", 30)):
            write_png(str(folder / f"{name}.png"), rectangle_sample(size, rng)[0])
        return str(folder)

    def test_fused_maps(self, images, tmp_path):
        utils.set_deterministic(True)
        params = build(seed=0)
        out = str(tmp_path / "pred")
        written = predict(params, images, out, quiet=True)
        assert [os.path.basename(w) for w in written] == ["a.png", "b.png"]
        for fn, side in zip(written, (32, 30)):
            saved = np.asarray(Image.open(fn))
            assert saved.shape == (side, side) and saved.dtype == np.uint8
            image = Converter(os.path.join(images, os.path.basename(fn))).image_to_array()
            np.testing.assert_array_equal(saved, quantize(predict_maps(params, image).dfuse.data[0]))

    def test_all_maps(self, images, tmp_path):
        fn = str(tmp_path / "model.ckpt")
        save_checkpoint(build(seed=1), fn)
        written = predict(fn, images, str(tmp_path / "pred"), all_maps=True, quiet=True)
        assert sorted(os.path.basename(w) for w in written if os.path.basename(w).startswith("a")) == \
            ["a_avg.png", "a_dfuse.png", "a_y1.png", "a_y2.png", "a_y3.png"]
        assert len(written) == 10 and all(os.path.isfile(w) for w in written)

    def test_teedup_keeps_size(self, images, tmp_path):
        written = predict(build(seed=0), images, str(tmp_path / "pred"), teedup=True, quiet=True)
        assert np.asarray(Image.open(written[1])).shape == (30, 30)

    def test_unreadable_image_skipped(self, images, tmp_path, capsys):
        with open(os.path.join(images, "broken.png"), "wb") as f:
            f.write(b"not a png")
        written = predict(build(seed=0), images, str(tmp_path / "pred"))
        assert len(written) == 2
        assert "Skipping" in capsys.readouterr().out

    def test_nothing_predicted(self, tmp_path):
        write_png(str(tmp_path / "tiny" / "t.png"), np.zeros((3, 8, 8)))
        with pytest.raises(DataError):
            predict(build(seed=0), str(tmp_path / "tiny"), str(tmp_path / "pred"), quiet=True)
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError):
            predict(build(seed=0), str(tmp_path / "empty"), str(tmp_path / "pred"), quiet=True)


@pytest.mark.slow
def test_overfit_synthetic_shapes(tmp_path, rng):
    for i in range(8):
        image, gt = (rectangle_sample if i % 2 == 0 else ellipse_sample)(352, rng)
        write_png(str(tmp_path / "data" / "imgs" / "train" / f"{i}.png"), image)
        write_png(str(tmp_path / "data" / "edge_maps" / "train" / f"{i}.png"), gt)
    config = run_config(str(tmp_path / "data"), str(tmp_path), epochs=300, batch_size=8,
                        adam=AdamConfig(decay_epoch=300), augment=AugmentConfig(crop_size=352, **STILL))
    result = train(config, deterministic=True, quiet=True)
    losses = result.history["dloss"].values
    assert len(losses) == 300
    assert losses[-1] < 0.1 * losses[0]

    manifest = DatasetManifest.from_directory(str(tmp_path / "data"))
    preds, gts = [], []
    for img_fn, gt_fn in manifest.pairs:
        preds.append(predict_maps(result.params, Converter(img_fn).image_to_array()).dfuse.data)
        gts.append(Converter(gt_fn).edge_map_to_array())
    assert evaluate(preds, gts).ods > 0.95


def test_train_and_evaluate(make_dataset, tmp_path):
    test_root = make_dataset(n=2, split="test", name="test")
    config = run_config(make_dataset(n=2), str(tmp_path))
    report = train_and_evaluate(config, test_root, out_prefix=str(tmp_path / "run"), quiet=True)
    assert report.n_images == 2
    assert 0.0 <= report.ods <= 1.0
    assert sorted(os.listdir(tmp_path / "run" / "pred")) == ["img_00.png", "img_01.png"]
    assert os.path.isfile(tmp_path / "run" / "report.json")
