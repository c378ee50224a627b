import csv

import numpy as np
import pytest
from typer.testing import CliRunner

from stfusion.app.cli import EXIT_CONFIG, EXIT_DATA, app
from stfusion.core.entities import ConfigError, ConfusionCounts, DataError, Metrics, SynthConfig, TrainConfig
from stfusion.core.model import ChangeDetector
from stfusion.core.tensor import default_dtype
from stfusion.handlers.on_ablate import ABLATION_ROWS, CSV_HEADERS, on_ablate
from stfusion.handlers.on_eval import EvalResult, on_eval, predict_pair
from stfusion.handlers.on_gradcheck import micro_config
from stfusion.handlers.on_infer import on_infer
from stfusion.handlers.on_synth import on_synth
from stfusion.handlers.on_train import on_train, prepare_samples
from stfusion.utils.checkpoint import load_checkpoint
from stfusion.utils.image_io import read_image

runner = CliRunner()


def small_config(**overrides) -> TrainConfig:
    values = dict(
        decoder_width=8,
        batch_size=1,
        iterations=2,
        patch_size=32,
        eval_every=2,
        precision="float64",
        seed=1,
    )
    return TrainConfig(**{**values, **overrides})


@pytest.fixture(scope="module")
def samples():
    return prepare_samples(None, 3, 32, seed=1)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, samples):
    out = tmp_path_factory.mktemp("run")
    result = on_train(small_config(), out, *samples, progress=False)
    return out, result


def test_prepare_samples(samples):
    train, holdout = samples
    assert len(train) == 3 and len(holdout) == 1
    assert holdout[0].name == "synth_1_00003"
    with pytest.raises(DataError):
        prepare_samples(None, None, 32, seed=0)


def test_holdout_count_can_be_fixed(tmp_path):
    train, holdout = prepare_samples(None, 6, 32, seed=0, holdout=4)
    assert len(train) == 6 and len(holdout) == 4
    assert holdout[0].name == "synth_0_00006"
    on_synth(tmp_path, 5, SynthConfig(size=32))
    train, holdout = prepare_samples(tmp_path, None, 32, seed=0, holdout=2)
    assert len(train) == 3 and len(holdout) == 2
    with pytest.raises(DataError):
        prepare_samples(tmp_path, None, 32, seed=0, holdout=5)
    with pytest.raises(ConfigError):
        prepare_samples(None, 6, 32, seed=0, holdout=-1)


def test_training_writes_checkpoints_and_history(trained):
    out, result = trained
    assert len(result.losses) == 2
    assert all(np.isfinite(result.losses))
    assert result.last_checkpoint.exists() and result.best_checkpoint.exists()
    assert list(result.evaluations) == [2]
    assert load_checkpoint(result.last_checkpoint).iteration == 2
    history = (out / "history.jsonl").read_text().splitlines()
    assert len(history) == 3
    assert (out / "metrics.csv").exists()
    assert (out / "config.yaml").exists()


def test_same_seed_gives_identical_checkpoints(tmp_path, trained, samples):
    _, first = trained
    second = on_train(small_config(), tmp_path, *samples, progress=False)
    assert second.last_checkpoint.read_bytes() == first.last_checkpoint.read_bytes()


def test_resumed_training_matches_uninterrupted(tmp_path, trained, samples):
    _, two = trained
    resumed = on_train(small_config(iterations=4), tmp_path / "resumed", *samples, resume=two.last_checkpoint, progress=False)
    straight = on_train(small_config(iterations=4), tmp_path / "straight", *samples, progress=False)
    assert len(resumed.losses) == 2
    np.testing.assert_array_equal(resumed.losses, straight.losses[2:])
    a = load_checkpoint(resumed.last_checkpoint)
    b = load_checkpoint(straight.last_checkpoint)
    assert a.iteration == b.iteration == 4
    for name, value in b.params.items():
        np.testing.assert_array_equal(a.params[name], value)


def test_eval_and_infer(tmp_path, trained):
    _, result = trained
    on_synth(tmp_path / "data", 2, SynthConfig(size=32, seed=9))
    evaluation = on_eval(result.last_checkpoint, tmp_path / "data", tmp_path / "maps")
    assert evaluation.samples == 2
    assert evaluation.counts.tp + evaluation.counts.fp + evaluation.counts.fn + evaluation.counts.tn == 2 * 32 * 32
    assert len(evaluation.rendered) == 2

    name = sorted((tmp_path / "data" / "A").iterdir())[0].name
    mask = on_infer(
        result.last_checkpoint,
        tmp_path / "data" / "A" / name,
        tmp_path / "data" / "B" / name,
        tmp_path / "mask.ppm",
    )
    assert mask.shape == (32, 32)
    np.testing.assert_array_equal(read_image(tmp_path / "mask.ppm")[..., 0] // 255, mask)


def test_synth_reports_changed_pixels(tmp_path):
    changed = on_synth(tmp_path, 3, SynthConfig(size=32, seed=2))
    labels = [read_image(p) // 255 for p in sorted((tmp_path / "label").iterdir())]
    assert changed == sum(int(label.sum()) for label in labels)


def test_ablation_table(tmp_path, samples):
    rows = [row for row in ABLATION_ROWS if row.name in ("no_diff", "full")]
    results = on_ablate(small_config(iterations=1, eval_every=1), tmp_path / "ablation.csv", *samples, rows=rows)
    assert [r.concat_width for r in results] == [32, 40]
    assert results[0].parameter_count < results[1].parameter_count
    with (tmp_path / "ablation.csv").open() as f:
        table = list(csv.reader(f))
    assert table[0] == CSV_HEADERS
    assert [line[0] for line in table[1:]] == ["no_diff", "full"]
    with pytest.raises(DataError):
        on_ablate(small_config(), tmp_path / "x.csv", samples[0], [], rows=rows)


def test_cli_synth_and_train(tmp_path):
    result = runner.invoke(app, ["synth", "--out", str(tmp_path / "data"), "--n", "2", "--size", "32"])
    assert result.exit_code == 0, result.output
    assert "2 pairs" in result.output
    result = runner.invoke(
        app,
        [
            "train",
            "--synth", "2",
            "--synth-size", "32",
            "--out", str(tmp_path / "run"),
            "--iters", "1",
            "--batch", "1",
            "--patch-size", "32",
            "--decoder-width", "8",
            "--precision", "float64",
            "--no-dice",
        ],
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "run" / "last.ckpt").exists()
    assert load_checkpoint(tmp_path / "run" / "last.ckpt").train_cfg.use_dice is False
    result = runner.invoke(app, ["eval", "--ckpt", str(tmp_path / "run" / "last.ckpt"), "--data", str(tmp_path / "data")])
    assert result.exit_code == 0, result.output
    assert "F1" in result.output


def test_cli_exit_codes(tmp_path):
    assert runner.invoke(app, ["train", "--synth", "2", "--preset", "huge"]).exit_code == EXIT_CONFIG
    assert runner.invoke(app, ["gradcheck", "--module", "decoder"]).exit_code == EXIT_CONFIG
    assert runner.invoke(app, ["train", "--data", str(tmp_path / "missing")]).exit_code == EXIT_DATA
    result = runner.invoke(app, ["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)])
    assert result.exit_code == EXIT_DATA


def test_resume_keeps_a_better_earlier_best(tmp_path, samples, monkeypatch):
    scores = iter([0.9, 0.1])

    def scripted_evaluation(model, holdout, *args, **kwargs):
        f1 = next(scores)
        metrics = Metrics(pre=f1, rec=f1, f1=f1, iou=f1, oa=f1, kc=f1)
        return EvalResult(counts=ConfusionCounts(), metrics=metrics, samples=len(holdout))

    monkeypatch.setattr("stfusion.handlers.on_train.evaluate_samples", scripted_evaluation)
    first = on_train(small_config(), tmp_path, *samples, progress=False)
    assert first.best_f1 == 0.9
    resumed = on_train(small_config(iterations=4), tmp_path, *samples, resume=first.last_checkpoint, progress=False)
    assert list(resumed.evaluations) == [4]
    assert resumed.best_f1 == 0.9
    assert resumed.best_checkpoint == tmp_path / "best.ckpt"
    assert load_checkpoint(tmp_path / "best.ckpt").iteration == 2
    assert load_checkpoint(tmp_path / "last.ckpt").iteration == 4


def test_large_pairs_are_predicted_patch_by_patch():
    rng = np.random.default_rng(8)
    with default_dtype(np.float64):
        model = ChangeDetector.create(micro_config(), seed=2)
        pre, post = rng.uniform(size=(3, 64, 96)), rng.uniform(size=(3, 64, 96))
        mask = predict_pair(model, pre, post, patch=32)
        assert mask.shape == (64, 96)
        corner = model.predict(pre[None, :, 32:, 64:], post[None, :, 32:, 64:])[0]
        np.testing.assert_array_equal(mask[32:, 64:], corner)
        odd_pre, odd_post = rng.uniform(size=(3, 40, 36)), rng.uniform(size=(3, 40, 36))
        np.testing.assert_array_equal(
            predict_pair(model, odd_pre, odd_post, patch=32), model.predict(odd_pre[None], odd_post[None])[0]
        )
