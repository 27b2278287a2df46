import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorlane.config import SEED_ENV, ExperimentConfig
from priorlane.errors import ConfigError, NumericError
from priorlane.model import VARIANTS
from priorlane.synth import Dataset, SceneRecipe, generate_dataset, recipes_for
from priorlane.train import evaluate, load_datasets, lr_at, train_model

TINY = dict(train_scenes=4, test_scenes=2, epochs=1, batch_size=2, seeds=(0,))


@given(variant=st.sampled_from(VARIANTS), l1=st.integers(0, 8), l2=st.integers(0, 8),
       seeds=st.lists(st.integers(0, 999), min_size=1, max_size=4),
       lr=st.floats(1e-6, 1.0), rng_=st.floats(1.0, 80.0), path=st.sampled_from(["", "/data/x.plds"]))
@settings(max_examples=40, deadline=None)
def test_ini_round_trip(variant, l1, l2, seeds, lr, rng_, path):
    cfg = ExperimentConfig(variant=variant, knowledge_layers=l1, fusion_layers=l2, seeds=tuple(seeds),
                           learning_rate=lr, perception_range=rng_, train_path=path)
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.to_ini() == cfg.to_ini()


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[model]\nvariantt = mit-lane\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[model]\nvariant = segformer\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[train]\nepochs = many\n")


def test_relative_paths_resolve_against_config_file(tmp_path):
    (tmp_path / "exp.ini").write_text("[data]\ntrain_path = data/train.plds\n[output]\nout_dir = out\n")
    cfg = ExperimentConfig.load(tmp_path / "exp.ini", env={})
    assert cfg.train_path == str((tmp_path / "data" / "train.plds").resolve())
    assert cfg.out_dir == str((tmp_path / "out").resolve())


def test_seed_env_overrides_config(tmp_path):
    (tmp_path / "exp.ini").write_text("[train]\nseeds = 0, 1, 2\n")
    assert ExperimentConfig.load(tmp_path / "exp.ini", env={}).seeds == (0, 1, 2)
    assert ExperimentConfig.load(tmp_path / "exp.ini", env={SEED_ENV: "7"}).seeds == (7,)
    assert ExperimentConfig.load(tmp_path / "exp.ini", env={SEED_ENV: "3,4"}).seeds == (3, 4)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "exp.ini", env={SEED_ENV: "x"})


def test_defaults_mirror_three_runs():
    cfg = ExperimentConfig()
    assert cfg.seeds == (0, 1, 2) and cfg.perception_range == 20.0 and cfg.rot_noise_deg == 15.0


def test_model_config_drops_mismatched_class_weights():
    cfg = ExperimentConfig(label_mode="instance")
    assert cfg.model_config().num_classes == 5
    assert cfg.model_config().class_weights is None
    assert ExperimentConfig().model_config().class_weights == (1.0, 3.0, 6.0, 6.0)


# -- training ------------------------------------------------------------------------------

def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 10) == pytest.approx(0.1)
    assert lr_at(9, 100, 1.0, 10) == pytest.approx(1.0 * 0.5 * (1 + np.cos(np.pi * 9 / 100)))
    assert lr_at(99, 100, 1.0, 10) < 0.01
    assert all(lr_at(s, 50, 2e-3, 5) > 0 for s in range(50))


@pytest.fixture(scope="module")
def tiny_data():
    cfg = ExperimentConfig(**TINY)
    return load_datasets(cfg)


def test_same_seed_same_final_loss(tiny_data, tmp_path):
    cfg = ExperimentConfig(**TINY, max_steps=3)
    a = train_model(cfg, tiny_data[0], tiny_data[1], seed=0, log_path=tmp_path / "a.jsonl")
    b = train_model(cfg, tiny_data[0], tiny_data[1], seed=0, log_path=tmp_path / "b.jsonl")
    assert a.final_loss == b.final_loss and a.steps == b.steps == 2
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "step", "loss", "lr", "val_miou"}
    c = train_model(cfg, tiny_data[0], None, seed=1)
    assert c.final_loss != a.final_loss


def test_max_steps_caps_training(tiny_data):
    cfg = ExperimentConfig(**{**TINY, "epochs": 5}, max_steps=3)
    assert train_model(cfg, tiny_data[0], None, 0).steps == 3


def test_mit_lane_trains_without_prior_data(tiny_data, monkeypatch):
    ds = tiny_data[0]
    original = Dataset.batch

    def no_priors(self, idx):
        images, labels, exist, _ = original(self, idx)
        return images, labels, exist, None

    monkeypatch.setattr(Dataset, "batch", no_priors)
    cfg = ExperimentConfig(**TINY, variant="mit-lane", max_steps=1)
    assert np.isfinite(train_model(cfg, ds, None, 0).final_loss)
    with pytest.raises(ConfigError):
        train_model(ExperimentConfig(**TINY, variant="priorlane-ke", max_steps=1), ds, None, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_grad_norm_dump(tiny_data, tmp_path, capsys):
    cfg = ExperimentConfig(**{**TINY, "epochs": 3}, learning_rate=1e300)
    with pytest.raises(NumericError):
        train_model(cfg, tiny_data[0], None, 0, log_path=tmp_path / "log.jsonl")
    last = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "non-finite loss" and last["grad_norms"]
    assert "grad_norms" in capsys.readouterr().err


def test_class_count_mismatch_is_config_error(tiny_data):
    inst = generate_dataset(recipes_for(SceneRecipe(label_mode="instance"), 2, 0))
    ds = Dataset(inst, 5, 4)
    cfg = ExperimentConfig(**TINY, max_steps=1)
    model = train_model(cfg, tiny_data[0], None, 0).model
    with pytest.raises(ConfigError):
        evaluate(model, ds)
    with pytest.raises(ConfigError):
        evaluate(model, tiny_data[1], "culane-f1")
