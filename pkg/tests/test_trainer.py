import json
import math

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from dbifaunet import cli, data, trainer
from dbifaunet.errors import CheckpointError, ConfigError, DivergenceError, ValidationError
from dbifaunet.losses import LossHyperParams
from dbifaunet.network import NetworkConfig
from dbifaunet.trainer import TrainConfig, lr_schedule

import oracles

TINY_NET = dict(depth=3, base_channels=8)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    return data.generate_store(12, 32, 0, tmp_path_factory.mktemp("store"), images_per_patient=2)


@pytest.fixture
def deterministic(monkeypatch):
    monkeypatch.setenv("DBIF_DETERMINISTIC", "1")
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


def tiny_cfg(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 4, "lr0": 0.01, **kw})


@pytest.fixture(scope="module")
def trained(store, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    record = trainer.train(tiny_cfg(epochs=3), store, NetworkConfig(**TINY_NET), out)
    return out, record


# -- schedule ----------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(10, cfg) == pytest.approx(0.0005, abs=1e-15)
    assert lr_schedule(20, cfg) == 0.0005
    with pytest.raises(ValidationError):
        lr_schedule(-1, cfg)


def test_lr_trace_200_epochs():
    cfg = TrainConfig()
    trace = [lr_schedule(e, cfg) for e in range(200)]
    want = [oracles.lr_closed_form(e, 0.001, 20, 0.5) for e in range(200)]
    assert max(abs(a - b) for a, b in zip(trace, want)) <= 1e-12
    restarts = [0] + [e for e in range(1, 200) if trace[e] > trace[e - 1]]
    assert restarts == list(range(0, 200, 20)) and len(restarts) == math.ceil(200 / 20)
    for k, e in enumerate(restarts):
        assert abs(trace[e] - 0.001 * 0.5 ** k) <= 1e-12
    assert min(trace) >= 0


@pytest.mark.parametrize("field,value", [("lr0", 0.0), ("epochs", 0), ("restart_period", 0),
                                         ("restart_gamma", 0.0), ("restart_gamma", 1.5),
                                         ("batch_size", 0), ("dtype", "float16"),
                                         ("momentum", 1.0)])
def test_train_config_validation(field, value):
    with pytest.raises(ConfigError) as exc:
        TrainConfig(**{field: value})
    assert exc.value.field == field


def test_split_config():
    cfg, net, loss = trainer.split_config({"epochs": 3, "ablation": "no-ds", "depth": 4,
                                           "lambda_dice": 0.5, "lambda_bce": 0.2})
    assert cfg.epochs == 3 and net.ablation == "no_nested_ds" and net.depth == 4
    assert loss.lambda_dice == 0.5
    with pytest.raises(ConfigError, match="bogus"):
        trainer.split_config({"bogus": 1})
    with pytest.raises(ConfigError):
        trainer.split_config({"lambda_dice": 0.9})


# -- training ----------------------------------------------------------------

def test_train_run_artifacts(trained):
    out, record = trained
    assert len(record.epochs) == 3 and all("val" in e for e in record.epochs)
    assert record.lr_trace == [lr_schedule(e, tiny_cfg(epochs=3)) for e in range(3)]
    assert len(record.wall_time) == 3
    for name in ("best.pt", "last.pt", "run.json", "report_test.json", "steps.jsonl"):
        assert (out / name).exists(), name
    rows = [json.loads(line) for line in (out / "steps.jsonl").read_text().splitlines()]
    assert {r["epoch"] for r in rows} == {0, 1, 2}
    assert all(len(r["per_point"]) == 4 for r in rows)
    assert record.best_epoch == max(range(3), key=lambda e: (record.epochs[e]["val"]["dice"], -e))
    run = json.loads((out / "run.json").read_text())
    assert run["test"]["aggregation"] == "pooled"


def test_epoch_order_is_seeded_permutation():
    a = trainer.epoch_order(3, 7, 50)
    assert np.array_equal(a, trainer.epoch_order(3, 7, 50))
    assert sorted(a) == list(range(50))
    assert not np.array_equal(a, trainer.epoch_order(3, 8, 50))


def test_ablation_parameter_counts(store, tmp_path):
    counts = {}
    for abl in ("full", "no_ddfd_biaf", "no_nested_ds"):
        rec = trainer.train(tiny_cfg(epochs=1), store, NetworkConfig(ablation=abl, **TINY_NET),
                            tmp_path / abl)
        counts[abl] = rec.parameter_count
    assert counts["no_ddfd_biaf"] < counts["full"]
    assert counts["no_nested_ds"] <= counts["full"]


def test_divergence_guard(store, tmp_path, monkeypatch):
    real = trainer.total_loss

    def poisoned(outputs, truth, *a, **kw):
        br = real(outputs, truth, *a, **kw)
        poisoned.calls += 1
        if poisoned.calls == 2:
            br.total = br.total * float("nan")
        return br

    poisoned.calls = 0
    monkeypatch.setattr(trainer, "total_loss", poisoned)
    with pytest.raises(DivergenceError) as exc:
        trainer.train(tiny_cfg(), store, NetworkConfig(**TINY_NET), tmp_path)
    assert (exc.value.epoch, exc.value.step) == (0, 1)
    last = json.loads((tmp_path / "steps.jsonl").read_text().splitlines()[-1])
    assert last["step"] == 1 and not math.isfinite(last["total"])


def test_indivisible_store_rejected(tmp_path):
    m = data.generate_store(6, 36, 0, tmp_path / "s", images_per_patient=2)
    with pytest.raises(ValidationError, match="divisible by 8"):
        trainer.train(tiny_cfg(), m, NetworkConfig(depth=4, base_channels=8), tmp_path / "r")


def test_resume_reproduces_next_epoch(store, tmp_path, deterministic):
    net = NetworkConfig(**TINY_NET)
    cfg = tiny_cfg(epochs=3, dtype="float64")
    full = trainer.train(cfg, store, net, tmp_path / "a")
    trainer.train(cfg, store, net, tmp_path / "b", stop_after=2)
    resumed = trainer.train(cfg, store, net, tmp_path / "b", resume=tmp_path / "b" / "last.pt")
    a, b = full.epochs[2]["train"]["total"], resumed.epochs[2]["train"]["total"]
    assert abs(a - b) < 1e-6
    assert len(resumed.epochs) == 3 and resumed.lr_trace == full.lr_trace


def test_resume_config_mismatch(trained, store, tmp_path):
    out, _ = trained
    with pytest.raises(CheckpointError, match="train.lr0"):
        trainer.train(tiny_cfg(epochs=3, lr0=0.5), store, NetworkConfig(**TINY_NET), tmp_path,
                      resume=out / "last.pt")


# -- evaluation ----------------------------------------------------------------

def test_evaluate_is_deterministic(trained, store):
    out, record = trained
    a = trainer.evaluate(out / "best.pt", "test", store)
    b = trainer.evaluate(out / "best.pt", "test", store)
    assert a.to_json() == b.to_json()
    assert a.to_dict() == record.test


def test_evaluate_config_mismatch_names_fields(trained, store):
    out, _ = trained
    with pytest.raises(CheckpointError, match="base_channels.*depth"):
        trainer.evaluate(out / "best.pt", "val", store, NetworkConfig(depth=4, base_channels=16))


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        trainer.load_model(tmp_path / "x.pt")
    torch.save({"tag": "other"}, tmp_path / "y.pt")
    with pytest.raises(CheckpointError):
        trainer.load_model(tmp_path / "y.pt")


# -- prediction ----------------------------------------------------------------

@pytest.mark.parametrize("shape", [(500, 500), (3, 7), (37, 64)])
def test_pad_roundtrip(shape):
    x = np.random.default_rng(0).random(shape)
    padded, ((t, b), (l, r)) = trainer.pad_to_multiple(x, 8)
    assert padded.shape[0] % 8 == 0 and padded.shape[1] % 8 == 0
    assert np.array_equal(padded[t:t + shape[0], l:l + shape[1]], x)


def test_predict_500(trained, tmp_path):
    out, _ = trained
    img = (np.random.default_rng(1).random((500, 500)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "scan.png")
    mask_path, overlay_path = trainer.predict(out / "best.pt", tmp_path / "scan.png", tmp_path / "o")
    mask = np.asarray(Image.open(mask_path))
    ov = np.asarray(Image.open(overlay_path))
    assert mask.shape == (500, 500) and set(np.unique(mask)) <= {0, 255}
    assert ov.shape == (500, 500, 3)
    edge = trainer.boundary(mask > 0)
    assert (ov[edge] == (255, 0, 0)).all()
    assert (ov[~edge] == np.stack([img] * 3, -1)[~edge]).all()


def test_predict_unreadable(trained, tmp_path):
    out, _ = trained
    (tmp_path / "junk.png").write_text("nope")
    with pytest.raises(OSError):
        trainer.predict(out / "best.pt", tmp_path / "junk.png", tmp_path)


def test_boundary():
    m = np.zeros((6, 6), dtype=bool)
    m[1:5, 1:5] = True
    b = trainer.boundary(m)
    assert b.sum() == 12 and not b[2:4, 2:4].any()


# -- determinism -------------------------------------------------------------

def test_deterministic_runs_are_bit_identical(store, tmp_path, deterministic):
    net = NetworkConfig(**TINY_NET)
    for d in ("a", "b"):
        trainer.train(tiny_cfg(dtype="float64"), store, net, tmp_path / d)
    for name in ("best.pt", "last.pt", "report_test.json", "steps.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# -- CLI ---------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    assert cli.main(["generate-phantoms", "--count", "10", "--size", "32", "--seed", "2",
                     "--out", str(tmp_path / "d"), "--images-per-patient", "2"]) == 0
    manifest = tmp_path / "d" / "manifest.json"
    cfg = {"epochs": 5, "batch_size": 4, "depth": 3, "base_channels": 8, "lr0": 0.01,
           "manifest": str(manifest)}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    capsys.readouterr()
    assert cli.main(["train", "--config", str(tmp_path / "c.yaml"), "--epochs", "1",
                     "--ablation", "no-ds", "--out", str(tmp_path / "r")]) == 0
    summary = json.loads(capsys.readouterr().out)
    run = json.loads((tmp_path / "r" / "run.json").read_text())
    assert len(run["epochs"]) == 1  # flag overrode the file
    ckpt = trainer.read_checkpoint(tmp_path / "r" / "best.pt")
    assert ckpt["config"]["network"]["ablation"] == "no_nested_ds"
    assert summary["parameter_count"] == run["parameter_count"]

    assert cli.main(["eval", "--checkpoint", str(tmp_path / "r" / "best.pt"), "--split", "val",
                     "--manifest", str(manifest), "--json", str(tmp_path / "e.json")]) == 0
    assert json.loads(capsys.readouterr().out)["split"] == "val"
    assert "dice" in json.loads((tmp_path / "e.json").read_text())

    Image.fromarray(np.zeros((20, 30), dtype=np.uint8)).save(tmp_path / "in.png")
    assert cli.main(["predict", "--checkpoint", str(tmp_path / "r" / "best.pt"),
                     "--input", str(tmp_path / "in.png"), "--out", str(tmp_path / "p")]) == 0
    assert np.asarray(Image.open(tmp_path / "p" / "in_mask.png")).shape == (20, 30)


def test_cli_errors(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1, "manifest": "m.json"}))
    assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 2
    assert "bogus" in capsys.readouterr().err
    (tmp_path / "n.yaml").write_text("train:\n  epochs: 1\n")
    assert cli.main(["train", "--config", str(tmp_path / "n.yaml")]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.pt"), "--split", "val",
                     "--manifest", str(tmp_path / "m.json")]) == 2
    assert cli.main(["train", "--epochs", "3"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["train", "--epochs", "x"])


def test_cli_ingest(tmp_path, capsys):
    for sub in ("i", "m"):
        (tmp_path / sub).mkdir()
    for pid in ("a", "b", "c"):
        Image.fromarray(np.full((8, 8), 100, dtype=np.uint8)).save(tmp_path / "i" / f"{pid}_1.png")
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / "m" / f"{pid}_1.png")
    assert cli.main(["ingest", "--images", str(tmp_path / "i"), "--masks", str(tmp_path / "m"),
                     "--out", str(tmp_path / "o"), "--ratios", "0.8,0.1,0.1", "--seed", "1"]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert sorted(m["train"] + m["val"] + m["test"]) == ["a_1", "b_1", "c_1"]


def test_loss_hyperparams_round_trip_through_checkpoint(trained):
    out, _ = trained
    echo = trainer.read_checkpoint(out / "best.pt")["config"]
    assert LossHyperParams(**echo["loss"]) == LossHyperParams()
    assert TrainConfig(**echo["train"]) == tiny_cfg(epochs=3)
