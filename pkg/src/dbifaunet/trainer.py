"""Training loop, evaluation, prediction and checkpoints."""

import json
import logging
import math
import os
import pickle
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from . import metrics
from .data import SampleStore, load_gray, to_uint8
from .errors import CheckpointError, ConfigError, DivergenceError, ValidationError
from .losses import LossHyperParams, total_loss
from .network import NetworkConfig, build, normalize_ablation, parameter_count

log = logging.getLogger(__name__)

CHECKPOINT_TAG = "dbifaunet-ckpt-v1"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 200
    restart_period: int = 20
    restart_gamma: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0  # 0 keeps only best and last
    dtype: str = "float32"
    eval_batch_size: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0", f"must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.restart_period < 1:
            raise ConfigError("restart_period", f"must be >= 1, got {self.restart_period}")
        if not 0 < self.restart_gamma <= 1:
            raise ConfigError("restart_gamma", f"must be in (0, 1], got {self.restart_gamma}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    parameter_count: int = 0
    best_epoch: int = -1
    best_val_dice: float = -1.0
    test: dict = None

    def to_dict(self):
        return asdict(self)


def lr_schedule(epoch, cfg):
    """Cosine annealing within fixed-length cycles whose peak decays by ``gamma``."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    k, t = divmod(epoch, cfg.restart_period)
    peak = cfg.lr0 * cfg.restart_gamma ** k
    return max(0.0, peak * (1 + math.cos(math.pi * t / cfg.restart_period)) / 2)


def deterministic_requested():
    return os.environ.get("DBIF_DETERMINISTIC", "") == "1"


def configure_determinism(force=False):
    """Single-threaded, deterministic kernels when ``DBIF_DETERMINISTIC=1``."""
    if force or deterministic_requested():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return True
    return False


# -- checkpoints ------------------------------------------------------------

def _config_echo(train_cfg, net_cfg, loss_h):
    return {"train": train_cfg.to_dict(), "network": net_cfg.to_dict(), "loss": asdict(loss_h)}


def save_checkpoint(path, model, optimizer, epoch, echo, state):
    payload = {
        "tag": CHECKPOINT_TAG,
        "config": echo,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "torch_rng": torch.random.get_rng_state(),
        "state": state,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("tag") != CHECKPOINT_TAG:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_TAG} checkpoint")
    return payload


def _flatten(echo):
    return {f"{group}.{k}": v for group, part in echo.items() for k, v in part.items()}


def config_mismatch(expected, found):
    return sorted(k for k in set(expected) | set(found) if expected.get(k) != found.get(k))


def load_model(path, network=None):
    """Rebuild the model from a checkpoint's echoed network config.

    If ``network`` is given it must agree with the echo; disagreeing fields are
    named in the raised :class:`CheckpointError`.
    """
    payload = read_checkpoint(path)
    echo = payload["config"]
    net_dict = echo["network"]
    if network is not None:
        bad = config_mismatch(network.to_dict(), net_dict)
        if bad:
            raise CheckpointError(f"checkpoint config mismatch in fields: {', '.join(bad)}")
    try:
        net_cfg = NetworkConfig(**net_dict)
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid network config in {path}: {exc}") from exc
    model = build(net_cfg, dtype=DTYPES[echo["train"]["dtype"]])
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not match the echoed config: {exc}") from exc
    model.eval()
    return model, payload


# -- evaluation ---------------------------------------------------------------

def _as_batch(images, dtype):
    return torch.as_tensor(np.asarray(images), dtype=dtype)[:, None]


@torch.no_grad()
def predict_probs(model, images, batch_size=16):
    """Final-head probabilities ``(N, H, W)`` for float images ``(N, H, W)``."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for s in range(0, len(images), batch_size):
            x = _as_batch(images[s:s + batch_size], dtype)
            out.append(model(x, heads="final").final[:, 0].double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + tuple(np.shape(images)[1:]))


def evaluate_arrays(model, images, masks, batch_size=16, threshold=0.5):
    probs = predict_probs(model, images, batch_size)
    counts = [metrics.accumulate(metrics.binarize(p, threshold), m) for p, m in zip(probs, masks)]
    return metrics.split_report(counts)


def evaluate(checkpoint, split, manifest, network=None):
    model, payload = load_model(checkpoint, network)
    images, masks, _ = SampleStore.open(manifest).arrays(split)
    if len(images) == 0:
        raise ValidationError(f"split {split!r} is empty")
    return evaluate_arrays(model, images, masks, payload["config"]["train"]["eval_batch_size"])


# -- training -----------------------------------------------------------------

def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _mean_breakdown(rows):
    n = len(rows)
    per_point = [{k: sum(r["per_point"][i][k] for r in rows) / n for k in rows[0]["per_point"][i]}
                 for i in range(len(rows[0]["per_point"]))]
    return {"total": sum(r["total"] for r in rows) / n, "per_point": per_point}


def train(cfg, manifest, network, out_dir, loss=None, resume=None, stop_after=None):
    """Train on the manifest's train split; returns a :class:`RunRecord`.

    Writes ``best.pt``, ``last.pt``, ``steps.jsonl`` and ``run.json`` to
    ``out_dir``. ``stop_after`` ends the run after that many epochs (used to
    pause a run that is later resumed).
    """
    cfg.validate()
    network.validate()
    loss = loss or LossHyperParams()
    configure_determinism()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[cfg.dtype]

    store = SampleStore.open(manifest)
    train_x, train_y, _ = store.arrays("train")
    val_x, val_y, _ = store.arrays("val")
    if len(train_x) == 0:
        raise ValidationError("train split is empty")
    d = network.divisor
    if train_x.shape[-2] % d or train_x.shape[-1] % d:
        raise ValidationError(f"image size {train_x.shape[-2:]} must be divisible by {d}")
    x_all = _as_batch(train_x, dtype)
    y_all = _as_batch(train_y, dtype)

    echo = _config_echo(cfg, network, loss)
    model = build(network, seed=cfg.seed, dtype=dtype)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    nested = network.ablation != "no_nested_ds"
    record = RunRecord(parameter_count=parameter_count(model))
    # the default generator is not seeded per process; checkpoints carry its state
    torch.manual_seed(cfg.seed)
    start = 0
    if resume is not None:
        payload = read_checkpoint(resume)
        bad = config_mismatch(_flatten(echo), _flatten(payload["config"]))
        if bad:
            raise CheckpointError(f"cannot resume, config differs in: {', '.join(bad)}")
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        torch.random.set_rng_state(payload["torch_rng"])
        start = payload["epoch"] + 1
        record = RunRecord(**payload["state"])
    log.info("training %s, %d parameters", network.ablation, record.parameter_count)

    steps_path = out / "steps.jsonl"
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    with open(steps_path, "a") as steps_log:
        for epoch in range(start, end):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            model.train()
            rows = []
            order = epoch_order(cfg.seed, epoch, len(x_all))
            for step, s in enumerate(range(0, len(order), cfg.batch_size)):
                idx = torch.as_tensor(order[s:s + cfg.batch_size])
                outputs = model(x_all[idx])
                breakdown = total_loss(outputs, y_all[idx], loss, nested=nested)
                value = float(breakdown.total.detach())
                row = {"epoch": epoch, "step": step, "lr": lr, **breakdown.to_dict()}
                steps_log.write(json.dumps(row) + "\n")
                if not math.isfinite(value):
                    steps_log.flush()
                    raise DivergenceError(epoch, step, value)
                optimizer.zero_grad(set_to_none=True)
                breakdown.total.backward()
                optimizer.step()
                rows.append(row)
            steps_log.flush()

            entry = {"epoch": epoch, "lr": lr, "train": _mean_breakdown(rows)}
            if len(val_x):
                val = evaluate_arrays(model, val_x, val_y, cfg.eval_batch_size)
                entry["val"] = val.to_dict()
                score = val.dice
            else:
                score = -entry["train"]["total"]
            record.epochs.append(entry)
            record.lr_trace.append(lr)
            record.wall_time.append(time.perf_counter() - t0)
            improved = score > record.best_val_dice
            if improved:
                record.best_val_dice, record.best_epoch = score, epoch
            # wall time is kept out of checkpoints so they stay bit-reproducible
            state = {k: v for k, v in record.to_dict().items() if k != "wall_time"}
            state["wall_time"] = []
            save_checkpoint(out / "last.pt", model, optimizer, epoch, echo, state)
            if improved:
                save_checkpoint(out / "best.pt", model, optimizer, epoch, echo, state)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch:04d}.pt", model, optimizer, epoch, echo, state)
            log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr,
                     entry["train"]["total"], score)

    if end == cfg.epochs and store.split_manifest.test:
        best, _ = load_model(out / "best.pt")
        test_x, test_y, _ = store.arrays("test")
        report = evaluate_arrays(best, test_x, test_y, cfg.eval_batch_size)
        record.test = report.to_dict()
        (out / "report_test.json").write_text(report.to_json(indent=2, sort_keys=True) + "\n")
    (out / "run.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    return record


# -- prediction ---------------------------------------------------------------

def pad_to_multiple(image, divisor):
    h, w = image.shape
    ph, pw = (-h) % divisor, (-w) % divisor
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(image, pads, mode=mode), pads


def boundary(mask):
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def overlay(image, mask, color=(255, 0, 0)):
    gray = to_uint8(image)
    rgb = np.stack([gray] * 3, axis=-1)
    rgb[boundary(mask)] = color
    return rgb


def predict(checkpoint, image_path, out_dir, threshold=0.5):
    """Write ``<stem>_mask.png`` and ``<stem>_overlay.png``; returns both paths."""
    image_path = Path(image_path)
    image = load_gray(image_path).astype(np.float64) / 255.0
    model, _ = load_model(checkpoint)
    padded, ((top, bottom), (left, right)) = pad_to_multiple(image, model.cfg.divisor)
    prob = predict_probs(model, padded[None])[0]
    prob = prob[top:top + image.shape[0], left:left + image.shape[1]]
    mask = metrics.binarize(prob, threshold)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask_path = out / f"{image_path.stem}_mask.png"
    overlay_path = out / f"{image_path.stem}_overlay.png"
    Image.fromarray(mask * 255).save(mask_path)
    Image.fromarray(overlay(image, mask)).save(overlay_path)
    return mask_path, overlay_path


def config_fields():
    """Flat field name -> owning config class, for config files and CLI flags."""
    owners = {}
    for cls in (TrainConfig, NetworkConfig, LossHyperParams):
        for f in fields(cls):
            owners[f.name] = cls
    return owners


def split_config(flat):
    """Split a flat key-value mapping into (TrainConfig, NetworkConfig, LossHyperParams)."""
    owners = config_fields()
    unknown = sorted(set(flat) - set(owners))
    if unknown:
        raise ConfigError(unknown[0], f"unknown config field(s): {', '.join(unknown)}")
    parts = {TrainConfig: {}, NetworkConfig: {}, LossHyperParams: {}}
    for k, v in flat.items():
        parts[owners[k]][k] = v
    if "ablation" in parts[NetworkConfig]:
        parts[NetworkConfig]["ablation"] = normalize_ablation(parts[NetworkConfig]["ablation"])
    try:
        loss_h = LossHyperParams(**parts[LossHyperParams])
    except ValidationError as exc:
        raise ConfigError("loss", str(exc)) from exc
    return TrainConfig(**parts[TrainConfig]), NetworkConfig(**parts[NetworkConfig]), loss_h
