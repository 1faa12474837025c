"""Training loop: AdamW on adapters + decoder, per-step cosine decay, checkpoints and resume."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
import yaml

from .backbone import encoder_hash, full_encoder_config, load_pretrained_encoder, toy_encoder_config
from .checkpoint import FORMAT_VERSION, CheckpointError, PathLike, load_container, save_container
from .data import DataError, DatasetManifest, load_mask, preprocess, preprocess_mask
from .losses import TASK_LOSSES, task_loss
from .model import AdapterSegModel, ModelConfig, build_model

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"cod": 29, "shadow": 29, "polyp": 100, "cell": 100}
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    task: str = "cod"
    lr0: float = 2e-4
    batch_size: int = 2
    epochs: Optional[int] = None  # None -> per-task default
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    preset: str = "toy"
    resolution: Optional[int] = None  # None -> preset resolution
    mask_ratio: float = 0.25
    bottleneck_dim: int = 32
    prompt_dim: Optional[int] = None
    decoder_dim: int = 32
    trainable_guidance_weights: bool = False
    dtype: str = "float32"
    num_threads: int = 1
    checkpoint_interval: int = 0  # steps; 0 = final checkpoint only
    store_encoder: bool = True
    encoder_path: Optional[str] = None
    dataset_root: Optional[str] = None
    dataset_id: Optional[str] = None
    layout: Optional[str] = None
    split_rule: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS.get(self.task, 100)
        self.validate()

    def validate(self) -> None:
        if self.task not in TASK_LOSSES:
            raise ConfigError(f"task: unknown task {self.task!r}")
        if not self.lr0 > 0:
            raise ConfigError("lr0: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.preset not in ("toy", "full"):
            raise ConfigError(f"preset: unknown preset {self.preset!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: expected one of {sorted(DTYPES)}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio: must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(f"unknown config key: {k}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: PathLike, overrides: Optional[dict] = None,
                  defaults: Optional[dict] = None) -> "TrainConfig":
        """YAML keys layered over ``defaults``, then ``overrides`` on top."""
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a flat mapping of keys")
        return cls.from_dict({**(defaults or {}), **d, **(overrides or {})})

    def model_config(self) -> ModelConfig:
        enc = toy_encoder_config() if self.preset == "toy" else full_encoder_config()
        if self.resolution is not None:
            enc = dataclasses.replace(enc, input_resolution=self.resolution)
        return ModelConfig(encoder=enc, bottleneck_dim=self.bottleneck_dim, prompt_dim=self.prompt_dim,
                           mask_ratio=self.mask_ratio, trainable_guidance_weights=self.trainable_guidance_weights,
                           decoder_dim=self.decoder_dim)

    @property
    def input_resolution(self) -> int:
        return self.model_config().encoder.input_resolution

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


# fields that may differ between a checkpoint and the run resuming it
_RESUME_FREE = {"checkpoint_interval", "num_threads", "dataset_root"}


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


def model_from_config(config: TrainConfig) -> AdapterSegModel:
    """Seeded model for ``config``; a pretrained encoder is loaded when encoder_path is set."""
    mcfg = config.model_config()
    model = build_model(mcfg, seed=config.seed, dtype=config.torch_dtype)
    if config.encoder_path:
        encoder = load_pretrained_encoder(config.encoder_path, config=mcfg.encoder).to(config.torch_dtype)
        model.encoder = encoder.freeze()
    return model


def named_trainable(model: AdapterSegModel) -> dict[str, torch.nn.Parameter]:
    ids = {id(p) for p in model.trainable_parameters()}
    return {n: p for n, p in model.named_parameters() if id(p) in ids}


class SampleLoader:
    """Preprocessed (image, mask) batches in a seeded per-epoch order."""

    def __init__(self, records, resolution: int, task: str, dtype: torch.dtype = torch.float32,
                 cache: bool = True):
        self.records = sorted(records, key=lambda r: r.sample_id)
        self.resolution = resolution
        self.instance = task == "cell"
        self.dtype = dtype
        self.cache: Optional[dict[int, tuple[torch.Tensor, torch.Tensor]]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def load(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        r = self.records[i]
        img = preprocess(r.image_path, self.resolution).to(self.dtype)
        mask = torch.from_numpy(preprocess_mask(r.mask_path, self.resolution, self.instance)).to(self.dtype)[None]
        if self.cache is not None:
            self.cache[i] = (img, mask)
        return img, mask

    def order(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self.records))

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        pairs = [self.load(int(i)) for i in indices]
        return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


@dataclass
class Checkpoint:
    """Trainable parameters, optimizer state, step counter, config and history."""

    params: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor]
    step: int
    config: dict
    history: list[dict] = field(default_factory=list)
    encoder_hash: str = ""
    dataset_id: str = ""
    encoder: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def save(self, path: PathLike) -> Path:
        tensors = dict(self.params)
        tensors.update({f"optim.{k}": v for k, v in self.optimizer.items()})
        tensors.update(self.encoder)
        meta = {
            "kind": "train_checkpoint",
            "encoder_config": self.train_config.model_config().encoder.to_dict(),
            "step": self.step,
            "train_config": self.config,
            "history": self.history,
            "encoder_hash": self.encoder_hash,
            "dataset_id": self.dataset_id,
        }
        return save_container(path, tensors, meta)

    @classmethod
    def load(cls, path: PathLike, format_version: int = FORMAT_VERSION) -> "Checkpoint":
        tensors, record = load_container(path, format_version)
        if record.get("kind") != "train_checkpoint":
            raise CheckpointError(f"{path} is not a training checkpoint")
        return cls(
            params={k: v for k, v in tensors.items() if not k.startswith(("optim.", "encoder."))},
            optimizer={k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")},
            step=record["step"], config=record["train_config"], history=record["history"],
            encoder_hash=record["encoder_hash"], dataset_id=record["dataset_id"],
            encoder={k: v for k, v in tensors.items() if k.startswith("encoder.")})

    def build_model(self) -> AdapterSegModel:
        """Model with this checkpoint's parameters; encoder from the stored arrays if present."""
        config = self.train_config
        if self.encoder:
            config = dataclasses.replace(config, encoder_path=None)
        model = model_from_config(config)
        if self.encoder:
            model.encoder.load_state_dict({k[len("encoder."):]: v for k, v in self.encoder.items()})
            model.encoder.freeze()
        load_trainable(model, self.params)
        if encoder_hash(model.encoder) != self.encoder_hash:
            raise CheckpointError("encoder hash mismatch: checkpoint was trained on a different encoder")
        return model


def load_trainable(model: AdapterSegModel, params: dict[str, torch.Tensor]) -> None:
    named = named_trainable(model)
    missing = sorted(set(named) - set(params))
    if missing:
        raise CheckpointError("checkpoint lacks parameters: " + ", ".join(missing))
    with torch.no_grad():
        for name, p in named.items():
            if p.shape != params[name].shape:
                raise CheckpointError(f"{name}: shape {tuple(params[name].shape)} != {tuple(p.shape)}")
            p.copy_(params[name])


def _optimizer(config: TrainConfig, params) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=config.lr0, betas=config.betas, eps=config.adam_eps,
                             weight_decay=config.weight_decay, foreach=False)


def _optimizer_arrays(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    out = {}
    params = opt.param_groups[0]["params"]
    for name, p in zip(names, params):
        for key, value in opt.state.get(p, {}).items():
            out[f"{name}.{key}"] = torch.as_tensor(value).detach().clone()
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, names: list[str], arrays: dict[str, torch.Tensor]) -> None:
    state = {}
    for idx, name in enumerate(names):
        entry = {k.split(".")[-1]: v.clone() for k, v in arrays.items() if k.rsplit(".", 1)[0] == name}
        if entry:
            state[idx] = entry
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def snapshot(model: AdapterSegModel, opt: Optional[torch.optim.Optimizer], step: int, config: TrainConfig,
             history: list[dict], dataset_id: str) -> Checkpoint:
    named = named_trainable(model)
    params = {k: v.detach().clone() for k, v in named.items()}
    if not config.trainable_guidance_weights:
        params["guidance.weights.w"] = model.guidance.weights.w.detach().clone()
    encoder = ({f"encoder.{k}": v.detach().clone() for k, v in model.encoder.state_dict().items()}
               if config.store_encoder else {})
    return Checkpoint(
        params=params,
        optimizer=_optimizer_arrays(opt, list(named)) if opt is not None else {},
        step=step, config=config.to_dict(), history=list(history),
        encoder_hash=encoder_hash(model.encoder), dataset_id=dataset_id, encoder=encoder)


def _run(config: TrainConfig, model: AdapterSegModel, manifest: DatasetManifest, start_step: int,
         history: list[dict], opt_arrays: Optional[dict], max_steps: Optional[int],
         checkpoint_dir: Optional[PathLike], dry_run: bool) -> Checkpoint:
    records = manifest.split("train")
    if not records:
        raise DataError(f"dataset {manifest.dataset_id} has no train split")
    torch.set_num_threads(config.num_threads)
    loader = SampleLoader(records, config.input_resolution, config.task, config.torch_dtype)
    steps_per_epoch = math.ceil(len(loader) / config.batch_size)
    epochs = 0 if dry_run else config.epochs
    total = epochs * steps_per_epoch

    named = named_trainable(model)
    opt = _optimizer(config, list(named.values()))
    if opt_arrays:
        _restore_optimizer(opt, list(named), opt_arrays)
    frozen = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    log_file = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(ckpt_dir / "train_log.jsonl", "a")

    stop = total if max_steps is None else min(total, start_step + max_steps)
    model.train()
    step = start_step
    try:
        while step < stop:
            epoch, pos = divmod(step, steps_per_epoch)
            idx = loader.order(config.seed, epoch)[pos * config.batch_size:(pos + 1) * config.batch_size]
            images, masks = loader.batch(idx)
            lr = cosine_lr(step, total, config.lr0)
            for group in opt.param_groups:
                group["lr"] = lr
            probs = torch.sigmoid(model(images))
            loss = task_loss(config.task, probs, masks)
            value = float(loss.value.detach())
            if not math.isfinite(value):
                log.error("aborting: non-finite loss at step %d", step)
                raise NumericAbort(step, value)
            opt.zero_grad(set_to_none=True)
            loss.value.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(list(named.values()), config.grad_clip)
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": lr, "loss": value, "terms": loss.terms}
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            step += 1
            if ckpt_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                snapshot(model, opt, step, config, history, manifest.dataset_id).save(
                    ckpt_dir / f"step_{step:07d}.safetensors")
    finally:
        if log_file is not None:
            log_file.close()
    for k, v in model.encoder.state_dict().items():
        if not torch.equal(v, frozen[k]):
            raise RuntimeError(f"frozen encoder parameter {k} changed during training")
    ckpt = snapshot(model, opt, step, config, history, manifest.dataset_id)
    if ckpt_dir is not None and not dry_run:
        ckpt.save(ckpt_dir / "final.safetensors")
    return ckpt


def train(config: TrainConfig, model: AdapterSegModel, manifest: DatasetManifest,
          max_steps: Optional[int] = None, checkpoint_dir: Optional[PathLike] = None,
          dry_run: bool = False) -> Checkpoint:
    """Train adapters and decoder of ``model`` on the manifest's train split.

    The cosine schedule always spans the full ``epochs * ceil(N / batch_size)`` steps;
    ``max_steps`` stops early (resume continues from there).
    """
    return _run(config, model, manifest, 0, [], None, max_steps, checkpoint_dir, dry_run)


def check_resumable(checkpoint: Checkpoint, config: TrainConfig, manifest: DatasetManifest) -> None:
    if manifest.dataset_id != checkpoint.dataset_id:
        raise ConfigError(f"checkpoint was trained on {checkpoint.dataset_id!r}, not {manifest.dataset_id!r}")
    stored = checkpoint.config
    for k, v in config.to_dict().items():
        if k not in _RESUME_FREE and stored.get(k) != v:
            raise ConfigError(f"config mismatch on {k}: checkpoint {stored.get(k)!r}, requested {v!r}")


def resume(checkpoint: Union[Checkpoint, PathLike], manifest: DatasetManifest,
           model: Optional[AdapterSegModel] = None, max_steps: Optional[int] = None,
           checkpoint_dir: Optional[PathLike] = None, config: Optional[TrainConfig] = None) -> Checkpoint:
    """Continue a run from ``checkpoint``; ``model`` (if given) must carry the same encoder."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    config = config or checkpoint.train_config
    check_resumable(checkpoint, config, manifest)
    if model is None:
        model = checkpoint.build_model()
    else:
        if encoder_hash(model.encoder) != checkpoint.encoder_hash:
            raise CheckpointError("encoder hash mismatch on resume")
        load_trainable(model, checkpoint.params)
    return _run(config, model, manifest, checkpoint.step, list(checkpoint.history),
                checkpoint.optimizer, max_steps, checkpoint_dir, dry_run=False)


class Predictor:
    """record -> probability map [R, R] for a trained model."""

    def __init__(self, model: AdapterSegModel, resolution: Optional[int] = None):
        self.model = model.eval()
        self.resolution = resolution or model.config.encoder.input_resolution
        self.dtype = next(model.decoder.parameters()).dtype

    @torch.no_grad()
    def __call__(self, record) -> np.ndarray:
        img = preprocess(record.image_path, self.resolution).to(self.dtype)
        return torch.sigmoid(self.model(img[None]))[0, 0].double().numpy()


class MaskPassthrough:
    """Bypass predictor returning the ground-truth mask itself."""

    def __init__(self, instance: bool = False):
        self.instance = instance

    def __call__(self, record) -> np.ndarray:
        return load_mask(record.mask_path, self.instance).astype(np.float64)
