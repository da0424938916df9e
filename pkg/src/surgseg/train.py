"""Training loop, evaluation driver and run configuration.

Each iteration runs two phases in a fixed order: (a) one discriminator
step on one-hot ground truth versus detached segmentor probabilities,
then (b) one segmentor step on the full objective with the
discriminator frozen.  Both optimizers follow a polynomial learning
rate decay.  The data order is a pure function of (seed, iteration), so
runs are reproducible and checkpoint resume continues the exact
trajectory of an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import data as D
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .discriminator import Discriminator, one_hot
from .errors import ConfigError, DataError, NumericalError
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_loss,
    discriminator_loss,
    seg_loss,
    subsample_labels,
    total_loss,
)
from .metrics import MetricReport, aggregate_reports, evaluate_multiclass
from .network import (
    AuxiliaryBranchInference,
    MainBranchInference,
    NetworkConfig,
    Segmentor,
    build_segmentor,
    load_state_arrays,
    state_dict_arrays,
)


@dataclass
class TrainConfig:
    """Run hyper-parameters; every key is settable from a config file."""

    max_iter: int
    batch_size: int = 4
    base_lr_seg: float = 1e-3
    base_lr_disc: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    aux_weight: float = 0.4
    adv_weight: float = 0.01
    adversarial_enabled: bool = True
    seed: int = 0
    disc_seed: int | None = None
    disc_base_channels: int = 64
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_prob: float = 0.0
    blur_prob: float = 0.0
    checkpoint_every: int = 0
    eval_every: int = 0
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        for name in ("base_lr_seg", "base_lr_disc", "poly_power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("weight_decay", "aux_weight", "adv_weight", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.disc_base_channels < 1:
            raise ConfigError(f"disc_base_channels must be positive, got {self.disc_base_channels}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(aux_weight=self.aux_weight, adv_weight=self.adv_weight)

    @property
    def augment_config(self) -> D.AugmentConfig:
        return D.AugmentConfig(
            hflip_prob=self.hflip_prob,
            vflip_prob=self.vflip_prob,
            brightness_prob=self.brightness_prob,
            blur_prob=self.blur_prob,
        )


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    if name not in _CONFIG_FIELDS:
        raise ConfigError(f"unknown config key {name!r}; valid keys: {sorted(_CONFIG_FIELDS)}")
    text = raw.strip()
    ftype = _CONFIG_FIELDS[name].type
    try:
        if ftype == "bool":
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "int | None":
            return None if text.lower() == "none" else int(text)
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc
    return text


def load_train_config(path: str | Path | None, overrides: Sequence[str] = ()) -> TrainConfig:
    """Build a TrainConfig from a ``key = value`` file plus ``key=value`` overrides.

    Blank lines and ``#`` comments are ignored.  Unknown keys and
    malformed values are rejected rather than silently dropped.
    """
    values: dict = {}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            values[key] = _coerce(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, raw)
    if "max_iter" not in values:
        raise ConfigError("config is missing required key 'max_iter'")
    return TrainConfig(**values)


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """Polynomial decay ``base * (1 - iteration/max_iter) ** power``.

    Defined for ``0 <= iteration <= max_iter``; hits exactly 0 at the
    final boundary.
    """
    if max_iter < 1:
        raise ConfigError(f"max_iter must be at least 1, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside 0..{max_iter}")
    return base_lr * (1.0 - iteration / max_iter) ** power


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> tuple[int, np.ndarray]:
    """Deterministic sample indices of one iteration.

    Every epoch reshuffles all ``n`` samples with ``default_rng((seed,
    epoch))`` and slices consecutive batches off the permutation, so the
    mapping iteration -> indices depends only on the arguments.
    """
    if n < 1 or batch_size < 1:
        raise DataError(f"need n >= 1 and batch_size >= 1, got n={n}, batch_size={batch_size}")
    batches_per_epoch = math.ceil(n / batch_size)
    epoch, slot = divmod(iteration, batches_per_epoch)
    order = np.random.default_rng((seed, epoch)).permutation(n)
    return epoch, order[slot * batch_size : (slot + 1) * batch_size]


def _prepare_frame_label(
    sample: D.Sample, task: D.TaskSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Load one sample; raw-size images get the canvas crop, others pass as-is."""
    frame = D.load_frame(sample.frame_path)
    is_raw = frame.shape[:2] == (D.RAW_HEIGHT, D.RAW_WIDTH)
    if is_raw:
        frame = D.crop_canvas(frame)
    label = D.load_label(sample, task, crop=is_raw)
    if label.shape != frame.shape[:2]:
        raise DataError(
            f"{sample.frame_path}: frame {frame.shape[:2]} and label {label.shape} disagree"
        )
    return frame, label


def _to_batch(frames: list[np.ndarray], labels: list[np.ndarray]) -> tuple[Tensor, Tensor]:
    sizes = {f.shape for f in frames}
    if len(sizes) != 1:
        raise DataError(f"batch mixes frame sizes: {sorted(sizes)}")
    x = torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2).copy())
    y = torch.from_numpy(np.stack(labels).astype(np.int64))
    return x, y


class Trainer:
    """Owns the two networks, their optimizers and the iteration counter."""

    def __init__(
        self,
        config: TrainConfig,
        task: D.TaskSpec | str,
        net_config: NetworkConfig | None = None,
        channel_means: np.ndarray | None = None,
    ) -> None:
        if isinstance(task, str):
            task = D.TaskSpec.from_kind(task)
        if net_config is None:
            net_config = NetworkConfig(num_classes=task.num_classes)
        if net_config.num_classes != task.num_classes:
            raise ConfigError(
                f"network has {net_config.num_classes} classes but task {task.kind!r} needs {task.num_classes}"
            )
        self.config = config
        self.task = task
        self.net_config = net_config
        self.channel_means = None if channel_means is None else np.asarray(channel_means, dtype=np.float64)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)

        torch.manual_seed(config.seed)
        self.segmentor = build_segmentor(net_config)
        # The discriminator draws from its own seed so that runs with
        # adversarial training disabled do not depend on its init.
        disc_seed = config.disc_seed if config.disc_seed is not None else config.seed + 1
        torch.manual_seed(disc_seed)
        self.discriminator = Discriminator(task.num_classes, config.disc_base_channels)

        self.opt_seg = torch.optim.Adam(
            self.segmentor.parameters(),
            lr=config.base_lr_seg,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
        self.opt_disc = torch.optim.Adam(
            self.discriminator.parameters(),
            lr=config.base_lr_disc,
            betas=(config.beta1, config.beta2),
        )
        self.iteration = 0
        self.loss_history: list[dict[str, float]] = []

    # -- one optimization step -------------------------------------------

    def step(self, frames: Tensor, labels: Tensor) -> dict[str, float]:
        """Run phases (a) and (b) on one batch and advance the counter."""
        if self.iteration >= self.config.max_iter:
            raise ConfigError(f"trainer already ran its {self.config.max_iter} iterations")
        lr_seg = poly_lr(self.config.base_lr_seg, self.iteration, self.config.max_iter, self.config.poly_power)
        lr_disc = poly_lr(self.config.base_lr_disc, self.iteration, self.config.max_iter, self.config.poly_power)
        for group in self.opt_seg.param_groups:
            group["lr"] = lr_seg
        for group in self.opt_disc.param_groups:
            group["lr"] = lr_disc

        self.segmentor.train()
        self.discriminator.train()
        main_logits, aux_logits = self.segmentor(frames)

        disc_value = 0.0
        if self.config.adversarial_enabled:
            real, fake = self._discriminator_inputs(main_logits.detach(), labels)
            disc_value = self._update_discriminator(real, fake, lr_disc)
        breakdown = self._update_segmentor(main_logits, aux_logits, labels, lr_seg)

        record = {
            "iteration": self.iteration,
            "lr_seg": lr_seg,
            "lr_disc": lr_disc,
            "disc": disc_value,
            **breakdown.detached(),
        }
        self.loss_history.append(record)
        self.iteration += 1
        return record

    def _discriminator_inputs(self, main_logits: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
        factor = labels.shape[-1] // main_logits.shape[-1]
        coarse = subsample_labels(labels, factor)
        real = one_hot(coarse, self.task.num_classes)
        fake = F.softmax(main_logits, dim=1)
        return real, fake

    def _update_discriminator(self, real: Tensor, fake: Tensor, lr: float) -> float:
        for p in self.discriminator.parameters():
            p.requires_grad_(True)
        loss = discriminator_loss(self.discriminator(real), self.discriminator(fake))
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite discriminator loss {float(loss)!r} at iteration {self.iteration} (lr_disc={lr})"
            )
        self.opt_disc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_disc.step()
        return float(loss.detach())

    def _update_segmentor(
        self, main_logits: Tensor, aux_logits: Tensor, labels: Tensor, lr: float
    ) -> LossBreakdown:
        supervised = seg_loss(main_logits, aux_logits, labels, self.config.weights)
        if self.config.adversarial_enabled:
            # Freeze the discriminator so the adversarial gradient flows
            # into the segmentor only.
            for p in self.discriminator.parameters():
                p.requires_grad_(False)
            confidence = self.discriminator(F.softmax(main_logits, dim=1))
            adv = adversarial_loss(confidence)
            breakdown = total_loss(supervised, adv, self.config.weights)
        else:
            breakdown = total_loss(supervised, torch.zeros((), dtype=main_logits.dtype), self.config.weights)
        if not torch.isfinite(breakdown.total):
            raise NumericalError(
                f"non-finite segmentor loss at iteration {self.iteration}: "
                f"{breakdown.detached()} (lr_seg={lr})"
            )
        self.opt_seg.zero_grad(set_to_none=True)
        breakdown.total.backward()
        self.opt_seg.step()
        if self.config.adversarial_enabled:
            for p in self.discriminator.parameters():
                p.requires_grad_(True)
        return breakdown

    # -- persistence -------------------------------------------------------

    def _optimizer_arrays(self, opt: torch.optim.Optimizer, names: list[str], prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for idx, st in opt.state_dict()["state"].items():
            for key, val in st.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                out[f"{prefix}{names[idx]}/{key}"] = arr
        return out

    def _load_optimizer_arrays(
        self, opt: torch.optim.Optimizer, names: list[str], prefix: str, arrays: dict[str, np.ndarray]
    ) -> None:
        state: dict[int, dict[str, Tensor]] = {}
        for idx, name in enumerate(names):
            entry = {
                key.rsplit("/", 1)[1]: torch.from_numpy(arr.copy())
                for key, arr in arrays.items()
                if key.startswith(f"{prefix}{name}/")
            }
            if entry:
                state[idx] = entry
        sd = opt.state_dict()
        opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})

    def save(self, path: str | Path) -> None:
        """Write a resumable checkpoint (both nets plus optimizer moments)."""
        seg_names = [n for n, _ in self.segmentor.named_parameters()]
        disc_names = [n for n, _ in self.discriminator.named_parameters()]
        arrays = {
            **state_dict_arrays(self.segmentor, "segmentor/"),
            **state_dict_arrays(self.discriminator, "discriminator/"),
            **self._optimizer_arrays(self.opt_seg, seg_names, "opt_seg/"),
            **self._optimizer_arrays(self.opt_disc, disc_names, "opt_disc/"),
        }
        config = {
            "task": self.task.kind,
            "network": self.net_config.to_dict(),
            "train": dataclasses.asdict(self.config),
        }
        meta = {
            "iteration": self.iteration,
            "loss_history": self.loss_history,
            "channel_means": None if self.channel_means is None else self.channel_means.tolist(),
        }
        save_checkpoint(path, arrays, config, meta)

    @classmethod
    def restore(cls, path: str | Path) -> "Trainer":
        """Rebuild a trainer mid-run; continuing matches an uninterrupted run."""
        ck = load_checkpoint(path)
        trainer = cls.from_checkpoint_header(ck)
        load_state_arrays(trainer.segmentor, ck.arrays, "segmentor/")
        load_state_arrays(trainer.discriminator, ck.arrays, "discriminator/")
        seg_names = [n for n, _ in trainer.segmentor.named_parameters()]
        disc_names = [n for n, _ in trainer.discriminator.named_parameters()]
        trainer._load_optimizer_arrays(trainer.opt_seg, seg_names, "opt_seg/", ck.arrays)
        trainer._load_optimizer_arrays(trainer.opt_disc, disc_names, "opt_disc/", ck.arrays)
        trainer.iteration = int(ck.meta.get("iteration", 0))
        trainer.loss_history = list(ck.meta.get("loss_history", []))
        return trainer

    @classmethod
    def from_checkpoint_header(cls, ck: Checkpoint) -> "Trainer":
        try:
            task = D.TaskSpec.from_kind(ck.config["task"])
            net_config = NetworkConfig.from_dict(ck.config["network"])
            train_config = TrainConfig(**ck.config["train"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"checkpoint config is incomplete: {exc}") from exc
        means = ck.meta.get("channel_means")
        return cls(train_config, task, net_config, None if means is None else np.asarray(means))


def format_log_line(record: dict[str, float]) -> str:
    """Fixed-width log line; identical float trajectories give identical bytes."""
    return (
        f"iter={record['iteration']:06d}"
        f" lr_seg={record['lr_seg']:.9e}"
        f" lr_disc={record['lr_disc']:.9e}"
        f" main={record['main']:.9e}"
        f" aux={record['aux']:.9e}"
        f" adv={record['adv']:.9e}"
        f" disc={record['disc']:.9e}"
        f" total={record['total']:.9e}"
    )


def fit(
    config: TrainConfig,
    train_manifest: D.DatasetManifest,
    out_dir: str | Path,
    eval_manifest: D.DatasetManifest | None = None,
    net_config: NetworkConfig | None = None,
    resume: str | Path | None = None,
    on_log: Callable[[str], None] | None = None,
) -> Path:
    """Train to ``config.max_iter`` and return the final checkpoint path.

    Writes ``train.log`` (one line per iteration), ``means.txt``,
    periodic ``ckpt_iter*.bin`` / ``metrics_iter*.txt`` files and the
    final ``ckpt_final.bin`` under ``out_dir``.
    """
    if len(train_manifest) == 0:
        raise DataError("training manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task = train_manifest.task

    if resume is not None:
        trainer = Trainer.restore(resume)
        if trainer.task.kind != task.kind:
            raise DataError(f"checkpoint task {trainer.task.kind!r} != manifest task {task.kind!r}")
        config = trainer.config
    else:
        trainer = Trainer(config, task, net_config)
    if trainer.channel_means is None:
        trainer.channel_means = D.compute_channel_means(train_manifest)
    D.save_channel_means(out_dir / "means.txt", trainer.channel_means)

    n = len(train_manifest)
    aug = config.augment_config
    log_path = out_dir / "train.log"
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log:
        for it in range(trainer.iteration, config.max_iter):
            epoch, idxs = batch_indices(config.seed, it, n, config.batch_size)
            frames, labels = [], []
            for idx in idxs:
                frame, label = _prepare_frame_label(train_manifest.samples[idx], task)
                frame, label = D.augment(frame, label, D.sample_seed(config.seed, epoch, int(idx)), aug)
                frames.append(D.normalize(frame, trainer.channel_means))
                labels.append(label)
            x, y = _to_batch(frames, labels)
            record = trainer.step(x, y)
            line = format_log_line(record)
            log.write(line + "\n")
            if on_log is not None:
                on_log(line)
            done = trainer.iteration
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.max_iter:
                trainer.save(out_dir / f"ckpt_iter{done:06d}.bin")
            if config.eval_every and eval_manifest is not None and done % config.eval_every == 0:
                report = evaluate_model(trainer.segmentor, eval_manifest, task, trainer.channel_means)
                (out_dir / f"metrics_iter{done:06d}.txt").write_text(report.to_text() + "\n")
                eval_line = f"eval iter={done:06d} mean_foreground_dice={report.mean_foreground_dice:.6f}"
                log.write(eval_line + "\n")
                if on_log is not None:
                    on_log(eval_line)
    final = out_dir / "ckpt_final.bin"
    trainer.save(final)
    return final


def evaluate_model(
    segmentor: Segmentor,
    manifest: D.DatasetManifest,
    task: D.TaskSpec,
    channel_means: np.ndarray,
    branch: str = "main",
) -> MetricReport:
    """Score a segmentor over a manifest with per-sample metric reports."""
    if len(manifest) == 0:
        raise DataError("evaluation manifest is empty")
    if branch not in ("main", "auxiliary"):
        raise ConfigError(f"unknown branch {branch!r}; expected 'main' or 'auxiliary'")
    was_training = segmentor.training
    segmentor.eval()
    reports = []
    try:
        for sample in manifest.samples:
            frame, label = _prepare_frame_label(sample, task)
            x = torch.from_numpy(
                D.normalize(frame, channel_means).transpose(2, 0, 1).copy()
            ).unsqueeze(0)
            probs = segmentor.predict(x, branch=branch)
            pred = probs.argmax(dim=1)[0].numpy().astype(np.uint8)
            reports.append(evaluate_multiclass(pred, label, task))
    finally:
        segmentor.train(was_training)
    return aggregate_reports(reports)


def segmentor_from_checkpoint(path: str | Path) -> tuple[Segmentor, D.TaskSpec, np.ndarray | None]:
    """Load just the segmentor (plus task and normalization constants)."""
    ck = load_checkpoint(path)
    try:
        task = D.TaskSpec.from_kind(ck.config["task"])
        net_config = NetworkConfig.from_dict(ck.config["network"])
    except KeyError as exc:
        raise DataError(f"checkpoint config is incomplete: {exc}") from exc
    segmentor = build_segmentor(net_config)
    load_state_arrays(segmentor, ck.arrays, "segmentor/")
    segmentor.eval()
    means = ck.meta.get("channel_means")
    return segmentor, task, None if means is None else np.asarray(means, dtype=np.float64)


def inference_wrapper(segmentor: Segmentor, branch: str):
    if branch == "main":
        return MainBranchInference(segmentor)
    if branch == "auxiliary":
        return AuxiliaryBranchInference(segmentor)
    raise ConfigError(f"unknown branch {branch!r}; expected 'main' or 'auxiliary'")
