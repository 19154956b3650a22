"""Joint training of the classifier and its self-teacher, evaluation and persistence.

Run directory contents::

    config.cfg        config echo
    metrics.jsonl     one EpochMetrics row per epoch (wall-clock excluded)
    timing.jsonl      {"epoch", "seconds"} per epoch
    checkpoints/      epoch_NNNN.frsk at the configured cadence
    final.frsk        state after the last epoch
    abort.json        written only when a step produces a non-finite value
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .backbone import build_backbone
from .checkpoint import CheckpointError, CheckpointState, load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_text, flatten
from .data import BatchStream, DataError, Dataset, load_dataset
from .losses import FitnetRegressor, LossBundle, ce_loss, total_loss
from .nn import Module
from .teacher import build_teacher

LOSS_KEYS = ("ce_student", "ce_teacher", "kd", "feature", "total")


class NumericalAbort(RuntimeError):
    """A training step produced a non-finite value; see ``abort.json``."""


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    ce_student: float
    ce_teacher: float
    kd: float
    feature: float
    total: float
    student_train_acc: float
    teacher_train_acc: float | None
    student_test_acc: float | None
    teacher_test_acc: float | None
    seconds: float = 0.0

    def row(self) -> dict:
        """Deterministic part of the record (everything except wall-clock time)."""
        d = dataclasses.asdict(self)
        del d["seconds"]
        return d


def derive_seed(base: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base, epoch]).generate_state(1)[0])


class Networks(Module):
    """Backbone plus optional self-teacher and FitNet regressor, under one name space."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        dtype = np.dtype(cfg.precision).type
        self.backbone = build_backbone(cfg.backbone, seed=cfg.seed_init, dtype=dtype)
        self.teacher = None
        self.regressor = None
        if cfg.teacher.enabled:
            tcfg = cfg.teacher_config()
            self.teacher = build_teacher(tcfg, seed=cfg.seed_init + 1, dtype=dtype)
            if cfg.loss.feature_kind == "fitnet":
                self.regressor = FitnetRegressor(cfg.backbone.channels, tcfg.widths,
                                                 rng=np.random.default_rng(cfg.seed_init + 2),
                                                 dtype=dtype)


def _bundle_without_teacher(z_student: Tensor, labels) -> LossBundle:
    ce = ce_loss(z_student, labels)
    zero = Tensor(np.zeros((), dtype=z_student.dtype))
    return LossBundle(ce, zero, zero, zero, ce)


def _correct(logits: Tensor, labels) -> int:
    return int((np.argmax(logits.data, axis=1) == labels).sum())


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.precision).type
        self.nets = Networks(cfg)
        self.params = dict(self.nets.named_parameters())
        self.decayed = self.nets.decayed_names()
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.epoch = 0
        self.normalization: dict | None = None

    # -------------------------------------------------------------- forward
    def losses(self, x: Tensor, labels, mode: str = "train"):
        """Forward both networks and build the loss bundle; returns (bundle, z_s, z_t)."""
        self.nets.train(mode == "train")
        feats, z_s = self.nets.backbone(x)
        if self.nets.teacher is None:
            return _bundle_without_teacher(z_s, labels), z_s, None
        t_in = [ad.detach(f) for f in feats] if self.cfg.teacher.detach_input else feats
        t_maps, z_t = self.nets.teacher(t_in)
        bundle = total_loss(z_s, z_t, feats, t_maps, labels, self.cfg.loss, self.nets.regressor)
        return bundle, z_s, z_t

    def gradients(self, bundle: LossBundle) -> dict[str, np.ndarray]:
        grads = ad.backward(bundle.total)
        return {name: grads[p] for name, p in self.params.items() if p in grads}

    def sgd_step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        o = self.cfg.optim
        for name, g in grads.items():
            p = self.params[name]
            if name in self.decayed and o.weight_decay:
                g = g + o.weight_decay * p.data
            v = self.velocity[name]
            v *= o.momentum
            v += g
            p.data -= lr * v

    # ---------------------------------------------------------------- epochs
    def stream(self, ds: Dataset, epoch: int, train: bool, mean=None, std=None) -> BatchStream:
        if train:
            return BatchStream(ds, self.cfg.batch_size, derive_seed(self.cfg.seed_shuffle, epoch),
                               self.cfg.augment, derive_seed(self.cfg.seed_augment, epoch),
                               mean, std, self.dtype)
        return BatchStream(ds, max(self.cfg.batch_size, 256), None, mean=mean, std=std,
                           dtype=self.dtype)

    def train_epoch(self, ds: Dataset, out_dir: Path | None = None) -> dict:
        epoch = self.epoch
        lr = self.cfg.lr_at(epoch)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        hits_s = hits_t = 0
        for step, batch in enumerate(self.stream(ds, epoch, train=True)):
            values = None
            try:
                bundle, z_s, z_t = self.losses(Tensor(batch.images), batch.labels, "train")
                values = bundle.values()
                if not all(np.isfinite(v) for v in values.values()):
                    raise FloatingPointError("non-finite loss component")
                grads = self.gradients(bundle)
            except (FloatingPointError, DomainError) as exc:
                self._dump_abort(out_dir, epoch, step, batch.indices, values, exc)
                raise NumericalAbort(f"epoch {epoch + 1} step {step}: {exc}") from exc
            self.sgd_step(grads, lr)
            n = len(batch.labels)
            for k in LOSS_KEYS:
                sums[k] += values[k] * n
            hits_s += _correct(z_s, batch.labels)
            if z_t is not None:
                hits_t += _correct(z_t, batch.labels)
        self.epoch += 1
        n = len(ds)
        out = {k: sums[k] / n for k in LOSS_KEYS}
        out["lr"] = lr
        out["student_train_acc"] = hits_s / n
        out["teacher_train_acc"] = hits_t / n if self.nets.teacher is not None else None
        return out

    def evaluate(self, ds: Dataset, mean=None, std=None) -> tuple[float, float | None]:
        """Eval-mode top-1 accuracy of (student, teacher); teacher is None when disabled."""
        hits_s = hits_t = 0
        self.nets.train(False)
        for batch in self.stream(ds, 0, train=False, mean=mean, std=std):
            feats, z_s = self.nets.backbone(Tensor(batch.images))
            hits_s += _correct(z_s, batch.labels)
            if self.nets.teacher is not None:
                _, z_t = self.nets.teacher(feats)
                hits_t += _correct(z_t, batch.labels)
        n = len(ds)
        return hits_s / n, (hits_t / n if self.nets.teacher is not None else None)

    def _dump_abort(self, out_dir, epoch, step, indices, values, exc) -> None:
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        info = {"epoch": epoch + 1, "step": step, "error": str(exc),
                "batch_indices": [int(i) for i in indices], "loss_components": values}
        (out_dir / "abort.json").write_text(json.dumps(info, indent=2) + "\n")

    # ------------------------------------------------------------ persistence
    def state(self) -> CheckpointState:
        return CheckpointState(
            config_text=self.cfg.to_text(),
            epoch=self.epoch,
            params={n: p.data for n, p in self.params.items()},
            buffers=dict(self.nets.named_buffers()),
            momentum=dict(self.velocity),
            rng={"shuffle_seed": derive_seed(self.cfg.seed_shuffle, self.epoch),
                 "augment_seed": derive_seed(self.cfg.seed_augment, self.epoch)},
            extra={"normalization": self.normalization} if self.normalization else {},
        )

    def restore(self, state: CheckpointState) -> None:
        for table, dest, what in ((state.params, self.params, "parameter"),
                                  (state.momentum, self.velocity, "momentum buffer")):
            if set(table) != set(dest):
                missing = sorted(set(dest) ^ set(table))[:3]
                raise CheckpointError(f"{what} names differ from the config, e.g. {missing}")
        for name, arr in state.params.items():
            p = self.params[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} vs {p.shape}")
            p.data[...] = arr
            self.velocity[name][...] = state.momentum[name]
        buffers = dict(self.nets.named_buffers())
        if set(state.buffers) != set(buffers):
            raise CheckpointError("buffer names differ from the config")
        for name, arr in state.buffers.items():
            self.nets.set_buffer(name, arr.astype(buffers[name].dtype).copy())
        self.epoch = state.epoch
        self.normalization = state.extra.get("normalization")
        expect = {"shuffle_seed": derive_seed(self.cfg.seed_shuffle, self.epoch),
                  "augment_seed": derive_seed(self.cfg.seed_augment, self.epoch)}
        if state.rng and state.rng != expect:
            raise CheckpointError("stored rng state does not match the config seeds")


def trainer_from_checkpoint(path) -> Trainer:
    state = load_checkpoint(path)
    trainer = Trainer(config_from_text(state.config_text))
    trainer.restore(state)
    return trainer


def _check_dataset(ds: Dataset, cfg: TrainConfig, what: str) -> None:
    if ds.extent != cfg.backbone.image_size:
        raise DataError(f"{what} extent {ds.extent} does not match model.image_size {cfg.backbone.image_size}")
    if ds.num_classes != cfg.backbone.num_classes:
        raise DataError(f"{what} has {ds.num_classes} classes, model.num_classes is {cfg.backbone.num_classes}")


# Keys that do not influence the trained weights or metrics.
_BOOKKEEPING_KEYS = ("output.dir", "train.checkpoint_every")


def _result_keys(cfg: TrainConfig) -> dict:
    return {k: v for k, v in flatten(cfg).items() if k not in _BOOKKEEPING_KEYS}


def train(cfg: TrainConfig, train_ds: Dataset | None = None, test_ds: Dataset | None = None,
          resume: str | Path | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> EpochMetrics:
    """Train for ``cfg.epochs`` epochs and write the run directory; returns the last row."""
    cfg.validate()
    if train_ds is None:
        if not cfg.train_manifest:
            raise DataError("no training data: set data.train")
        train_ds = load_dataset(cfg.train_manifest)
    if test_ds is None and cfg.test_manifest:
        test_ds = load_dataset(cfg.test_manifest)
    _check_dataset(train_ds, cfg, "training set")
    if test_ds is not None:
        _check_dataset(test_ds, cfg, "test set")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg)
    trainer.normalization = {"mean": [float(v) for v in train_ds.mean],
                             "std": [float(v) for v in train_ds.std]}
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    if resume is not None:
        state = load_checkpoint(resume)
        if _result_keys(config_from_text(state.config_text)) != _result_keys(cfg):
            raise CheckpointError("checkpoint config differs from the requested config")
        trainer.restore(state)
        for p in (metrics_path, timing_path):
            kept = p.read_text().splitlines()[:trainer.epoch] if p.exists() else []
            p.write_text("".join(line + "\n" for line in kept))
    else:
        metrics_path.write_text("")
        timing_path.write_text("")
    (out / "config.cfg").write_text(cfg.to_text())

    last = None
    while trainer.epoch < cfg.epochs:
        t0 = time.perf_counter()
        stats = trainer.train_epoch(train_ds, out)
        s_test = t_test = None
        if test_ds is not None:
            s_test, t_test = trainer.evaluate(test_ds, train_ds.mean, train_ds.std)
        last = EpochMetrics(epoch=trainer.epoch, lr=stats["lr"],
                            **{k: stats[k] for k in LOSS_KEYS},
                            student_train_acc=stats["student_train_acc"],
                            teacher_train_acc=stats["teacher_train_acc"],
                            student_test_acc=s_test, teacher_test_acc=t_test,
                            seconds=time.perf_counter() - t0)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(last.row()) + "\n")
        with timing_path.open("a") as fh:
            fh.write(json.dumps({"epoch": last.epoch, "seconds": round(last.seconds, 3)}) + "\n")
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"epoch_{trainer.epoch:04d}.frsk", trainer.state())
        if on_epoch is not None:
            on_epoch(last)
    save_checkpoint(out / "final.frsk", trainer.state())
    if last is None:
        last = read_metrics(metrics_path)[-1]
    return last


def read_metrics(path) -> list[EpochMetrics]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return [EpochMetrics(**r) for r in rows]


def evaluate(checkpoint, manifest) -> tuple[float, float | None]:
    """Top-1 accuracy of (student, teacher) from ``checkpoint`` on the dataset at ``manifest``."""
    trainer = trainer_from_checkpoint(checkpoint)
    ds = load_dataset(manifest)
    _check_dataset(ds, trainer.cfg, "dataset")
    return trainer.evaluate(ds)
