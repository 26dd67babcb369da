"""Training loop: Adam with weight decay, seeded batching, best/last checkpoints."""
import dataclasses
import logging
import os

import numpy as np

from . import metrics
from .datacube import batch_iter
from .errors import ContractError
from .model import save_state
from .nn import bce_loss
from .tensor import no_grad

log = logging.getLogger(__name__)

LOG_HEADER = "epoch, step, train_loss, val_loss, val_f1, val_auroc"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02
    decoupled_decay: bool = False
    batch_size: int = 256
    epochs: int = 40
    seed: int = 0
    threshold: float = 0.5

    def validate(self):
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        return self


class Adam:
    """Adam; weight decay is added to the gradient unless ``decoupled`` is set."""

    def __init__(self, params, lr=3e-5, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, decoupled=False):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.decoupled_decay)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, optimizer):
    """Apply one update of ``optimizer`` to ``params`` (their ``.grad`` must be set)."""
    if [id(p) for p in params] != [id(p) for p in optimizer.params]:
        raise ContractError("optimizer was built for a different parameter list")
    optimizer.step()


def predict_scores(model, archive, batch_size=64):
    """Positive-class probabilities in archive order (eval mode)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for b in batch_iter(archive, batch_size):
                out.append(model(b.dyn, b.stat, b.tau).data[:, 1].astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, archive, threshold=0.5, batch_size=64):
    """Metric report plus mean BCE for ``archive`` under the model in eval mode."""
    scores = predict_scores(model, archive, batch_size)
    rep = metrics.report(scores, archive.labels, threshold)
    p = np.clip(scores, 1e-7, 1 - 1e-7)
    y = archive.labels.astype(np.float64)
    rep["Loss"] = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return rep


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float = float("nan")
    val_f1: float = float("nan")
    val_auroc: float = float("nan")

    def line(self):
        return f"{self.epoch}, {self.step}, {self.train_loss!r}, {self.val_loss!r}, {self.val_f1!r}, {self.val_auroc!r}"


@dataclasses.dataclass
class TrainingLog:
    step_losses: list = dataclasses.field(default_factory=list)
    epochs: list = dataclasses.field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0

    def lines(self):
        return [LOG_HEADER] + [e.line() for e in self.epochs]


class Trainer:
    """Owns a model, its optimizer and the seeded batch order."""

    def __init__(self, model, cfg=None):
        self.model = model
        self.cfg = (cfg or TrainConfig()).validate()
        self.params = model.parameters()
        self.opt = Adam.from_config(self.params, self.cfg)
        self.log = TrainingLog()
        self.epoch = 0
        self.step_count = 0
        # extra checkpoint sections, e.g. the input normalization
        self.checkpoint_extra = {}
        model.reseed(self.cfg.seed)

    def train_epoch(self, archive):
        if len(archive) == 0:
            raise ContractError("training archive is empty")
        self.model.train()
        losses = []
        shuffle_seed = self.cfg.seed * 100003 + self.epoch
        for b in batch_iter(archive, self.cfg.batch_size, shuffle_seed):
            self.opt.zero_grad()
            probs = self.model(b.dyn, b.stat, b.tau)
            loss = bce_loss(probs, b.labels)
            loss.backward()
            adam_step(self.params, self.opt)
            self.step_count += 1
            value = float(loss.item())
            losses.append(value * len(b.labels))
            self.log.step_losses.append(value)
        self.epoch += 1
        return float(np.sum(losses) / len(archive))

    def fit(self, train_archive, val_archive=None, out_dir=None, epochs=None, callback=None):
        """Train for ``epochs`` (default from config); keeps the best-F1 and last checkpoints."""
        if val_archive is not None and len(val_archive) == 0:
            raise ContractError("validation archive is empty")
        epochs = self.cfg.epochs if epochs is None else epochs
        log_file = None
        if out_dir is not None:
            log_file = open(os.path.join(out_dir, "train.log"), "a")
            if os.path.getsize(log_file.name) == 0:
                log_file.write(LOG_HEADER + "\n")
        try:
            for _ in range(epochs):
                train_loss = self.train_epoch(train_archive)
                rec = EpochRecord(self.epoch, self.step_count, train_loss)
                if val_archive is not None:
                    rep = evaluate(self.model, val_archive, self.cfg.threshold)
                    rec.val_loss, rec.val_f1 = rep["Loss"], rep["F1"]
                    rec.val_auroc = float("nan") if rep["AUROC"] is None else rep["AUROC"]
                    if out_dir is not None and rec.val_f1 > self.log.best_f1:
                        save_state(self.model, os.path.join(out_dir, "best.ckpt"), self.checkpoint_extra)
                    if rec.val_f1 > self.log.best_f1:
                        self.log.best_f1, self.log.best_epoch = rec.val_f1, self.epoch
                self.log.epochs.append(rec)
                log.info("epoch %d loss %.5f val_f1 %.2f", rec.epoch, rec.train_loss, rec.val_f1)
                if log_file is not None:
                    log_file.write(rec.line() + "\n")
                    log_file.flush()
                if callback is not None and callback(self, rec):
                    break
        finally:
            if log_file is not None:
                log_file.close()
        if out_dir is not None:
            save_state(self.model, os.path.join(out_dir, "last.ckpt"), self.checkpoint_extra)
            if val_archive is None:
                save_state(self.model, os.path.join(out_dir, "best.ckpt"), self.checkpoint_extra)
        return self.log


def train(model, train_archive, val_archive, cfg, out_dir=None):
    return Trainer(model, cfg).fit(train_archive, val_archive, out_dir)
