"""Adam, plateau learning-rate schedule, early stopping, checkpointing and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, RunConfig, TrainConfig
from .losses import composite_loss, confusion_matrix, metrics_from_confusion
from .model import SegmentationModel
from .params import ModelParams
from .serialization import CheckpointError, load_checkpoint, save_checkpoint
from .synth import Sample, augment
from .tensor import NonFiniteError, backward, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_total,train_final,train_aux,val_loss,val_miou,val_dice,lr"


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value; ``path`` names the first offending tensor."""

    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"non-finite value at '{path}': {detail}")


class Adam:
    """Bias-corrected Adam over every tensor of a :class:`ModelParams`."""

    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {p: np.zeros_like(t.data) for p, t in params.items()}
        self.v = {p: np.zeros_like(t.data) for p, t in params.items()}

    def step(self) -> None:
        missing = [p for p, t in self.params.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for path, t in self.params.items():
            g = t.grad
            m, v = self.m[path], self.v[path]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m:{p}": a for p, a in self.m.items()}
        out.update({f"adam.v:{p}": a for p, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int, lr: float) -> None:
        for p in self.m:
            self.m[p][...] = tensors[f"adam.m:{p}"]
            self.v[p][...] = tensors[f"adam.v:{p}"]
        self.step_count = step
        self.lr = lr


@dataclass
class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` consecutive epochs without a strictly lower loss."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-7
    best: float = math.inf
    num_bad: int = 0
    reductions: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                new_lr = max(self.lr * self.factor, self.min_lr)
                if new_lr < self.lr:
                    self.reductions += 1
                self.lr = new_lr
                self.num_bad = 0
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 15
    best: float = math.inf
    num_bad: int = 0

    def step(self, val_loss: float) -> bool:
        """Record an epoch; return True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
        return self.num_bad >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_final: float
    train_aux: float
    val_loss: float
    val_miou: float
    val_dice: float
    lr: float
    val_final: float = float("nan")
    val_aux: float = float("nan")

    def csv_row(self) -> str:
        vals = [self.train_total, self.train_final, self.train_aux, self.val_loss, self.val_miou, self.val_dice, self.lr]
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W
    labels: np.ndarray  # N x H x W

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


# -- checkpoints -----------------------------------------------------------------------

def checkpoint_tensors(model: SegmentationModel, opt: Adam | None) -> dict[str, np.ndarray]:
    tensors = dict(model.params.state())
    if opt is not None:
        tensors.update(opt.state())
    return tensors


def save_training_checkpoint(path, model: SegmentationModel, opt: Adam | None, config: RunConfig | None,
                             extra: dict | None = None) -> None:
    meta = {
        "model_config": asdict(model.config),
        "run_config": config.to_dict() if config is not None else None,
        "optimizer": None if opt is None else {"step": opt.step_count, "lr": opt.lr},
        "extra": extra or {},
    }
    save_checkpoint(path, checkpoint_tensors(model, opt), meta)


def load_model(path) -> tuple[SegmentationModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint's config echo and load its parameters."""
    tensors, meta = load_checkpoint(path)
    model = SegmentationModel(ModelConfig(**meta["model_config"]), seed=None)
    load_params_into(model.params, tensors)
    return model, meta, tensors


def load_params_into(params: ModelParams, tensors: dict[str, np.ndarray]) -> None:
    state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    expected = set(params.state())
    missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
    if missing or extra:
        raise CheckpointError(f"checkpoint does not fit model: missing={missing} extra={extra}")
    params.load_state(state)


# -- loop ------------------------------------------------------------------------------

def _first_nonfinite(model: SegmentationModel) -> str | None:
    for path, t in model.params.items():
        if not np.isfinite(t.data).all():
            return path
        if t.grad is not None and not np.isfinite(t.grad).all():
            return f"{path}.grad"
    for path, b in model.params.buffers.items():
        if not np.isfinite(b).all():
            return path
    return None


def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for s in range(0, n, size):
        yield idx[s:s + size]


def evaluate(model: SegmentationModel, data: Dataset, batch_size: int, aux_weight: float) -> dict:
    """Eval-mode losses (pixel-weighted over batches) and dataset-level metrics."""
    model.eval()
    K = model.config.num_classes
    cm = np.zeros((K, K), dtype=np.int64)
    sums = np.zeros(3)
    count = 0
    with no_grad():
        for idx in batches(len(data), batch_size):
            y = data.labels[idx]
            out = model(data.images[idx])
            terms = composite_loss(out.final_logits, out.init_logits, y, aux_weight)
            sums += len(idx) * np.array([terms.total.item(), terms.final.item(), terms.aux.item()])
            count += len(idx)
            cm += confusion_matrix(out.final_logits.data.argmax(axis=1), y, K)
    rep = metrics_from_confusion(cm)
    total, final, aux = sums / max(count, 1)
    return {"loss": total, "final": final, "aux": aux, "report": rep}


def train_epoch(model: SegmentationModel, opt: Adam, data: Dataset, cfg: TrainConfig, epoch: int) -> tuple[float, float, float]:
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(data))
    model.train()
    sums = np.zeros(3)
    steps = 0
    for idx in batches(len(data), cfg.batch_size, order):
        x, y = data.images[idx], data.labels[idx]
        if cfg.augment:
            aug = [augment(Sample(x[i], y[i], int(j), 0), rng) for i, j in enumerate(idx)]
            x = np.stack([s.image for s in aug])
            y = np.stack([s.label for s in aug])
        model.params.zero_grad()
        try:
            out = model(x)
            terms = composite_loss(out.final_logits, out.init_logits, y, cfg.aux_weight)
            backward(terms.total)
        except NonFiniteError as err:
            raise TrainingAborted(_first_nonfinite(model) or f"op:{err.op}", str(err)) from err
        bad = _first_nonfinite(model)
        if bad is not None:
            raise TrainingAborted(bad, f"epoch {epoch}, step {steps}")
        opt.step()
        sums += [terms.total.item(), terms.final.item(), terms.aux.item()]
        steps += 1
    return tuple(sums / max(steps, 1))


def train(
    model: SegmentationModel,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    run_config: RunConfig | None = None,
    resume: bool = False,
    max_epochs: int | None = None,
) -> TrainResult:
    """Run the training recipe, appending one log row per epoch.

    With ``out_dir`` set, ``best.ckpt`` holds the lowest-val-loss model,
    ``last.ckpt`` the state needed to resume, and ``train_log.csv`` the log.
    """
    cfg.validate()
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    opt = Adam(model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sched = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history: list[EpochRecord] = []
    start = 1
    best_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv" if out is not None else None

    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        tensors, meta = load_checkpoint(out / "last.ckpt")
        load_params_into(model.params, tensors)
        opt.load_state(tensors, meta["optimizer"]["step"], meta["optimizer"]["lr"])
        st = meta["extra"]
        sched = PlateauScheduler(**st["scheduler"])
        stopper = EarlyStopping(**st["early_stopping"])
        history = [EpochRecord(**r) for r in st["history"]]
        best_epoch = st["best_epoch"]
        start = len(history) + 1
        _rewrite_log(log_path, history)
    elif log_path is not None:
        _rewrite_log(log_path, [])

    stopped = False
    for epoch in range(start, epochs + 1):
        if stopped:
            break
        opt.lr = sched.lr
        tr_total, tr_final, tr_aux = train_epoch(model, opt, train_data, cfg, epoch)
        try:
            ev = evaluate(model, val_data, cfg.batch_size, cfg.aux_weight)
        except NonFiniteError as err:
            raise TrainingAborted(_first_nonfinite(model) or f"op:{err.op}", f"validation after epoch {epoch}: {err}") from err
        rec = EpochRecord(epoch, tr_total, tr_final, tr_aux, ev["loss"], ev["report"].mean_iou,
                          ev["report"].mean_dice, opt.lr, ev["final"], ev["aux"])
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f miou %.4f dice %.4f lr %.2e", epoch, tr_total,
                 rec.val_loss, rec.val_miou, rec.val_dice, rec.lr)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(rec.csv_row() + "\n")
        improved = rec.val_loss < stopper.best
        stopped = stopper.step(rec.val_loss)
        sched.step(rec.val_loss)
        if improved:
            best_epoch = epoch
            if out is not None:
                save_training_checkpoint(out / "best.ckpt", model, None, run_config, {"epoch": epoch})
        if out is not None:
            extra = {
                "scheduler": asdict(sched),
                "early_stopping": asdict(stopper),
                "history": [asdict(r) for r in history],
                "best_epoch": best_epoch,
            }
            save_training_checkpoint(out / "last.ckpt", model, opt, run_config, extra)
    best = min((r.val_loss for r in history), default=math.inf)
    ckpt = out / "best.ckpt" if out is not None and best_epoch else None
    return TrainResult(history, best_epoch, best, stopped, ckpt)


def _rewrite_log(path: Path | None, history: list[EpochRecord]) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for rec in history:
            f.write(rec.csv_row() + "\n")
