"""AdamW training loop with best-validation checkpointing, evaluation and reports."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import Config
from src.models.graph import GraphDataset, LabelledNodes
from src.models.hop_transformer import ModelConfig, ModelParams, init_params, loss_and_grad, predict
from src.models.tokens import TokenTensor
from src.utils.errors import CompatibilityError, ConfigError, InternalError
from src.utils.rng import named_rng

logger = logging.getLogger(__name__)

# train() needs labels, splits, n and c; the graph itself is already folded into the tokens
Labelled = Union[GraphDataset, LabelledNodes]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = Config.LR
    weight_decay: float = Config.WEIGHT_DECAY
    batch_size: int = Config.BATCH_SIZE
    max_epochs: int = Config.MAX_EPOCHS
    patience: int = Config.PATIENCE
    seed: int = Config.SEED
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must be in 1..max_epochs ({self.max_epochs}), got {self.patience}")

    def to_dict(self) -> Dict:
        return asdict(self)


# ==================== AdamW ====================

class AdamWState:
    """First and second moment buffers, one pair per leaf."""

    def __init__(self, params: ModelParams):
        self.m = {leaf.name: np.zeros_like(leaf.value) for leaf in params}
        self.v = {leaf.name: np.zeros_like(leaf.value) for leaf in params}
        self.t = 0


def adamw_step(params: ModelParams, state: AdamWState, t: int, cfg: TrainConfig):
    """One decoupled-decay Adam update from the gradients held in ``params``.

    Decay multiplies θ by (1 - lr·wd) before the Adam step, so with zero
    gradients a leaf changes by exactly that factor. Leaves with
    ``decay=False`` (norm scales and shifts, biases) are never decayed.
    """
    if t < 1:
        raise InternalError(f"optimizer step index must be >= 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for leaf in params:
        m, v = state.m[leaf.name], state.v[leaf.name]
        if m.shape != leaf.shape:
            raise InternalError(f"optimizer state for {leaf.name} has shape {m.shape}, leaf has {leaf.shape}")
        g = leaf.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if leaf.decay and cfg.weight_decay:
            leaf.value *= 1.0 - cfg.lr * cfg.weight_decay
        m_hat = m / correction1
        v_hat = v / correction2
        leaf.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    state.t = t


# ==================== Reports ====================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class TrainReport:
    config: Dict
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float('-inf')
    test_acc: Optional[float] = None
    stopped_early: bool = False
    wall_seconds: float = 0.0

    def summary(self) -> Dict:
        """Everything except wall-clock time."""
        return {
            'config': self.config,
            'epochs': [asdict(e) for e in self.epochs],
            'best_epoch': self.best_epoch,
            'best_val_acc': self.best_val_acc,
            'test_acc': self.test_acc,
        }


def write_report(report: TrainReport, path: str):
    """key=value log at ``path``, JSON summary at ``path + '.json'``."""
    lines = []
    for key, value in _flatten(report.config):
        lines.append(f"{key}={value}")
    for e in report.epochs:
        lines.append(f"epoch={e.epoch} train_loss={e.train_loss!r} val_acc={e.val_acc!r}")
    lines.append(f"best_epoch={report.best_epoch}")
    lines.append(f"best_val_acc={report.best_val_acc!r}")
    lines.append(f"test_acc={report.test_acc!r}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')
    with open(f"{path}.json", 'w', encoding='utf-8') as f:
        json.dump(report.summary(), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote training report to {path} and {path}.json")


def _flatten(d: Dict, prefix: str = '') -> Iterable[Tuple[str, object]]:
    for key in sorted(d):
        value = d[key]
        if isinstance(value, dict):
            yield from _flatten(value, f"{prefix}{key}.")
        else:
            yield f"{prefix}{key}", value


@dataclass
class TrialSummary:
    seeds: List[int]
    test_accs: List[float]
    reports: List[TrainReport] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_accs))

    @property
    def std(self) -> float:
        """Population standard deviation."""
        return float(np.std(self.test_accs))


# ==================== Training ====================

class TrainerService:
    """Mini-batch training over cached token sequences."""

    def evaluate(self, params: ModelParams, config: ModelConfig, tokens: TokenTensor, labels: np.ndarray,
                 split_ids, batch_size: int = Config.BATCH_SIZE) -> float:
        """Fraction of ``split_ids`` whose arg-max prediction equals the label."""
        ids = np.asarray(split_ids, dtype=np.int64)
        if len(ids) == 0:
            raise ConfigError("cannot evaluate on an empty split")
        labels = np.asarray(labels)
        correct = 0
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            correct += int(np.count_nonzero(predict(params, config, tokens.batch_view(chunk)) == labels[chunk]))
        return correct / len(ids)

    def train(self, dataset: Labelled, tokens: TokenTensor, model_config: ModelConfig,
              cfg: TrainConfig, params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
        """Train from ``init_params(model_config, cfg.seed)`` unless ``params`` is given.

        Returns a copy of the weights from the epoch with the highest
        validation accuracy (earliest on ties) and the report, whose test
        accuracy is measured with those weights.
        """
        if tokens.n != dataset.n:
            raise CompatibilityError(f"token cache has n={tokens.n} but dataset has n={dataset.n}")
        model_config.check_tokens(tokens)
        if dataset.c > model_config.c:
            raise CompatibilityError(f"dataset has {dataset.c} classes but model has c={model_config.c}")
        train_ids = dataset.splits.train
        val_ids = dataset.splits.val
        if len(train_ids) == 0:
            raise ConfigError("train split is empty")
        if len(val_ids) == 0:
            raise ConfigError("val split is empty; best-epoch selection needs validation nodes")

        params = params if params is not None else init_params(model_config, cfg.seed)
        state = AdamWState(params)
        shuffle_rng = named_rng(cfg.seed, 'shuffle')
        labels = dataset.labels
        report = TrainReport(config={'model': model_config.to_dict(), 'train': cfg.to_dict()})
        best = params.snapshot()
        since_best = 0
        step = 0
        started = time.perf_counter()

        for epoch in range(1, cfg.max_epochs + 1):
            order = train_ids[shuffle_rng.permutation(len(train_ids))]
            total_loss = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch_ids = order[start:start + cfg.batch_size]
                loss = loss_and_grad(params, model_config, tokens.batch_view(batch_ids), labels[batch_ids])
                step += 1
                adamw_step(params, state, step, cfg)
                total_loss += loss * len(batch_ids)
                logger.debug(f"epoch {epoch} step {step}: loss={loss:.6f}")

            train_loss = total_loss / len(order)
            val_acc = self.evaluate(params, model_config, tokens, labels, val_ids, cfg.batch_size)
            report.epochs.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_acc=val_acc))
            logger.info(f"Epoch {epoch}/{cfg.max_epochs}: train_loss={train_loss:.6f} val_acc={val_acc:.4f}")

            if val_acc > report.best_val_acc:
                report.best_val_acc = val_acc
                report.best_epoch = epoch
                best = params.snapshot()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    report.stopped_early = epoch < cfg.max_epochs
                    if report.stopped_early:
                        logger.warning(f"Early stop at epoch {epoch}: no val improvement for {cfg.patience} epochs")
                    break

        params.restore(best)
        if len(dataset.splits.test):
            report.test_acc = self.evaluate(params, model_config, tokens, labels, dataset.splits.test,
                                            cfg.batch_size)
        report.wall_seconds = time.perf_counter() - started
        logger.info(f"Training done: best_epoch={report.best_epoch} best_val_acc={report.best_val_acc:.4f} "
                    f"test_acc={report.test_acc} ({report.wall_seconds:.1f}s)")
        return params.copy(), report

    def run_trials(self, dataset: Labelled, tokens: TokenTensor, model_config: ModelConfig,
                   cfg: TrainConfig, seeds: Sequence[int]) -> TrialSummary:
        """Train once per seed and summarise the test accuracies."""
        seeds = list(seeds)
        if not seeds:
            raise ConfigError("run_trials needs at least one seed")
        if len(dataset.splits.test) == 0:
            raise ConfigError("test split is empty")
        summary = TrialSummary(seeds=seeds, test_accs=[])
        for seed in seeds:
            run_cfg = TrainConfig(**{**cfg.to_dict(), 'seed': seed})
            _, report = self.train(dataset, tokens, model_config, run_cfg)
            summary.test_accs.append(report.test_acc)
            summary.reports.append(report)
        logger.info(f"{len(seeds)} trials: test_acc mean={summary.mean:.4f} std={summary.std:.4f}")
        return summary


trainer_service = TrainerService()


def train(dataset: Labelled, tokens: TokenTensor, model_config: ModelConfig, cfg: TrainConfig,
          params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    return trainer_service.train(dataset, tokens, model_config, cfg, params)


def evaluate(params: ModelParams, config: ModelConfig, tokens: TokenTensor, labels: np.ndarray, split_ids) -> float:
    return trainer_service.evaluate(params, config, tokens, labels, split_ids)


def run_trials(dataset: Labelled, tokens: TokenTensor, model_config: ModelConfig, cfg: TrainConfig,
               seeds: Sequence[int]) -> TrialSummary:
    return trainer_service.run_trials(dataset, tokens, model_config, cfg, seeds)
