"""Losses, optimizer, AUC metrics, the training loop, and the data sweep.

One optimizer step covers ``batch_size`` bags via gradient accumulation
(the accumulated gradient is divided by the window size, so the step
behaves like a mean over the window). The learning rate follows cosine
annealing over the total number of optimizer steps, computed up front.
Model selection keeps the epoch with the highest validation AUC.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import subsample_fraction
from .errors import ConfigError, MetricError
from .model import BaselineConfig, BaselineModel, CCANModel, save_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 30  # gradient-accumulation window
    lr_max: float = 5e-6
    lr_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fractions: tuple = (0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00)
    seed: int = 0

    def validate(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError(f"fractions must lie in (0, 1], got {self.fractions}")
        return self


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)  # per epoch
    val_auc: list = field(default_factory=list)  # per epoch
    best_epoch: int = -1
    best_val_auc: float = float("-inf")
    test_auc_at_best: float = float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_auc"])
            for i, (loss, auc) in enumerate(zip(self.train_loss, self.val_auc)):
                writer.writerow([i, repr(float(loss)), repr(float(auc))])
            writer.writerow(["best_epoch", self.best_epoch, repr(float(self.best_val_auc))])
            writer.writerow(["test_auc_at_best", repr(float(self.test_auc_at_best)), ""])


# ---------------------------------------------------------------------------
# losses


def bce_loss(probs, targets):
    """Mean binary cross entropy over the class axis.

    ``probs`` is a tensor of probabilities (any shape), clamped away from
    {0, 1} before the logs; ``targets`` is a same-shape 0/1 array.
    """
    t = np.asarray(targets, dtype=probs.data.dtype).reshape(probs.data.shape)
    p = ag.clip(probs, 1e-7, 1.0 - 1e-7)
    ones = Tensor(np.ones_like(p.data))
    pos = ag.mul(Tensor(t), ag.log(p))
    neg = ag.mul(Tensor(1.0 - t), ag.log(ones - p))
    return ag.sum_all(pos + neg) * (-1.0 / p.data.size)


def total_loss(per_stage_losses):
    """Sum (not mean) of the per-stage loss terms."""
    if not per_stage_losses:
        raise ConfigError("need at least one stage loss")
    total = per_stage_losses[0]
    for term in per_stage_losses[1:]:
        total = total + term
    return total


def bag_loss(model_output, label, num_classes):
    """Summed per-stage BCE against the bag label."""
    if num_classes == 2:
        target = np.array([1.0 if label == 1 else 0.0])
    else:
        target = np.zeros(num_classes)
        target[label] = 1.0
    return total_loss([bce_loss(so.probs_tensor, target) for so in model_output.stages])


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamWState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam step; mutates ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def cosine_lr(step, total, lr_max, lr_min=0.0):
    """Cosine annealing from lr_max at step 0 to lr_min at step ``total``."""
    if total < 1 or not 0 <= step <= total:
        raise ConfigError(f"need 0 <= step <= total with total >= 1, got {step}/{total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# metrics


def auc_binary(scores, labels):
    """P(random positive outranks random negative); ties count one half.

    Computed from midranks, which is equivalent to trapezoidal ROC
    integration.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc_binary needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_macro_ovr(score_matrix, labels):
    """Unweighted mean of one-vs-rest binary AUCs over all classes."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = score_matrix.shape[1]
    present = np.unique(labels)
    if len(present) < n_classes:
        raise MetricError(f"classes {sorted(set(range(n_classes)) - set(present.tolist()))} absent from labels")
    return float(np.mean([auc_binary(score_matrix[:, k], (labels == k).astype(int)) for k in range(n_classes)]))


def evaluate_auc(model, bags):
    """Eval-mode AUC of a model over a bag list (binary or macro one-vs-rest)."""
    num_classes = model.config.num_classes
    labels = np.array([b.label for b in bags])
    with ag.no_grad():
        scores = np.stack([model.forward(b, train_mode=False).averaged_probs for b in bags])
    if num_classes == 2:
        return auc_binary(scores[:, 0], labels)
    return auc_macro_ovr(scores, labels)


# ---------------------------------------------------------------------------
# training loop


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.parameters()}


def _restore(model, snapshot):
    for name, p in model.parameters():
        p.data[...] = snapshot[name]


def train(model, dataset, fold, cfg, checkpoint_path=None, log=None):
    """Train one model on one fold; returns (best parameter snapshot, history).

    The model is left holding the best-validation parameters, and the
    test AUC at that point is recorded in the history. Fully
    deterministic given (seed, config, dataset, fold).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    train_bags = [dataset.by_id(i) for i in fold.train_ids]
    val_bags = [dataset.by_id(i) for i in fold.val_ids]
    test_bags = [dataset.by_id(i) for i in fold.test_ids]
    num_classes = model.config.num_classes

    named = model.parameters()
    tensors = [p for _, p in named]
    arrays = [p.data for p in tensors]
    state = AdamWState.for_params(arrays)
    steps_per_epoch = max(1, math.ceil(len(train_bags) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    history = TrainHistory()
    best = _snapshot(model)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_bags))
        epoch_losses = []
        window = 0
        ag.zero_grad(tensors)
        for pos, idx in enumerate(order):
            bag = train_bags[idx]
            out = model.forward(bag, rng=rng, train_mode=True)
            loss = bag_loss(out, bag.label, num_classes)
            ag.backward(loss)
            epoch_losses.append(loss.item())
            window += 1
            if window == cfg.batch_size or pos == len(order) - 1:
                grads = [
                    (p.grad / window if p.grad is not None else np.zeros_like(p.data))
                    for p in tensors
                ]
                lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
                adamw_step(arrays, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
                ag.zero_grad(tensors)
                step += 1
                window = 0
        val_auc = evaluate_auc(model, val_bags)
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_auc.append(float(val_auc))
        if val_auc > history.best_val_auc:
            history.best_val_auc = float(val_auc)
            history.best_epoch = epoch
            best = _snapshot(model)
            if checkpoint_path is not None:
                _restore_and_save(model, best, checkpoint_path)
        if log is not None:
            log(f"epoch {epoch}: train_loss={history.train_loss[-1]:.4f} val_auc={val_auc:.4f}")
    _restore(model, best)
    if test_bags:
        history.test_auc_at_best = float(evaluate_auc(model, test_bags))
    return best, history


def _restore_and_save(model, snapshot, path):
    current = _snapshot(model)
    _restore(model, snapshot)
    save_checkpoint(model, path)
    _restore(model, current)


# ---------------------------------------------------------------------------
# data-efficiency sweep


@dataclass
class SweepRow:
    fold: int
    fraction: float
    model: str
    best_epoch: int
    val_auc: float
    test_auc: float


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "fraction", "model", "best_epoch", "val_auc", "test_auc"])
        for r in rows:
            writer.writerow(
                [r.fold, repr(float(r.fraction)), r.model, r.best_epoch,
                 repr(float(r.val_auc)), repr(float(r.test_auc))]
            )


def _build_model(kind, ccan_config, seed):
    if kind == "ccan":
        return CCANModel(replace(ccan_config, seed=seed))
    base = BaselineConfig(
        kind=kind,
        d_feature=ccan_config.d_feature,
        d_latent=ccan_config.d_latent,
        num_classes=ccan_config.num_classes,
        scale_mode=ccan_config.scale_mode,
        heads=ccan_config.heads,
        seed=seed,
    )
    return BaselineModel(base)


def _sweep_cell(args):
    dataset, plan_fold, fold_idx, fraction, kind, ccan_config, cfg = args
    sub_seed = derive_seed(cfg.seed, f"subsample-fold{fold_idx}")
    train_ids = subsample_fraction(plan_fold.train_ids, fraction, sub_seed)
    fold = replace(plan_fold, train_ids=train_ids)
    model_seed = derive_seed(cfg.seed, f"model-{kind}-fold{fold_idx}-frac{fraction}")
    model = _build_model(kind, ccan_config, model_seed)
    run_cfg = replace(cfg, seed=derive_seed(cfg.seed, f"train-{kind}-fold{fold_idx}-frac{fraction}"))
    _, history = train(model, dataset, fold, run_cfg)
    return SweepRow(
        fold=fold_idx,
        fraction=fraction,
        model=kind,
        best_epoch=history.best_epoch,
        val_auc=history.best_val_auc,
        test_auc=history.test_auc_at_best,
    )


def data_efficiency_sweep(dataset, split_plan, fractions, cfg, ccan_config,
                          models=("ccan", "mean-pool", "max-pool"), jobs=1, log=None):
    """Train every model at every (fold, fraction) cell; returns SweepRows.

    Fraction subsets within a fold share one subsample seed, so smaller
    fractions are prefixes of larger ones.
    """
    if not fractions:
        raise ConfigError("fractions must be nonempty")
    cells = [
        (dataset, split_plan.folds[i], i, float(fr), kind, ccan_config, cfg)
        for i in range(split_plan.k)
        for fr in fractions
        for kind in models
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = []
        for cell in cells:
            row = _sweep_cell(cell)
            rows.append(row)
            if log is not None:
                log(f"fold {row.fold} fraction {row.fraction} {row.model}: test_auc={row.test_auc:.4f}")
    rows.sort(key=lambda r: (r.fold, r.fraction, r.model))
    return rows


def derive_seed(root, purpose):
    """Stable sub-seed from a root seed and a purpose string."""
    import hashlib

    digest = hashlib.sha256(f"{root}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)
