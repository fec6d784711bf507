"""Adversarial multi-task training with meta-learned adversarial coefficients.

The total objective is

    L_total = L_rating - lambda1 * L_domain - lambda2 * L_lang

and (lambda1, lambda2) are moved every ``meta_interval`` optimizer steps by
a first-order hypergradient of the validation rating loss taken after one
virtual plain-gradient step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import macro_f1
from .model import (DOMAIN_CLASSES, ENCODER_BLOCKS, HEADS, LANGUAGE_CLASSES, PARAM_BLOCKS, RATING_CLASSES,
                    Featurizer, ModelParameters, build_graph, init, predict_ratings)

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    BASELINE = "baseline"
    LOSS_REVERSAL = "loss-reversal"
    GRADIENT_REVERSAL = "gradient-reversal"


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")


@dataclass
class TrainConfig:
    mode: Mode = Mode.LOSS_REVERSAL
    lr: float = 2e-5
    batch_size: int = 32
    max_epochs: int = 5
    patience: int = 3
    seed: int = 42
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.1
    meta_lr: float = 0.01
    meta_interval: int = 100
    meta_batch_size: int = 32
    lambda_init: tuple[float, float] = (0.5, 0.5)
    lambda_min: float = 0.0
    lambda_max: float = 2.0
    hash_dim: int = 4096
    hidden: int = 256
    max_tokens: int = 128

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.lambda_init = tuple(float(x) for x in self.lambda_init)

    def validate(self) -> None:
        positive = ("lr", "batch_size", "max_epochs", "patience", "meta_interval", "meta_batch_size",
                    "hash_dim", "hidden", "max_tokens", "grad_clip")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.lambda_min <= self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        if len(self.lambda_init) != 2 or not all(self.lambda_min <= x <= self.lambda_max for x in self.lambda_init):
            raise ValueError(f"lambda_init must be two values in [{self.lambda_min}, {self.lambda_max}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["lambda_init"] = list(self.lambda_init)
        return d


@dataclass
class Batch:
    features: np.ndarray
    rating: np.ndarray
    domain: np.ndarray
    lang: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.rating[idx], self.domain[idx], self.lang[idx])


def encode(records, featurizer: Featurizer) -> Batch:
    """Feature matrix and class-index labels for a sequence of reviews."""
    records = list(records)
    feats = featurizer.batch((r.title, r.text) for r in records)
    rating = np.array([RATING_CLASSES.index(r.rating) for r in records], dtype=np.int64)
    domain = np.array([DOMAIN_CLASSES.index(_val(r.domain)) for r in records], dtype=np.int64)
    lang = np.array([LANGUAGE_CLASSES.index(_val(r.language)) for r in records], dtype=np.int64)
    return Batch(feats, rating, domain, lang)


def _val(x):
    return getattr(x, "value", x)


@dataclass(frozen=True)
class LossBreakdown:
    rating: float
    domain: float
    lang: float
    total: float

    def to_dict(self) -> dict:
        return {"L_rating": self.rating, "L_domain": self.domain, "L_lang": self.lang, "L_total": self.total}


def _labels(batch: Batch) -> dict[str, np.ndarray]:
    for name in ("rating", "domain", "lang"):
        if getattr(batch, name, None) is None:
            raise ValueError(f"batch is missing the {name!r} label channel")
    return {"rating": batch.rating, "domain": batch.domain, "lang": batch.lang}


def combined_loss(params: ModelParameters, batch: Batch, lam1: float, lam2: float, mode: Mode | str,
                  rng: np.random.Generator | None = None, training: bool = True,
                  ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Losses and gradients for one batch.

    loss-reversal: a single backward pass of L_total reaches every block, so
    the adversarial heads ascend their own losses.
    gradient-reversal: heads descend their own losses while the encoder gets
    grad L_rating - lambda1 grad L_domain - lambda2 grad L_lang.
    baseline: only L_rating is differentiated; lambdas are ignored (treated as 0).
    """
    mode = Mode(mode)
    labels = _labels(batch)
    if mode is Mode.BASELINE:
        lam1 = lam2 = 0.0
    g = build_graph(params, batch.features, training, rng)
    losses = {h: ad.softmax_cross_entropy(g.logits[h], labels[h]) for h in HEADS}
    total = ad.scale_and_sum([(1.0, losses["rating"]), (-lam1, losses["domain"]), (-lam2, losses["lang"])])

    if mode is Mode.BASELINE:
        root = ad.scale_and_sum([(1.0, losses["rating"])])
    elif mode is Mode.LOSS_REVERSAL:
        root = total
    else:
        # Encoder path sees frozen copies of the adversarial heads; the heads
        # see a frozen copy of their input and train on +own loss.
        terms = [(1.0, losses["rating"])]
        head_terms = []
        for head, lam in (("domain", lam1), ("lang", lam2)):
            w, b = g.leaves[f"{head}_w"], g.leaves[f"{head}_b"]
            h = g.head_inputs[head]
            enc_logits = ad.add_bias(ad.matmul(h, ad.detach(w)), ad.detach(b))
            head_logits = ad.add_bias(ad.matmul(ad.detach(h), w), b)
            terms.append((-lam, ad.softmax_cross_entropy(enc_logits, labels[head])))
            head_terms.append((1.0, ad.softmax_cross_entropy(head_logits, labels[head])))
        root = ad.scale_and_sum(terms + head_terms)

    ad.backward(root)
    grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
             for name, leaf in g.leaves.items()}
    breakdown = LossBreakdown(float(losses["rating"].value), float(losses["domain"].value),
                              float(losses["lang"].value), float(total.value))
    return breakdown, grads


def loss_gradient(params: ModelParameters, batch: Batch, head: str) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient of a single head's loss, evaluation mode (no dropout)."""
    labels = _labels(batch)
    g = build_graph(params, batch.features, training=False)
    loss = ad.softmax_cross_entropy(g.logits[head], labels[head])
    ad.backward(loss)
    return float(loss.value), {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                               for name, leaf in g.leaves.items()}


def rating_loss(params: ModelParameters, batch: Batch) -> float:
    g = build_graph(params, batch.features, training=False)
    return float(ad.softmax_cross_entropy(g.logits["rating"], _labels(batch)["rating"]).value)


def _axpy(params: ModelParameters, step: float, direction: dict[str, np.ndarray]) -> ModelParameters:
    return ModelParameters({k: params[k] + step * direction[k] for k in PARAM_BLOCKS}, params.dropout)


def virtual_step(params: ModelParameters, train_batch: Batch, lam: Sequence[float], alpha: float,
                 ) -> tuple[ModelParameters, dict[str, dict[str, np.ndarray]]]:
    """theta' = theta - alpha * grad L_total(theta, lambda), plain gradient, no dropout."""
    grads = {h: loss_gradient(params, train_batch, h)[1] for h in HEADS}
    total = {k: grads["rating"][k] - lam[0] * grads["domain"][k] - lam[1] * grads["lang"][k] for k in PARAM_BLOCKS}
    return _axpy(params, -alpha, total), grads


def meta_loss(params: ModelParameters, lam: Sequence[float], train_batch: Batch, val_batch: Batch,
              alpha: float) -> float:
    """Validation rating loss after the virtual step taken with coefficients ``lam``."""
    if len(val_batch) == 0:
        raise ValueError("empty validation batch")
    shifted, _ = virtual_step(params, train_batch, lam, alpha)
    return rating_loss(shifted, val_batch)


def hypergradient(params: ModelParameters, lam: Sequence[float], train_batch: Batch, val_batch: Batch,
                  alpha: float) -> np.ndarray:
    """d L_meta / d lambda_i = alpha * <grad L_val(theta'), grad L_adv_i(theta)>."""
    if len(val_batch) == 0:
        raise ValueError("empty validation batch")
    shifted, grads = virtual_step(params, train_batch, lam, alpha)
    _, g_val = loss_gradient(shifted, val_batch, "rating")
    # L_val only depends on the encoder and the rating head.
    blocks = ENCODER_BLOCKS + ("rating_w", "rating_b")
    return np.array([alpha * sum(float(np.vdot(g_val[k], grads[head][k])) for k in blocks)
                     for head in ("domain", "lang")])


@dataclass
class MetaState:
    lam: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    meta_lr: float = 0.01
    interval: int = 100
    lower: float = 0.0
    upper: float = 2.0
    updates: int = 0

    def apply(self, hypergrad: np.ndarray) -> np.ndarray:
        self.lam = np.clip(self.lam - self.meta_lr * np.asarray(hypergrad), self.lower, self.upper)
        self.updates += 1
        return self.lam


def meta_update(params: ModelParameters, state: MetaState, train_batch: Batch, val_batch: Batch,
                alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """One lambda update; ``params`` are left untouched. Returns (new lambda, hypergradient)."""
    hg = hypergradient(params, state.lam, train_batch, val_batch, alpha)
    return state.apply(hg).copy(), hg


def lr_multiplier(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup to 1 over the first ``warmup_ratio`` of steps, then linear decay to 0.

    ``step`` is 1-based: the multiplier for the ``step``-th optimizer update.
    """
    warmup = math.ceil(warmup_ratio * total_steps)
    if step <= warmup:
        return step / warmup
    if total_steps == warmup:
        return 0.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


class AdamW:
    """Adam with bias correction and decoupled weight decay, plus global-norm clipping."""

    def __init__(self, params: ModelParameters, lr: float = 2e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float | None = 1.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(params[k]) for k in PARAM_BLOCKS}
        self.v = {k: np.zeros_like(params[k]) for k in PARAM_BLOCKS}
        self.t = 0

    def clip(self, grads: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], float]:
        for k in PARAM_BLOCKS:
            if not np.all(np.isfinite(grads[k])):
                raise NonFiniteGradientError(k)
        norm = math.sqrt(sum(float(np.vdot(grads[k], grads[k])) for k in PARAM_BLOCKS))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = {k: grads[k] * scale for k in PARAM_BLOCKS}
        return grads, norm

    def step(self, params: ModelParameters, grads: dict[str, np.ndarray], lr: float | None = None) -> float:
        """Update ``params`` in place. Returns the pre-clip gradient norm."""
        lr = self.lr if lr is None else lr
        grads, norm = self.clip(grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in PARAM_BLOCKS:
            p, g, m, v = params.blocks[k], grads[k], self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def optimizer_step(opt: AdamW, params: ModelParameters, grads: dict[str, np.ndarray], step: int,
                   total_steps: int, warmup_ratio: float) -> float:
    """Scheduled AdamW update; returns the learning rate used."""
    lr = opt.lr * lr_multiplier(step, total_steps, warmup_ratio)
    opt.step(params, grads, lr)
    return lr


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best: float = -math.inf
        self.best_epoch: int | None = None
        self.wait = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record an epoch score; returns True when training should stop."""
        if score > self.best:
            self.best, self.best_epoch, self.wait = score, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[dict]
    best_epoch: int
    best_val_f1: float
    lam: tuple[float, float]


def train(config: TrainConfig, train_set, valid_set, log_sink: Callable[[dict], None] | None = None,
          features: tuple[Batch, Batch] | None = None) -> TrainResult:
    """Train and return the parameters from the epoch with the best validation macro-F1."""
    config.validate()
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    featurizer = Featurizer(config.hash_dim, config.max_tokens)
    if features is None:
        tr, va = encode(train_set, featurizer), encode(valid_set, featurizer)
    else:
        tr, va = features

    params = init(config.seed, config.hash_dim, config.hidden, config.dropout)
    opt = AdamW(params, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay, config.grad_clip)
    shuffle_rng, dropout_rng, meta_rng = (np.random.default_rng(s)
                                          for s in np.random.SeedSequence(config.seed).spawn(3))
    adversarial = config.mode is not Mode.BASELINE
    meta = MetaState(np.array(config.lambda_init if adversarial else (0.0, 0.0)), config.meta_lr,
                     config.meta_interval, config.lambda_min, config.lambda_max)

    steps_per_epoch = math.ceil(len(tr) / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    stopper = EarlyStopping(config.patience)
    log: list[dict] = []

    def emit(entry: dict) -> None:
        log.append(entry)
        if log_sink is not None:
            log_sink(entry)

    best = params.copy()
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(tr))
        for start in range(0, len(tr), config.batch_size):
            batch = tr.take(order[start:start + config.batch_size])
            lam1, lam2 = (float(x) for x in meta.lam)
            losses, grads = combined_loss(params, batch, lam1, lam2, config.mode, dropout_rng, training=True)
            step += 1
            lr = optimizer_step(opt, params, grads, step, total_steps, config.warmup_ratio)
            emit({"type": "step", "step": step, "epoch": epoch, **losses.to_dict(),
                  "lambda1": lam1, "lambda2": lam2, "lr": lr})
            if adversarial and step % config.meta_interval == 0:
                idx = meta_rng.choice(len(va), size=min(config.meta_batch_size, len(va)), replace=False)
                new_lam, hg = meta_update(params, meta, batch, va.take(idx), alpha=lr)
                emit({"type": "meta", "step": step, "epoch": epoch, "hypergrad": [float(x) for x in hg],
                      "lambda1": float(new_lam[0]), "lambda2": float(new_lam[1])})

        preds = predict_ratings(params, va.features)
        gold = [RATING_CLASSES[i] for i in va.rating]
        val_f1 = macro_f1(gold, preds)
        stop = stopper.update(epoch, val_f1)
        if stopper.best_epoch == epoch:
            best = params.copy()
        emit({"type": "epoch", "epoch": epoch, "step": step, "val_macro_f1": val_f1,
              "best_epoch": stopper.best_epoch})
        logger.info("epoch %d: val macro-F1 %.2f (lambda %.4f, %.4f)", epoch, val_f1, *meta.lam)
        if stop:
            break

    return TrainResult(best, log, stopper.best_epoch, stopper.best, (float(meta.lam[0]), float(meta.lam[1])))


def write_log(log: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
