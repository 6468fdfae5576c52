"""Single-corpus CPAC training with the margin loss and Adam."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import MarginHyper, margin_loss
from .metrics import EvalReport, evaluate
from .model import CpacConfig, CpacParams, cpac_forward, init_params, predict
from .optim import AdamState, adam_step
from .tensor import backward, no_grad


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    margin: MarginHyper = field(default_factory=MarginHyper)
    loss_reduction: str = "mean"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "margin" in d and isinstance(d["margin"], dict):
            d["margin"] = MarginHyper(**d["margin"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def forward_in_chunks(x: np.ndarray, params, config: CpacConfig, chunk: int = 128):
    """Eval-mode forward returning (probs, embedding) arrays."""
    probs, embs = [], []
    with no_grad():
        for start in range(0, len(x), chunk):
            out = cpac_forward(x[start : start + chunk], params, config, mode="eval")
            probs.append(out.probs.data)
            embs.append(out.embedding.data)
    return np.concatenate(probs), np.concatenate(embs)


def evaluate_model(params, config: CpacConfig, x: np.ndarray, labels) -> EvalReport:
    probs, _ = forward_in_chunks(x, params, config)
    return evaluate(predict(probs), labels, config.num_classes)


def train_cpac(
    x: np.ndarray,
    labels,
    config: CpacConfig,
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> tuple[CpacParams, list[dict]]:
    """Fit CPAC on ``x`` ``(n, frames, coeffs)``; history has per-epoch loss and accuracy."""
    labels = np.asarray(labels)
    params = init_params(config, seed)
    state = AdamState()
    rng = np.random.default_rng([seed, 1])
    history = []
    step = 0
    for epoch in range(train.epochs):
        losses, correct = [], 0
        for idx in batches(len(x), train.batch_size, rng):
            params.zero_grad()
            out = cpac_forward(x[idx], params, config, mode="train", rng=rng)
            loss = margin_loss(out.digit_caps, labels[idx], train.margin, train.loss_reduction)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"step {step}: margin loss is {loss.item()}")
            backward(loss)
            adam_step(params, params.grads(), state, train.lr, train.betas, train.eps)
            losses.append(loss.item())
            correct += int((predict(out.probs) == labels[idx]).sum())
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": correct / len(x)})
    return params, history
