"""Corpus adaptation: CPAC feature extractor psi, main head f, adversarial head f'.

One backward pass per step.  The tape objective is ``ce - eta * D`` with the
gradient reversal layer between psi and f': descending it moves f' up the
discrepancy D, while the reversal turns psi's share into descent on D.  f only
sees the cross-entropy (its role in D is through a non-differentiable argmax).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .losses import MddHyper, cross_entropy_source, mdd_disparity, mdd_loss
from .metrics import evaluate
from .model import ConfigurationError, CpacConfig, CpacParams, ParamSet, component_rng, cpac_forward, init_params, predict
from .optim import AdamState, adam_step
from .tensor import ContractError, Tensor, backward, no_grad
from .train import TrainingError

grl = ops.grl

GROUPS = ("psi", "f", "adv")


@dataclass(frozen=True)
class DomainBatch:
    features: np.ndarray  # (n, frames, coeffs)
    domain: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ContractError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.domain == "source" and self.labels is None:
            raise ContractError("source batches carry labels")
        if self.domain == "target" and self.labels is not None:
            raise ContractError("target batches are unlabelled")
        if len(self.features) == 0:
            raise ContractError("empty batch")


class CaamParams(ParamSet):
    """Extractor parameters plus the two heads, in one flat name space."""

    def __init__(self, psi: CpacParams, grl_lambda: float = 1.0):
        super().__init__()
        self.psi = psi
        self.config = psi.config
        self.grl_lambda = grl_lambda
        for name, t in psi.items():
            self.adopt(name, t, buffer=psi.is_buffer(name))

    @property
    def embedding_dim(self) -> int:
        return self.config.num_classes * self.config.digit_dim

    def group(self, name: str) -> list[str]:
        if name == "psi":
            return self.psi.names()
        if name == "f":
            return self.component_names("head_f")
        if name == "adv":
            return self.component_names("head_adv")
        raise ConfigurationError(f"unknown parameter group {name!r}")

    def copy(self) -> "CaamParams":
        out = CaamParams(self.psi.copy(), self.grl_lambda)
        for name in self.group("f") + self.group("adv"):
            out.add(name, self[name].data.copy())
        return out


def init_caam_params(config: CpacConfig, seed: int = 0, grl_lambda: float = 1.0) -> CaamParams:
    params = CaamParams(init_params(config, seed), grl_lambda)
    dim, k = params.embedding_dim, config.num_classes
    for head in ("head_f", "head_adv"):
        rng = component_rng(seed, head)
        params.add(f"{head}.weight", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, k)))
        params.add(f"{head}.bias", np.zeros(k))
    return params


def head(embedding, params: ParamSet, name: str) -> Tensor:
    return ops.softmax(embedding @ params[f"{name}.weight"] + params[f"{name}.bias"], axis=-1)


@dataclass
class CaamOutput:
    probs_f_s: Tensor
    probs_f_t: Tensor
    probs_adv_s: Tensor
    probs_adv_t: Tensor
    emb_s: Tensor
    emb_t: Tensor


def caam_forward(
    batch_s: DomainBatch,
    batch_t: DomainBatch,
    params: CaamParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> CaamOutput:
    """psi on the stacked source+target batch, then f directly and f' behind the GRL."""
    if batch_s.domain != "source" or batch_t.domain != "target":
        raise ContractError(f"expected (source, target) batches, got ({batch_s.domain}, {batch_t.domain})")
    ns = len(batch_s.features)
    x = np.concatenate([batch_s.features, batch_t.features])
    emb = cpac_forward(x, params.psi, params.config, mode=mode, rng=rng).embedding
    probs_f = head(emb, params, "head_f")
    probs_adv = head(ops.grl(emb, params.grl_lambda), params, "head_adv")
    return CaamOutput(
        probs_f[:ns], probs_f[ns:], probs_adv[:ns], probs_adv[ns:], emb[:ns], emb[ns:]
    )


@dataclass(frozen=True)
class LossReport:
    ce: float
    mdd: float  # discrepancy D = disp_target - gamma * disp_source
    total: float  # ce + eta * D


def caam_objective(out: CaamOutput, labels_s, hyper: MddHyper):
    ce = cross_entropy_source(out.probs_f_s, labels_s)
    disp_s = mdd_disparity(out.probs_f_s, out.probs_adv_s, "source", hyper.reduction)
    disp_t = mdd_disparity(out.probs_f_t, out.probs_adv_t, "target", hyper.reduction)
    return ce, mdd_loss(disp_s, disp_t, hyper)


def caam_train_step(
    batch_s: DomainBatch,
    batch_t: DomainBatch,
    params: CaamParams,
    state: AdamState,
    hyper: MddHyper = MddHyper(),
    lr: float = 1e-3,
    rng: np.random.Generator | None = None,
    update=GROUPS,
    mode: str = "train",
    step_index: int = 0,
    head_lr_scale: float = 1.0,
) -> LossReport:
    """One minimax step; updates ``params``/``state`` in place, reports pre-step losses."""
    params.zero_grad()
    out = caam_forward(batch_s, batch_t, params, mode=mode, rng=rng)
    ce, dv = caam_objective(out, batch_s.labels, hyper)
    report = LossReport(ce.item(), dv.item(), ce.item() + hyper.eta * dv.item())
    if not (np.isfinite(report.ce) and np.isfinite(report.mdd)):
        raise TrainingError(f"step {step_index}: non-finite loss (ce={report.ce}, mdd={report.mdd})")
    backward(ce - hyper.eta * dv)
    names = set()
    for g in update:
        names.update(params.group(g))
    scale = None
    if head_lr_scale != 1.0:
        scale = {n: head_lr_scale for n in params.group("f") + params.group("adv")}
    adam_step(params, params.grads(names), state, lr, lr_scale=scale)
    return report


@dataclass(frozen=True)
class CaamConfig:
    model: CpacConfig = field(default_factory=CpacConfig)
    mdd: MddHyper = field(default_factory=MddHyper)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"  # or "ramp": lambda * (2 / (1 + exp(-10 p)) - 1), p = progress
    head_lr_scale: float = 1.0  # step-size multiplier for both heads
    lr_schedule: str = "constant"  # or "anneal": lr * (1 + 10 p) ** -0.75
    seed: int = 0
    train_adversary: bool = True

    def lambda_at(self, progress: float) -> float:
        if self.grl_schedule == "constant":
            return self.grl_lambda
        if self.grl_schedule == "ramp":
            return self.grl_lambda * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)
        raise ConfigurationError(f"unknown GRL schedule {self.grl_schedule!r}")

    def lr_at(self, progress: float) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "anneal":
            return self.lr * (1.0 + 10.0 * progress) ** -0.75
        raise ConfigurationError(f"unknown learning-rate schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CaamConfig":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = CpacConfig.from_dict(d["model"])
        if isinstance(d.get("mdd"), dict):
            d["mdd"] = MddHyper(**d["mdd"])
        return cls(**d)


def _target_cycle(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def predict_target(params: CaamParams, x: np.ndarray, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode main-head probabilities and embeddings for a feature array."""
    probs, embs = [], []
    with no_grad():
        for start in range(0, len(x), chunk):
            emb = cpac_forward(x[start : start + chunk], params.psi, params.config, mode="eval").embedding
            probs.append(head(emb, params, "head_f").data)
            embs.append(emb.data)
    return np.concatenate(probs), np.concatenate(embs)


def train_caam(source, target, config: CaamConfig = CaamConfig(), params: CaamParams | None = None):
    """Adversarial adaptation from a labelled source corpus to a target corpus.

    Target labels are read only to report per-epoch WAR/UAR.  Epoch length is
    the number of source batches; target batches are drawn from a reshuffled
    cycle.  Returns ``(params, history)``.
    """
    if len(source) == 0 or len(target) == 0:
        raise ConfigurationError("source and target corpora must be non-empty")
    k = config.model.num_classes
    if source.num_classes != k or tuple(source.label_space) != tuple(target.label_space):
        raise ConfigurationError(
            f"corpora must share a {k}-class label space, got {source.label_space} and {target.label_space}"
        )
    frames = config.model.input_frames
    xs, ys = source.matrix(frames), source.labels
    xt, yt = target.matrix(frames), target.labels
    if params is None:
        params = init_caam_params(config.model, config.seed, config.grl_lambda)
    state = AdamState()
    rng = np.random.default_rng([config.seed, 1])
    tcycle = _target_cycle(len(xt), np.random.default_rng([config.seed, 2]))
    update = GROUPS if config.train_adversary else ("psi", "f")
    history = []
    step = 0
    bs = config.batch_size
    total_steps = config.epochs * -(-len(xs) // bs)
    for epoch in range(config.epochs):
        ces, mdds = [], []
        for idx in _source_batches(len(xs), bs, rng):
            tidx = np.array([next(tcycle) for _ in range(len(idx))])
            params.grl_lambda = config.lambda_at(step / max(total_steps, 1))
            report = caam_train_step(
                DomainBatch(xs[idx], "source", ys[idx]),
                DomainBatch(xt[tidx], "target"),
                params, state, config.mdd, config.lr_at(step / max(total_steps, 1)), rng, update, step_index=step,
                head_lr_scale=config.head_lr_scale,
            )
            ces.append(report.ce)
            mdds.append(report.mdd)
            step += 1
        probs, _ = predict_target(params, xt)
        rep = evaluate(predict(probs), yt, k)
        history.append(
            {"epoch": epoch, "ce": float(np.mean(ces)), "mdd": float(np.mean(mdds)),
             "target_war": rep.war, "target_uar": rep.uar}
        )
    return params, history


def _source_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def source_only_baseline(source, target, config: CaamConfig = CaamConfig()):
    """The same pipeline with the discrepancy switched off and f' never updated."""
    cfg = replace(config, mdd=replace(config.mdd, eta=0.0), train_adversary=False)
    return train_caam(source, target, cfg)
