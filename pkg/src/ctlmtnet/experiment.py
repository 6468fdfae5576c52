"""Run configuration, the single- and cross-corpus protocols, manifests and replay.

Every run writes its metric CSVs, checkpoints and embedding exports under an
output directory together with ``manifest.json`` (config, config hash, seed,
library versions, input fingerprints, output digests).  :func:`replay` reruns
a manifest into a fresh directory and compares the outputs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .caam import CaamConfig, CaamParams, predict_target, source_only_baseline, train_caam
from .checkpoint import save_checkpoint
from .data import Corpus, SynthSpec, kfold_split, read_corpus, remap_labels, synth_corpus
from .losses import MddHyper
from .metrics import EvalReport, evaluate
from .model import ConfigurationError, CpacConfig, ablation_config, predict
from .train import TrainConfig, evaluate_model, forward_in_chunks, train_cpac

MANIFEST = "manifest.json"
HISTORY_COLUMNS = ("epoch", "ce", "mdd", "target_war", "target_uar")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's outputs.

    ``data`` names the corpora: ``{"corpus": ref}`` for single-corpus runs,
    ``{"source": ref, "target": ref}`` for cross-corpus runs, where a ref is
    ``{"path": dir}`` or ``{"synth": {SynthSpec fields}}``.  Optional
    ``label_space`` and ``label_map`` (emotion -> shared emotion or null) move
    corpora into a shared label space.  ``output_dir`` does not enter the hash.
    """

    task: str = "single"  # "single" | "cross"
    model: CpacConfig = field(default_factory=CpacConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mdd: MddHyper = field(default_factory=MddHyper)
    adaptation: bool = True  # cross only; False is the source-only control
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"
    lr_schedule: str = "constant"
    head_lr_scale: float = 1.0
    seed: int = 0
    folds: int = 10
    group_by_speaker: bool = False  # speaker-independent folds: hook only, not implemented
    data: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if self.task not in ("single", "cross"):
            raise ConfigurationError(f"task must be 'single' or 'cross', got {self.task!r}")
        if self.grl_lambda < 0:
            raise ConfigurationError(f"grl_lambda must be nonnegative, got {self.grl_lambda}")
        if self.group_by_speaker:
            raise ConfigurationError("speaker-grouped folds are not implemented; splits are utterance-level")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown run-config keys: {sorted(unknown)}")
        try:
            if isinstance(d.get("model"), dict):
                d["model"] = CpacConfig.from_dict(d["model"])
            if isinstance(d.get("train"), dict):
                d["train"] = TrainConfig.from_dict(d["train"])
            if isinstance(d.get("mdd"), dict):
                d["mdd"] = MddHyper(**d["mdd"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_algorithm(self, algorithm: int | None) -> "RunConfig":
        """Ablation toggles: 1-3 change the model, 4 switches adaptation off."""
        if algorithm == 4:
            return replace(self, adaptation=False)
        return replace(self, model=ablation_config(self.model, algorithm))

    def caam_config(self) -> CaamConfig:
        t = self.train
        return CaamConfig(
            model=self.model, mdd=self.mdd, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
            grl_lambda=self.grl_lambda, grl_schedule=self.grl_schedule, lr_schedule=self.lr_schedule,
            head_lr_scale=self.head_lr_scale, seed=self.seed,
        )


# ---------------------------------------------------------------------------
# corpora from config references
# ---------------------------------------------------------------------------

def load_corpus(ref: dict, label_space=None, label_map: dict | None = None) -> Corpus:
    if not isinstance(ref, dict) or len(ref.keys() & {"path", "synth"}) != 1:
        raise ConfigurationError(f"corpus reference needs exactly one of 'path' or 'synth', got {ref!r}")
    if "synth" in ref:
        spec = dict(ref["synth"])
        if spec.get("emotions") is not None:
            spec["emotions"] = tuple(spec["emotions"])
        try:
            corpus = synth_corpus(SynthSpec(**spec))
        except TypeError as exc:
            raise ConfigurationError(f"bad synthetic spec: {exc}") from None
    else:
        if not os.path.isdir(ref["path"]):
            raise ConfigurationError(f"corpus directory {ref['path']} does not exist")
        corpus = read_corpus(ref["path"], None if label_map else label_space)
    if label_map:
        if label_space is None:
            raise ConfigurationError("label_map needs an explicit label_space")
        corpus = remap_labels(corpus, label_map, label_space)
    return corpus


def _fingerprint(ref: dict) -> str:
    """Digest of a corpus reference: the spec itself, or every file of a directory."""
    h = hashlib.sha256()
    if "synth" in ref:
        h.update(json.dumps(ref["synth"], sort_keys=True).encode())
    else:
        root = Path(ref["path"])
        for p in sorted(root.glob("*.csv")):
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _corpus_refs(config: RunConfig) -> dict:
    names = ("corpus",) if config.task == "single" else ("source", "target")
    missing = [n for n in names if n not in config.data]
    if missing:
        raise ConfigurationError(f"{config.task}-corpus run needs data.{missing[0]}")
    return {n: config.data[n] for n in names}


def load_run_corpora(config: RunConfig) -> dict[str, Corpus]:
    space, mapping = config.data.get("label_space"), config.data.get("label_map")
    return {n: load_corpus(ref, space, mapping) for n, ref in _corpus_refs(config).items()}


# ---------------------------------------------------------------------------
# file outputs
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _embeddings(params, corpus: Corpus) -> np.ndarray:
    psi = params.psi if isinstance(params, CaamParams) else params
    _, emb = forward_in_chunks(corpus.matrix(psi.config.input_frames), psi, psi.config)
    return emb


def export_embeddings(params, corpus: Corpus, path) -> Path:
    """CSV of ``id, label, emotion, e0 .. e{D-1}``, one row per utterance."""
    emb = _embeddings(params, corpus)
    path = Path(path)
    header = ["id", "label", "emotion"] + [f"e{j}" for j in range(emb.shape[1])]
    rows = (
        [u.id, u.label, u.emotion] + [repr(float(v)) for v in row] for u, row in zip(corpus.items, emb)
    )
    try:
        _write_csv(path, header, rows)
    except OSError as exc:
        raise OSError(f"{path}: cannot write embeddings ({exc.strerror})") from exc
    return path


def evaluate_checkpoint(params, corpus: Corpus) -> EvalReport:
    """Main-head predictions for a CAAM checkpoint, capsule lengths for CPAC."""
    config = params.config
    if corpus.num_classes != config.num_classes:
        raise ConfigurationError(
            f"corpus has {corpus.num_classes} classes, checkpoint expects {config.num_classes}"
        )
    x = corpus.matrix(config.input_frames)
    if isinstance(params, CaamParams):
        probs, _ = predict_target(params, x)
    else:
        probs, _ = forward_in_chunks(x, params, config)
    return evaluate(predict(probs), corpus.labels, config.num_classes)


def versions() -> dict:
    return {
        "python": platform.python_version(), "numpy": np.__version__,
        "scipy": scipy.__version__, "ctlmtnet": __version__,
    }


def _write_manifest(out: Path, config: RunConfig, outputs: list[Path], metrics: dict) -> None:
    manifest = {
        "task": config.task,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "versions": versions(),
        "inputs": {n: _fingerprint(ref) for n, ref in _corpus_refs(config).items()},
        "outputs": {p.relative_to(out).as_posix(): _sha256(p) for p in outputs},
        "metrics": metrics,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(config: RunConfig) -> Path | None:
    if config.output_dir is None:
        return None
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass
class SingleCorpusResult:
    folds: list[EvalReport]
    war: float  # mean over folds
    uar: float
    params: list = field(default_factory=list, repr=False)


def run_single_corpus(config: RunConfig, corpus: Corpus) -> SingleCorpusResult:
    """k-fold CPAC training with the margin loss; mean WAR/UAR over folds."""
    if config.task != "single":
        raise ConfigurationError("run_single_corpus needs task='single'")
    if corpus.num_classes != config.model.num_classes:
        raise ConfigurationError(
            f"corpus has {corpus.num_classes} classes, model has {config.model.num_classes}"
        )
    out = _prepare_out(config)
    x = corpus.matrix(config.model.input_frames)
    y = corpus.labels
    reports, params_list, outputs = [], [], []
    for fold, (train_idx, test_idx) in enumerate(kfold_split(y, config.folds, config.seed)):
        params, _ = train_cpac(x[train_idx], y[train_idx], config.model, config.train, config.seed)
        reports.append(evaluate_model(params, config.model, x[test_idx], y[test_idx]))
        params_list.append(params)
        if out is not None:
            ckpt = out / "checkpoints" / f"fold{fold:02d}.ckpt"
            save_checkpoint(ckpt, params, {"fold": fold})
            outputs += [ckpt, export_embeddings(params, corpus.subset(test_idx), out / "embeddings" / f"fold{fold:02d}.csv")]
    war = float(np.mean([r.war for r in reports]))
    uar = float(np.mean([r.uar for r in reports]))
    if out is not None:
        rows = [[i, _fmt(r.war), _fmt(r.uar)] for i, r in enumerate(reports)] + [["mean", _fmt(war), _fmt(uar)]]
        _write_csv(out / "results.csv", ["fold", "war", "uar"], rows)
        metrics = {"folds": [{"war": r.war, "uar": r.uar} for r in reports], "war": war, "uar": uar}
        _write_manifest(out, config, [out / "results.csv"] + outputs, metrics)
    return SingleCorpusResult(reports, war, uar, params_list)


@dataclass
class CrossCorpusResult:
    report: EvalReport  # on the target corpus
    history: list[dict]
    params: CaamParams = field(repr=False)


def write_history(path, history) -> None:
    _write_csv(path, HISTORY_COLUMNS, [[h["epoch"]] + [_fmt(h[c]) for c in HISTORY_COLUMNS[1:]] for h in history])


def run_cross_corpus(config: RunConfig, source: Corpus, target: Corpus) -> CrossCorpusResult:
    """CAAM (or, with ``adaptation=False``, the source-only control) on a corpus pair."""
    if config.task != "cross":
        raise ConfigurationError("run_cross_corpus needs task='cross'")
    out = _prepare_out(config)
    caam = config.caam_config()
    fn = train_caam if config.adaptation else source_only_baseline
    params, history = fn(source, target, caam)
    report = evaluate_checkpoint(params, target)
    if out is not None:
        ckpt = out / "checkpoints" / "caam.ckpt"
        save_checkpoint(ckpt, params)
        emb = export_embeddings(params, target, out / "embeddings" / "target.csv")
        write_history(out / "history.csv", history)
        _write_csv(out / "results.csv", ["split", "war", "uar"], [["target", _fmt(report.war), _fmt(report.uar)]])
        metrics = {"war": report.war, "uar": report.uar, "history": history}
        _write_manifest(out, config, [out / "results.csv", out / "history.csv", ckpt, emb], metrics)
    return CrossCorpusResult(report, history, params)


def run(config: RunConfig):
    corpora = load_run_corpora(config)
    if config.task == "single":
        return run_single_corpus(config, corpora["corpus"])
    return run_cross_corpus(config, corpora["source"], corpora["target"])


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    output_dir: Path
    matches: dict[str, bool]
    inputs_match: dict[str, bool]

    @property
    def identical(self) -> bool:
        return all(self.matches.values()) and all(self.inputs_match.values())


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"{path}: unreadable manifest ({exc})") from None


def replay(manifest_path, output_dir) -> ReplayResult:
    """Rerun a recorded configuration into ``output_dir`` and diff every output."""
    manifest = read_manifest(manifest_path)
    config = RunConfig.from_dict(manifest["config"])
    config = replace(config, output_dir=str(output_dir))
    if config.config_hash() != manifest["config_hash"]:
        raise ConfigurationError("manifest config does not match its recorded hash")
    inputs = {n: _fingerprint(ref) == manifest["inputs"].get(n) for n, ref in _corpus_refs(config).items()}
    run(config)
    out = Path(output_dir)
    matches = {}
    for rel, digest in manifest["outputs"].items():
        p = out / rel
        matches[rel] = p.exists() and _sha256(p) == digest
    return ReplayResult(out, matches, inputs)


# ---------------------------------------------------------------------------
# default synthetic tasks (sized for one CPU core)
# ---------------------------------------------------------------------------

SHIFT_MODEL = CpacConfig(
    num_classes=5, input_frames=16, conv_filters=16, num_primary_caps=8, primary_dim=8, digit_dim=8
)


def shift_task_config(seed: int = 0, adaptation: bool = True, output_dir: str | None = None) -> RunConfig:
    """The default covariate-shift pair: 5 Gaussian classes, target rotated 30 degrees and translated.

    ``adaptation=False`` gives the source-only control under the same seed and budget.
    """
    source = {"per_class": 60, "frames": 16, "task_seed": seed, "seed": 10 * seed}
    target = dict(source, rotation_deg=30.0, translation=0.5, seed=10 * seed + 1, id_prefix="tgt")
    return RunConfig(
        task="cross", model=SHIFT_MODEL, train=TrainConfig(epochs=20, batch_size=32, lr=3e-3),
        grl_lambda=0.3, grl_schedule="ramp", lr_schedule="constant", seed=seed, adaptation=adaptation,
        data={"source": {"synth": source}, "target": {"synth": target}}, output_dir=output_dir,
    )
