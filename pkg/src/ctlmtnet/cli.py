"""Command-line entry point.

Every failure ends with a nonzero exit status (2 for usage errors) and a single JSON line on stderr:
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .audio import extract_directory
from .checkpoint import load_checkpoint
from .data import SynthSpec, read_corpus, synth_corpus, write_corpus
from .experiment import RunConfig, evaluate_checkpoint, export_embeddings, replay, run


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _resolve_paths(d: dict, base: Path) -> dict:
    """Make corpus paths and the output directory absolute relative to the config file."""
    d = json.loads(json.dumps(d))
    for key in ("corpus", "source", "target"):
        ref = d.get("data", {}).get(key)
        if isinstance(ref, dict) and "path" in ref:
            ref["path"] = str((base / ref["path"]).resolve())
    if d.get("output_dir"):
        d["output_dir"] = str((base / d["output_dir"]).resolve())
    return d


def _run_config(path: str, task: str, out: str | None) -> RunConfig:
    d = _resolve_paths(_load_json(path), Path(path).resolve().parent)
    d.setdefault("task", task)
    config = RunConfig.from_dict(d)
    if config.task != task:
        raise ValueError(f"{path}: config is for task {config.task!r}, not {task!r}")
    if out is not None:
        config = replace(config, output_dir=str(Path(out).resolve()))
    if config.output_dir is None:
        raise ValueError(f"{path}: no output_dir in config and no --out given")
    return config


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_extract(args) -> None:
    paths = extract_directory(args.wav_dir, args.out_dir)
    _emit({"extracted": len(paths), "out": str(args.out_dir)})


def cmd_synth(args) -> None:
    spec = _load_json(args.spec)
    if spec.get("emotions") is not None:
        spec["emotions"] = tuple(spec["emotions"])
    corpus = synth_corpus(SynthSpec(**spec))
    write_corpus(corpus, args.out)
    _emit({"utterances": len(corpus), "label_space": list(corpus.label_space), "out": str(args.out)})


def cmd_train_single(args) -> None:
    config = _run_config(args.config, "single", args.out)
    result = run(config)
    _emit({"war": result.war, "uar": result.uar, "folds": len(result.folds), "out": config.output_dir})


def cmd_train_cross(args) -> None:
    config = _run_config(args.config, "cross", args.out)
    result = run(config)
    _emit({"war": result.report.war, "uar": result.report.uar, "epochs": len(result.history), "out": config.output_dir})


def cmd_eval(args) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(params, read_corpus(args.corpus, args.label_space))
    _emit(report.as_dict())


def cmd_export(args) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus, args.label_space)
    export_embeddings(params, corpus, args.out_csv)
    _emit({"rows": len(corpus), "out": str(args.out_csv)})


def cmd_replay(args) -> None:
    result = replay(args.manifest, args.out)
    _emit({"identical": result.identical, "outputs": result.matches, "inputs": result.inputs_match})
    if not result.identical:
        raise RuntimeError("replayed outputs differ from the manifest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        sys.exit(2)


def _label_space(text: str):
    return tuple(s for s in text.split(",") if s)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctlmtnet", description="Capsule speech-emotion models with corpus adaptation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract-mfcc", help="WAV directory -> per-file MFCC CSVs + manifest.csv")
    s.add_argument("wav_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("synth", help="write a synthetic corpus described by a JSON spec")
    s.add_argument("spec")
    s.add_argument("out")
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("train-single", cmd_train_single, "k-fold CPAC training on one corpus"),
        ("train-cross", cmd_train_cross, "CAAM training from a source to a target corpus"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--out", help="output directory (overrides output_dir in the config)")
        s.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("export-embeddings", cmd_export)):
        s = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "write embedding CSV")
        s.add_argument("checkpoint")
        s.add_argument("corpus")
        if name == "export-embeddings":
            s.add_argument("out_csv")
        s.add_argument("--label-space", type=_label_space, default=None,
                       help="comma-separated emotion order (default: sorted names in labels.csv)")
        s.set_defaults(func=func)

    s = sub.add_parser("replay", help="rerun a manifest and compare outputs bit for bit")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
