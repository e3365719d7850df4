"""Command-line entry point wiring generation, training, captioning,
revision, evaluation, ablations, and threshold sweeps.

Every command is a pure function of its input files, flags, and the run
seed: rerunning with identical inputs writes byte-identical outputs.
Workspace layout under --out:

    world.json                 world + vocabulary + pseudo-map metadata
    embeddings.tsv             external embedding table (TSV format)
    dataset_<split>.jsonl      scenes
    detections_<split>.jsonl   detector outputs (header record first)
    checkpoint.bin             trained captioner
    captions_<split>.jsonl     primary captions
    revised_<split>.jsonl      revised captions
    audit_<split>.json         per-scene revision audit trail
    metrics_<split>.{json,csv} evaluation reports
    ablation.csv, sweep.csv    harness outputs
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import captioner as cap
from . import evaluation as ev
from . import synthworld as sw
from .config import RunConfig, load_config, set_config_key
from .embeddings import load_table, save_table
from .errors import ConfigError, CrnError
from .evaluation import ALL_VARIANTS, AblationVariant
from .revision import revise

log = logging.getLogger("crn.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("CRN_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"CRN_LOG must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(
        level=_LOG_LEVELS[level],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def build_run_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = load_config(args.config, config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    if args.jobs is not None:
        config.jobs = args.jobs
    for key, raw in args.set or []:
        set_config_key(config, key, raw)
    overrides = {
        "tau_p": "revise.tau_p",
        "tau_s": "revise.tau_s",
        "epochs": "train.epochs",
        "max_len": "eval.max_len",
    }
    for attr, key in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            set_config_key(config, key, str(value))
    config.validate()
    return config


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CrnError(f"missing {hint}: {path} (run the earlier stages first)")
    return path


class Workspace:
    """File paths + lazy loading for one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out)

    def path(self, name: str) -> Path:
        return self.root / name

    def load_dataset(self, splits: list[str]) -> sw.Dataset:
        table = load_table(_require(self.path("embeddings.tsv"), "embedding table"))
        dataset = sw.load_world(_require(self.path("world.json"), "world file"), table)
        for split in splits:
            sw.load_split(
                dataset, split, _require(self.path(f"dataset_{split}.jsonl"), f"{split} split")
            )
        return dataset

    def load_detections(self, dataset: sw.Dataset, split: str, override=None):
        path = Path(override) if override else self.path(f"detections_{split}.jsonl")
        _require(path, f"{split} detections")
        return sw.load_detections(
            path,
            d_v=dataset.world.config.d_v,
            n_d=len(dataset.world.classes),
            max_detections=dataset.config.max_detections,
        )

    def load_params(self, dataset: sw.Dataset, override=None) -> cap.CaptionerParams:
        path = Path(override) if override else self.path("checkpoint.bin")
        _require(path, "checkpoint")
        params = cap.load_checkpoint(path)
        if params.dims.n_vocab != len(dataset.vocab):
            raise CrnError(
                f"checkpoint vocabulary size {params.dims.n_vocab} does not"
                f" match dataset ({len(dataset.vocab)})"
            )
        return params


def cmd_gen(config: RunConfig) -> int:
    ws = Workspace(config)
    ws.root.mkdir(parents=True, exist_ok=True)
    log.info("generating world (seed %d)", config.seed)
    world = sw.gen_world(config.world, config.seed)
    dataset = sw.gen_dataset(world, config.data, config.seed)
    save_table(world.table, ws.path("embeddings.tsv"))
    sw.write_world(dataset, ws.path("world.json"))
    for split in ("train", "val", "test"):
        sw.write_split(dataset, split, ws.path(f"dataset_{split}.jsonl"))
        dets = sw.simulate_split_detectors(dataset, split, config.seed)
        sw.write_detections(dets, world, ws.path(f"detections_{split}.jsonl"))
        log.info("wrote %s: %d scenes", split, len(dataset.splits[split]))
    return 0


def cmd_train(config: RunConfig) -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset(["train"])
    detections = ws.load_detections(dataset, "train")
    params, history = cap.train(
        dataset,
        detections,
        config.train,
        config.seed,
        log_fn=lambda e, l: log.info("epoch %d: loss %.4f", e, l),
    )
    cap.save_checkpoint(params, ws.path("checkpoint.bin"))
    with open(ws.path("train_history.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump({"epoch_loss": history}))
        fh.write("\n")
    log.info("saved checkpoint after %d epochs", len(history))
    return 0


def _write_captions(path: Path, rows: list[tuple[int, list[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene_id, tokens in rows:
            fh.write(_dump({"scene_id": scene_id, "tokens": tokens}))
            fh.write("\n")


def cmd_caption(config: RunConfig, split: str, checkpoint=None) -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset([split])
    params = ws.load_params(dataset, checkpoint)
    scenes = dataset.splits[split]
    decoded = ev.decode_split(
        params, dataset, scenes, config.revise.tau_p, config.eval.max_len, config.jobs
    )
    rows = [
        (s.scene_id, [dataset.vocab.word_of(i) for i in out.tokens])
        for s, out in zip(scenes, decoded)
    ]
    _write_captions(ws.path(f"captions_{split}.jsonl"), rows)
    log.info("wrote primary captions for %d scenes", len(rows))
    return 0


def cmd_revise(config: RunConfig, split: str, checkpoint=None, detections_path=None) -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset([split])
    params = ws.load_params(dataset, checkpoint)
    detections = ws.load_detections(dataset, split, detections_path)
    scenes = dataset.splits[split]
    decoded = ev.decode_split(
        params, dataset, scenes, config.revise.tau_p, config.eval.max_len, config.jobs
    )
    class_names = [c.name for c in dataset.world.classes]
    rows = []
    audits = []
    for scene, out in zip(scenes, decoded):
        dets = detections.get(scene.scene_id, sw.DetectionSet(scene.scene_id, []))
        revised = revise(
            out, dets, params, dataset.world.table, dataset.vocab,
            config.revise, class_names, scene.scene_id,
        )
        rows.append((scene.scene_id, revised.tokens))
        audits.append(revised.audit.audit_dict())
    _write_captions(ws.path(f"revised_{split}.jsonl"), rows)
    with open(ws.path(f"audit_{split}.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump({"tau_p": config.revise.tau_p, "tau_s": config.revise.tau_s,
                        "scenes": audits}))
        fh.write("\n")
    log.info("revised %d scenes", len(rows))
    return 0


def _load_caption_file(path: Path) -> dict[int, list[str]]:
    captions = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CrnError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if "scene_id" not in doc or "tokens" not in doc:
                raise CrnError(f"{path}:{lineno}: need scene_id and tokens")
            captions[int(doc["scene_id"])] = [str(t) for t in doc["tokens"]]
    return captions


def cmd_eval(config: RunConfig, split: str, captions_path=None, plot_data=False) -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset([split])
    if captions_path is None:
        candidate = ws.path(f"revised_{split}.jsonl")
        captions_path = candidate if candidate.exists() else ws.path(f"captions_{split}.jsonl")
    captions = _load_caption_file(_require(Path(captions_path), "captions file"))
    scenes = dataset.splits[split]
    missing = [s.scene_id for s in scenes if s.scene_id not in captions]
    if missing:
        raise CrnError(f"captions file lacks {len(missing)} scenes (first: {missing[0]})")
    report = ev.evaluate_captions(dataset, scenes, captions, dataset.novel_words())
    with open(ws.path(f"metrics_{split}.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump(report.as_dict()))
        fh.write("\n")
    with open(ws.path(f"metrics_{split}.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object", "precision", "recall", "f1", "tp", "fp", "fn"])
        for word, s in sorted(report.per_object.items()):
            writer.writerow([word, f"{s.precision:.6f}", f"{s.recall:.6f}",
                             f"{s.f1:.6f}", s.tp, s.fp, s.fn])
        writer.writerow(["average_f1", "", "", f"{report.average_f1:.6f}", "", "", ""])
        writer.writerow(["fluency_surrogate", "", "", f"{report.fluency:.6f}", "", "", ""])
    if plot_data:
        with open(ws.path(f"metrics_{split}_f1_series.tsv"), "w", encoding="utf-8") as fh:
            for i, (word, s) in enumerate(sorted(report.per_object.items())):
                fh.write(f"{i}\t{s.f1:.6f}\t{word}\n")
    log.info("average F1 %.4f, fluency %.4f", report.average_f1, report.fluency)
    return 0


def cmd_ablate(config: RunConfig, checkpoint=None, split: str = "test") -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset([split])
    params = ws.load_params(dataset, checkpoint)
    detections = ws.load_detections(dataset, split)
    rows = ev.run_ablation(
        ALL_VARIANTS, dataset, detections, params, config.revise,
        config.eval, config.seed, split, config.jobs,
    )
    with open(ws.path("ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "average_f1", "fluency_surrogate", "novel_recovery"])
        for row in rows:
            writer.writerow([
                row["variant"], f"{row['average_f1']:.6f}",
                f"{row['fluency_surrogate']:.6f}", f"{row['novel_recovery']:.6f}",
            ])
    for row in rows:
        log.info("%-10s F1 %.4f fluency %.4f", row["variant"],
                 row["average_f1"], row["fluency_surrogate"])
    return 0


def cmd_sweep(config: RunConfig, checkpoint=None, split: str = "test",
              plot_data=False) -> int:
    ws = Workspace(config)
    dataset = ws.load_dataset([split])
    params = ws.load_params(dataset, checkpoint)
    detections = ws.load_detections(dataset, split)
    rows = ev.threshold_sweep(
        config.eval.sweep_grid, dataset, detections, params, config.revise,
        config.eval, config.seed, split, config.jobs,
    )
    with open(ws.path("sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau_p", "average_f1", "fluency_surrogate", "mean_flagged"])
        for row in rows:
            writer.writerow([
                f"{row['tau_p']:.2f}", f"{row['average_f1']:.6f}",
                f"{row['fluency_surrogate']:.6f}", f"{row['mean_flagged']:.6f}",
            ])
    if plot_data:
        with open(ws.path("sweep_f1.tsv"), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(f"{row['tau_p']:.2f}\t{row['average_f1']:.6f}\n")
        with open(ws.path("sweep_fluency.tsv"), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(f"{row['tau_p']:.2f}\t{row['fluency_surrogate']:.6f}\n")
    log.info("swept %d thresholds", len(rows))
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="config file (key = value lines)")
    parser.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    parser.add_argument("--out", default=None, help="workspace directory (default ./out)")
    parser.add_argument("--jobs", type=int, default=None,
                        help="scene-parallel worker threads (default 1)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        type=_parse_set, help="override one config key, e.g. train.lr=0.01")


def _parse_set(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, _, value = text.partition("=")
    return key.strip(), value.strip()


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crn",
        description="Captioning with cascaded revision on a synthetic world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen", help="generate world, datasets, detections",
                       formatter_class=fmt)
    _add_common(p)

    p = sub.add_parser("train", help="train the captioner", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")

    p = sub.add_parser("caption", help="write primary captions", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--ckpt", default=None, help="checkpoint path override")
    p.add_argument("--tau-p", dest="tau_p", type=float, default=None,
                   help="perplexity threshold (feedback labels)")
    p.add_argument("--max-len", dest="max_len", type=int, default=None)

    p = sub.add_parser("revise", help="decode and run the revision cascade",
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--ckpt", default=None, help="checkpoint path override")
    p.add_argument("--detections", default=None,
                   help="external detections JSONL (header record validated)")
    p.add_argument("--tau-p", dest="tau_p", type=float, default=None)
    p.add_argument("--tau-s", dest="tau_s", type=float, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)

    p = sub.add_parser("eval", help="score a captions file", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--captions", default=None,
                   help="captions JSONL (default: revised, else primary)")
    p.add_argument("--plot-data", action="store_true", help="emit (x, y) series files")

    p = sub.add_parser("ablate", help="run the ablation table", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--ckpt", default=None)

    p = sub.add_parser("sweep", help="threshold sweep of the full cascade",
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--ckpt", default=None)
    p.add_argument("--grid", default=None,
                   help="comma-separated thresholds (default eval.sweep_grid)")
    p.add_argument("--plot-data", action="store_true", help="emit (x, y) series files")
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        parser = make_parser()
        args = parser.parse_args(argv)
        config = build_run_config(args)
        if args.command == "gen":
            return cmd_gen(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "caption":
            return cmd_caption(config, args.split, args.ckpt)
        if args.command == "revise":
            return cmd_revise(config, args.split, args.ckpt, args.detections)
        if args.command == "eval":
            return cmd_eval(config, args.split, args.captions, args.plot_data)
        if args.command == "ablate":
            return cmd_ablate(config, args.ckpt, args.split)
        if args.command == "sweep":
            if args.grid:
                set_config_key(config, "eval.sweep_grid", args.grid)
            return cmd_sweep(config, args.ckpt, args.split, args.plot_data)
        raise ConfigError(f"unknown command {args.command!r}")
    except CrnError as exc:
        print(f"crn: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"crn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
