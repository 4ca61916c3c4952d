"""Command-line entry point: ``scriptorium <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
Logs go to stderr as one JSON object per line; artifacts go under ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("scriptorium")

SUBCOMMANDS = ("forge", "train", "synth", "export-words", "eval", "report")
DEFAULT_SEED = 0
DEFAULT_CORPUS_PAGES = 455  # mirrors forge.DEFAULT_CORPUS_PAGES; kept local so --help stays import-light


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        d = {"ts": round(record.created, 3), "level": record.levelname.lower(),
             "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            d["exc"] = self.formatException(record.exc_info)
        return json.dumps(d)


def setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--log-level", default=argparse.SUPPRESS, choices=["debug", "info", "warning", "error"],
                   help="log verbosity (default info)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="torch intra-op threads")
    return p


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="scriptorium", parents=[common],
                    description="Synthetic historical document generation: forge template pages, "
                                "train the style-transfer model, synthesize pages and word datasets, "
                                "and evaluate recognizers pretrained on them.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("forge", parents=[common], help="render template pages with word ground truth")
    p.add_argument("--spec", required=True, help="layout spec YAML")
    p.add_argument("--text", help="UTF-8 text source (default: bundled Latin sample)")
    p.add_argument("--pages", type=int, default=DEFAULT_CORPUS_PAGES, help=f"number of pages (default {DEFAULT_CORPUS_PAGES})")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train the six networks jointly")
    p.add_argument("--source", required=True, help="labeled source-domain manifest")
    p.add_argument("--target", required=True, help="target-domain manifest")
    p.add_argument("--config", help="training config YAML (default: published settings)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("synth", parents=[common], help="style whole pages with a trained generator")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--manifest", required=True, help="page manifest to translate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overlap", type=float, default=0.10, help="tile overlap fraction (default 0.10)")
    p.add_argument("--blend", choices=["uniform", "feather"], default="uniform", help="tile blending")

    p = sub.add_parser("export-words", parents=[common], help="export a labeled synthetic word dataset")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--manifest", required=True, help="labeled page manifest")
    p.add_argument("--n", type=int, default=70000, help="number of words (default 70000)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overlap", type=float, default=0.10, help="tile overlap fraction (default 0.10)")

    p = sub.add_parser("eval", parents=[common], help="pretrain, fine-tune and score recognizers")
    p.add_argument("--pretrain", required=True, help="synthetic word manifest, or 'none'")
    p.add_argument("--external", help="optional external word manifest for the 'ext' baseline")
    p.add_argument("--labeled", required=True, help="labeled manifest (pages or words) of the evaluation domain")
    p.add_argument("--subsets", type=_floats, default=[0.1, 0.2, 0.5, 1.0], help="comma-separated fractions")
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3], help="comma-separated seeds")
    p.add_argument("--config", help="recognizer config YAML")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", parents=[common], help="merge report CSVs and redraw the charts")
    p.add_argument("--records", nargs="+", required=True, help="report CSV files")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def cmd_forge(args) -> None:
    from .config import load_config
    from .forge import LayoutSpec, generate_corpus, sample_text_path
    spec = load_config(args.spec, LayoutSpec)
    manifest = generate_corpus(spec, args.text or sample_text_path(), args.pages, args.seed, args.out)
    log.info("wrote %d pages to %s", args.pages, manifest)


def cmd_train(args) -> None:
    from .config import load_config
    from .trainer import TrainConfig, fit
    config = load_config(args.config, TrainConfig) if args.config else TrainConfig()
    if args.seed_given:
        config = dataclasses.replace(config, seed=args.seed)
    res = fit(args.source, args.target, config, args.out, resume=args.resume)
    log.info("trained %d steps (%d skipped); checkpoint %s", res.steps, res.skipped, res.checkpoint)


def cmd_synth(args) -> None:
    from PIL import Image
    from .checkpoint import load_checkpoint
    from .corpus import load_documents
    from .forge import ManifestRecord, read_manifest, write_manifest
    from .synthesize import synthesize_page, to_uint8

    bundle = load_checkpoint(args.ckpt)
    out = Path(args.out)
    (out / "pages").mkdir(parents=True, exist_ok=True)
    records = read_manifest(args.manifest)
    docs = load_documents(args.manifest, "target")
    new = []
    for k, (rec, doc) in enumerate(zip(records, docs)):
        styled = synthesize_page(bundle.G, doc.image, args.overlap, blend=args.blend)
        rel = f"pages/styled_{k:05d}.png"
        Image.fromarray(to_uint8(styled), mode="L").save(out / rel)
        new.append(ManifestRecord(rel, rec.page_width, rec.page_height, rec.words,
                                  {**rec.extra, "template": rec.image_path}))
    log.info("styled %d pages into %s", len(new), write_manifest(out / "manifest.jsonl", new))


def cmd_export_words(args) -> None:
    from .checkpoint import load_checkpoint
    from .synthesize import export_word_dataset
    bundle = load_checkpoint(args.ckpt)
    res = export_word_dataset(bundle.G, args.manifest, args.n, args.seed, args.out, args.overlap)
    log.info("exported %d words (%d duplicates) to %s", res.n_words, res.duplicates, res.manifest)


def cmd_eval(args) -> None:
    from .config import load_config
    from .evaluation import RecognizerConfig, SUBSET_GRID, pretrain_recognizer, report, run_grid
    bad = [f for f in args.subsets if f not in SUBSET_GRID]
    if bad:
        raise UsageError(f"scriptorium eval: error: --subsets values must come from {SUBSET_GRID}, got {bad}")
    config = load_config(args.config, RecognizerConfig) if args.config else RecognizerConfig()
    out = Path(args.out)
    pretrained = {}
    if args.pretrain.lower() != "none":
        pretrained["syn"] = pretrain_recognizer(args.pretrain, config, out / "syn.ckpt", args.seed)
    if args.external:
        pretrained["ext"] = pretrain_recognizer(args.external, config, out / "ext.ckpt", args.seed)
    records = run_grid(args.labeled, pretrained, args.subsets, args.seeds, config)
    res = report(records, out)
    log.info("wrote %d records to %s", len(records), res["csv"])


def cmd_report(args) -> None:
    from .evaluation import read_report_csv, report
    records = [r for path in args.records for r in read_report_csv(path)]
    res = report(records, args.out)
    log.info("wrote %d records to %s", len(records), res["csv"])


COMMANDS = {"forge": cmd_forge, "train": cmd_train, "synth": cmd_synth, "export-words": cmd_export_words,
            "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    args.seed_given = hasattr(args, "seed")
    args.seed = getattr(args, "seed", DEFAULT_SEED)
    setup_logging(getattr(args, "log_level", "info"))
    if hasattr(args, "threads"):
        import torch
        torch.set_num_threads(args.threads)
    start = time.time()
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(str(exc) + "\n")
        return 1
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc, exc_info=log.isEnabledFor(logging.DEBUG))
        return 2
    log.info("%s finished in %.1fs", args.command, time.time() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
