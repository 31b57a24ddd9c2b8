"""Command-line entry point: ``mga <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a user error (bad flags, unreadable or
malformed inputs), 2 on an internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
import traceback
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import SyntheticConfig, corpus_classes, load_corpus, save_corpus, synth_generate
from .encoders import tokenize
from .evaluation import eval_classification
from .io import atomic_write_json
from .knowledge import build_dictionary, generate_report, load_dictionary, save_dictionary, split_report
from .objectives import LossWeights
from .segmap import evaluate_heatmap, sentence_heatmap, write_heatmap
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["main", "run", "build_parser", "UsageError"]

log = logging.getLogger("mga")


class UsageError(Exception):
    """Bad command-line input; reported with usage and exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mga", description="Multi-granularity image-report alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic paired corpus (JSON lines)")
    s.add_argument("--out", required=True, help="output corpus file")
    s.add_argument("--n", type=int, default=500, help="number of examples (default 500)")
    s.add_argument("--classes", type=int, default=4, help="number of finding classes (default 4)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--free-placement", action="store_true",
                   help="place blobs anywhere instead of in a class-specific quadrant")

    t = sub.add_parser("train", help="train the dual encoder on a corpus")
    t.add_argument("--data", required=True, help="training corpus (JSON lines)")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--epochs", type=int, default=10, help="passes over the data (default 10)")
    t.add_argument("--batch", type=int, default=32, help="mini-batch size (default 32)")
    t.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate (default 1e-5)")
    t.add_argument("--tau1", type=float, default=1.0, help="weight of the contrastive loss (default 1)")
    t.add_argument("--tau2", type=float, default=1.0, help="weight of the classification loss (default 1)")
    t.add_argument("--tau3", type=float, default=1.0, help="weight of the alignment loss (default 1)")
    t.add_argument("--sentences", type=int, default=5, help="sentence slots per report (default 5)")
    t.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default 0)")

    b = sub.add_parser("build-dict", help="cluster report sentences into a retrieval dictionary")
    b.add_argument("--data", required=True, help="corpus whose reports fill the dictionary")
    b.add_argument("--ckpt", required=True, help="checkpoint providing the text encoder")
    b.add_argument("--k", type=int, default=None,
                   help="number of clusters (default: half the unique sentences, at most 100)")
    b.add_argument("--out", required=True, help="dictionary file to write")
    b.add_argument("--seed", type=int, default=0, help="k-means seed (default 0)")

    c = sub.add_parser("classify", help="zero-shot classification metrics")
    c.add_argument("--ckpt", required=True, help="trained checkpoint")
    c.add_argument("--data", required=True, help="labelled evaluation corpus")
    c.add_argument("--classes", default=None,
                   help="comma-separated classes (default: those stored in the checkpoint)")
    c.add_argument("--threshold", type=float, default=0.5, help="decision threshold (default 0.5)")
    c.add_argument("--out", default=None, help="also write the metrics JSON to this file")

    r = sub.add_parser("report", help="retrieve reports and print them next to the references")
    r.add_argument("--ckpt", required=True, help="trained checkpoint")
    r.add_argument("--dict", required=True, dest="dictionary", help="sentence dictionary")
    r.add_argument("--data", required=True, help="corpus of images to report on")
    r.add_argument("--top", type=int, default=5, help="sentences per report (default 5)")
    r.add_argument("--limit", type=int, default=None, help="only the first N examples")
    r.add_argument("--out", default=None, help="also write the reports as JSON to this file")

    g = sub.add_parser("segment", help="sentence-conditioned heatmaps and their scores")
    g.add_argument("--ckpt", required=True, help="trained checkpoint")
    g.add_argument("--data", required=True, help="corpus of images (boxes optional)")
    g.add_argument("--sentence", required=True, help="query sentence")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--quantile", type=float, default=0.95,
                   help="heatmap quantile defining the predicted region (default 0.95)")
    g.add_argument("--limit", type=int, default=None, help="only the first N examples")

    v = sub.add_parser("verify", help="run gradient checks and oracle suites")
    v.add_argument("--full", action="store_true",
                   help="also run the end-to-end training and reproducibility suites")
    return p


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _cmd_synth(a) -> int:
    if a.n < 1 or a.classes < 2:
        raise UsageError("--n must be >= 1 and --classes >= 2")
    cfg = SyntheticConfig.with_classes(a.classes, fixed_quadrant=not a.free_placement)
    examples = synth_generate(cfg, a.n, a.seed)
    save_corpus(examples, a.out)
    print(f"wrote {len(examples)} examples ({', '.join(cfg.classes)}) to {a.out}")
    return 0


def _cmd_train(a) -> int:
    data = load_corpus(_need_file(a.data, "corpus"))
    config = TrainConfig(batch_size=a.batch, epochs=a.epochs, lr=a.lr,
                         weights=LossWeights(a.tau1, a.tau2, a.tau3), sentences=a.sentences,
                         seed=a.seed)
    config = replace(config, encoder=replace(config.encoder, seed=a.seed),
                     classes=tuple(corpus_classes(data)))

    def on_epoch(epoch, entry):
        print(f"epoch {epoch}: total {entry['total']:.4f}  basic {entry['basic']:.4f}  "
              f"cls {entry['cls']:.4f}  seg {entry['seg']:.4f}", flush=True)

    ckpt = train(config, data, on_epoch=on_epoch)
    save_checkpoint(ckpt, a.out)
    print(f"saved checkpoint to {a.out}")
    return 0


def _cmd_build_dict(a) -> int:
    data = load_corpus(_need_file(a.data, "corpus"))
    model = load_checkpoint(_need_file(a.ckpt, "checkpoint")).to_model()
    dictionary = build_dictionary([ex.report for ex in data], model, k=a.k, seed=a.seed)
    save_dictionary(dictionary, a.out)
    print(f"dictionary: {len(dictionary.sentences)} sentences in {dictionary.k} clusters -> {a.out}")
    return 0


def _cmd_classify(a) -> int:
    ckpt = load_checkpoint(_need_file(a.ckpt, "checkpoint"))
    data = load_corpus(_need_file(a.data, "corpus"))
    model = ckpt.to_model()
    prompts = ckpt.prompt_pairs(model)
    if a.classes:
        wanted = [c.strip() for c in a.classes.split(",") if c.strip()]
        missing = [c for c in wanted if c not in prompts.classes]
        if missing:
            raise UsageError(f"classes without prompts in the checkpoint: {', '.join(missing)}")
        prompts = prompts.subset(wanted)
    report = eval_classification(model, data, prompts, a.threshold)
    print(report.table())
    print(report.dumps())
    if a.out:
        atomic_write_json(a.out, report.to_json())
    return 0


def _columns(left: list[str], right: list[str], width: int = 48) -> list[str]:
    lines = [f"{'reference':<{width}}  generated", f"{'-' * width}  {'-' * width}"]
    for i in range(max(len(left), len(right))):
        l = left[i] if i < len(left) else ""
        r = right[i] if i < len(right) else ""
        lines.append(f"{l:<{width}}  {r}")
    return lines


def _cmd_report(a) -> int:
    if a.top < 1:
        raise UsageError("--top must be >= 1")
    model = load_checkpoint(_need_file(a.ckpt, "checkpoint")).to_model()
    dictionary = load_dictionary(_need_file(a.dictionary, "dictionary"))
    data = load_corpus(_need_file(a.data, "corpus"))[:a.limit]
    _, v = model.embed_images(np.stack([ex.image for ex in data]))
    out = []
    for ex, emb in zip(data, v):
        generated = generate_report(emb, dictionary, a.top)
        out.append({"id": ex.id, "reference": ex.report, "generated": generated})
        print(f"== {ex.id}")
        print("\n".join(_columns(split_report(ex.report), generated)))
        print()
    if a.out:
        atomic_write_json(a.out, out)
    return 0


def _stem(example_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", example_id) or "example"


def _cmd_segment(a) -> int:
    if not tokenize(a.sentence):
        raise UsageError("--sentence has no tokens")
    if not 0 < a.quantile < 1:
        raise UsageError("--quantile must lie in (0, 1)")
    model = load_checkpoint(_need_file(a.ckpt, "checkpoint")).to_model()
    data = load_corpus(_need_file(a.data, "corpus"))[:a.limit]
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    words = set(tokenize(a.sentence))
    records = []
    for ex in data:
        hm = sentence_heatmap(a.sentence, ex.image, model)
        csv_path, pgm_path = write_heatmap(hm, out_dir, _stem(ex.id))
        rec = {"id": ex.id, "csv": csv_path.name, "pgm": pgm_path.name}
        # score against boxes of the class the sentence names, else against all boxes
        boxes = [b for b in ex.boxes or [] if set(tokenize(b.label)) <= words] or list(ex.boxes or [])
        if boxes:
            rec["pointing_hit"], rec["iou"] = evaluate_heatmap(hm, boxes, a.quantile)
        records.append(rec)
    scored = [r for r in records if "iou" in r]
    summary = {"sentence": a.sentence, "quantile": a.quantile, "examples": records,
               "pointing": float(np.mean([r["pointing_hit"] for r in scored])) if scored else None,
               "iou": float(np.mean([r["iou"] for r in scored])) if scored else None}
    atomic_write_json(out_dir / "eval.json", summary)
    print(f"wrote {len(records)} heatmaps to {out_dir}; pointing={summary['pointing']} "
          f"iou={summary['iou']}")
    return 0


def _cmd_verify(a) -> int:
    from .verify import run_suites

    results = run_suites(full=a.full)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "build-dict": _cmd_build_dict,
    "classify": _cmd_classify,
    "report": _cmd_report,
    "segment": _cmd_segment,
    "verify": _cmd_verify,
}


def _thread_limit():
    """Cap BLAS threads at ``MGA_THREADS`` when set."""
    value = os.environ.get("MGA_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"MGA_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"MGA_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return _COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # malformed corpora, checkpoints, dictionaries and invalid settings
        print(f"mga: error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        print("mga: internal error", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
