"""``vtg`` command line: data generation, toy training, evaluation, metrics, benchmarks.

Every subcommand writes a JSON report to ``--out`` (when given) and a short
summary to stdout.  Exit status: 0 ok, 1 bad config / input / IO, 2 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger("vtg")

TASK_CHOICES = ("mr", "dvc", "vhd", "vs")


class InvariantViolation(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------------


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    return cls(**d)


@dataclass
class DataConfig:
    tasks: list = field(default_factory=lambda: ["MR"])
    max_samples: Optional[int] = None


@dataclass
class EvalConfig:
    temperature: float = 0.1
    seed: int = 0
    batch_size: int = 64


@dataclass
class RunConfig:
    seed: Optional[int] = None
    out: Optional[str] = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .model import ModelConfig, TrainConfig

        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        cfg = cls(
            seed=d.get("seed"),
            out=d.get("out"),
            model=dict(d.get("model", {})),
            train=dict(d.get("train", {})),
            data=_strict(DataConfig, d.get("data", {}), "data"),
            eval=_strict(EvalConfig, d.get("eval", {}), "eval"),
        )
        # validate eagerly so bad keys fail before any work starts
        try:
            ModelConfig.from_dict(cfg.model)
            TrainConfig.from_dict(cfg.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "model": self.model,
            "train": self.train,
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }


def resolve_seed(flag: Optional[int], config_seed: Optional[int] = None) -> int:
    """Flag, then config, then ``VTG_SEED``, then 0."""
    if flag is not None:
        return flag
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("VTG_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"VTG_SEED must be an integer, got {env!r}") from exc
    return 0


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def write_report(out: Optional[str], name: str, report: dict) -> None:
    if out is None:
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _parse_counts(text: str) -> dict:
    from .data import TASKS

    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, val = part.partition("=")
        key = key.strip().upper()
        if key not in TASKS or not val.strip().isdigit():
            raise ConfigError(f"bad task count {part!r}; expected e.g. MR=500,DVC=100")
        out[key] = int(val)
    return out


# --- subcommands ---------------------------------------------------------------------


def cmd_tokenize(args) -> int:
    from .model import make_tokenizer
    from .time_tokens import decode_timestamp, encode_timestamp

    tok = make_tokenizer([])
    rows = []
    for t in args.t:
        ids = encode_timestamp(t, tok.vocab)
        tokens = [tok.tokens[i] for i in ids]
        rows.append({"t": t, "tokens": tokens, "ids": list(ids), "decoded": decode_timestamp(ids, tok.vocab)})
        print("".join(tokens), " ".join(map(str, ids)))
    write_report(args.out, "tokenize.json", {"base_vocab_size": tok.vocab.base_vocab_size, "timestamps": rows})
    return 0


def cmd_datagen(args) -> int:
    from .data import SynthSpec, save_dataset, synth_generate

    seed = resolve_seed(args.seed)
    kw = {"noise_scale": args.noise_scale, "prefix": args.prefix, "duration_range": (args.min_duration, args.max_duration)}
    spec = SynthSpec(_parse_counts(args.counts), **kw) if args.counts else SynthSpec.from_mix(args.total, **kw)
    pairs = synth_generate(spec, seed)
    save_dataset(pairs, args.out)
    counts = {t: sum(a.task == t for a, _ in pairs) for t in spec.counts}
    write_report(args.out, "datagen.json", {"seed": seed, "counts": counts, "spec": asdict(spec)})
    print(f"wrote {len(pairs)} samples to {args.out} {counts}")
    return 0


def cmd_derive_mr(args) -> int:
    from .data import derive_mr_from_dvc, load_annotations, save_jsonl

    anns = load_annotations(_require(args.input, "annotation file"))
    out = [m for a in anns if a.task == "DVC" for m in derive_mr_from_dvc(a)]
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(out, args.output)
    print(f"{sum(a.task == 'DVC' for a in anns)} DVC annotations -> {len(out)} MR annotations")
    return 0


def cmd_format(args) -> int:
    from .data import _dumps, format_sample, load_annotations

    anns = load_annotations(_require(args.input, "annotation file"))
    rng = np.random.default_rng(resolve_seed(args.seed))
    lines = []
    for k, a in zip(query_ids(anns), anns):
        prompt, answer = format_sample(a, args.time_tokens, rng)
        lines.append(_dumps({"query_id": k, "task": a.task, "prompt": prompt, "answer": answer}))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def query_ids(anns) -> list[str]:
    """``video_id#k`` where k counts earlier annotations of the same video."""
    seen: dict = {}
    out = []
    for a in anns:
        k = seen.get(a.video_id, 0)
        seen[a.video_id] = k + 1
        out.append(f"{a.video_id}#{k}")
    return out


def _select(pairs, tasks, limit):
    tasks = {t.upper() for t in tasks}
    pairs = [p for p in pairs if p[0].task in tasks]
    return pairs[:limit] if limit is not None else pairs


def cmd_train_toy(args) -> int:
    import torch

    from .data import load_dataset
    from .model import GroundingModel, ModelConfig, TrainConfig, make_tokenizer, prepare_examples, save_checkpoint, train

    rc = RunConfig.load(_require(args.config, "config file")) if args.config else RunConfig()
    out = args.out or rc.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    pairs = load_dataset(_require(args.data, "dataset directory"))
    seed = resolve_seed(args.seed, rc.seed)
    tdict = {**rc.train, "seed": seed}
    if args.steps is not None:
        tdict["steps"] = args.steps
    if args.lr is not None:
        tdict["lr"] = args.lr
    tcfg = TrainConfig.from_dict(tdict)
    cfg = ModelConfig.from_dict(rc.model)
    pairs = _select(pairs, rc.data.tasks, rc.data.max_samples)
    if not pairs:
        raise ConfigError(f"no training samples for tasks {rc.data.tasks} in {args.data}")

    torch.manual_seed(seed)
    tok = make_tokenizer([a.query for a, _ in pairs] + [e.caption or "" for a, _ in pairs for e in a.events])
    examples = prepare_examples(pairs, tok, cfg, seed)
    model = GroundingModel(cfg, tok, seed=seed)
    res = train(examples, model, tcfg)

    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, d / "checkpoint.pt")
    with open(d / "losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(res.losses))
    tail = res.losses[-50:]
    report = {
        "seed": seed,
        "samples": len(examples),
        "model": cfg.to_dict(),
        "train": asdict(tcfg),
        "final_loss": float(np.mean(tail)) if tail else None,
        "trained_time_rows": len(model.trained),
    }
    write_report(out, "train.json", report)
    print(f"trained {tcfg.steps} steps on {len(examples)} samples; final loss {report['final_loss']}")
    return 0


def score_predictions(task: str, texts, anns) -> dict:
    """Task metrics for raw answer texts aligned with ground-truth annotations."""
    from .data import clip_saliency
    from .metrics import dvc_f1, frames_to_clip_scores, highlight_map_and_hit, parse_prediction, recall_at_1

    if len(texts) != len(anns):
        raise ValueError(f"{len(texts)} predictions for {len(anns)} annotations")
    parsed = [parse_prediction(t, task) for t in texts]
    report = {
        "task": task,
        "n": len(anns),
        "parse_rate": float(np.mean([len(p) > 0 for p in parsed])) if anns else 0.0,
        "unparsed_lines": int(sum(len(p.diagnostics) for p in parsed)),
    }
    if task == "mr":
        preds = [p.items[0] if p.items else None for p in parsed]
        rec = recall_at_1(preds, [a.events[0] for a in anns])
        report.update({f"R@1_IoU{t}": v for t, v in rec.items()})
    elif task == "dvc":
        scores = [dvc_f1(p.items, a.events) for p, a in zip(parsed, anns)]
        report["F1"] = float(np.mean(scores)) if scores else 0.0
    else:
        gts = [clip_saliency(a) for a in anns]
        preds = [frames_to_clip_scores(p.items, len(g)) for p, g in zip(parsed, gts)]
        report.update({"highlight_" + k: v for k, v in highlight_map_and_hit(preds, gts).items()})
    return report


def cmd_eval(args) -> int:
    import torch

    from .data import _dumps, load_dataset
    from .model import generate_texts, load_checkpoint, prepare_examples

    rc = RunConfig.load(_require(args.config, "config file")) if args.config else RunConfig()
    model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    pairs = _select(load_dataset(_require(args.data, "dataset directory")), [args.task], args.limit)
    if not pairs:
        raise ConfigError(f"no {args.task} samples in {args.data}")
    seed = resolve_seed(args.seed, rc.eval.seed)
    tau = args.temperature if args.temperature is not None else rc.eval.temperature
    torch.manual_seed(seed)
    examples = prepare_examples(pairs, model.tokenizer, model.cfg, seed)
    texts = generate_texts(model, examples, tau, seed, rc.eval.batch_size)
    anns = [a for a, _ in pairs]
    report = score_predictions(args.task, texts, anns)
    report.update({"seed": seed, "temperature": tau})
    out = args.out or rc.out
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"predictions_{args.task}.jsonl", "w", encoding="utf-8") as f:
            for k, t in zip(query_ids(anns), texts):
                f.write(_dumps({"query_id": k, "raw_text": t}) + "\n")
    write_report(out, f"eval_{args.task}.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _load_predictions(path, task: str) -> dict:
    """Prediction file rows: ``{query_id, raw_text}``, or annotations (rendered as answers)."""
    from .data import VtgAnnotation, answer_text

    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if rows and "raw_text" not in rows[0]:
        anns = [VtgAnnotation.from_dict(r) for r in rows]
        return {k: answer_text(a, False) for k, a in zip(query_ids(anns), anns)}
    try:
        return {r["query_id"]: r["raw_text"] for r in rows}
    except KeyError as exc:
        raise ConfigError(f"{path}: prediction rows need query_id and raw_text") from exc


def cmd_metrics(args) -> int:
    from .data import load_annotations

    gts = [a for a in load_annotations(_require(args.gt, "ground-truth file")) if a.task.lower() == args.task]
    preds = _load_predictions(_require(args.pred, "prediction file"), args.task)
    ids = [k for k, a in zip(query_ids(gts), gts)]
    missing = [k for k in ids if k not in preds]
    texts = [preds.get(k, "") for k in ids]
    report = score_predictions(args.task, texts, gts)
    report["missing_predictions"] = len(missing)
    write_report(args.out, f"metrics_{args.task}.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_compress_bench(args) -> int:
    from .compression import METHODS, CrossAttention, SlotDispatcher, compress, in_convex_hull_box

    seed = resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    rows = []
    for n in args.sizes:
        tokens = rng.normal(size=(n, args.d))
        for k in args.k:
            if k > n:
                log.info("skipping K=%d for %d tokens", k, n)
                continue
            params = {"slot": SlotDispatcher.init(k, args.d, rng), "xattn": CrossAttention.init(k, args.d, rng)}
            for m in args.method or METHODS:
                t0 = time.perf_counter()
                out = compress(m, tokens, k, params.get(m), seed=seed if m == "diverse" else None)
                wall = time.perf_counter() - t0
                # attention mixes value vectors, so its hull is over the projected values
                ref = tokens @ params["xattn"].w_value if m == "xattn" else tokens
                ok = in_convex_hull_box(out, ref)
                row = {
                    "method": m,
                    "tokens": n,
                    "k": k,
                    "outputs": int(out.shape[0]),
                    "wall_time_s": wall,
                    "hull_pass_rate": float(ok.mean()),
                }
                rows.append(row)
                print(json.dumps(row, sort_keys=True))
                if out.shape[0] != k:
                    raise InvariantViolation(f"{m} returned {out.shape[0]} outputs for K={k}")
                if not ok.all():
                    raise InvariantViolation(f"{m} produced outputs outside the convex hull")
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "compress_bench.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return 0


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize", help="show the time-token encoding of timestamps")
    s.add_argument("--t", type=float, action="append", required=True, help="timestamp in seconds (repeatable)")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_tokenize)

    s = sub.add_parser("datagen", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--total", type=int, default=100, help="sample count split by the default task mix")
    s.add_argument("--counts", help="explicit per-task counts, e.g. MR=500,DVC=50")
    s.add_argument("--noise-scale", type=float, default=0.1)
    s.add_argument("--min-duration", type=float, default=20.0)
    s.add_argument("--max-duration", type=float, default=60.0)
    s.add_argument("--prefix", default="syn")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_datagen)

    s = sub.add_parser("derive-mr", help="turn DVC events into MR queries")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.set_defaults(fn=cmd_derive_mr)

    s = sub.add_parser("format", help="render annotations as prompt/answer pairs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output")
    s.add_argument("--time-tokens", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_format)

    s = sub.add_parser("train-toy", help="train the toy grounding model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("eval", help="generate answers and score them")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=TASK_CHOICES, default="mr")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--temperature", type=float)
    s.add_argument("--limit", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("metrics", help="score a prediction file against annotations")
    s.add_argument("--task", choices=TASK_CHOICES, required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("compress-bench", help="time the token compressors")
    s.add_argument("--sizes", "--n", dest="sizes", type=int, nargs="+", default=[32, 3072], help="token counts N*M")
    s.add_argument("--method", choices=("slot", "entropy", "diverse", "xattn"), action="append", help="repeatable; default all")
    s.add_argument("--k", type=int, nargs="+", default=[16, 256])
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_compress_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (InvariantViolation, AssertionError) as exc:
        print(json.dumps({"error": "invariant", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "input", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
