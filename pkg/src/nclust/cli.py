"""Command line interface.

Subcommands cover the full workflow: generate a synthetic corpus,
materialise augmented training examples, train with a length
curriculum, decode with the transformer, cluster with the spectral
baseline, score hypotheses against references, and tabulate several
scored runs side by side.

Exit codes: 0 on success, 2 for bad arguments / malformed inputs, 3 for
runtime failures such as divergence.  Relative output paths are
resolved under $NCLUST_OUTPUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from nclust.augment import AugmentConfig, build_training_set, split_for_eval
from nclust.baseline import BaselineConfig, RefineConfig, spectral_cluster_details
from nclust.core import MeetingRecord
from nclust.model import ClusteringTransformer, MaskError, ModelConfig, decode_beam, decode_greedy
from nclust.score import batch_score, ser
from nclust.synth import CorpusFormatError, TurnModel, gen_corpus, read_corpus, write_corpus
from nclust.train import (
    Adam,
    CheckpointError,
    LrSchedule,
    TrainingError,
    checkpoint_payload,
    default_curriculum,
    load_checkpoint,
    restore_checkpoint,
    run_curriculum,
    save_checkpoint,
)

HYPOTHESIS_FORMAT = "nclust-hypotheses"
HYPOTHESIS_VERSION = 1


class UsageError(ValueError):
    """Bad flags, config values, or malformed input files."""


def _resolve_out(path: str) -> Path:
    root = os.environ.get("NCLUST_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def _int_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated integers")
    return int(parts[0]), int(parts[1])


def _float_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers")
    return float(parts[0]), float(parts[1])


def cmd_gen_data(args: argparse.Namespace) -> int:
    turn = TurnModel(
        stay_probability=args.stay_prob,
        speakers_per_meeting=args.speakers_per_meeting,
        segment_duration=args.segment_duration,
    )
    corpus = gen_corpus(
        n_meetings=args.meetings,
        dim=args.dim,
        seed=args.seed,
        n_speakers=args.speakers,
        concentration=args.concentration,
        turn=turn,
        segments_range=args.segments,
        id_prefix=args.id_prefix,
    )
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out)
    print(f"wrote {len(corpus)} meetings to {out}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    corpus = read_corpus(args.corpus)
    config = AugmentConfig(
        examples_per_meeting=args.per_meeting,
        max_len=args.max_len,
        min_len_fraction=args.min_len_fraction,
        mode=args.mode,
        rotate=args.rotate,
        seed=args.seed,
    )
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    lengths: list[int] = []
    cluster_hist: dict[int, int] = {}
    with open(out, "w") as handle:
        for sequence, labels in build_training_set(corpus, config):
            record = {
                "labels": list(labels),
                "embeddings": [[float(v) for v in row] for row in sequence.data],
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
            lengths.append(len(labels))
            cluster_hist[max(labels)] = cluster_hist.get(max(labels), 0) + 1
    mean_len = sum(lengths) / count
    hist = ", ".join(f"{k}: {cluster_hist[k]}" for k in sorted(cluster_hist))
    print(f"wrote {count} examples to {out}")
    print(f"mean length {mean_len:.1f}, examples per cluster count {{{hist}}}")
    return 0


def _load_train_config(args: argparse.Namespace) -> dict:
    config: dict = {}
    if args.config is not None:
        loaded = yaml.safe_load(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise UsageError("train config must be a YAML mapping")
        config = loaded
    if args.seed is not None:
        config["seed"] = args.seed
    if "seed" not in config:
        raise UsageError("a seed is required (config key 'seed' or --seed)")
    if args.train_corpus is not None:
        config.setdefault("data", {})["train"] = args.train_corpus
    if args.dev_corpus is not None:
        config.setdefault("data", {})["dev"] = args.dev_corpus
    data = config.get("data", {})
    if "train" not in data or "dev" not in data:
        raise UsageError("train and dev corpus paths are required")
    curriculum = config.setdefault("curriculum", {})
    if args.mode is not None:
        curriculum["mode"] = args.mode
    if args.rotate is not None:
        curriculum["rotate"] = args.rotate
    if args.steps is not None:
        curriculum["steps"] = [int(s) for s in args.steps.split(",")]
    return config


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    seed = int(config["seed"])
    train_corpus = read_corpus(config["data"]["train"])
    dev_corpus = read_corpus(config["data"]["dev"])
    input_dim = train_corpus[0].embeddings.dim

    model_cfg = dict(config.get("model", {}))
    model_cfg["input_dim"] = input_dim
    try:
        model_config = ModelConfig(**model_cfg)
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from exc

    sched_cfg = dict(config.get("schedule", {}))
    schedule = LrSchedule(
        dim_model=model_config.dim_model,
        warmup_steps=int(sched_cfg.get("warmup_steps", 200)),
        peak_factor=float(sched_cfg.get("peak_factor", 1.0)),
    )

    cur = dict(config.get("curriculum", {}))
    steps = cur.get("steps", [600, 400, 300, 200])
    if len(steps) != 4:
        raise UsageError("curriculum.steps needs four entries (50/200/500/full)")
    common = {}
    for key in ("batch_size", "eval_interval", "examples_per_meeting"):
        if key in cur:
            common[key] = int(cur[key])
    if cur.get("patience") is not None:
        common["patience"] = int(cur["patience"])
    stages = default_curriculum(
        steps_per_stage=tuple(int(s) for s in steps),
        mode=cur.get("mode", "meeting"),
        rotate=bool(cur.get("rotate", True)),
        fine_tune_steps=int(cur.get("fine_tune_steps", 0)),
        **common,
    )

    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    model = ClusteringTransformer(model_config)
    optimizer = Adam(dict(model.named_parameters()))

    results = run_curriculum(
        model,
        optimizer,
        schedule,
        train_corpus,
        dev_corpus,
        stages,
        seed=seed,
        log_path=out_dir / "train_log.jsonl",
        checkpoint_dir=out_dir,
        eval_ser=not args.no_dev_ser,
    )
    final = out_dir / "model.json"
    progress = {
        "stage": "final",
        "stage_index": len(results) - 1,
        "global_step": optimizer.step_count,
        "dev_loss": results[-1].final_dev_loss,
    }
    save_checkpoint(final, checkpoint_payload(model, optimizer, progress))
    for result in results:
        print(
            f"stage {result.name}: steps={result.steps_run}"
            f" dev_loss={result.final_dev_loss:.4f}"
            f" dev_ser={result.final_dev_ser:.2f}"
            f"{' (early stop)' if result.stopped_early else ''}"
        )
    print(f"wrote final checkpoint to {final}")
    return 0


def _write_hypotheses(
    path: Path,
    corpus: list[MeetingRecord],
    hyps: dict[str, tuple[int, ...]],
    max_len: int | None,
    source: str,
) -> None:
    payload = {
        "format": HYPOTHESIS_FORMAT,
        "version": HYPOTHESIS_VERSION,
        "source": source,
        "max_len": max_len,
        "hypotheses": {mid: list(labels) for mid, labels in hyps.items()},
    }
    _write_json(path, payload)


def _load_hypotheses(path: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read hypothesis file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != HYPOTHESIS_FORMAT:
        raise UsageError(f"{path} is not a hypothesis file")
    if payload.get("version") != HYPOTHESIS_VERSION:
        raise UsageError(f"unsupported hypothesis version in {path}")
    return payload


def _eval_chunks(
    corpus: list[MeetingRecord], max_len: int | None
) -> list[MeetingRecord]:
    chunks: list[MeetingRecord] = []
    for meeting in corpus:
        if max_len is None:
            chunks.append(meeting)
        else:
            chunks.extend(split_for_eval(meeting, max_len))
    return chunks


def cmd_decode(args: argparse.Namespace) -> int:
    corpus = read_corpus(args.corpus)
    payload = load_checkpoint(args.checkpoint)
    model, _, _ = restore_checkpoint(payload)
    chunks = _eval_chunks(corpus, args.max_len)
    hyps: dict[str, tuple[int, ...]] = {}
    for piece in chunks:
        scaled = piece.embeddings.data * math.sqrt(piece.embeddings.dim)
        x = torch.from_numpy(scaled).to(model.config.torch_dtype)
        if args.beam > 1:
            hyps[piece.meeting_id] = decode_beam(model, x, args.beam)
        else:
            hyps[piece.meeting_id] = decode_greedy(model, x)
    out = _resolve_out(args.out)
    _write_hypotheses(out, corpus, hyps, args.max_len, source=f"decode:{args.checkpoint}")
    print(f"decoded {len(chunks)} chunks from {len(corpus)} meetings to {out}")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    corpus = read_corpus(args.corpus)
    config = BaselineConfig(
        refine=RefineConfig(
            row_keep_fraction=args.p,
            diffusion=not args.no_diffusion,
        ),
        k_min=args.kmin,
        k_max=args.kmax,
        restarts=args.restarts,
        seed=args.seed,
    )
    hyps = {}
    floored = 0
    for meeting in corpus:
        labels, details = spectral_cluster_details(meeting.embeddings, config)
        hyps[meeting.meeting_id] = labels
        floored += int(details["floored"])
    out = _resolve_out(args.out)
    _write_hypotheses(out, corpus, hyps, None, source="baseline")
    note = f" (cluster-count floor hit on {floored})" if floored else ""
    print(f"clustered {len(corpus)} meetings to {out}{note}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    corpus = read_corpus(args.corpus)
    payload = _load_hypotheses(args.hyp)
    max_len = payload.get("max_len")
    chunks = _eval_chunks(corpus, max_len)
    raw = payload.get("hypotheses", {})
    hyps: dict[str, tuple[int, ...]] = {}
    for chunk in chunks:
        if chunk.meeting_id not in raw:
            raise UsageError(f"hypothesis file lacks labels for {chunk.meeting_id!r}")
        hyps[chunk.meeting_id] = tuple(int(v) for v in raw[chunk.meeting_id])
    report = batch_score(chunks, hyps, collar_s=args.collar)
    per_chunk = {}
    for chunk in chunks:
        chunk_report = ser(chunk, hyps[chunk.meeting_id], collar_s=args.collar)
        per_chunk[chunk.meeting_id] = {
            "ser_percent": chunk_report.ser_percent,
            "der_percent": chunk_report.der_percent,
            "scored_time_s": chunk_report.scored_time_s,
        }
    result = dict(report.as_dict())
    result["collar_s"] = args.collar
    result["per_chunk"] = per_chunk
    out = _resolve_out(args.out)
    _write_json(out, result)
    print(
        f"SER {report.ser_percent:.2f}%  DER {report.der_percent:.2f}%"
        f"  over {report.scored_time_s:.1f}s scored time"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for arm in args.arms:
        if "=" not in arm:
            raise UsageError(f"arm {arm!r} must look like name=score.json")
        name, path = arm.split("=", 1)
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read score file {path}: {exc}") from exc
        for key in ("ser_percent", "der_percent", "scored_time_s"):
            if key not in payload:
                raise UsageError(f"{path} is missing field {key!r}")
        rows.append(
            {
                "arm": name,
                "ser_percent": float(payload["ser_percent"]),
                "der_percent": float(payload["der_percent"]),
                "scored_time_s": float(payload["scored_time_s"]),
            }
        )
    lines = [
        "| arm | SER % | DER % | scored s |",
        "| --- | ---: | ---: | ---: |",
    ]
    for row in rows:
        lines.append(
            f"| {row['arm']} | {row['ser_percent']:.2f}"
            f" | {row['der_percent']:.2f} | {row['scored_time_s']:.1f} |"
        )
    markdown = "\n".join(lines) + "\n"
    if args.out_md is not None:
        out_md = _resolve_out(args.out_md)
        out_md.parent.mkdir(parents=True, exist_ok=True)
        out_md.write_text(markdown)
    if args.out_csv is not None:
        out_csv = _resolve_out(args.out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as handle:
            writer = csv.DictWriter(
                handle, fieldnames=["arm", "ser_percent", "der_percent", "scored_time_s"]
            )
            writer.writeheader()
            writer.writerows(rows)
    print(markdown, end="")
    return 0


class _Parser(argparse.ArgumentParser):
    """Exits with code 1 on usage errors (2 is reserved for validation)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="nclust",
        description="sequence-to-sequence speaker clustering on synthetic meetings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic meeting corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--meetings", type=int, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--concentration", type=float, default=10.0)
    p.add_argument("--segments", type=_int_pair, default=(50, 300))
    p.add_argument("--stay-prob", type=float, default=0.5)
    p.add_argument("--speakers-per-meeting", type=_int_pair, default=(2, 4))
    p.add_argument("--segment-duration", type=_float_pair, default=(1.0, 8.0))
    p.add_argument("--id-prefix", default="mtg")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("augment", help="materialise augmented training examples")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=("none", "global", "meeting"), default="none")
    p.add_argument("--rotate", action="store_true")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--min-len-fraction", type=float, default=1.0)
    p.add_argument("--per-meeting", type=int, default=10)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train with the length curriculum")
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--out", required=True, help="directory for checkpoints and logs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-corpus", default=None)
    p.add_argument("--dev-corpus", default=None)
    p.add_argument("--mode", choices=("none", "global", "meeting"), default=None)
    rotate = p.add_mutually_exclusive_group()
    rotate.add_argument("--rotate", dest="rotate", action="store_true", default=None)
    rotate.add_argument("--no-rotate", dest="rotate", action="store_false")
    p.add_argument("--steps", default=None, help="four comma-separated stage steps")
    p.add_argument("--no-dev-ser", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="label a corpus with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("baseline", help="label a corpus with spectral clustering")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kmin", type=int, default=2)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--p", type=float, default=0.4, help="row keep fraction")
    p.add_argument("--no-diffusion", action="store_true")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("score", help="score hypotheses against a reference corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--collar", type=float, default=0.25)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="tabulate several score files")
    p.add_argument("arms", nargs="+", help="name=score.json entries")
    p.add_argument("--out-md", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, MaskError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, CorpusFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
