"""Command-line front end.

Every command takes ``--config FILE`` (flat JSON) and any number of
``--set key=value`` overrides. Exit codes: 0 success, 1 usage or config
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import RunConfig, parse_override
from .data import TaskStream, atomic_write_text, generate, load_dataset, save_dataset
from .engine import ClassIndex, evaluate, run_sequence
from .errors import (ConfigError, ContractError, DatasetParseError, InputError, NumericError,
                     SchemaError)
from .gradcheck import check_gradients, tiny_model_config, tiny_problem
from .metrics import RunReport, emit_report
from .model import MMModel

log = logging.getLogger("mmcl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_FORMAT = "mmcl-checkpoint"
LOSS_SWITCHES = ("align", "preserve", "distil")
ABLATION_SWITCHES = LOSS_SWITCHES + ("adapter",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------- config


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for item in args.set or []:
        key, value = parse_override(item)
        data[key] = value
    return RunConfig.from_dict(data)


def load_stream(cfg: RunConfig) -> TaskStream:
    """The configured dataset file, or a fresh synthetic stream from the config."""
    if cfg.dataset:
        try:
            stream = load_dataset(cfg.dataset)
        except FileNotFoundError:
            raise DatasetParseError(f"dataset {cfg.dataset} not found") from None
        if stream.num_modalities != cfg.num_modalities:
            raise SchemaError(f"dataset has K={stream.num_modalities}, config says {cfg.num_modalities}")
        return stream
    return generate(cfg.synth_spec(), cfg.scenario)


def variant_label(cfg: RunConfig) -> str:
    state = lambda w: "on" if w > 0 else "off"  # noqa: E731
    return (f"align={state(cfg.lambda_align)},preserve={state(cfg.lambda_preserve)},"
            f"distil={state(cfg.lambda_distil)},adapter={cfg.adapter_mode}")


def class_order(stream: TaskStream, upto: int) -> list[int]:
    """Classifier column order after ``upto`` tasks, as the engine builds it."""
    index = ClassIndex(label_mode=stream.label_mode)
    for task in stream.tasks[:1 if stream.scenario == "domain" else upto]:
        index.add(task.classes)
    return index.classes


# ------------------------------------------------------------------ checkpoints


def checkpoint_text(model: MMModel, cfg: RunConfig, task: int, classes: list[int]) -> str:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "task": task,
        "classes": classes,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def load_checkpoint(path) -> tuple[dict, MMModel]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetParseError(f"checkpoint {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"checkpoint {path}: invalid JSON ({exc.msg})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    try:
        model = MMModel.from_state_dict(payload["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: unreadable model state ({exc})") from None
    return payload, model


def train_run(cfg: RunConfig, stream: TaskStream, out_dir: Path, label: str) -> RunReport:
    """One full sequence; writes per-task checkpoints and both report formats."""
    ckpt_dir = out_dir / "checkpoints"

    def on_task_end(t: int, model: MMModel) -> None:
        atomic_write_text(ckpt_dir / f"task{t}.json",
                          checkpoint_text(model, cfg, t, class_order(stream, t)))

    report = run_sequence(stream, cfg, on_task_end=on_task_end, label=label)
    emit_report(report, out_dir / "report.json", "structured")
    emit_report(report, out_dir / "report.csv", "tabular")
    return report


# -------------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.dataset or Path(cfg.out_dir) / "dataset.jsonl")
    stream = generate(cfg.synth_spec(), cfg.scenario)
    save_dataset(stream, out)
    n = sum(len(t.train) + len(t.test) for t in stream.tasks)
    print(f"wrote {out}: manifest + {n} records")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.out_dir)
    report = train_run(cfg, load_stream(cfg), out_dir, variant_label(cfg))
    print(f"Acc {report.acc:.4f}  Fgt {report.fgt:.4f}  -> {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    payload, model = load_checkpoint(args.checkpoint)
    run_cfg = RunConfig.from_dict({**payload["config"], **({"dataset": cfg.dataset} if cfg.dataset else {})})
    stream = load_stream(run_cfg)
    t = int(payload["task"])
    if t > len(stream.tasks):
        raise SchemaError(f"checkpoint is from task {t}, stream has {len(stream.tasks)} tasks")
    index = ClassIndex(list(payload["classes"]), run_cfg.label_mode)
    per_task, joint = evaluate(model, stream, t, index)
    result = {"task": t, "per_task": per_task, "joint": joint}
    text = json.dumps(result, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def ablation_variants(cfg: RunConfig, switches) -> list[RunConfig]:
    """The on/off grid over the chosen loss switches, then adapter fallbacks."""
    weights = {"align": "lambda_align", "preserve": "lambda_preserve", "distil": "lambda_distil"}
    loss_switches = [s for s in LOSS_SWITCHES if s in switches]
    variants = []
    for state in itertools.product((True, False), repeat=len(loss_switches)):
        changes = {weights[s]: 0.0 for s, on in zip(loss_switches, state) if not on}
        variants.append(cfg.replace(**changes))
    if "adapter" in switches:
        variants += [cfg.replace(adapter_mode=m) for m in ("modality", "none") if m != cfg.adapter_mode]
    return variants


def cmd_ablate(cfg: RunConfig, args) -> int:
    switches = [s.strip() for s in args.switches.split(",") if s.strip()]
    unknown = sorted(set(switches) - set(ABLATION_SWITCHES))
    if unknown:
        raise ConfigError(f"unknown ablation switches: {', '.join(unknown)}")
    stream = load_stream(cfg)
    root = Path(cfg.out_dir) / "ablate"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "acc", "fgt", "final_joint"])
    for variant in ablation_variants(cfg, switches):
        label = variant_label(variant)
        report = train_run(variant, stream, root / label.replace(",", "__"), label)
        w.writerow([label, repr(report.acc), repr(report.fgt), repr(report.final_joint)])
        print(f"{label}: Acc {report.acc:.4f}  Fgt {report.fgt:.4f}")
    atomic_write_text(root / "summary.csv", buf.getvalue())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    model, loss_fn = tiny_problem(cfg.seed, tiny_model_config(cfg.seed), cfg.lambdas, cfg.tau)
    result = check_gradients(loss_fn, model.registry, h=args.h, tol=args.tol)
    lines = result.lines()
    if args.out:
        atomic_write_text(args.out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if result.passed else EXIT_NUMERIC


def representation_rows(model: MMModel, stream: TaskStream, upto: int):
    """(sample id, class, tag, vector) for every test sample of tasks 1..upto."""
    for task in stream.tasks[:upto]:
        ss = task.test
        with ad.no_grad():
            out = model.forward(ss.features)
        vectors = [z.data for z in out.modality_reps] + [out.joint.data]
        tags = [f"m{k}" for k in range(len(out.modality_reps))] + ["joint"]
        for i in range(len(ss)):
            label = ss.labels[i]
            cls = int(label) if np.ndim(label) == 0 else "|".join(str(c) for c in np.flatnonzero(label))
            for tag, vec in zip(tags, vectors):
                yield int(ss.ids[i]), cls, tag, vec[i]


def cmd_dump(cfg: RunConfig, args) -> int:
    payload, model = load_checkpoint(args.checkpoint)
    run_cfg = RunConfig.from_dict({**payload["config"], **({"dataset": cfg.dataset} if cfg.dataset else {})})
    stream = load_stream(run_cfg)
    t = int(payload["task"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "class", "tag"] + [f"v{j}" for j in range(model.cfg.proj_dim)])
    count = 0
    for uid, cls, tag, vec in representation_rows(model, stream, t):
        w.writerow([uid, cls, tag] + [repr(float(v)) for v in vec])
        count += 1
    out = Path(args.out or Path(run_cfg.out_dir) / f"representations_task{t}.csv")
    atomic_write_text(out, buf.getvalue())
    print(f"wrote {out}: {count} rows")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-representations": cmd_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mmcl", description="Multi-modal continual learning with cross-modality adapters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset file")
    p.add_argument("--out", help="dataset path (default: config dataset or OUT_DIR/dataset.jsonl)")
    sub.add_parser("train", parents=[common], help="run the task sequence; write report and checkpoints")
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on all tasks it has seen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p = sub.add_parser("ablate", parents=[common], help="train every on/off variant of the chosen components")
    p.add_argument("--switches", default=",".join(ABLATION_SWITCHES),
                   help=f"comma list from {','.join(ABLATION_SWITCHES)}")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a tiny model")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p = sub.add_parser("dump-representations", parents=[common],
                       help="write modality and joint representations of test samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mmcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError) as exc:
        print(f"mmcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetParseError, SchemaError, InputError) as exc:
        print(f"mmcl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"mmcl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
