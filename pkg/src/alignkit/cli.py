"""Command-line entry point.

Exit status: 0 on success, 1 on usage or validation errors (bad flags, missing
or invalid files, rejected configuration), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numkit as nk
from .checkpoint import CheckpointError, checkpoint_name, load_generator, load_policy, save_generator, save_policy
from .config import ConfigError, StagePlan, load_plan
from .curriculum import (
    format_rate,
    length_in_range_rate,
    make_prompts,
    oracle_win_rate,
    pair_eval_records,
    pretrain_for_world,
    run_stage1,
    run_stage2,
    run_stage3,
    stage2_reward,
    tmr_gap,
)
from .data import (
    DatasetError,
    QualityOracle,
    SyntheticWorld,
    generate,
    load_dataset,
    read_oracle,
    read_world_config,
    write_synthetic,
    Decoder,
)
from .grpo import TrainingLog
from .metrics import UndefinedMetricError, correlation_report, pair_report
from .policy import PolicyInput, ToyPolicy
from .records import TaskKind
from .tournament import write_audit

log = logging.getLogger("alignkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommands repeat the global flags; SUPPRESS keeps them from overwriting values given earlier
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--config", type=Path, default=default(None), help="TOML run configuration")
    parser.add_argument("--seed", type=_u64, default=default(0), help="run seed (unsigned 64-bit)")
    parser.add_argument("--out", type=Path, default=default(Path("runs")), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = _Parser(prog="alignkit", description="Quality-judge policy training and generator preference finetuning.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="write synthetic datasets, decoder and hidden oracle")

    s1 = sub.add_parser("stage1", parents=[common], help="image-score warm-up")
    s1.add_argument("--data", type=Path, help="dataset directory (default: OUT/data)")
    s1.add_argument("--init", type=Path, help="starting policy checkpoint")

    s2 = sub.add_parser("stage2", parents=[common], help="task-mix training with temporal and length rewards")
    s2.add_argument("--data", type=Path)
    s2.add_argument("--policy", type=Path, required=True, help="stage-1 policy checkpoint")

    s3 = sub.add_parser("stage3", parents=[common], help="alternating judge / generator finetuning")
    s3.add_argument("--data", type=Path)
    s3.add_argument("--judge", type=Path, required=True, help="stage-2 policy checkpoint")
    s3.add_argument("--generator", type=Path, help="starting generator (default: pretrain on the latent prior)")

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint against held-out data and the oracle")
    ev.add_argument("--data", type=Path)
    ev.add_argument("--policy", type=Path, help="policy checkpoint (omit for an untrained policy)")
    ev.add_argument("--oracle", type=Path, help="hidden oracle file (default: DATA/oracle.jsonl)")
    ev.add_argument("--generator", type=Path, help="generator to compare against --baseline")
    ev.add_argument("--baseline", type=Path, help="baseline generator checkpoint")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    gc.add_argument("--cases", type=int, default=100, help="seeded configurations per suite")

    rp = sub.add_parser("report", parents=[common], help="summarize training logs")
    rp.add_argument("logs", nargs="+", type=Path)
    return p


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _record_config(args, plan: StagePlan) -> None:
    resolved = {
        "command": args.command,
        "seed": args.seed,
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()},
        "plan": plan.to_dict(),
    }
    text = json.dumps(resolved, sort_keys=True, default=str)
    log.info("resolved configuration: %s", text)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / f"{args.command}-config.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(resolved, sort_keys=True, indent=2, default=str) + "\n")


def _data_dir(args) -> Path:
    return args.data if getattr(args, "data", None) else args.out / "data"


def _load_split(data: Path, kind: TaskKind, split: str) -> list:
    return load_dataset(data / f"{kind.value}_{split}.jsonl", kind)


def _load_optional(data: Path, kind: TaskKind, split: str) -> list:
    path = data / f"{kind.value}_{split}.jsonl"
    return load_dataset(path, kind) if path.exists() else []


def _world(data: Path, plan: StagePlan):
    path = data / "decoder.json"
    if path.exists():
        return read_world_config(path)
    return plan.world


def cmd_gen_data(args, plan: StagePlan) -> int:
    world = SyntheticWorld(plan.world)
    bundle = generate(world, plan.data.train, plan.data.heldout, nk.Rng(args.seed).spawn("data"))
    for path in write_synthetic(args.out / "data", world, bundle):
        print(path)
    return EXIT_OK


def cmd_stage1(args, plan: StagePlan) -> int:
    data = _data_dir(args)
    train = _load_split(data, TaskKind.IMAGE_SCORE, "train")
    rng = nk.Rng(args.seed)
    policy = load_policy(args.init) if args.init else ToyPolicy.initial(plan.policy, rng.spawn("policy-init"))
    log_path = args.out / "stage1-log.jsonl"
    log_path.unlink(missing_ok=True)
    policy, tlog = run_stage1(plan, policy, train, rng, log_path)
    steps = len(tlog.rows)
    path = save_policy(args.out / checkpoint_name("stage1", steps), policy, {"stage": "stage1", "step": steps, "seed": args.seed})
    print(path)
    return EXIT_OK


def cmd_stage2(args, plan: StagePlan) -> int:
    data = _data_dir(args)
    policy = load_policy(args.policy)
    datasets = {}
    for kind in plan.stage2.mix:
        k = TaskKind(kind)
        if plan.stage2.mix[kind] > 0:
            datasets[k] = _load_split(data, k, "train")
    log_path = args.out / "stage2-log.jsonl"
    log_path.unlink(missing_ok=True)
    policy, tlog = run_stage2(plan, policy, datasets, nk.Rng(args.seed), log_path)
    steps = len(tlog.rows)
    path = save_policy(args.out / checkpoint_name("stage2", steps), policy, {"stage": "stage2", "step": steps, "seed": args.seed})
    print(path)
    return EXIT_OK


def cmd_stage3(args, plan: StagePlan) -> int:
    data = _data_dir(args)
    judge = load_policy(args.judge)
    pairs = _load_split(data, TaskKind.PAIR, "train")
    decoder = Decoder(_world(data, plan))
    rng = nk.Rng(args.seed)
    gen = load_generator(args.generator) if args.generator else pretrain_for_world(plan, rng)
    save_generator(args.out / checkpoint_name("generator", 0), gen, {"stage": "stage3", "generation": 0})
    log_path = args.out / "stage3-log.jsonl"
    log_path.unlink(missing_ok=True)
    result = run_stage3(plan, judge, gen, decoder, pairs, rng, log_path=log_path)
    audit_path = args.out / "stage3-audit.jsonl"
    audit_path.unlink(missing_ok=True)
    write_audit(audit_path, result.audit)
    for i, g in enumerate(result.generations[1:], 1):
        print(save_generator(args.out / checkpoint_name("generator", i), g, {"stage": "stage3", "generation": i}))
    n_judge = plan.stage3.rounds
    print(save_policy(args.out / checkpoint_name("stage3-judge", n_judge), result.judge, {"stage": "stage3"}))
    with open(args.out / "stage3-rounds.json", "w", encoding="utf-8") as fh:
        json.dump([vars(m) for m in result.rounds], fh, indent=2)
    return EXIT_OK


def cmd_eval(args, plan: StagePlan) -> int:
    data = _data_dir(args)
    oracle_path = args.oracle or data / "oracle.jsonl"
    world_cfg, entries = read_oracle(oracle_path)
    rng = nk.Rng(args.seed)
    report: dict = {}
    if args.generator or args.baseline:
        if not (args.generator and args.baseline):
            raise UsageError("--generator and --baseline must be given together")
        oracle = QualityOracle(world_cfg)
        new, old = load_generator(args.generator), load_generator(args.baseline)
        prompts = make_prompts(plan.stage3.prompts, world_cfg.prompt_dim, rng.spawn("eval-prompts"))
        report["win_rate"] = oracle_win_rate(new, old, plan.stage3.schedule, oracle, prompts, rng.spawn("win"))
    else:
        policy = load_policy(args.policy) if args.policy else ToyPolicy.initial(plan.policy, rng.spawn("policy-init"))
        images = _load_optional(data, TaskKind.IMAGE_SCORE, "heldout")
        if images:
            pred = [policy.predict_scores(PolicyInput.from_record(r))[0] for r in images]
            truth = [entries[r.id]["quality"] for r in images]
            report["image_score"] = correlation_report(pred, truth).to_flat()
            report["format_rate"] = format_rate(policy, images, rng.spawn("format"))
        single = [r for k in (TaskKind.NATURAL_VIDEO_SCORE, TaskKind.VIDEO_MULTIDIM, TaskKind.VQA)
                  for r in _load_optional(data, k, "heldout")]
        if single:
            report["tmr_gap"] = tmr_gap(policy, single, rng.spawn("tmr"))
            report["length_in_range"] = length_in_range_rate(policy, single, rng.spawn("length"), stage2_reward(plan))
        pairs = _load_optional(data, TaskKind.PAIR, "heldout")
        if pairs:
            recs = pair_eval_records(policy, pairs)
            half = len(recs) // 2
            report["pairs"] = pair_report(recs[half:], calibration=recs[:half]).to_flat()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "eval-report.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args, plan: StagePlan) -> int:
    from .gradcheck import run_all

    results = run_all(args.seed, args.cases)
    worst = max(r.max_error for r in results)
    for r in results:
        print(f"{r.name:<12} cases={r.cases:<4} max_rel_error={r.max_error:.3e}")
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_RUNTIME


def cmd_report(args, plan: StagePlan) -> int:
    header = f"{'log':<28}{'epoch':>6}{'steps':>7}{'reward':>9}{'loss':>10}{'format':>8}{'length':>8}"
    print(header)
    for path in args.logs:
        tlog = TrainingLog.read(path)
        epochs: dict = {}
        for row in tlog.rows:
            epochs.setdefault((row.get("stage", ""), row["epoch"]), []).append(row)
        for (stage, epoch), rows in sorted(epochs.items()):
            mean = lambda k: float(np.mean([r[k] for r in rows]))
            name = f"{path.name}:{stage}" if stage else path.name
            print(f"{name[:27]:<28}{epoch:>6}{len(rows):>7}{mean('mean_reward'):>9.4f}{mean('loss'):>10.4f}"
                  f"{mean('format_rate'):>8.3f}{mean('mean_len'):>8.1f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "stage3": cmd_stage3,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"alignkit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    _setup_logging(args.verbose)
    started = time.time()
    try:
        plan = load_plan(args.config)
        _record_config(args, plan)
        status = COMMANDS[args.command](args, plan)
    except (UsageError, FileNotFoundError, ConfigError, DatasetError, CheckpointError) as exc:
        print(f"alignkit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UndefinedMetricError, nk.NonFiniteError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"alignkit: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.time() - started)
    return status


if __name__ == "__main__":
    sys.exit(main())
