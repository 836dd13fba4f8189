"""Command-line surface: data generation, training, inference, evaluation,
and gradient diagnostics.

Every command is deterministic given its flags; all randomness flows from
--seed. Exit codes: 0 success, 1 runtime failure, 2 usage or config
error.
"""

import argparse
import json
import os
import sys

import numpy as np

from .codec import Grid
from .config import default_config_text, load_config
from .decoding import NeuralRunner
from .errors import ConfigError, GridloomError, ValidationError
from .evalsuite import OracleRunner, eval_suite
from .model import ModelConfig, init_params, load_checkpoint
from .optim import grad_check
from .planner import orchestrate
from .records import TraceWriter, load_records, record_to_json_line
from .tasks import generate_dataset, generate_task, task_rng, validate_record
from .training import TrainConfig, dataset_stats, train_loop

DATA_DIR_ENV = "GRIDLOOM_DATA_DIR"


def _data_dir(value):
    if value:
        return value
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return env
    raise ConfigError(f"no data directory given (flag --data or ${DATA_DIR_ENV})")


def _load_shards(data_dir):
    paths = sorted(p for p in os.listdir(data_dir) if p.endswith(".jsonl"))
    if not paths:
        raise ConfigError(f"no .jsonl shards under {data_dir}")
    records = []
    for p in paths:
        records.extend(load_records(os.path.join(data_dir, p)))
    return records


def cmd_gen_data(args) -> int:
    records = generate_dataset(args.n_tasks, seed=args.seed,
                               injection_rate=args.injection_rate)
    os.makedirs(args.out, exist_ok=True)
    shard_size = args.shard_size
    n_shards = (len(records) + shard_size - 1) // shard_size
    for s in range(n_shards):
        chunk = records[s * shard_size:(s + 1) * shard_size]
        path = os.path.join(args.out, f"trajectories_{s:03d}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for rec in chunk:
                fh.write(record_to_json_line(rec) + "\n")
    problems = []
    for i, rec in enumerate(records):
        for p in validate_record(rec):
            problems.append({"trajectory": i, "problem": p})
    summary = {
        "seed": args.seed,
        "n_tasks": args.n_tasks,
        "injection_rate": args.injection_rate,
        "shards": n_shards,
        "stats": dataset_stats(records),
        "problems": problems,
        "valid": not problems,
    }
    with open(os.path.join(args.out, "validation.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({k: summary[k] for k in ("n_tasks", "shards", "valid")}))
    return 0 if summary["valid"] else 1


def cmd_validate(args) -> int:
    records = _load_shards(_data_dir(args.data))
    problems = []
    for i, rec in enumerate(records):
        for p in validate_record(rec):
            problems.append({"trajectory": i, "problem": p})
    report = {"records": len(records), "stats": dataset_stats(records),
              "problems": problems, "valid": not problems}
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["valid"] else 1


def cmd_train(args) -> int:
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if args.seed is not None:
        import dataclasses

        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    records = _load_shards(_data_dir(args.data))

    def progress(step, comps):
        print(f"step {step}: total {comps['total']:.4f} ce {comps['ce']:.4f} "
              f"mse {comps['mse']:.4f} lr {comps['lr']:.2e}", flush=True)

    train_loop(records, model_cfg, train_cfg, args.out, resume_from=args.resume,
               progress=progress)
    print(f"finished {train_cfg.total_steps} steps; checkpoints in {args.out}")
    return 0


def _runner_from_args(args):
    params, cfg, _ = load_checkpoint(args.checkpoint)
    return NeuralRunner(params, cfg, flow_steps=args.steps)


def cmd_infer(args) -> int:
    runner = _runner_from_args(args)
    grid = Grid.from_text(args.grid) if args.grid else Grid.blank()
    trace = TraceWriter()
    traj = orchestrate(runner, args.prompt, grid, max_rounds=args.max_rounds,
                       seed=args.seed, flow_steps=args.steps, trace=trace)
    print(traj.final_text)
    print(traj.final_grid.to_text())
    if args.trace:
        trace.write(args.trace)
    return 0


def cmd_eval(args) -> int:
    if args.agent == "oracle":
        make_runner = OracleRunner
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --agent oracle)")
        runner = _runner_from_args(args)
        make_runner = lambda spec: runner  # noqa: E731 - one shared model
    metrics = eval_suite(make_runner, seed=args.seed, n_single=args.n_single,
                         n_composite=args.n_composite, n_holdout=args.n_holdout,
                         max_rounds=args.max_rounds, flow_steps=args.steps)
    text = metrics.to_tsv()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_grad_check(args) -> int:
    # Small double-precision model over one mixed-modality batch.
    from .masks import compile_macro_mask
    from .numeric import backward  # noqa: F401 - ensures graph machinery importable
    from .sequence import build_layout
    from .training import make_batch, total_loss
    from .model import forward

    model_cfg = ModelConfig(layers=args.layers, width=32, heads=4, max_positions=1024)
    params = init_params(model_cfg, seed=args.seed, dtype=np.float64)
    records = generate_dataset(4, seed=args.seed, injection_rate=0.5)
    cfg = TrainConfig(token_budget=1024, draws_per_step=3, total_steps=1, warmup_steps=0)
    batch, masks = make_batch(records, cfg, step=args.seed)

    def fwd():
        out = forward(batch, masks, params, model_cfg)
        loss, _ = total_loss(out, batch, cfg)
        return loss

    report = grad_check(fwd, params.as_dict(), tolerance=args.tolerance,
                        samples_per_param=args.samples, seed=args.seed)
    for line in report.lines():
        print(line)
    print(f"max_rel_err\t{report.max_rel_err:.3e}\ttolerance\t{report.tolerance:g}")
    return 0 if report.passed else 1


def cmd_print_config(args) -> int:
    sys.stdout.write(default_config_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridloom",
                                 description="Plan/execute grid reasoner toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize trajectory shards + validation report")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-tasks", type=int, default=1000)
    g.add_argument("--injection-rate", type=float, default=0.3)
    g.add_argument("--shard-size", type=int, default=1000)
    g.set_defaults(fn=cmd_gen_data)

    v = sub.add_parser("validate", help="check shard integrity")
    v.add_argument("--data", help=f"shard directory (default ${DATA_DIR_ENV})")
    v.set_defaults(fn=cmd_validate)

    t = sub.add_parser("train", help="run supervised training")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", help=f"shard directory (default ${DATA_DIR_ENV})")
    t.add_argument("--out", required=True, help="run directory (curves, checkpoints)")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run one prompt end to end")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--grid", help="starting grid as row text (default blank)")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--trace", help="write a JSONL trace here")
    i.add_argument("--max-rounds", type=int, default=3)
    i.add_argument("--steps", type=int, default=16, help="flow integration steps")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="held-out evaluation metrics")
    e.add_argument("--checkpoint")
    e.add_argument("--agent", choices=["model", "oracle"], default="model")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-single", type=int, default=50)
    e.add_argument("--n-composite", type=int, default=24)
    e.add_argument("--n-holdout", type=int, default=8)
    e.add_argument("--max-rounds", type=int, default=3)
    e.add_argument("--steps", type=int, default=16)
    e.add_argument("--out", help="also write the TSV here")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("grad-check", help="finite-difference gradient diagnostics")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--layers", type=int, default=2)
    d.add_argument("--samples", type=int, default=4, help="elements checked per parameter")
    d.add_argument("--tolerance", type=float, default=1e-3)
    d.set_defaults(fn=cmd_grad_check)

    c = sub.add_parser("print-config", help="print the reference config with defaults")
    c.set_defaults(fn=cmd_print_config)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GridloomError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
