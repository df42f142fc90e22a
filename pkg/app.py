"""
ChunkFlow Engine command line.

    python app.py gen-data --out runs/demo
    python app.py train-tokenizer --out runs/demo --set tokenizer.train.steps=500
    python app.py train-policy --out runs/demo
    python app.py distill --out runs/demo
    python app.py eval --out runs/demo
    python app.py emit-figures --out runs/demo

Exit codes: 0 success, 1 usage or config-file error, 2 runtime failure.
"""

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd

import calc
import ui_components as ui
from config import load_run_config, resolve_out, save_resolved
from core.errors import ChunkFlowError, ConfigError, MissingArtifactError
from modules import shards as shard_io
from modules.batching import StreamSampler, open_stream_sampler
from modules.datagen import (
    NormStats,
    TaskSpec,
    chunks_to_records,
    generate_dataset,
    lateral_deviation,
    record_to_chunk,
    stack_chunks,
)
from modules.distill import DistillConfig, distillation_gap, train_distill
from modules.eval_bench import chunk_metrics, emit_figures, report_frame, success_rate_with_se, trial_successes
from modules.flow_policy import (
    FlowPolicy,
    PolicyConfig,
    TrainConfig,
    Validator,
    mode_coverage,
    train_policy,
)
from modules.hybrid import HybridConfig, hybrid_vs_scratch_ablation
from modules.latency import ar_latency_sweep, bench_latency
from modules.pareto import matched_error_tokens, ordering_holds, pareto_sweep
from modules.rvq import RvqConfig, RvqTokenizer, codebook_utilization, train_tokenizer
from modules.scaling_law import (
    FlowSweepMember,
    epoch_batches,
    fit_points,
    iso_loss_table,
    smooth_points,
    sweep_protocol,
)
from modules.token_head import TokenHead, head_config_for
from storage import read_csv, read_yaml, write_csv, write_yaml
from utils import ensure_dir, make_rng, setup_logging, write_run_meta

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ["gen-data", "shards", "train-tokenizer", "tokenize", "train-policy", "distill", "fit-scaling-law",
            "sweep-scaling", "bench-latency", "eval", "emit-figures", "hybrid-ablation"]


class UsageError(Exception):
    """Raised by the argument parser instead of exiting with status 2."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# =============================================================================
# ARTIFACT HELPERS
# =============================================================================

def task_from_config(cfg: dict) -> TaskSpec:
    task = {k: v for k, v in cfg["task"].items() if v is not None}
    return TaskSpec(seed=cfg["seed"], **task)


def load_split(out: Path, split: str):
    """All chunks of a split in shard order, so repeated loads agree."""
    paths = shard_io.list_shards(out / "data" / split)
    if not paths:
        raise MissingArtifactError([out / "data" / split])
    return [record_to_chunk(rec) for path in paths for rec in shard_io.read_shard(path)]


def load_norm(out: Path) -> NormStats:
    return NormStats.load(out / "data" / "norm_stats.yaml")


def shard_sources(out: Path, mix) -> dict:
    """Shard lists for every source a mix names; all missing directories are reported together."""
    sources = {name: shard_io.list_shards(out / "data" / name) for name in mix.sources}
    empty = [out / "data" / name for name, paths in sources.items() if not paths]
    if empty:
        raise MissingArtifactError(empty)
    return sources


def open_train_stream(cfg: dict, out: Path, norm: NormStats, stream: int) -> StreamSampler:
    """Training batches read from the shard stream, mixed per data.train_mix."""
    mix = shard_io.parse_mix(cfg["data"]["train_mix"])
    seed = int(make_rng(cfg["seed"], stream).integers(2 ** 31))
    return open_stream_sampler(shard_sources(out, mix), mix, norm, seed, cfg["data"]["prefetch"])


def load_task(out: Path) -> TaskSpec:
    """The task the data under out was generated from."""
    return TaskSpec.from_dict(read_yaml(out / "data" / "task_spec.yaml"))


def policy_config(cfg: dict, task: TaskSpec) -> PolicyConfig:
    return PolicyConfig.from_task(task, **cfg["policy"])


def train_config(cfg: dict) -> TrainConfig:
    section = {k: v for k, v in cfg["train"].items() if k != "n_val"}
    return TrainConfig.from_dict(section)


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_gen_data(args, cfg, out):
    task = task_from_config(cfg)
    data = cfg["data"]
    train, norm = generate_dataset(task, data["n_train"], seed=cfg["seed"])
    val, _ = generate_dataset(task, data["n_val"], seed=cfg["seed"] + 1)
    shard_io.write_shards(chunks_to_records(train, "train"), data["shard_size"], out / "data" / "train")
    shard_io.write_shards(chunks_to_records(val, "val"), data["shard_size"], out / "data" / "val")
    norm.save(out / "data" / "norm_stats.yaml")
    write_yaml(task.to_dict(), out / "data" / "task_spec.yaml")

    modes = stack_chunks(train)["mode"]
    dev = lateral_deviation(stack_chunks(train)["actions"], task.layout)
    summary = pd.DataFrame({"mode": [m.name for m in task.modes],
                            "count": np.bincount(modes, minlength=len(task.modes))})
    ui.print_summary("Generated training chunks", summary)
    bc = calc.bimodality_coefficient(dev)
    print(f"Lateral-deviation bimodality coefficient {bc:.3f} (bimodal above {calc.BIMODAL_THRESHOLD:.3f})")


def cmd_shards(args, cfg, out):
    directory = Path(args.dir) if args.dir else out / "data" / "train"
    if args.action == "write":
        task = task_from_config(cfg)
        chunks, _ = generate_dataset(task, args.n or cfg["data"]["n_train"], seed=cfg["seed"])
        paths = shard_io.write_shards(chunks_to_records(chunks), args.shard_size or cfg["data"]["shard_size"],
                                      directory)
        print(f"Wrote {len(paths)} shards into {directory}")
    elif args.action == "inspect":
        paths = shard_io.list_shards(directory)
        if not paths:
            raise MissingArtifactError([directory])
        ui.print_summary(f"Shards in {directory}", shard_io.inspect_shards(paths))
    else:
        mix = shard_io.parse_mix(args.mix)
        stream = shard_io.build_mixed_stream(shard_sources(out, mix), mix, cfg["seed"], cfg["data"]["prefetch"])
        counts = Counter()
        try:
            for _ in range(args.n):
                next(stream)
                counts[mix.sources[stream.last_source]] += 1
        finally:
            stream.close()
        probs = mix.probabilities()
        rows = [{"source": s, "drawn": counts[s], "expected": args.n * p,
                 "sigma": float(np.sqrt(args.n * p * (1 - p)))} for s, p in zip(mix.sources, probs)]
        ui.print_summary(f"Mixed stream over {args.n} draws", pd.DataFrame(rows))


def cmd_train_tokenizer(args, cfg, out):
    task = load_task(out)
    norm = load_norm(out)
    train = norm.normalize(stack_chunks(load_split(out, "train"))["actions"])
    tok_dir = ensure_dir(out / "tokenizer")
    tcfg = cfg["tokenizer"]["train"]
    tok = RvqTokenizer(RvqConfig(T_a=task.T_a, d=task.d, **cfg["tokenizer"]["model"]), make_rng(cfg["seed"], 1))
    with open_train_stream(cfg, out, norm, 11) as stream:
        log = train_tokenizer(tok, stream, tcfg["steps"], tcfg["batch_size"], make_rng(cfg["seed"], 2),
                              lr=tcfg["lr"], warmup_steps=tcfg["warmup_steps"], log_every=tcfg["log_every"],
                              progress=not args.quiet)
    tok.save(tok_dir / "tokenizer.ckpt", {"steps": tcfg["steps"]})
    write_csv(log, tok_dir / "tokenizer_log.csv")
    util = codebook_utilization(tok, train)
    write_csv(pd.DataFrame({"depth": np.arange(1, len(util) + 1), "utilization": util}), tok_dir / "utilization.csv")
    print(f"Codebook utilization per depth: {np.round(util, 3).tolist()}")

    pcfg = cfg["pareto"]
    if pcfg["enabled"]:
        val = norm.normalize(stack_chunks(load_split(out, "val"))["actions"])[: pcfg["n_eval"]]
        df = pareto_sweep(tok, train, val, norm, task.layout, bins_list=pcfg["bins"],
                          dct_grid=[tuple(g) for g in pcfg["dct_grid"]], n_merges=pcfg["n_merges"])
        write_csv(df, tok_dir / "tokenizer_pareto.csv")
        matched = matched_error_tokens(df)
        ui.print_summary("Tokens at matched position error", matched)
        print(f"Ordering rvq < dct_bpe < uniform holds at {ordering_holds(matched)} of {len(matched)} targets")


def cmd_tokenize(args, cfg, out):
    norm = load_norm(out)
    tok = RvqTokenizer.load(out / "tokenizer" / "tokenizer.ckpt")
    chunks = stack_chunks(load_split(out, args.split))["actions"]
    tokens = tok.tokenize(norm.normalize(chunks))
    ids = tok.vocab_ids(tokens)
    frame = pd.DataFrame(ids, columns=[f"t{i}" for i in range(ids.shape[1])])
    write_csv(frame, out / "tokenizer" / f"tokens_{args.split}.csv")
    recon = norm.denormalize(tok.dequantize(tokens))
    report = chunk_metrics(recon, chunks, load_task(out).layout)
    ui.print_summary(f"Reconstruction of {len(chunks)} {args.split} chunks", pd.DataFrame([report.to_dict()]))


def cmd_train_policy(args, cfg, out):
    task = load_task(out)
    norm = load_norm(out)
    validator = Validator.from_chunks(load_split(out, "val"), norm, task.layout, steps=cfg["policy"]["steps"],
                                      seed=cfg["seed"], limit=cfg["train"]["n_val"])
    policy = FlowPolicy(policy_config(cfg, task), make_rng(cfg["seed"], 3))
    with open_train_stream(cfg, out, norm, 12) as stream:
        result = train_policy(policy, stream, train_config(cfg), make_rng(cfg["seed"], 4), validator=validator,
                              out_dir=ensure_dir(out / "policy"), resume_from=args.resume, progress=not args.quiet)
    log = result.loss_log
    print(f"Policy: {policy.num_parameters()} parameters, final loss {log['loss'].iloc[-1]:.4f} "
          f"(smoothed {log['smoothed_loss'].iloc[-1]:.4f})")


def cmd_distill(args, cfg, out):
    norm = load_norm(out)
    teacher = FlowPolicy.load(out / "policy" / "policy.ckpt")
    with open_train_stream(cfg, out, norm, 13) as stream:
        student, log = train_distill(teacher, stream, DistillConfig.from_dict(cfg["distill"]),
                                     make_rng(cfg["seed"], 5), out_dir=ensure_dir(out / "distill"),
                                     progress=not args.quiet)
    val = stack_chunks(load_split(out, "val")[: cfg["eval"]["n_samples"]])
    gap, var = distillation_gap(teacher, student, val["context"], val["instruction"],
                                cfg["distill"]["teacher_steps"], cfg["seed"])
    print(f"Held-out student gap {gap:.4g} vs teacher output variance {var:.4g} ({gap / max(var, 1e-12):.3%})")


def cmd_fit_scaling_law(args, cfg, out):
    points_path = Path(args.points) if args.points else out / "scaling" / "scaling_points.csv"
    points = read_csv(points_path, required_columns=["N", "D", "loss"])
    _fit_and_report(points, cfg, out)


def _fit_and_report(points, cfg, out):
    scfg = cfg["scaling"]
    smoothed = bool(scfg["smooth"])
    fit = fit_points(smooth_points(points) if smoothed else points, smoothed=smoothed)
    write_yaml(fit.to_dict(), out / "scaling" / "scaling_fit.yaml")
    targets = scfg["iso_targets"] or list(np.quantile(points["loss"], [0.25, 0.5]))
    iso = iso_loss_table(fit, sorted(points["N"].unique()), targets)
    write_csv(iso, out / "scaling" / "iso_loss.csv")
    print(fit.summary())
    ui.print_summary("Tokens required per target loss", iso)


def cmd_sweep_scaling(args, cfg, out):
    task = load_task(out)
    norm = load_norm(out)
    scfg = cfg["scaling"]
    shards = shard_io.list_shards(out / "data" / "train")
    if not shards:
        raise MissingArtifactError([out / "data" / "train"])
    members = []
    for i, hidden in enumerate(scfg["hidden_sizes"]):
        pcfg = PolicyConfig.from_task(task, layers=scfg["layers"], hidden=hidden, heads_q=scfg["heads_q"],
                                      heads_kv=scfg["heads_kv"], cond_tokens=scfg["layers"] * 2)
        policy = FlowPolicy(pcfg, make_rng(cfg["seed"], 6, i))
        members.append(FlowSweepMember(policy, make_rng(cfg["seed"], 7, i), lr=scfg["lr"],
                                       warmup_steps=scfg["warmup_steps"]))
    points = sweep_protocol(members, lambda: epoch_batches(shards, cfg["seed"], scfg["batch_size"], norm),
                            scfg["batch_size"], task.T_a, scfg["checkpoint_every"])
    write_csv(points, out / "scaling" / "scaling_points.csv")
    _fit_and_report(points, cfg, out)


def cmd_bench_latency(args, cfg, out):
    bcfg = cfg["bench"]
    policy = FlowPolicy.load(out / "policy" / "policy.ckpt")
    student = FlowPolicy.load(out / "distill" / "student.ckpt")
    tok = RvqTokenizer.load(out / "tokenizer" / "tokenizer.ckpt")
    head = TokenHead(head_config_for(tok.cfg, policy.cfg.hidden, layers=cfg["hybrid"]["head_layers"]),
                     make_rng(cfg["seed"], 8))
    val = load_split(out, "val")[0]
    df = bench_latency(policy, student, head, val.context, val.instruction_id, flow_steps=policy.cfg.steps,
                       n_chunks=bcfg["n_chunks"], warmup=bcfg["warmup"], seed=cfg["seed"])
    write_csv(df, out / "bench" / "latency_bench.csv")
    sweep = ar_latency_sweep(policy, head.cfg, bcfg["ar_depths"], val.context, val.instruction_id,
                             n_chunks=bcfg["ar_chunks"], seed=cfg["seed"])
    write_csv(pd.DataFrame({"tokens": sweep["tokens"], "median_ms": sweep["median_ms"]}),
              out / "bench" / "ar_latency.csv")
    ui.print_summary("Inference latency (batch size 1)", df)
    print(f"AR decoding slope {sweep['slope']:.4f} ms/token, R^2 {sweep['r2']:.4f}")


def cmd_eval(args, cfg, out):
    task = load_task(out)
    norm = load_norm(out)
    ecfg = cfg["eval"]
    val = stack_chunks(load_split(out, "val")[: ecfg["n_samples"]])
    policy = FlowPolicy.load(out / "policy" / "policy.ckpt")
    noise = make_rng(cfg["seed"], 9).standard_normal(val["actions"].shape)

    preds = {f"flow_s{policy.cfg.steps}": norm.denormalize(policy.generate(val["context"], val["instruction"],
                                                                           noise=noise))}
    student_path = out / "distill" / "student.ckpt"
    if student_path.exists():
        student = FlowPolicy.load(student_path)
        preds["distilled_s1"] = norm.denormalize(student.generate(val["context"], val["instruction"], 1, noise=noise))
    reports = {name: chunk_metrics(pred, val["actions"], task.layout) for name, pred in preds.items()}
    write_csv(report_frame(reports), out / "eval" / "eval_report.csv")

    trials = trial_successes(next(iter(preds.values())), val["goal"], task.layout, ecfg["success_tol"])
    p_hat, se, curve = success_rate_with_se(trials)
    write_csv(curve, out / "eval" / "success_rate.csv")
    coverage = mode_coverage(policy, task, norm, val["context"], val["instruction"], rng=make_rng(cfg["seed"], 10))
    ui.print_summary("Validation metrics", report_frame(reports))
    print(f"Success rate {p_hat:.3f} +/- {se:.3f} over {len(trials)} trials")
    print("Mode coverage: " + ", ".join(f"{m.name} {c:.1%}" for m, c in zip(task.modes, coverage)))


def cmd_emit_figures(args, cfg, out):
    written = emit_figures(out, args.figures_dir)
    print(f"Wrote {len(written)} figure files")


def cmd_hybrid_ablation(args, cfg, out):
    task = load_task(out)
    norm = load_norm(out)
    tok = RvqTokenizer.load(out / "tokenizer" / "tokenizer.ckpt")
    hcfg = HybridConfig(seed=cfg["seed"], **cfg["hybrid"])
    result = hybrid_vs_scratch_ablation(policy_config(cfg, task),
                                        lambda seed: open_train_stream(cfg, out, norm, 100 + seed), tok, hcfg)
    write_csv(result.curves, out / "hybrid" / "hybrid_ablation.csv")
    write_csv(result.per_seed, out / "hybrid" / "hybrid_seeds.csv")
    write_csv(result.seed_curves, out / "hybrid" / "hybrid_seed_curves.csv")
    write_csv(result.pretrain_log, out / "hybrid" / "pretrain_log.csv")
    ui.print_summary(f"Final smoothed flow loss at {hcfg.total_updates} updates per arm", result.per_seed)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "shards": cmd_shards,
    "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize,
    "train-policy": cmd_train_policy,
    "distill": cmd_distill,
    "fit-scaling-law": cmd_fit_scaling_law,
    "sweep-scaling": cmd_sweep_scaling,
    "bench-latency": cmd_bench_latency,
    "eval": cmd_eval,
    "emit-figures": cmd_emit_figures,
    "hybrid-ablation": cmd_hybrid_ablation,
}


# =============================================================================
# DISPATCH
# =============================================================================

def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.lr=3e-4")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: $CHUNKFLOW_OUT or ./runs)")
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--quiet", action="store_true", help="no progress bars")

    parser = ArgumentParser(prog="chunkflow", description="Action chunk tokenization, flow policies and scaling fits.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__[4:].replace("_", " "))
        if name == "shards":
            p.add_argument("action", choices=["write", "inspect", "stream-test"])
            p.add_argument("--dir")
            p.add_argument("--n", type=int, default=10000)
            p.add_argument("--shard-size", type=int)
            p.add_argument("--mix", default="train=3,val=1")
        elif name == "tokenize":
            p.add_argument("--split", default="val", choices=["train", "val"])
        elif name == "train-policy":
            p.add_argument("--resume", help="training checkpoint to continue from")
        elif name == "fit-scaling-law":
            p.add_argument("--points", help="CSV with columns N,D,loss")
        elif name == "emit-figures":
            p.add_argument("--figures-dir")
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = load_run_config(args.config, args.overrides, args.seed)
    except MissingArtifactError as e:
        print(f"chunkflow: config file not found: {', '.join(e.missing)}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"chunkflow: invalid config: {e}", file=sys.stderr)
        return EXIT_USAGE

    out = ensure_dir(resolve_out(args.out))
    setup_logging(args.log_level, out / "run.log")
    save_resolved(cfg, out)
    write_run_meta(out, args.command, cfg["seed"], argv)
    try:
        HANDLERS[args.command](args, cfg, out)
    except ChunkFlowError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(dispatch())
