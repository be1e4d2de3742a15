"""Command-line front end: train, sample, eval, ablate, selftest.

Exit codes: 0 success, 1 configuration/input error, 2 runtime failure
(divergence, non-finite samples, failed self-checks), 3 ablation trend
failure (the comparison table is still written).

Environment overrides, both logged into run manifests when set:
  MEANFLOW_SEED     replaces the curriculum seed
  MEANFLOW_THREADS  caps BLAS/compute threads (1 = fully serial)
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np


def _env_overrides() -> dict:
    out = {}
    for key in ("MEANFLOW_SEED", "MEANFLOW_THREADS"):
        if os.environ.get(key):
            out[key] = os.environ[key]
    return out


def _apply_thread_override() -> None:
    threads = os.environ.get("MEANFLOW_THREADS")
    if not threads:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(threads))
    except (ImportError, ValueError) as e:
        print(f"warning: could not apply MEANFLOW_THREADS={threads}: {e}", file=sys.stderr)


def cmd_train(args) -> int:
    import dataclasses

    from .config import ConfigError, load_run_config, run_config_to_dict
    from .data import make_dataset
    from .report import plot_loss_curves
    from .trainer import TrainingDiverged, run_curriculum

    try:
        config = load_run_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    out_dir = Path(args.output_dir or config.output_dir)
    curriculum = config.curriculum
    overrides = _env_overrides()
    if "MEANFLOW_SEED" in overrides:
        curriculum = dataclasses.replace(curriculum, seed=int(overrides["MEANFLOW_SEED"]))

    datasets = {k: make_dataset(v) for k, v in config.datasets.items()}
    try:
        ckpt_path, manifest = run_curriculum(
            config.model, curriculum, datasets, out_dir,
            env_overrides=overrides, config_snapshot=run_config_to_dict(config),
        )
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        print(f"diagnostic snapshot: {e.snapshot_path}", file=sys.stderr)
        return 2

    histories = {}
    for stage in manifest["deterministic"]["stages"]:
        log = out_dir / f"{stage['name']}_metrics.jsonl"
        if log.exists():
            histories[stage["name"]] = [json.loads(line) for line in log.read_text().splitlines()]
    if histories:
        plot_loss_curves(histories, out_dir / "loss_curves.png")

    print(f"final checkpoint: {ckpt_path}")
    print(f"manifest: {out_dir / 'manifest.json'} (hash {manifest['manifest_hash'][:12]})")
    return 0


def cmd_sample(args) -> int:
    from .net import FlowNetConfig
    from .rng import STREAM_SAMPLE, derive_rng
    from .sampler import SamplingError, dump_samples, make_schedule, sample
    from .trainer import load_checkpoint

    try:
        ckpt = load_checkpoint(args.checkpoint)
    except Exception as e:
        print(f"cannot load checkpoint: {e}", file=sys.stderr)
        return 1
    model_cfg = FlowNetConfig(**ckpt.config["model"])
    if not 0 <= args.label <= model_cfg.null_label:
        print(
            f"label {args.label} out of range [0, {model_cfg.n_labels}] "
            f"(use {model_cfg.null_label} for unconditional)",
            file=sys.stderr,
        )
        return 1
    if args.nfe < 1 or args.count < 1:
        print("nfe and count must be positive", file=sys.stderr)
        return 1

    ds = ckpt.config.get("dataset", {})
    shape = (args.count, int(ds.get("seq_len", 1)), model_cfg.latent_dim)
    labels = np.full(args.count, args.label, dtype=np.int64)
    noise = derive_rng(args.seed, STREAM_SAMPLE).standard_normal(shape)
    t0 = time.perf_counter()
    try:
        out = sample(
            model_cfg, ckpt.params, labels, make_schedule(args.nfe), shape, noise=noise
        )
    except SamplingError as e:
        print(f"sampling failed: {e}", file=sys.stderr)
        return 2
    wall_ms = (time.perf_counter() - t0) * 1e3 / args.count
    dump_samples(args.out, out.numpy(), labels, args.nfe, args.seed, wall_ms)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .config import ConfigError, load_run_config
    from .data import make_dataset
    from .metrics import nfe_sweep
    from .net import FlowNetConfig
    from .report import plot_metric_vs_nfe, plot_samples_2d, write_eval_reports
    from .sampler import make_schedule, sample
    from .trainer import load_checkpoint

    try:
        config = load_run_config(args.config)
        ckpt = load_checkpoint(args.checkpoint)
    except (ConfigError, Exception) as e:
        print(f"cannot load inputs: {e}", file=sys.stderr)
        return 1
    try:
        nfe_list = [int(x) for x in args.nfe_list.split(",") if x.strip()]
    except ValueError:
        nfe_list = []
    if not nfe_list:
        print("empty or invalid NFE list", file=sys.stderr)
        return 1

    model_cfg = FlowNetConfig(**ckpt.config["model"])
    stage = config.curriculum.stage2 or config.curriculum.stage1
    dataset = make_dataset(config.dataset(stage.dataset_id))
    out_dir = Path(args.out_dir or config.output_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = nfe_sweep(
        model_cfg, ckpt.params, dataset, nfe_list, config.eval,
        model_id=Path(args.checkpoint).stem,
    )
    paths = write_eval_reports(out_dir, reports)
    plot_metric_vs_nfe(reports, "sliced_w2", out_dir / "sliced_w2_vs_nfe.png")
    if dataset.spec.dim == 2 and dataset.spec.seq_len == 1:
        spec = dataset.spec
        n_show = min(1024, config.eval.n_samples)
        labels = np.tile(np.arange(spec.n_labels), n_show // spec.n_labels + 1)[:n_show]
        sets = {
            f"NFE {nfe}": sample(
                model_cfg, ckpt.params, labels, make_schedule(nfe),
                (n_show, 1, 2), seed=config.eval.seed,
            ).numpy()
            for nfe in nfe_list[:4]
        }
        plot_samples_2d(sets, out_dir / "samples.png", ref=dataset.x[:n_show])
    print(f"wrote {paths['csv']} and {paths['jsonl']}")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import SUITES, run_suite
    from .config import ConfigError, load_run_config

    if args.suite not in SUITES:
        print(f"unknown suite '{args.suite}'; choose from {', '.join(SUITES)}", file=sys.stderr)
        return 1
    try:
        config = load_run_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir or config.output_dir) / f"ablate_{args.suite}"
    result = run_suite(args.suite, config, out_dir)
    for trend in result.trends:
        status = "PASS" if trend.passed else "FAIL"
        print(f"{status}  {trend.name}: {trend.detail}")
    print(f"table: {out_dir / f'ablate_{args.suite}.csv'}")
    return 0 if result.passed else 3


def cmd_selftest(args) -> int:
    from .selftest import format_table, run_selftest

    results = run_selftest(corrupt_primitive=args.corrupt_primitive)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meanflow", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training curriculum from a config file")
    t.add_argument("config", help="path to a JSON run configuration")
    t.add_argument("--output-dir", help="override the config's output_dir")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--label", type=int, required=True)
    s.add_argument("--nfe", type=int, default=1)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.jsonl")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="metric sweep over sampler call counts")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--nfe-list", default="1,2,5,25")
    e.add_argument("--out-dir")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare an ablation grid")
    a.add_argument("suite", help="curriculum | mixup | cfg_scale")
    a.add_argument("config")
    a.add_argument("--out-dir")
    a.set_defaults(fn=cmd_ablate)

    st = sub.add_parser("selftest", help="run the oracle self-checks")
    st.add_argument("--corrupt-primitive", help="test hook: break one derivative rule")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    _apply_thread_override()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
