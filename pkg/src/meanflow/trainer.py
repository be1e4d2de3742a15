"""Two-stage training loop: instantaneous field first, then mixed mean flows.

Runs are fully determined by (config, seed): batches, noise, timesteps and
dropout all come from one named stream whose position is checkpointed, so a
save/load/continue run is bit-identical to an uninterrupted one. Checkpoints
are magic-tagged containers holding parameters, optimizer moments, the rng
position and a config snapshot; manifests separate deterministic fields from
wall-clock so rerun hashes can be compared.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradSet, ParamSet, Tensor
from .container import read_container, write_container
from .data import Dataset
from .net import FlowNetConfig, apply_flow_net, init_params
from .objective import (
    GuidanceConfig,
    TimestepConfig,
    cfm_loss,
    make_flow_batch,
    meanflow_loss,
)
from .rng import STREAM_TRAIN, derive_rng, get_state, restored_rng

CHECKPOINT_MAGIC = b"MFLOWCK1"

OBJECTIVES = ("flow_matching", "mixed_flows")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot_path, step):
        super().__init__(message)
        self.snapshot_path = snapshot_path
        self.step = step


@dataclass(frozen=True)
class StageConfig:
    objective: str
    dataset_id: str
    steps: int
    batch_size: int
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    decay_milestones: tuple = (0.8, 0.9)
    decay_factor: float = 0.1
    timestep: TimestepConfig = field(default_factory=TimestepConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    init: str = "fresh"  # "fresh" | "from_stage1" | "from_checkpoint:<path>"
    log_interval: int = 50

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.peak_lr <= 0 or self.warmup_steps < 0 or self.log_interval < 1:
            raise ValueError("peak_lr, warmup_steps, log_interval out of range")
        ms = self.decay_milestones
        if any(not 0.0 < m <= 1.0 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("decay_milestones must be strictly increasing in (0, 1]")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.init != "fresh" and self.init != "from_stage1" and not self.init.startswith("from_checkpoint:"):
            raise ValueError("init must be fresh, from_stage1, or from_checkpoint:<path>")


@dataclass(frozen=True)
class CurriculumConfig:
    stage1: StageConfig
    stage2: StageConfig | None = None
    seed: int = 0


def lr_at(step: int, cfg: StageConfig) -> float:
    """Linear warmup to peak, then a multiplicative drop at each milestone."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    lr = cfg.peak_lr
    for frac in cfg.decay_milestones:
        if step >= math.ceil(frac * cfg.steps):
            lr *= cfg.decay_factor
    return lr


class AdamState:
    """First/second moment estimates, stored per parameter name."""

    def __init__(self, params: ParamSet):
        self.m = {n: np.zeros(t.shape, t.dtype) for n, t in params.items()}
        self.v = {n: np.zeros(t.shape, t.dtype) for n, t in params.items()}
        self.count = 0

    def update(self, params: ParamSet, grads: GradSet, lr: float) -> None:
        self.count += 1
        b1c = 1.0 - ADAM_BETA1 ** self.count
        b2c = 1.0 - ADAM_BETA2 ** self.count
        for name in params.names():
            g = grads[name].numpy()
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            step = (lr / b1c) * m / (np.sqrt(v / b2c) + ADAM_EPS)
            params.replace(name, Tensor(params[name].numpy() - step))


@dataclass
class Checkpoint:
    params: ParamSet
    adam_m: dict
    adam_v: dict
    adam_count: int
    step: int
    config: dict
    rng_state: dict


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format": "checkpoint",
        "version": 1,
        "step": ckpt.step,
        "adam_count": ckpt.adam_count,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
    }
    tensors = [(f"param/{n}", t.numpy()) for n, t in ckpt.params.items()]
    tensors += [(f"adam_m/{n}", a) for n, a in ckpt.adam_m.items()]
    tensors += [(f"adam_v/{n}", a) for n, a in ckpt.adam_v.items()]
    write_container(path, CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path, CHECKPOINT_MAGIC)
    if header.get("format") != "checkpoint" or header.get("version") != 1:
        raise ValueError(f"{path} is not a version-1 checkpoint")
    config = header["config"]

    model_cfg = FlowNetConfig(**config["model"])
    dtype = np.dtype(config.get("dtype", "float32"))
    expected = init_params(model_cfg, seed=0, dtype=dtype)

    params = ParamSet()
    adam_m, adam_v = {}, {}
    for key, arr in tensors.items():
        group, name = key.split("/", 1)
        if group == "param":
            params.add(name, Tensor(arr))
        elif group == "adam_m":
            adam_m[name] = arr
        elif group == "adam_v":
            adam_v[name] = arr
    for name in expected.names():
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter '{name}'")
        if params[name].shape != expected[name].shape:
            raise ValueError(
                f"shape mismatch for parameter '{name}': checkpoint has "
                f"{params[name].shape}, config implies {expected[name].shape}"
            )
    if set(params.names()) != set(expected.names()):
        extra = sorted(set(params.names()) - set(expected.names()))
        raise ValueError(f"checkpoint has unexpected parameters: {extra[:5]}")

    return Checkpoint(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_count=header["adam_count"],
        step=header["step"],
        config=config,
        rng_state=header["rng_state"],
    )


@dataclass
class StageResult:
    params: ParamSet
    checkpoint_path: Path
    history: list
    unstable: bool
    diverged: bool = False


def stage_unstable(history: list, steps: int) -> bool:
    """Loss-trend instability: the end of the budget is not clearly below
    the early phase (smoothed), or the run never produced finite losses."""
    if not history:
        return True
    losses = np.array([h["loss"] for h in history], dtype=np.float64)
    its = np.array([h["step"] for h in history])
    if not np.all(np.isfinite(losses)):
        return True
    early_cut = max(1, int(0.1 * steps))
    early = losses[its <= early_cut]
    late = losses[its >= steps - max(1, int(0.1 * steps))]
    if early.size == 0:
        early = losses[: max(1, losses.size // 10)]
    if late.size == 0:
        late = losses[-max(1, losses.size // 10) :]
    return float(late.mean()) > 0.9 * float(early.mean())


def _model_fn(model_cfg):
    def fn(params, x, r, t, cond):
        return apply_flow_net(model_cfg, params, x, r, t, cond)

    return fn


def train_stage(
    model_cfg: FlowNetConfig,
    stage: StageConfig,
    dataset: Dataset,
    seed: int,
    out_dir,
    stage_name: str,
    init_from: ParamSet | None = None,
    resume: Checkpoint | None = None,
    dtype=np.float32,
    stage_index: int = 0,
) -> StageResult:
    """Run one optimization stage and leave a checkpoint plus a metrics log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{stage_name}.ckpt"
    log_path = out_dir / f"{stage_name}_metrics.jsonl"

    config_snapshot = {
        "model": asdict(model_cfg),
        "stage": asdict(stage),
        "dataset": asdict(dataset.spec),
        "seed": seed,
        "stage_name": stage_name,
        "stage_index": stage_index,
        "dtype": np.dtype(dtype).name,
    }

    if resume is not None:
        params = resume.params
        opt = AdamState(params)
        opt.m = dict(resume.adam_m)
        opt.v = dict(resume.adam_v)
        opt.count = resume.adam_count
        rng = restored_rng(resume.rng_state)
        start_step = resume.step
        log_mode = "a"
    else:
        if init_from is not None:
            params = init_from.copy()
        else:
            params = init_params(model_cfg, seed, dtype=dtype)
        opt = AdamState(params)
        rng = derive_rng(seed, STREAM_TRAIN, stage_index)
        start_step = 0
        log_mode = "w"

    model_fn = _model_fn(model_cfg)
    force_rt = stage.objective == "flow_matching"
    history: list[dict] = []

    def snapshot(step) -> Checkpoint:
        return Checkpoint(
            params=params.copy(),
            adam_m=dict(opt.m),
            adam_v=dict(opt.v),
            adam_count=opt.count,
            step=step,
            config=config_snapshot,
            rng_state=get_state(rng),
        )

    with open(log_path, log_mode) as log:
        last_wall = time.perf_counter()
        for step in range(start_step, stage.steps):
            bx, blabels = dataset.sample_batch(rng, stage.batch_size)
            batch = make_flow_batch(
                bx, blabels, stage.timestep, stage.guidance, rng,
                null_label=model_cfg.null_label, dtype=dtype,
                force_r_equals_t=force_rt,
            )
            lr = lr_at(step, stage)
            try:
                if stage.objective == "flow_matching":
                    loss, grads = ad.value_and_grad(
                        lambda nodes: cfm_loss(model_fn, nodes, batch), params
                    )
                else:
                    loss, grads = ad.value_and_grad(
                        lambda nodes: meanflow_loss(
                            model_fn, nodes, batch, stage.guidance, model_cfg.null_label
                        ),
                        params,
                    )
            except ad.NonFiniteError as e:
                diag = out_dir / f"{stage_name}.diverged.ckpt"
                save_checkpoint(diag, snapshot(step))
                raise TrainingDiverged(
                    f"non-finite loss at step {step} of {stage_name}: {e}", diag, step
                ) from e
            opt.update(params, grads, lr)

            if step % stage.log_interval == 0 or step == stage.steps - 1:
                now = time.perf_counter()
                rec = {
                    "step": step,
                    "loss": float(loss.item()),
                    "lr": lr,
                    "wall_ms": (now - last_wall) * 1e3,
                }
                last_wall = now
                history.append(rec)
                log.write(json.dumps(rec) + "\n")

    save_checkpoint(ckpt_path, snapshot(stage.steps))
    unstable = stage.steps > 0 and stage_unstable(history, stage.steps)
    return StageResult(params, ckpt_path, history, unstable)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def run_curriculum(
    model_cfg: FlowNetConfig,
    curriculum: CurriculumConfig,
    datasets: dict[str, Dataset],
    out_dir,
    env_overrides: dict | None = None,
    dtype=np.float32,
    config_snapshot: dict | None = None,
):
    """Train stage one, persist it, then fine-tune stage two from the file.

    Returns (final checkpoint path, manifest dict); the manifest is also
    written to out_dir/manifest.json with a hash over its deterministic part.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    stages_meta = []
    timing = {}

    def run_one(stage, name, index, init_from=None):
        if stage.dataset_id not in datasets:
            raise ValueError(f"stage '{name}' references unknown dataset '{stage.dataset_id}'")
        t0 = time.perf_counter()
        res = train_stage(
            model_cfg, stage, datasets[stage.dataset_id], curriculum.seed,
            out_dir, name, init_from=init_from, dtype=dtype, stage_index=index,
        )
        timing[name + "_wall_s"] = time.perf_counter() - t0
        stages_meta.append(
            {
                "name": name,
                "objective": stage.objective,
                "dataset_id": stage.dataset_id,
                "steps": stage.steps,
                "final_loss": res.history[-1]["loss"] if res.history else None,
                "unstable": res.unstable,
                "checkpoint": res.checkpoint_path.name,
                "checkpoint_sha256": _sha256(res.checkpoint_path),
            }
        )
        return res

    res1 = run_one(curriculum.stage1, "stage1", 0)
    final_res = res1
    if curriculum.stage2 is not None:
        init = None
        if curriculum.stage2.init == "from_stage1":
            init = load_checkpoint(res1.checkpoint_path).params  # durable on disk first
        elif curriculum.stage2.init.startswith("from_checkpoint:"):
            init = load_checkpoint(curriculum.stage2.init.split(":", 1)[1]).params
        final_res = run_one(curriculum.stage2, "stage2", 1, init_from=init)

    deterministic = {
        "config": config_snapshot if config_snapshot is not None else {
            "model": asdict(model_cfg),
            "curriculum": {
                "seed": curriculum.seed,
                "stage1": asdict(curriculum.stage1),
                "stage2": asdict(curriculum.stage2) if curriculum.stage2 else None,
            },
        },
        "seed": curriculum.seed,
        "env_overrides": env_overrides or {},
        "stages": stages_meta,
    }
    manifest = {
        "deterministic": deterministic,
        "timing": {**timing, "total_wall_s": time.perf_counter() - t_start},
        "manifest_hash": canonical_hash(deterministic),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return final_res.checkpoint_path, manifest
