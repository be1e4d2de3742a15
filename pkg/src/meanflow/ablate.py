"""Ablation suites: curriculum, mix-up ratio, and guidance-scale grids.

Each suite trains a grid of variants at matched budgets (sharing identical
first stages), evaluates every variant at one and many sampler calls, writes
a comparison table plus figures, and checks the expected qualitative trends:

  curriculum - a flow-matching-only model collapses at one call (its 1-call
    distance blows up against its own many-call value) while the two-stage
    model keeps them comparable; runs unguided because guidance deliberately
    reshapes the sampled distribution and would confound distances;
  mixup - with integrated guidance on, training with no r=t mixing is
    unstable or strictly worse, and quality improves with the mixing ratio
    up to a small noise band;
  cfg_scale - label adherence at one call jumps from no guidance to an
    effective scale of 3, then plateaus at scale 4.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import make_dataset
from .metrics import nfe_sweep
from .report import plot_ablation_bars, write_csv, write_jsonl
from .trainer import TrainingDiverged, load_checkpoint, train_stage

SUITES = ("curriculum", "mixup", "cfg_scale")

MIXUP_RATIOS = (0.0, 0.25, 0.5, 0.75)
CFG_SCALES = ((1, 1.0, 0.0), (2, 0.2, 0.9), (3, 0.3, 0.9), (4, 0.4, 0.9))
ABLATE_NFES = (1, 25)

# trend gates
FM_ONE_STEP_BLOWUP_MIN = 5.0      # fm-only: 1-call distance vs its 25-call
CURRICULUM_RATIO_MAX = 1.5        # curriculum: 1-call within 1.5x its 25-call
CURRICULUM_VS_FM_MAX = 0.5        # curriculum 1-call at most half of fm-only 1-call
NOISE_BAND = 0.10                 # relative band for ordering comparisons
MAX_INVERSIONS = 1                # tolerated ordering violations per NFE row
CFG_ACCURACY_GAIN_MIN = 0.10      # scale 3 beats scale 1 by 10 points at 1 call

ABLATE_CSV_COLUMNS = [
    "variant", "nfe", "sliced_w2", "mmd", "cond_accuracy",
    "mode_coverage_min", "unassigned_frac", "unstable",
]


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteResult:
    suite: str
    rows: list
    trends: list
    unstable: dict

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.trends)


def _patch_stage(stage, **kw):
    nested = {}
    if "mixup_ratio" in kw:
        nested["timestep"] = dataclasses.replace(stage.timestep, mixup_ratio=kw.pop("mixup_ratio"))
    if "omega" in kw or "kappa" in kw:
        nested["guidance"] = dataclasses.replace(
            stage.guidance,
            omega=kw.pop("omega", stage.guidance.omega),
            kappa=kw.pop("kappa", stage.guidance.kappa),
        )
    return dataclasses.replace(stage, **nested, **kw)


class _SuiteRunner:
    def __init__(self, config: RunConfig, out_dir: Path, dtype):
        self.config = config
        self.out_dir = out_dir
        self.dtype = dtype
        self.datasets = {k: make_dataset(v) for k, v in config.datasets.items()}
        self.seed = config.curriculum.seed
        self._stage1_cache: dict[str, object] = {}

    def stage1(self, stage_cfg, tag: str):
        """Train (or fetch) a shared first stage for this configuration."""
        if tag not in self._stage1_cache:
            res = train_stage(
                self.config.model, stage_cfg, self.datasets[stage_cfg.dataset_id],
                self.seed, self.out_dir / tag, "stage1", dtype=self.dtype, stage_index=0,
            )
            # re-read from disk so every variant starts from the durable file
            self._stage1_cache[tag] = load_checkpoint(res.checkpoint_path).params
        return self._stage1_cache[tag]

    def stage2(self, stage_cfg, init_params, name: str):
        """Train one variant's second stage; returns (params, diverged, unstable)."""
        try:
            res = train_stage(
                self.config.model, stage_cfg, self.datasets[stage_cfg.dataset_id],
                self.seed, self.out_dir / name, "stage2",
                init_from=init_params, dtype=self.dtype, stage_index=1,
            )
        except TrainingDiverged:
            return None, True, True
        return res.params, False, res.unstable

    def evaluate(self, params, name: str):
        target_id = (self.config.curriculum.stage2 or self.config.curriculum.stage1).dataset_id
        return nfe_sweep(
            self.config.model, params, self.datasets[target_id],
            ABLATE_NFES, self.config.eval, model_id=name, dtype=self.dtype,
        )


def _rows_from_reports(name, reports, unstable):
    rows = []
    for r in reports:
        row = r.row()
        rows.append(
            {
                "variant": name,
                "nfe": row["nfe"],
                "sliced_w2": row["sliced_w2"],
                "mmd": row["mmd"],
                "cond_accuracy": row["cond_accuracy"],
                "mode_coverage_min": row["mode_coverage_min"],
                "unassigned_frac": row["unassigned_frac"],
                "unstable": unstable,
            }
        )
    return rows


def _metric(rows, variant, nfe, key="sliced_w2"):
    for row in rows:
        if row["variant"] == variant and row["nfe"] == nfe:
            return row[key]
    return None


def run_suite(suite: str, config: RunConfig, out_dir, dtype=np.float32) -> SuiteResult:
    if suite not in SUITES:
        raise ValueError(f"unknown suite '{suite}'; pick one of {SUITES}")
    if config.curriculum.stage2 is None:
        raise ValueError("ablation suites need a two-stage curriculum config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = _SuiteRunner(config, out_dir, dtype)
    s1, s2 = config.curriculum.stage1, config.curriculum.stage2

    rows: list[dict] = []
    unstable: dict[str, bool] = {}

    def run_variant(name, stage2_cfg, init_params):
        params, diverged, uns = runner.stage2(stage2_cfg, init_params, name)
        unstable[name] = diverged or uns
        if params is not None:
            rows.extend(_rows_from_reports(name, runner.evaluate(params, name), unstable[name]))

    if suite == "curriculum":
        # distribution distances need the raw (unguided) field on all variants
        s1u = _patch_stage(s1, omega=1.0, kappa=0.0)
        s2u = _patch_stage(s2, omega=1.0, kappa=0.0)
        fm_init = runner.stage1(s1u, "shared_stage1_fm")
        mf_init = runner.stage1(_patch_stage(s1u, objective="mixed_flows"), "shared_stage1_mf")
        run_variant("fm_only", _patch_stage(s2u, objective="flow_matching"), fm_init)
        run_variant("mf_scratch", _patch_stage(s2u, objective="mixed_flows"), mf_init)
        run_variant("curriculum", s2u, fm_init)
        trends = check_curriculum_trends(rows)
    elif suite == "mixup":
        init = runner.stage1(s1, "shared_stage1")
        for ratio in MIXUP_RATIOS:
            run_variant(f"mixup_{int(ratio * 100)}", _patch_stage(s2, mixup_ratio=ratio), init)
        trends = check_mixup_trends(rows, unstable)
    else:
        init = runner.stage1(s1, "shared_stage1")
        for scale, omega, kappa in CFG_SCALES:
            run_variant(f"scale{scale}", _patch_stage(s2, omega=omega, kappa=kappa), init)
        trends = check_cfg_trends(rows)

    write_csv(out_dir / f"ablate_{suite}.csv", ABLATE_CSV_COLUMNS, rows)
    write_jsonl(
        out_dir / f"ablate_{suite}.jsonl",
        rows + [{"trend": t.name, "passed": t.passed, "detail": t.detail} for t in trends],
    )
    if rows:
        plot_ablation_bars(rows, "sliced_w2", out_dir / f"ablate_{suite}_sliced_w2.png")
        plot_ablation_bars(rows, "cond_accuracy", out_dir / f"ablate_{suite}_accuracy.png")
    return SuiteResult(suite, rows, trends, unstable)


def check_curriculum_trends(rows) -> list:
    fm1 = _metric(rows, "fm_only", 1)
    fm25 = _metric(rows, "fm_only", 25)
    cur1 = _metric(rows, "curriculum", 1)
    cur25 = _metric(rows, "curriculum", 25)
    if None in (fm1, fm25, cur1, cur25):
        return [TrendCheck("curriculum_rows_present", False, "missing variant rows")]
    return [
        TrendCheck(
            "fm_only_one_step_blowup",
            fm1 >= FM_ONE_STEP_BLOWUP_MIN * fm25,
            f"fm_only w2: 1-NFE {fm1:.4f} vs 25-NFE {fm25:.4f} "
            f"(need >= {FM_ONE_STEP_BLOWUP_MIN}x)",
        ),
        TrendCheck(
            "curriculum_one_step_holds",
            cur1 <= CURRICULUM_RATIO_MAX * cur25,
            f"curriculum w2: 1-NFE {cur1:.4f} vs 25-NFE {cur25:.4f} "
            f"(need <= {CURRICULUM_RATIO_MAX}x)",
        ),
        TrendCheck(
            "curriculum_beats_fm_one_step",
            cur1 <= CURRICULUM_VS_FM_MAX * fm1,
            f"1-NFE w2: curriculum {cur1:.4f} vs fm_only {fm1:.4f} "
            f"(need <= {CURRICULUM_VS_FM_MAX}x)",
        ),
    ]


def check_mixup_trends(rows, unstable) -> list:
    trends = []
    zero_name, top_name = "mixup_0", "mixup_75"
    zero_bad = unstable.get(zero_name, False)
    z1, z25 = _metric(rows, zero_name, 1), _metric(rows, zero_name, 25)
    t1, t25 = _metric(rows, top_name, 1), _metric(rows, top_name, 25)
    if zero_bad:
        detail = "ratio 0 flagged unstable during training"
    elif None not in (z1, z25, t1, t25):
        zero_bad = z1 > t1 and z25 > t25
        detail = f"ratio 0 w2 ({z1:.4f}, {z25:.4f}) vs ratio 75 ({t1:.4f}, {t25:.4f})"
    else:
        detail = "ratio 0 rows missing"
    trends.append(TrendCheck("mixup_zero_fails", zero_bad, detail))

    for nfe in ABLATE_NFES:
        seq = [
            _metric(rows, f"mixup_{int(r * 100)}", nfe)
            for r in MIXUP_RATIOS
            if _metric(rows, f"mixup_{int(r * 100)}", nfe) is not None
        ]
        inversions = sum(1 for a, b in zip(seq, seq[1:]) if b > a * (1.0 + NOISE_BAND))
        trends.append(
            TrendCheck(
                f"mixup_improves_nfe{nfe}",
                inversions <= MAX_INVERSIONS,
                f"w2 across ratios at NFE {nfe}: "
                + ", ".join(f"{v:.4f}" for v in seq)
                + f" ({inversions} inversions, band {NOISE_BAND:.0%})",
            )
        )
    return trends


def check_cfg_trends(rows) -> list:
    acc1 = _metric(rows, "scale1", 1, "cond_accuracy")
    acc3 = _metric(rows, "scale3", 1, "cond_accuracy")
    acc4 = _metric(rows, "scale4", 1, "cond_accuracy")
    if None in (acc1, acc3, acc4):
        return [TrendCheck("cfg_rows_present", False, "missing variant rows")]
    return [
        TrendCheck(
            "cfg_gain_at_scale3",
            acc3 >= acc1 + CFG_ACCURACY_GAIN_MIN,
            f"1-NFE accuracy: scale 3 {acc3:.3f} vs scale 1 {acc1:.3f} "
            f"(need +{CFG_ACCURACY_GAIN_MIN:.0%} absolute)",
        ),
        TrendCheck(
            "cfg_plateau_at_scale4",
            acc4 <= acc3 * (1.0 + NOISE_BAND),
            f"1-NFE accuracy: scale 4 {acc4:.3f} vs scale 3 {acc3:.3f} "
            f"(plateau within {NOISE_BAND:.0%})",
        ),
    ]
