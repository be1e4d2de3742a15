"""Sample-distribution metrics and NFE sweeps for generated point clouds.

Stand-ins with the usual division of labor: a sliced 2-Wasserstein distance
for overall distribution fidelity, an unbiased RBF-kernel MMD as a second
opinion, per-mode coverage for diversity, and label-conditional accuracy for
prompt adherence. Sweeps reuse one noise draw across NFE settings so rows
differ only through the sampler.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DatasetSpec, make_dataset, mode_centers
from .net import FlowNetConfig
from .rng import STREAM_EVAL, derive_rng
from .sampler import make_schedule, sample


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4096
    n_projections: int = 256
    coverage_radius_sds: float = 3.0
    mmd_bandwidth: float | None = None
    n_per_label: int = 128
    nfe_list: tuple = (1, 2, 5, 25)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_projections < 32:
            raise ValueError("need n_samples >= 2 and n_projections >= 32")
        if self.coverage_radius_sds <= 0 or self.n_per_label < 1:
            raise ValueError("coverage_radius_sds and n_per_label must be positive")
        if self.mmd_bandwidth is not None and self.mmd_bandwidth <= 0:
            raise ValueError("mmd_bandwidth must be positive when given")
        if not self.nfe_list or any(int(n) < 1 for n in self.nfe_list):
            raise ValueError("nfe_list must be non-empty positive integers")


@dataclass
class EvalReport:
    model_id: str
    nfe: int
    sliced_w2: float
    mmd: float
    mode_coverage: list
    unassigned: float
    cond_accuracy: float
    wall_per_sample: float
    seed: int

    def __post_init__(self):
        values = [self.sliced_w2, self.mmd, self.unassigned, self.cond_accuracy, self.wall_per_sample]
        if not all(np.isfinite(v) for v in values):
            raise ValueError("metrics must be finite")
        fracs = list(self.mode_coverage) + [self.unassigned, self.cond_accuracy]
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError("fractions must lie in [0, 1]")

    def row(self) -> dict:
        cov = np.asarray(self.mode_coverage, dtype=np.float64)
        return {
            "model_id": self.model_id,
            "nfe": self.nfe,
            "sliced_w2": self.sliced_w2,
            "mmd": self.mmd,
            "cond_accuracy": self.cond_accuracy,
            "mode_coverage_min": float(cov.min()) if cov.size else 0.0,
            "mode_coverage_mean": float(cov.mean()) if cov.size else 0.0,
            "unassigned_frac": self.unassigned,
            "wall_per_sample_s": self.wall_per_sample,
            "seed": self.seed,
        }


EVAL_CSV_COLUMNS = [
    "model_id", "nfe", "sliced_w2", "mmd", "cond_accuracy",
    "mode_coverage_min", "mode_coverage_mean", "unassigned_frac",
    "wall_per_sample_s", "seed",
]


def sliced_wasserstein(a, b, n_projections: int = 256, seed: int = 0) -> float:
    """Mean 1-D 2-Wasserstein distance over random unit projections.

    Both sample sets must have the same size; per projection the distance is
    the root-mean-square gap between sorted projected samples.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("expect [N, d] sample arrays of equal dimensionality")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample set")
    if a.shape[0] != b.shape[0]:
        raise ValueError("sliced distance needs equally sized sample sets")
    if n_projections < 32:
        raise ValueError("use at least 32 projections")
    rng = derive_rng(seed, STREAM_EVAL)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    w2 = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(w2.mean())


def median_bandwidth(ref, cap: int = 2000) -> float:
    """Median pairwise distance on (a subsample of) the reference set."""
    ref = np.asarray(ref, dtype=np.float64)
    if ref.shape[0] > cap:
        idx = derive_rng(0, STREAM_EVAL).choice(ref.shape[0], size=cap, replace=False)
        ref = ref[idx]
    sq = np.sum(ref ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * ref @ ref.T, 0.0)
    upper = d2[np.triu_indices(ref.shape[0], k=1)]
    med = float(np.sqrt(np.median(upper)))
    return med if med > 0 else 1.0


def mmd_rbf(a, b, bandwidth: float | None = None) -> float:
    """Unbiased squared maximum mean discrepancy with a Gaussian kernel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(b)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 0.5 / bandwidth ** 2

    def k(x, y):
        sx = np.sum(x ** 2, axis=1)
        sy = np.sum(y ** 2, axis=1)
        return np.exp(-gamma * np.maximum(sx[:, None] + sy[None, :] - 2.0 * x @ y.T, 0.0))

    m, n = a.shape[0], b.shape[0]
    kaa = k(a, a)
    kbb = k(b, b)
    kab = k(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mode_coverage(samples, centers, radius: float):
    """Fraction of samples landing within `radius` of each nearest center."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = d.argmin(axis=1)
    in_radius = d[np.arange(samples.shape[0]), nearest] <= radius
    fracs = np.array(
        [np.mean((nearest == k) & in_radius) for k in range(centers.shape[0])]
    )
    return fracs, float(np.mean(~in_radius))


def accuracy_from_samples(samples, labels, centers) -> float:
    """A sample counts as correct when its nearest center is its label's."""
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    return float(np.mean(d.argmin(axis=1) == np.asarray(labels)))


def _flatten(samples) -> np.ndarray:
    arr = np.asarray(samples)
    return arr.reshape(arr.shape[0], -1)


def cond_accuracy(
    cfg: FlowNetConfig,
    params,
    spec: DatasetSpec,
    n_per_label: int,
    nfe: int,
    seed: int,
    dtype=np.float32,
) -> float:
    """Generate per-label batches and score nearest-center label agreement."""
    centers = mode_centers(spec)
    labels = np.repeat(np.arange(spec.n_labels), n_per_label)
    out = sample(
        cfg, params, labels, make_schedule(nfe),
        (labels.shape[0], spec.seq_len, spec.dim), seed=seed, dtype=dtype,
    )
    return accuracy_from_samples(_flatten(out.numpy()), labels, centers)


def reference_sample(dataset: Dataset, n: int, seed: int):
    """Label-stratified reference subsample: n // K points per label.

    Matching the generated sets' exact label balance keeps the sliced
    distance free of cross-mode mass-imbalance noise, which otherwise
    dominates its finite-sample floor.
    """
    rng = derive_rng(seed, STREAM_EVAL, 1)
    k = dataset.spec.n_labels
    per = n // k
    xs, ls = [], []
    for label in range(k):
        pool = np.flatnonzero(dataset.labels == label)
        idx = pool[rng.integers(0, pool.shape[0], size=per)]
        xs.append(dataset.x[idx])
        ls.append(dataset.labels[idx])
    return np.concatenate(xs), np.concatenate(ls)


def nfe_sweep(
    cfg: FlowNetConfig,
    params,
    dataset: Dataset,
    nfe_list,
    eval_cfg: EvalConfig,
    model_id: str = "model",
    dtype=np.float32,
):
    """One EvalReport per NFE with identical noise and reference draws."""
    if not nfe_list:
        raise ValueError("nfe_list must be non-empty")
    spec = dataset.spec
    ref_x, _ = reference_sample(dataset, eval_cfg.n_samples, eval_cfg.seed)
    ref = _flatten(ref_x)
    bandwidth = eval_cfg.mmd_bandwidth or median_bandwidth(ref)

    has_modes = spec.kind in ("point_mass", "isotropic_gaussian", "gaussian_mixture")
    centers = mode_centers(spec) if has_modes else None
    radius = eval_cfg.coverage_radius_sds * spec.sd if has_modes else None

    n = eval_cfg.n_samples - eval_cfg.n_samples % spec.n_labels
    labels = np.tile(np.arange(spec.n_labels), n // spec.n_labels)

    reports = []
    for nfe in nfe_list:
        t0 = time.perf_counter()
        out = sample(
            cfg, params, labels, make_schedule(int(nfe)),
            (n, spec.seq_len, spec.dim), seed=eval_cfg.seed, dtype=dtype,
        )
        wall = (time.perf_counter() - t0) / n
        gen = _flatten(out.numpy())
        sw = sliced_wasserstein(gen, ref[:n], eval_cfg.n_projections, eval_cfg.seed)
        mmd = mmd_rbf(gen, ref[:n], bandwidth)
        if has_modes:
            cov, unassigned = mode_coverage(gen, centers, radius)
            acc = cond_accuracy(
                cfg, params, spec, eval_cfg.n_per_label, int(nfe), eval_cfg.seed, dtype
            )
        else:
            cov, unassigned, acc = np.array([]), 0.0, 0.0
        reports.append(
            EvalReport(
                model_id=model_id,
                nfe=int(nfe),
                sliced_w2=sw,
                mmd=mmd,
                mode_coverage=[float(c) for c in cov],
                unassigned=unassigned,
                cond_accuracy=acc,
                wall_per_sample=wall,
                seed=eval_cfg.seed,
            )
        )
    return reports


def measure_rtf(
    cfg: FlowNetConfig,
    params,
    nfe: int,
    batch: int = 64,
    repeats: int = 5,
    seed: int = 0,
    spec: DatasetSpec | None = None,
    dtype=np.float32,
) -> float:
    """Median wall-clock seconds per generated sample; warm-up run excluded."""
    if repeats < 3:
        raise ValueError("need at least 3 repeats for a stable median")
    l = spec.seq_len if spec else 1
    d = spec.dim if spec else 2
    n_labels = spec.n_labels if spec else 1
    labels = np.tile(np.arange(n_labels), batch // n_labels + 1)[:batch]
    sched = make_schedule(nfe)
    sample(cfg, params, labels, sched, (batch, l, d), seed=seed, dtype=dtype)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sample(cfg, params, labels, sched, (batch, l, d), seed=seed, dtype=dtype)
        times.append((time.perf_counter() - t0) / batch)
    return float(np.median(times))
