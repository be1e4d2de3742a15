"""Synthetic conditional datasets with matching velocity-field oracles.

Every dataset kind is declarative and regenerates bit-identically from
(spec, seed). The 2-D families (point mass, isotropic Gaussian, Gaussian
mixture on a circle) come with exact marginal velocity fields derived from
the straight interpolation path, plus an integrator-based mean velocity for
anything without a closed form. Sequence data exists to exercise the
transformer's token axis and has no oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .rng import STREAM_DATA, derive_rng

DATASET_MAGIC = b"MFLOWDS1"

KINDS = ("point_mass", "isotropic_gaussian", "gaussian_mixture", "sequence_ar")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_labels: int = 1
    samples_per_label: int = 1000
    seed: int = 0
    seq_len: int = 1
    dim: int = 2
    point: tuple = (1.0, -1.0)       # point_mass target
    center: tuple | None = None      # isotropic_gaussian center (default origin)
    sd: float = 1.0                  # isotropic_gaussian / per-mode spread
    radius: float = 4.0              # gaussian_mixture circle radius
    ar_coeffs: tuple | None = None   # sequence_ar per-label AR(1) coefficient

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind '{self.kind}'; pick one of {KINDS}")
        if self.n_labels < 1 or self.samples_per_label < 1:
            raise ValueError("n_labels and samples_per_label must be positive")
        if self.seq_len < 1 or self.dim < 1:
            raise ValueError("seq_len and dim must be positive")
        if self.kind == "point_mass" and len(self.point) != self.dim:
            raise ValueError("point must have `dim` coordinates")
        if self.kind in ("isotropic_gaussian", "gaussian_mixture") and self.sd <= 0:
            raise ValueError("sd must be positive")
        if self.kind == "gaussian_mixture":
            if self.dim != 2:
                raise ValueError("gaussian_mixture modes live on a 2-D circle")
            if self.radius <= 0:
                raise ValueError("radius must be positive")
        if self.kind == "sequence_ar" and self.ar_coeffs is not None:
            if len(self.ar_coeffs) != self.n_labels:
                raise ValueError("need one AR coefficient per label")
            if any(abs(c) >= 1 for c in self.ar_coeffs):
                raise ValueError("AR coefficients must satisfy |c| < 1")

    @property
    def n_samples(self) -> int:
        return self.n_labels * self.samples_per_label

    def ar_coefficients(self) -> np.ndarray:
        if self.ar_coeffs is not None:
            return np.asarray(self.ar_coeffs, dtype=np.float64)
        return np.linspace(-0.8, 0.8, self.n_labels)


def mode_centers(spec: DatasetSpec) -> np.ndarray:
    """Per-label mode centers, shape [n_labels, dim]."""
    if spec.kind == "point_mass":
        return np.tile(np.asarray(spec.point, dtype=np.float64), (spec.n_labels, 1))
    if spec.kind == "isotropic_gaussian":
        c = np.zeros(spec.dim) if spec.center is None else np.asarray(spec.center, dtype=np.float64)
        return np.tile(c, (spec.n_labels, 1))
    if spec.kind == "gaussian_mixture":
        angles = 2.0 * np.pi * np.arange(spec.n_labels) / spec.n_labels
        return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    raise ValueError(f"no mode geometry for kind '{spec.kind}'")


@dataclass
class Dataset:
    spec: DatasetSpec
    x: np.ndarray        # [N, L, D] float64
    labels: np.ndarray   # [N] int64

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self.x.shape[0], size=batch_size)
        return self.x[idx], self.labels[idx]


def make_dataset(spec: DatasetSpec) -> Dataset:
    rng = derive_rng(spec.seed, STREAM_DATA)
    n, l, d = spec.n_samples, spec.seq_len, spec.dim
    labels = np.repeat(np.arange(spec.n_labels, dtype=np.int64), spec.samples_per_label)

    if spec.kind == "point_mass":
        x = np.tile(np.asarray(spec.point, dtype=np.float64), (n, 1, 1))
        x = np.broadcast_to(x, (n, l, d)).copy()
    elif spec.kind == "isotropic_gaussian":
        centers = mode_centers(spec)[labels][:, None, :]
        x = centers + spec.sd * rng.standard_normal((n, l, d))
    elif spec.kind == "gaussian_mixture":
        centers = mode_centers(spec)[labels][:, None, :]
        x = centers + spec.sd * rng.standard_normal((n, l, d))
    else:  # sequence_ar
        coeffs = spec.ar_coefficients()[labels]
        z = rng.standard_normal((n, l, d))
        x = np.empty((n, l, d))
        x[:, 0, :] = z[:, 0, :]
        for i in range(1, l):
            rho = coeffs[:, None]
            x[:, i, :] = rho * x[:, i - 1, :] + np.sqrt(1.0 - rho ** 2) * z[:, i, :]

    order = rng.permutation(n)
    return Dataset(spec, np.ascontiguousarray(x[order]), labels[order])


def save_dataset(path, ds: Dataset) -> None:
    from dataclasses import asdict

    header = {"format": "dataset", "version": 1, "spec": asdict(ds.spec)}
    write_container(path, DATASET_MAGIC, header, [("x", ds.x), ("labels", ds.labels)])


def load_dataset(path) -> Dataset:
    header, tensors = read_container(path, DATASET_MAGIC)
    raw = dict(header["spec"])
    for key in ("point", "center", "ar_coeffs"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    spec = DatasetSpec(**raw)
    return Dataset(spec, tensors["x"], tensors["labels"])


# ---------------------------------------------------------------------------
# velocity-field oracles (2-D families, flattened [.., dim] points)
# ---------------------------------------------------------------------------


def _s_tau(tau, sd):
    """Marginal variance of the interpolant of N(c, sd^2 I) toward N(0, I)."""
    return (1.0 - tau) ** 2 * sd ** 2 + tau ** 2


def _gaussian_velocity(x, t, center, sd):
    s = _s_tau(t, sd)
    coef = (t - (1.0 - t) * sd ** 2) / s
    return coef * (x - (1.0 - t) * center) - center


def _mixture_velocity(x, t, centers, sd):
    """Posterior-weighted per-mode velocities; x is [N, D], t scalar."""
    x = np.atleast_2d(x)
    s = _s_tau(t, sd)
    diffs = x[:, None, :] - (1.0 - t) * centers[None, :, :]       # [N, K, D]
    logw = -0.5 * np.sum(diffs ** 2, axis=2) / s                   # equal priors
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    coef = (t - (1.0 - t) * sd ** 2) / s
    per_mode = coef * diffs - centers[None, :, :]
    return np.einsum("nk,nkd->nd", w, per_mode)


def oracle_velocity(spec: DatasetSpec, x, t: float):
    """Exact marginal velocity v(x, t) for kinds with a closed form."""
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 < t <= 1.0 and spec.kind == "point_mass":
        raise ValueError("point_mass velocity is singular at t = 0")
    if spec.kind == "point_mass":
        return (x - np.asarray(spec.point)) / t
    if spec.kind == "isotropic_gaussian":
        center = np.zeros(spec.dim) if spec.center is None else np.asarray(spec.center)
        return _gaussian_velocity(x, t, center, spec.sd)
    if spec.kind == "gaussian_mixture":
        single = x.ndim == 1
        v = _mixture_velocity(x, t, mode_centers(spec), spec.sd)
        return v[0] if single else v
    raise ValueError(f"no velocity oracle for kind '{spec.kind}'")


def oracle_mean_velocity(spec: DatasetSpec, x, r: float, t: float):
    """Closed-form average velocity over [r, t] (straight/affine flows only)."""
    if not 0.0 <= r <= t <= 1.0:
        raise ValueError("need 0 <= r <= t <= 1")
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "point_mass":
        if t == 0.0:
            raise ValueError("point_mass mean velocity is singular at t = 0")
        return (x - np.asarray(spec.point)) / t  # straight paths: r drops out
    if spec.kind == "isotropic_gaussian":
        if r == t:
            return oracle_velocity(spec, x, t)
        center = np.zeros(spec.dim) if spec.center is None else np.asarray(spec.center)
        scale = np.sqrt(_s_tau(r, spec.sd) / _s_tau(t, spec.sd))
        x_r = (1.0 - r) * center + scale * (x - (1.0 - t) * center)
        return (x - x_r) / (t - r)
    raise ValueError(
        f"no closed-form mean velocity for kind '{spec.kind}'; "
        "use brute_force_mean_velocity"
    )


def brute_force_mean_velocity(spec: DatasetSpec, x, r: float, t: float, n_quad: int = 2048):
    """Average velocity via 4th-order integration of the marginal flow.

    Integrates dx/dtau = v(x, tau) from t down to r with fixed steps and
    returns (x_t - x_r) / (t - r). Works for every kind with a velocity
    oracle; point_mass needs r > 0 to stay off the singular endpoint.
    """
    if n_quad < 100:
        raise ValueError("n_quad must be at least 100")
    if t == r:
        raise ValueError("mean velocity over an empty interval; use the velocity oracle")
    x = np.asarray(x, dtype=np.float64)

    def v(state, tau):
        return oracle_velocity(spec, state, tau)

    h = (t - r) / n_quad
    state = x.copy()
    tau = t
    for _ in range(n_quad):
        k1 = v(state, tau)
        k2 = v(state - 0.5 * h * k1, tau - 0.5 * h)
        k3 = v(state - 0.5 * h * k2, tau - 0.5 * h)
        k4 = v(state - h * k3, tau - h)
        state = state - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tau -= h
    return (x - state) / (t - r)


@dataclass
class OracleField:
    """Evaluable mean/instantaneous velocity pair for a dataset spec."""

    spec: DatasetSpec
    n_quad: int = 2048

    def v(self, x, t: float):
        return oracle_velocity(self.spec, x, t)

    def u(self, x, r: float, t: float):
        if r == t:
            return oracle_velocity(self.spec, x, t)
        if self.spec.kind in ("point_mass", "isotropic_gaussian"):
            return oracle_mean_velocity(self.spec, x, r, t)
        return brute_force_mean_velocity(self.spec, x, r, t, self.n_quad)


def make_oracle(spec: DatasetSpec, n_quad: int = 2048) -> OracleField:
    if spec.kind == "sequence_ar":
        raise ValueError("sequence data has no velocity oracle")
    return OracleField(spec, n_quad)
