"""Fast self-contained oracle suite: differentiation, fields, sampler, I/O.

Runs in seconds with no training. Each check prints one pass/fail line; the
`corrupt_primitive` hook deliberately breaks one forward-mode rule so the
harness itself can be shown to catch a wrong derivative.
"""

from __future__ import annotations

import contextlib
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import PRIMITIVES, ParamSet, Tensor
from .data import (
    DatasetSpec,
    brute_force_mean_velocity,
    oracle_mean_velocity,
    oracle_velocity,
)
from .net import FlowNetConfig, apply_flow_net, init_params
from .objective import (
    GuidanceConfig,
    TimestepConfig,
    UNGUIDED,
    cfm_loss,
    guided_velocity,
    make_flow_batch,
    meanflow_loss,
)
from .rng import derive_rng
from .sampler import make_schedule, one_step, sample
from .trainer import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .rng import get_state


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def primitive_cases():
    """(name, f, inputs) triples exercising every registered primitive."""
    rng = derive_rng(1234, 77)

    def arr(*shape):
        return Tensor(rng.normal(size=shape))

    x34, y34 = arr(3, 4), arr(3, 4)
    cases = [
        ("add", lambda a, b: ad.add(a, b), [x34, y34]),
        ("add_broadcast", lambda a, b: ad.add(a, b), [x34, arr(4)]),
        ("mul", lambda a, b: ad.mul(a, b), [x34, y34]),
        ("mul_broadcast", lambda a, b: ad.mul(a, b), [arr(2, 3, 4), arr(4)]),
        ("reciprocal", lambda a: ad.reciprocal(ad.add(ad.mul(a, a), 0.5)), [x34]),
        ("matmul", lambda a, b: ad.matmul(a, b), [arr(3, 4), arr(4, 2)]),
        ("matmul_batched", lambda a, b: ad.matmul(a, b), [arr(2, 3, 4), arr(4, 5)]),
        ("matmul_4d", lambda a, b: ad.matmul(a, b), [arr(2, 2, 3, 4), arr(2, 2, 4, 3)]),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [x34]),
        ("transpose", lambda a: ad.transpose(a, (1, 0)), [x34]),
        ("broadcast_to", lambda a: ad.broadcast_to(a, (5, 3, 4)), [x34]),
        ("reduce_sum", lambda a: ad.reduce_sum(a, axis=1, keepdims=False), [arr(3, 5)]),
        ("reduce_sum_all", lambda a: ad.reduce_sum(a), [arr(3, 5)]),
        ("silu", ad.silu, [arr(3, 8)]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [arr(3, 8)]),
        ("rms_normalize", lambda a: ad.rms_normalize(a, eps=1e-6, axis=-1), [arr(3, 8)]),
        ("conv1d", lambda a, b: ad.conv1d(a, b, padding=1), [arr(2, 5, 3), arr(3, 3, 4)]),
        ("take", lambda a: ad.take(a, np.array([0, 2, 2, 4]), axis=0), [arr(5, 4)]),
        ("take_axis1", lambda a: ad.take(a, np.array([1, 0, 3, 2]), axis=-1), [x34]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [arr(3, 2), arr(3, 5)]),
        ("sin", ad.sin, [x34]),
        ("cos", ad.cos, [x34]),
    ]
    covered = set()
    for name, _, _ in cases:
        covered.add(name.split("_")[0])
    missing = {n for n in PRIMITIVES} - {
        "add", "mul", "reciprocal", "matmul", "reshape", "transpose",
        "broadcast_to", "reduce_sum", "silu", "softmax", "rms_normalize",
        "conv1d", "take", "concat", "sin", "cos",
    }
    if missing:
        raise AssertionError(f"primitive cases out of date; uncovered: {missing}")
    return cases


def _rel_err(a, b):
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


def _tiny_net(seed=0, dtype=np.float64, jitter=0.05):
    cfg = FlowNetConfig(
        latent_dim=2, n_labels=3, n_mm_blocks=1, n_sm_blocks=1, hidden_dim=16,
        n_heads=2, max_seq_len=4, pseudo_token_count=2, time_embed_dim=8,
        time_freq_max=16.0,
    )
    params = init_params(cfg, seed, dtype=dtype)
    if jitter:
        rng = derive_rng(seed, 99)
        for name in params.names():
            base = params[name].numpy()
            params.replace(
                name, Tensor(base + rng.normal(0.0, jitter, base.shape), dtype=base.dtype)
            )
    return cfg, params


def _tiny_batch(cfg, seed=0, dtype=np.float64, batch=4, mixup=0.5):
    rng = derive_rng(seed, 55)
    x = rng.normal(size=(batch, 2, cfg.latent_dim))
    labels = rng.integers(0, cfg.n_labels, size=batch)
    return make_flow_batch(
        x, labels, TimestepConfig(mixup_ratio=mixup), GuidanceConfig(),
        rng, null_label=cfg.null_label, dtype=dtype,
    )


# ---------------------------------------------------------------------------
# individual checks; each returns (passed, detail)
# ---------------------------------------------------------------------------


def check_primitive_jvp(n_seeds=20):
    worst = 0.0
    for seed in range(n_seeds):
        rng = derive_rng(seed, 11)
        for name, f, inputs in primitive_cases():
            tangents = [Tensor(rng.normal(size=t.shape)) for t in inputs]
            _, tan = ad.jvp(f, inputs, tangents)
            fd = ad.finite_diff_jvp(f, inputs, tangents, h=1e-4)
            err = _rel_err(tan.numpy(), fd.numpy())
            if err > worst:
                worst = err
            if err > 1e-4:
                return False, f"primitive '{name}' jvp off by {err:.2e}"
    return True, f"max rel err {worst:.2e} over {n_seeds} seeds"


def check_primitive_vjp(n_seeds=10):
    worst = 0.0
    for seed in range(n_seeds):
        rng = derive_rng(seed, 12)
        for name, f, inputs in primitive_cases():
            ps = ParamSet({f"p{i}": t for i, t in enumerate(inputs)})

            def loss_fn(nodes):
                return ad.reduce_sum(ad.square(f(*[nodes[f"p{i}"] for i in range(len(inputs))])))

            _, grads = ad.value_and_grad(loss_fn, ps)
            dirs = {k: rng.normal(size=ps[k].shape) for k in ps.names()}
            gdot = sum(float(np.sum(grads[k].numpy() * dirs[k])) for k in ps.names())
            h = 1e-5

            def at(sign):
                return [Tensor(inputs[i].numpy() + sign * h * dirs[f"p{i}"]) for i in range(len(inputs))]

            fd = (
                ad.reduce_sum(ad.square(f(*at(+1)))).item()
                - ad.reduce_sum(ad.square(f(*at(-1)))).item()
            ) / (2 * h)
            err = abs(gdot - fd) / (1.0 + abs(fd))
            worst = max(worst, err)
            if err > 1e-4:
                return False, f"primitive '{name}' vjp off by {err:.2e}"
    return True, f"max rel err {worst:.2e} over {n_seeds} seeds"


def check_network_jvp(n_seeds=5):
    worst = 0.0
    for seed in range(n_seeds):
        cfg, params = _tiny_net(seed)
        rng = derive_rng(seed, 13)
        b = 3
        x = Tensor(rng.normal(size=(b, 2, cfg.latent_dim)))
        t = Tensor(rng.uniform(0.3, 0.9, size=b))
        r = Tensor(t.numpy() * rng.uniform(0.0, 1.0, size=b))
        labels = rng.integers(0, cfg.n_labels + 1, size=b)
        v = Tensor(rng.normal(size=(b, 2, cfg.latent_dim)))

        def f(xx, rr, tt):
            return apply_flow_net(cfg, params, xx, rr, tt, labels)

        tangents = [v, Tensor(np.zeros(b)), Tensor(np.ones(b))]
        _, tan = ad.jvp(f, [x, r, t], tangents)
        fd = ad.finite_diff_jvp(f, [x, r, t], tangents, h=1e-4)
        worst = max(worst, _rel_err(tan.numpy(), fd.numpy()))
    return worst <= 1e-4, f"max rel err {worst:.2e} over {n_seeds} seeds"


def check_network_reverse(n_seeds=5):
    worst = 0.0
    for seed in range(n_seeds):
        cfg, params = _tiny_net(seed)
        rng = derive_rng(seed, 14)
        batch = _tiny_batch(cfg, seed)

        def loss_fn(nodes):
            return cfm_loss(lambda p, x, r, t, c: apply_flow_net(cfg, p, x, r, t, c), nodes, batch)

        _, grads = ad.value_and_grad(loss_fn, params)
        dirs = {k: rng.normal(size=params[k].shape) for k in params.names()}
        gdot = sum(float(np.sum(grads[k].numpy() * dirs[k])) for k in params.names())
        h = 1e-5

        def shifted(sign):
            out = {}
            for k in params.names():
                out[k] = Tensor(params[k].numpy() + sign * h * dirs[k])
            return out

        fd = (loss_fn(shifted(+1)).item() - loss_fn(shifted(-1)).item()) / (2 * h)
        err = abs(gdot - fd) / (1.0 + abs(fd))
        worst = max(worst, err)
    return worst <= 1e-4, f"max dir-grad rel err {worst:.2e} over {n_seeds} seeds"


def check_stop_gradient():
    x = Tensor([1.0, -2.0, 3.0])
    if not np.array_equal(ad.stop_gradient(x).numpy(), x.numpy()):
        return False, "value changed through stop_gradient"
    _, tan = ad.jvp(lambda a: ad.stop_gradient(a), [x], [Tensor([1.0, 1.0, 1.0])])
    if np.any(tan.numpy() != 0):
        return False, "tangent leaked through stop_gradient"
    ps = ParamSet({"a": Tensor([1.0, 2.0]), "b": Tensor([3.0, 1.0])})

    def loss_fn(nodes):
        d = nodes["a"] - ad.stop_gradient(nodes["b"])
        return ad.reduce_sum(ad.square(d))

    _, grads = ad.value_and_grad(loss_fn, ps)
    expect = 2.0 * (ps["a"].numpy() - ps["b"].numpy())
    if not np.allclose(grads["a"].numpy(), expect, atol=1e-12):
        return False, "live branch gradient wrong"
    if np.any(grads["b"].numpy() != 0):
        return False, "gradient leaked into stopped branch"
    return True, "value identity and zero derivatives in both modes"


def check_degeneracy(n_pairs=10):
    worst = 0.0
    for seed in range(n_pairs):
        cfg, params = _tiny_net(seed)
        batch = _tiny_batch(cfg, seed, mixup=1.0)  # r == t everywhere
        model = lambda p, x, r, t, c: apply_flow_net(cfg, p, x, r, t, c)
        l_mf = meanflow_loss(model, params, batch, UNGUIDED, cfg.null_label).item()
        l_cfm = cfm_loss(model, params, batch).item()
        worst = max(worst, abs(l_mf - l_cfm))
    return worst <= 1e-9, f"max |L_mf - L_cfm| = {worst:.2e} over {n_pairs} pairs"


def check_guidance_algebra():
    g = GuidanceConfig(omega=0.3, kappa=0.9, drop_prob=0.1)
    if g.effective_scale != 3.0:
        return False, f"effective scale {g.effective_scale!r} != 3.0"
    rng = derive_rng(3, 15)
    v, fc, fu = (Tensor(rng.normal(size=(4, 2, 2))) for _ in range(3))
    base = guided_velocity(v, fc, fu, g).numpy()
    c = 0.731
    shifted = guided_velocity(
        Tensor(v.numpy() + c), Tensor(fc.numpy() + c), Tensor(fu.numpy() + c), g
    ).numpy()
    if _rel_err(shifted, base + c) > 1e-12:
        return False, "affine-shift invariance violated"
    unguided = guided_velocity(v, fc, fu, UNGUIDED).numpy()
    if not np.array_equal(unguided, v.numpy()):
        return False, "omega=1, kappa=0 did not reproduce the raw field"
    return True, "scale 3.0 exact, shift-invariant, unguided bit-exact"


def check_pointmass_oracle():
    spec = DatasetSpec(kind="point_mass", point=(1.0, -1.0), dim=2)
    x = np.array([0.0, 0.0])
    v = oracle_velocity(spec, x, 0.5)
    if not np.allclose(v, [-2.0, 2.0], atol=1e-12):
        return False, f"velocity at t=0.5 wrong: {v}"
    us = [oracle_mean_velocity(spec, x, r, 0.5) for r in (0.0, 0.1, 0.3, 0.5)]
    spread = max(float(np.max(np.abs(u - us[0]))) for u in us)
    if spread > 1e-12:
        return False, "mean velocity depends on r for straight flows"
    bf = brute_force_mean_velocity(spec, x, 0.2, 0.5, n_quad=2000)
    err = float(np.max(np.abs(bf - us[0])))
    return err <= 1e-8, f"quadrature vs closed form err {err:.2e}"


def check_gaussian_oracle():
    spec = DatasetSpec(kind="isotropic_gaussian", sd=2.0, dim=2)
    rng = derive_rng(5, 16)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=2) * 2.0
        r, t = sorted(rng.uniform(0.05, 0.95, size=2))
        if t - r < 1e-3:
            continue
        u = oracle_mean_velocity(spec, x, r, t)
        bf = brute_force_mean_velocity(spec, x, r, t, n_quad=10_000)
        worst = max(worst, float(np.max(np.abs(u - bf))))
    return worst <= 1e-6, f"closed form vs 1e4-step quadrature err {worst:.2e}"


def check_mixture_limit():
    spec = DatasetSpec(kind="gaussian_mixture", n_labels=1, radius=1.0, sd=1e-3, dim=2)
    point = DatasetSpec(kind="point_mass", point=(1.0, 0.0), dim=2)
    rng = derive_rng(6, 17)
    worst = 0.0
    for _ in range(10):
        x = rng.normal(size=2)
        bf = brute_force_mean_velocity(spec, x, 0.3, 0.8, n_quad=4000)
        exact = oracle_mean_velocity(point, x, 0.3, 0.8)
        worst = max(worst, float(np.max(np.abs(bf - exact))))
    return worst <= 1e-3, f"single-mode mixture vs point mass err {worst:.2e}"


def constant_field_net(const, dtype=np.float32):
    """A freshly initialized net outputs its final bias; set it to `const`."""
    cfg = FlowNetConfig(latent_dim=len(const), n_labels=1, n_mm_blocks=1, n_sm_blocks=0,
                        hidden_dim=8, n_heads=2, max_seq_len=4, pseudo_token_count=1,
                        time_embed_dim=4)
    params = init_params(cfg, 0, dtype=dtype)
    params.replace("final.out.b", Tensor(np.asarray(const), dtype=dtype))
    return cfg, params


def check_sampler_telescoping():
    const = np.array([0.7, -0.3])
    cfg, params = constant_field_net(const)
    rng = derive_rng(7, 18)
    noise = rng.normal(size=(16, 1, 2)).astype(np.float32)
    labels = np.zeros(16, dtype=np.int64)
    outs = [
        sample(cfg, params, labels, make_schedule(n), noise.shape, noise=noise).numpy()
        for n in (1, 5, 25)
    ]
    expected = noise - const.astype(np.float32)
    drift = max(float(np.max(np.abs(o - expected))) for o in outs)
    return drift <= 1e-6, f"constant field drift across schedules {drift:.2e}"


def check_sampler_one_step():
    cfg, params = _tiny_net(2, dtype=np.float32, jitter=0.02)
    rng = derive_rng(8, 19)
    noise = rng.normal(size=(8, 2, cfg.latent_dim)).astype(np.float32)
    labels = rng.integers(0, cfg.n_labels, size=8)
    a = one_step(cfg, params, labels, noise).numpy()
    b = sample(cfg, params, labels, make_schedule(1), noise.shape, noise=noise, dtype=np.float32).numpy()
    if not np.array_equal(a, b):
        return False, "one_step differs from a one-interval schedule"
    zero_params = init_params(cfg, 0, dtype=np.float32)  # zero head: output == noise
    c = one_step(cfg, zero_params, labels, noise).numpy()
    if not np.array_equal(c, noise):
        return False, "zero network did not return the noise unchanged"
    return True, "one_step bit-equals schedule n=1; zero net returns noise"


def check_checkpoint_roundtrip():
    import dataclasses

    cfg, params = _tiny_net(4, dtype=np.float32, jitter=0.0)
    opt = AdamState(params)
    rng = derive_rng(9, 20)
    ckpt = Checkpoint(
        params=params, adam_m=opt.m, adam_v=opt.v, adam_count=0, step=0,
        config={"model": dataclasses.asdict(cfg), "dtype": "float32"},
        rng_state=get_state(rng),
    )
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(p1, ckpt)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        if p1.read_bytes() != p2.read_bytes():
            return False, "save -> load -> save is not byte-identical"
        blob = bytearray(p1.read_bytes())
        blob[4] ^= 0xFF
        p_bad = Path(tmp) / "bad.ckpt"
        p_bad.write_bytes(bytes(blob))
        try:
            load_checkpoint(p_bad)
            return False, "corrupt magic was accepted"
        except Exception:
            pass
    return True, "byte-stable round trip; corruption rejected"


CHECKS = [
    ("primitive_jvp", check_primitive_jvp),
    ("primitive_vjp", check_primitive_vjp),
    ("network_jvp", check_network_jvp),
    ("network_reverse", check_network_reverse),
    ("stop_gradient", check_stop_gradient),
    ("degeneracy_identity", check_degeneracy),
    ("guidance_algebra", check_guidance_algebra),
    ("pointmass_oracle", check_pointmass_oracle),
    ("gaussian_oracle", check_gaussian_oracle),
    ("mixture_limit", check_mixture_limit),
    ("sampler_telescoping", check_sampler_telescoping),
    ("sampler_one_step", check_sampler_one_step),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
]


@contextlib.contextmanager
def corrupted_primitive(name: str, factor: float = 1.01):
    """Test hook: scale one primitive's forward-mode rule by `factor`."""
    if name not in PRIMITIVES:
        raise ValueError(f"unknown primitive '{name}'")
    prim = PRIMITIVES[name]
    original = prim.jvp
    prim.jvp = lambda *a, **kw: original(*a, **kw) * factor
    try:
        yield
    finally:
        prim.jvp = original


def run_selftest(corrupt_primitive: str | None = None) -> list:
    results = []
    ctx = corrupted_primitive(corrupt_primitive) if corrupt_primitive else contextlib.nullcontext()
    with ctx:
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as e:  # a crash is a failure, not an abort
                passed, detail = False, f"raised {type(e).__name__}: {e}"
            results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return results


def format_table(results: list) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status}  {r.seconds:7.2f}s  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{'-' * width}")
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
