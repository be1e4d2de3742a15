"""Dense tensor core with two differentiation modes over one primitive set.

Forward mode propagates dual numbers (primal, tangent) for directional
derivatives; reverse mode records a tape of primitive applications and walks
it backwards for parameter gradients. Both modes share the same registry of
primitives, so auditing the rules in PRIMITIVES covers everything the rest of
the package can differentiate. Values are immutable numpy buffers in float32
or float64; any NaN/Inf produced by a primitive raises instead of flowing on.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "DualTensor",
    "Node",
    "ParamSet",
    "GradSet",
    "PRIMITIVES",
    "as_tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "reciprocal",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "reduce_sum",
    "mean",
    "silu",
    "softmax",
    "rms_normalize",
    "conv1d",
    "take",
    "concat",
    "sin",
    "cos",
    "square",
    "stop_gradient",
    "jvp",
    "finite_diff_jvp",
    "backward",
    "value_and_grad",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)  # numpy scalars become 0-d arrays
    try:
        arr.flags.writeable = False
    except ValueError:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{name}'")
    return arr


class _Box:
    """Common operator sugar for Tensor / DualTensor / Node."""

    __slots__ = ()
    __array_ufunc__ = None  # keep numpy from silently absorbing boxes

    def __array__(self, dtype=None):
        raise TypeError(
            f"{type(self).__name__} cannot be consumed by raw numpy; "
            "use the registered ops so derivatives stay tracked"
        )

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tensor(_Box):
    """Immutable dense array (float32 or float64), row-major."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = _freeze(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        out.data = _freeze(arr)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(np.ascontiguousarray(self.data.astype(dtype)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


class DualTensor(_Box):
    """Primal paired with a tangent of identical shape and dtype."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Tensor, tangent: Tensor):
        primal = as_tensor(primal)
        tangent = as_tensor(tangent, dtype=primal.dtype)
        if primal.shape != tangent.shape:
            raise ValueError(
                f"dual shape mismatch: primal {primal.shape} vs tangent {tangent.shape}"
            )
        if primal.dtype != tangent.dtype:
            raise ValueError(
                f"dual dtype mismatch: {primal.dtype} vs {tangent.dtype}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def dtype(self):
        return self.primal.dtype

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self):
        return f"DualTensor(shape={self.shape}, dtype={self.dtype.name})"


class Node(_Box):
    """Tape entry: a value plus the primitive application that produced it."""

    __slots__ = ("value", "prim", "arg_values", "parents", "kwargs")

    def __init__(self, value, prim, arg_values, parents, kwargs):
        self.value = value
        self.prim = prim  # None for leaves
        self.arg_values = arg_values
        self.parents = parents  # list of (arg position, Node)
        self.kwargs = kwargs

    @classmethod
    def leaf(cls, tensor) -> "Node":
        tensor = as_tensor(tensor)
        return cls(tensor.data, None, (), [], {})

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = "leaf" if self.prim is None else self.prim.name
        return f"Node({tag}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x.astype(dtype) if dtype is not None and x.dtype != dtype else x
    if isinstance(x, Node):
        raise TypeError("cannot convert a tape Node to a constant Tensor implicitly")
    if isinstance(x, DualTensor):
        raise TypeError("cannot convert a DualTensor to a constant Tensor implicitly")
    return Tensor(x, dtype=dtype)


def value_of(x) -> np.ndarray:
    """Primal numpy value of any box or array-like."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, DualTensor):
        return x.primal.data
    if isinstance(x, Node):
        return x.value
    return np.asarray(x)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------


class Primitive:
    __slots__ = ("name", "fwd", "jvp", "vjp", "n_args")

    def __init__(self, name, fwd, jvp, vjp, n_args):
        self.name = name
        self.fwd = fwd
        self.jvp = jvp
        self.vjp = vjp
        self.n_args = n_args

    def __repr__(self):
        return f"Primitive({self.name})"


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, fwd, jvp_rule, vjp_rule, n_args):
    prim = Primitive(name, fwd, jvp_rule, vjp_rule, n_args)
    PRIMITIVES[name] = prim
    return prim


def _common_dtype(args):
    dtype = None
    for a in args:
        if isinstance(a, (Tensor, DualTensor, Node)):
            if dtype is None:
                dtype = a.dtype
            elif a.dtype != dtype:
                raise ValueError(
                    f"mixed dtypes in one op: {dtype} vs {a.dtype}; cast explicitly"
                )
    return dtype if dtype is not None else np.dtype(np.float64)


def _apply(prim: Primitive, args, kwargs):
    """Dispatch one primitive over plain, dual, or taped arguments."""
    dtype = _common_dtype(args)

    vals = []
    is_dual = False
    is_tape = False
    for a in args:
        if isinstance(a, DualTensor):
            is_dual = True
            vals.append(a.primal.data)
        elif isinstance(a, Node):
            is_tape = True
            vals.append(a.value)
        elif isinstance(a, Tensor):
            vals.append(a.data)
        else:
            arr = np.asarray(a, dtype=dtype)
            vals.append(arr)
    if is_dual and is_tape:
        raise TypeError(
            "a single op mixes forward-mode and reverse-mode arguments; "
            "run the two passes separately"
        )
    vals = tuple(vals)

    with np.errstate(all="ignore"):  # non-finites surface via the check below
        out = _check_finite(np.asarray(prim.fwd(*vals, **kwargs)), prim.name)

    if is_dual:
        tangents = tuple(
            a.tangent.data if isinstance(a, DualTensor) else None for a in args
        )
        tan_out = prim.jvp(vals, tangents, out, **kwargs)
        return DualTensor(Tensor._wrap(out), Tensor._wrap(np.asarray(tan_out)))
    if is_tape:
        parents = [(i, a) for i, a in enumerate(args) if isinstance(a, Node)]
        return Node(out, prim, vals, parents, dict(kwargs))
    return Tensor._wrap(out)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free for any argument and saturates cleanly
    half = x.dtype.type(0.5)
    return half * np.tanh(half * x) + half


# --- add ---

def _add_jvp(p, t, out):
    ta, tb = t
    if ta is None:
        return np.broadcast_to(tb, out.shape)
    if tb is None:
        return np.broadcast_to(ta, out.shape)
    return ta + tb


_register(
    "add",
    lambda a, b: a + b,
    _add_jvp,
    lambda g, p, out: (_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape)),
    2,
)

# --- mul ---

def _mul_jvp(p, t, out):
    a, b = p
    ta, tb = t
    acc = None
    if ta is not None:
        acc = ta * b
    if tb is not None:
        acc = a * tb if acc is None else acc + a * tb
    return np.broadcast_to(acc, out.shape)


_register(
    "mul",
    lambda a, b: a * b,
    _mul_jvp,
    lambda g, p, out: (
        _unbroadcast(g * p[1], p[0].shape),
        _unbroadcast(g * p[0], p[1].shape),
    ),
    2,
)

# --- reciprocal ---

def _recip_jvp(p, t, out):
    (ta,) = t
    return -ta * out * out


_register(
    "reciprocal",
    lambda a: 1.0 / a,
    _recip_jvp,
    lambda g, p, out: (-g * out * out,),
    1,
)

# --- matmul ---

def _mm(a, b):
    # flatten leading axes when the right operand is a plain matrix: one GEMM
    # instead of a stack of tiny ones
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        return np.ascontiguousarray(a).reshape(-1, a.shape[-1]).dot(b).reshape(lead + (b.shape[1],))
    return a @ b


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    return _mm(a, b)


def _matmul_jvp(p, t, out):
    a, b = p
    ta, tb = t
    acc = None
    if ta is not None:
        acc = _mm(ta, b)
    if tb is not None:
        acc = _mm(a, tb) if acc is None else acc + _mm(a, tb)
    return acc


def _matmul_vjp(g, p, out):
    a, b = p
    if b.ndim == 2 and a.ndim > 2:
        a2 = np.ascontiguousarray(a).reshape(-1, a.shape[-1])
        g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        ga = g2.dot(b.T).reshape(a.shape)
        gb = a2.T.dot(g2)
        return ga, gb
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_jvp, _matmul_vjp, 2)

# --- reshape / transpose / broadcast_to ---

_register(
    "reshape",
    lambda a, *, shape: a.reshape(shape),
    lambda p, t, out, *, shape: t[0].reshape(shape),
    lambda g, p, out, *, shape: (g.reshape(p[0].shape),),
    1,
)

_register(
    "transpose",
    lambda a, *, axes: a.transpose(axes),
    lambda p, t, out, *, axes: t[0].transpose(axes),
    lambda g, p, out, *, axes: (g.transpose(np.argsort(axes)),),
    1,
)

_register(
    "broadcast_to",
    lambda a, *, shape: np.broadcast_to(a, shape),
    lambda p, t, out, *, shape: np.broadcast_to(t[0], shape),
    lambda g, p, out, *, shape: (_unbroadcast(g, p[0].shape),),
    1,
)

# --- reduce_sum ---

def _sum_fwd(a, *, axis, keepdims):
    return a.sum(axis=axis, keepdims=keepdims)


def _sum_vjp(g, p, out, *, axis, keepdims):
    a = p[0]
    if axis is None:
        return (np.broadcast_to(g, a.shape),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


_register(
    "reduce_sum",
    _sum_fwd,
    lambda p, t, out, *, axis, keepdims: t[0].sum(axis=axis, keepdims=keepdims),
    _sum_vjp,
    1,
)

# --- silu ---

def _silu_fwd(a):
    return a * _sigmoid(a)


def _silu_slope(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


_register(
    "silu",
    _silu_fwd,
    lambda p, t, out: _silu_slope(p[0]) * t[0],
    lambda g, p, out: (_silu_slope(p[0]) * g,),
    1,
)

# --- softmax ---

def _softmax_fwd(a, *, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


_register(
    "softmax",
    _softmax_fwd,
    lambda p, t, out, *, axis: out * (t[0] - (out * t[0]).sum(axis=axis, keepdims=True)),
    lambda g, p, out, *, axis: (out * (g - (out * g).sum(axis=axis, keepdims=True)),),
    1,
)

# --- rms_normalize ---

def _rms_parts(a, eps, axis):
    m = np.mean(a * a, axis=axis, keepdims=True) + eps
    return 1.0 / np.sqrt(m)


def _rms_fwd(a, *, eps, axis):
    return a * _rms_parts(a, eps, axis)


def _rms_jvp(p, t, out, *, eps, axis):
    a = p[0]
    ta = t[0]
    inv = _rms_parts(a, eps, axis)
    dot = np.mean(a * ta, axis=axis, keepdims=True)
    return ta * inv - a * (inv ** 3) * dot


def _rms_vjp(g, p, out, *, eps, axis):
    a = p[0]
    inv = _rms_parts(a, eps, axis)
    dot = np.mean(a * g, axis=axis, keepdims=True)
    return (g * inv - a * (inv ** 3) * dot,)


_register("rms_normalize", _rms_fwd, _rms_jvp, _rms_vjp, 1)

# --- conv1d (stride 1, zero padding, length preserved) ---

def _conv1d_unfold(x, k, pad):
    """Stack the K shifted views feature-wise: [B, L, K*Cin], k-major."""
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    l = x.shape[1]
    return np.concatenate([xp[:, j : j + l, :] for j in range(k)], axis=2)


def _conv1d_fwd(x, w, *, padding):
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError("conv1d expects x[B,L,Cin] and w[K,Cin,Cout]")
    k, c_in, c_out = w.shape
    if 2 * padding != k - 1:
        raise ValueError("conv1d requires 2*padding == kernel-1 (length preserved)")
    if c_in != x.shape[2]:
        raise ValueError(
            f"conv1d channel mismatch: x has {x.shape[2]}, kernel expects {c_in}"
        )
    b, l, _ = x.shape
    unf = _conv1d_unfold(x, k, padding).reshape(b * l, k * c_in)
    return unf.dot(w.reshape(k * c_in, c_out)).reshape(b, l, c_out)


def _conv1d_jvp(p, t, out, *, padding):
    x, w = p
    tx, tw = t
    acc = None
    if tx is not None:
        acc = _conv1d_fwd(tx, w, padding=padding)
    if tw is not None:
        part = _conv1d_fwd(x, tw, padding=padding)
        acc = part if acc is None else acc + part
    return acc


def _conv1d_vjp(g, p, out, *, padding):
    x, w = p
    k, c_in, c_out = w.shape
    b, l, _ = x.shape
    g2 = np.ascontiguousarray(g).reshape(b * l, c_out)
    unf = _conv1d_unfold(x, k, padding).reshape(b * l, k * c_in)
    gw = unf.T.dot(g2).reshape(k, c_in, c_out)
    gxp = np.zeros((b, l + 2 * padding, c_in), x.dtype)
    for j in range(k):
        gxp[:, j : j + l, :] += g2.dot(w[j].T).reshape(b, l, c_in)
    gx = gxp[:, padding : padding + l, :]
    return gx, gw


_register("conv1d", _conv1d_fwd, _conv1d_jvp, _conv1d_vjp, 2)

# --- take (1-D integer indexing along one axis) ---

def _take_fwd(a, *, indices, axis):
    return np.take(a, indices, axis=axis)


def _take_vjp(g, p, out, *, indices, axis):
    a = p[0]
    ax = axis % a.ndim
    moved_shape = (a.shape[ax],) + a.shape[:ax] + a.shape[ax + 1 :]
    buf = np.zeros(moved_shape, a.dtype)
    np.add.at(buf, indices, np.moveaxis(g, ax, 0))
    return (np.moveaxis(buf, 0, ax),)


_register(
    "take",
    _take_fwd,
    lambda p, t, out, *, indices, axis: np.take(t[0], indices, axis=axis),
    _take_vjp,
    1,
)

# --- concat ---

def _concat_fwd(*parts, axis):
    return np.concatenate(parts, axis=axis)


def _concat_jvp(p, t, out, *, axis):
    zs = [ti if ti is not None else np.zeros_like(pi) for pi, ti in zip(p, t)]
    return np.concatenate(zs, axis=axis)


def _concat_vjp(g, p, out, *, axis):
    sizes = [pi.shape[axis] for pi in p]
    offsets = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, offsets, axis=axis))


_register("concat", _concat_fwd, _concat_jvp, _concat_vjp, -1)

# --- sin / cos ---

_register(
    "sin",
    np.sin,
    lambda p, t, out: np.cos(p[0]) * t[0],
    lambda g, p, out: (np.cos(p[0]) * g,),
    1,
)

_register(
    "cos",
    np.cos,
    lambda p, t, out: -np.sin(p[0]) * t[0],
    lambda g, p, out: (-np.sin(p[0]) * g,),
    1,
)


# ---------------------------------------------------------------------------
# public ops
# ---------------------------------------------------------------------------


def add(a, b):
    return _apply(PRIMITIVES["add"], (a, b), {})


def mul(a, b):
    return _apply(PRIMITIVES["mul"], (a, b), {})


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    return add(a, neg(b))


def reciprocal(a):
    return _apply(PRIMITIVES["reciprocal"], (a,), {})


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    return mul(a, reciprocal(b))


def matmul(a, b):
    return _apply(PRIMITIVES["matmul"], (a, b), {})


def reshape(a, shape):
    return _apply(PRIMITIVES["reshape"], (a,), {"shape": tuple(shape)})


def transpose(a, axes):
    return _apply(PRIMITIVES["transpose"], (a,), {"axes": tuple(axes)})


def broadcast_to(a, shape):
    return _apply(PRIMITIVES["broadcast_to"], (a,), {"shape": tuple(shape)})


def reduce_sum(a, axis=None, keepdims=False):
    return _apply(PRIMITIVES["reduce_sum"], (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    shape = value_of(a).shape
    if axis is None:
        count = int(np.prod(shape)) if shape else 1
    elif isinstance(axis, tuple):
        count = int(np.prod([shape[i] for i in axis]))
    else:
        count = shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def silu(a):
    return _apply(PRIMITIVES["silu"], (a,), {})


def softmax(a, axis=-1):
    return _apply(PRIMITIVES["softmax"], (a,), {"axis": axis})


def rms_normalize(a, eps=1e-6, axis=-1):
    return _apply(PRIMITIVES["rms_normalize"], (a,), {"eps": eps, "axis": axis})


def conv1d(x, w, padding):
    return _apply(PRIMITIVES["conv1d"], (x, w), {"padding": padding})


def take(a, indices, axis=0):
    indices = np.asarray(indices)
    if indices.dtype.kind not in "iu" or indices.ndim != 1:
        raise ValueError("take expects a 1-D integer index array")
    return _apply(PRIMITIVES["take"], (a,), {"indices": indices, "axis": axis})


def concat(parts, axis):
    return _apply(PRIMITIVES["concat"], tuple(parts), {"axis": axis})


def sin(a):
    return _apply(PRIMITIVES["sin"], (a,), {})


def cos(a):
    return _apply(PRIMITIVES["cos"], (a,), {})


def square(a):
    return mul(a, a)


def stop_gradient(x):
    """Pass the value through; no derivative crosses in either mode."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, DualTensor):
        return x.primal
    if isinstance(x, Node):
        return Tensor._wrap(x.value)
    return as_tensor(x)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class ParamSet:
    """Named parameters with a fixed, deterministic iteration order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for name, t in tensors.items():
                self.add(name, t)

    def add(self, name: str, tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._tensors[name] = as_tensor(tensor)

    def replace(self, name: str, tensor) -> None:
        old = self._tensors[name]
        tensor = as_tensor(tensor)
        if tensor.shape != old.shape or tensor.dtype != old.dtype:
            raise ValueError(
                f"parameter '{name}' is {old.shape}/{old.dtype}; "
                f"got {tensor.shape}/{tensor.dtype}"
            )
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_leaf_nodes(self) -> dict[str, Node]:
        return {name: Node.leaf(t) for name, t in self._tensors.items()}

    def n_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet(dict(self._tensors))

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.n_values()} values)"


class GradSet:
    """Per-parameter gradients mirroring a ParamSet's names and shapes."""

    def __init__(self, grads: dict[str, Tensor]):
        self._grads = dict(grads)

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "GradSet":
        return cls(
            {n: Tensor._wrap(np.zeros(t.shape, t.dtype)) for n, t in params.items()}
        )

    def __getitem__(self, name: str) -> Tensor:
        return self._grads[name]

    def __iter__(self):
        return iter(self._grads)

    def items(self):
        return self._grads.items()

    def names(self):
        return list(self._grads)

    def check_mirrors(self, params: ParamSet) -> None:
        if set(self._grads) != set(params.names()):
            raise ValueError("gradient names do not mirror the parameter set")
        for name, g in self._grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for '{name}'")

    def __repr__(self):
        return f"GradSet({len(self._grads)} tensors)"


# ---------------------------------------------------------------------------
# differentiation entry points
# ---------------------------------------------------------------------------


def jvp(f, inputs, tangents):
    """Directional derivative of f at `inputs` along `tangents`.

    Returns (primal, tangent_out). The function is evaluated once with dual
    numbers; no tape is recorded, so parameters touched inside f stay plain
    constants.
    """
    inputs = [as_tensor(x) for x in inputs]
    tangents = [as_tensor(t) for t in tangents]
    if len(inputs) != len(tangents):
        raise ValueError("inputs and tangents must pair up")
    duals = []
    for x, t in zip(inputs, tangents):
        if x.shape != t.shape:
            raise ValueError(f"tangent shape {t.shape} != input shape {x.shape}")
        duals.append(DualTensor(x, t.astype(x.dtype)))
    out = f(*duals)
    if isinstance(out, DualTensor):
        return out.primal, out.tangent
    if isinstance(out, Tensor):  # f constant w.r.t. the differentiated inputs
        return out, Tensor._wrap(np.zeros(out.shape, out.dtype))
    raise TypeError("jvp target must return a Tensor or DualTensor")


def finite_diff_jvp(f, inputs, tangents, h=1e-4):
    """Central-difference directional derivative, (f(x+hv) - f(x-hv)) / 2h."""
    if h <= 0:
        raise ValueError("step size must be positive")
    inputs = [as_tensor(x) for x in inputs]
    tangents = [as_tensor(t, dtype=x.dtype) for x, t in zip(inputs, tangents)]
    plus = [Tensor(x.data + h * t.data) for x, t in zip(inputs, tangents)]
    minus = [Tensor(x.data - h * t.data) for x, t in zip(inputs, tangents)]
    fp = f(*plus)
    fm = f(*minus)
    out = (value_of(fp) - value_of(fm)) / (2.0 * h)
    return Tensor._wrap(_check_finite(out, "finite_diff_jvp"))


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for _, parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents always precede children


def backward(loss, leaves: dict[str, Node]) -> GradSet:
    """Accumulate d(loss)/d(leaf) for every named leaf node.

    Leaves not on the path to the loss get zero gradients. The loss must be
    a scalar; it may also be a plain Tensor (constant), in which case every
    gradient is zero.
    """
    zero = {
        name: Tensor._wrap(np.zeros(node.value.shape, node.value.dtype))
        for name, node in leaves.items()
    }
    if isinstance(loss, Tensor):
        return GradSet(zero)
    if not isinstance(loss, Node):
        raise TypeError("backward expects the loss from a taped evaluation")
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.value.dtype)}
    for node in reversed(_topo_order(loss)):
        if node.prim is None:
            continue  # leaf: keep its accumulated gradient for collection
        g = grads.pop(id(node), None)
        if g is None:
            continue
        g = np.broadcast_to(g, node.value.shape)
        parent_grads = node.prim.vjp(g, node.arg_values, node.value, **node.kwargs)
        for pos, parent in node.parents:
            pg = parent_grads[pos]
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out = dict(zero)
    for name, node in leaves.items():
        g = grads.get(id(node))
        if g is not None:
            out[name] = Tensor._wrap(_check_finite(np.asarray(g), "backward"))
    return GradSet(out)


def value_and_grad(f, params: ParamSet):
    """Evaluate f(param nodes) and return (loss value, GradSet)."""
    nodes = params.as_leaf_nodes()
    loss = f(nodes)
    grads = backward(loss, nodes)
    return stop_gradient(loss), grads
