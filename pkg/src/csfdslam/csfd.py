"""Complex-step differentiation with perturbation-linearized arithmetic.

Two number types carry imaginary perturbation channels alongside a real
value:

* :class:`ComplexScalar` -- one channel ``im``; ``im / h`` is a first
  derivative.
* :class:`BicomplexScalar` -- channels ``im1``, ``im2`` and the ``i1*i2``
  coefficient ``im12``; ``im12 / h**2`` is a second derivative.

Products drop every term that multiplies two perturbations landing in a
lower-order slot, so the real part of any result is computed exactly as the
plain real program would compute it.  Values are numpy arrays (0-d for
scalars) and every operation broadcasts like numpy.

Module-level functions (:func:`exp`, :func:`sqrt`, :func:`where`, ...)
accept plain numpy input as well, which is how pipeline code stays generic
over the scalar type.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_H = 1e-8


class DomainError(ValueError):
    """Real part of an argument lies outside a function's domain."""


def check_step(h: float) -> float:
    h = float(h)
    if not (0.0 < h <= 1e-6):
        raise ValueError(f"step size must satisfy 0 < h <= 1e-6, got {h!r}")
    return h


def _arr(x):
    # Python scalars stay weakly typed so float32 arrays are not upcast.
    if isinstance(x, (np.ndarray, np.generic, float)):
        return x
    if isinstance(x, int):
        return float(x)
    return np.asarray(x, dtype=float)


def _scaled(d: np.ndarray, ch: np.ndarray) -> np.ndarray:
    # 0 * inf must stay 0: an unseeded channel never picks up a singular slope.
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = d * ch
    if np.ndim(out) == 0:
        return out if ch != 0 else np.zeros_like(out)
    return np.where(ch == 0, 0.0, out)


class _Perturbed:
    """Shared machinery; subclasses fix the channel layout."""

    __slots__ = ("_c",)
    __array_ufunc__ = None  # make ndarray <op> Perturbed defer to us
    nchannels = 0

    def __init__(self, *channels):
        self._c = tuple(_arr(c) for c in channels)

    # -- construction -------------------------------------------------------
    @classmethod
    def _make(cls, channels):
        obj = cls.__new__(cls)
        obj._c = tuple(channels)
        return obj

    @classmethod
    def constant(cls, x):
        x = _arr(x)
        z = np.zeros_like(x) if isinstance(x, (np.ndarray, np.generic)) else 0.0
        return cls._make((x,) + (z,) * (cls.nchannels - 1))

    def _coerce(self, other):
        if isinstance(other, _Perturbed):
            if type(other) is not type(self):
                raise TypeError(
                    f"cannot mix {type(self).__name__} and {type(other).__name__}"
                )
            return other
        return None

    @property
    def re(self) -> np.ndarray:
        return self._c[0]

    @property
    def channels(self) -> tuple:
        return self._c

    # -- array protocol -----------------------------------------------------
    @property
    def shape(self):
        return np.broadcast_shapes(*(np.shape(c) for c in self._c))

    @property
    def ndim(self):
        return len(self.shape)

    def __len__(self):
        return self.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def _full(self):
        shp = self.shape
        return tuple(np.broadcast_to(c, shp) for c in self._c)

    def __getitem__(self, idx):
        return self._make(tuple(c[idx] for c in self._full()))

    def __setitem__(self, idx, value):
        full = [np.array(c, dtype=float, copy=True) for c in self._full()]
        other = self._coerce(value)
        if other is None:
            full[0][idx] = value
            for c in full[1:]:
                c[idx] = 0.0
        else:
            for c, v in zip(full, other._c):
                c[idx] = v
        self._c = tuple(full)

    def copy(self):
        return self._make(tuple(np.array(c, dtype=float, copy=True) for c in self._full()))

    def reshape(self, *shape):
        return self._make(tuple(c.reshape(*shape) for c in self._full()))

    @property
    def T(self):
        return self._make(tuple(c.T for c in self._full()))

    def swapaxes(self, a, b):
        return self._make(tuple(np.swapaxes(c, a, b) for c in self._full()))

    def sum(self, axis=None):
        return self._make(tuple(np.sum(c, axis=axis) for c in self._full()))

    def astype_real(self):
        return self.re

    # -- linear ops ---------------------------------------------------------
    def __neg__(self):
        return self._make(tuple(-c for c in self._c))

    def __pos__(self):
        return self

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make((self._c[0] + other,) + tuple(c + 0.0 * other for c in self._c[1:]))
        return self._make(tuple(a + b for a, b in zip(self._c, o._c)))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make((self._c[0] - other,) + tuple(c + 0.0 * other for c in self._c[1:]))
        return self._make(tuple(a - b for a, b in zip(self._c, o._c)))

    def __rsub__(self, other):
        return (-self) + other

    def _scale(self, k):
        k = _arr(k)
        return self._make(tuple(c * k for c in self._c))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __rtruediv__(self, other):
        return self.constant(other) / self

    # -- comparisons act on real parts only ---------------------------------
    def __lt__(self, other):
        return self.re < real(other)

    def __le__(self, other):
        return self.re <= real(other)

    def __gt__(self, other):
        return self.re > real(other)

    def __ge__(self, other):
        return self.re >= real(other)

    __hash__ = None

    # -- nonlinear ops ------------------------------------------------------
    def _lift(self, f0, f1, f2):
        raise NotImplementedError

    def __pow__(self, n):
        if isinstance(n, _Perturbed):
            return exp(log(self) * n)
        n = float(n)
        x = self.re
        with np.errstate(divide="ignore", invalid="ignore"):
            f1 = n * np.power(x, n - 1.0)
            f2 = n * (n - 1.0) * np.power(x, n - 2.0)
        return self._lift(np.power(x, n), f1, f2)

    def __abs__(self):
        s = np.where(self.re < 0, -1.0, 1.0)
        return self._make(tuple(c * s for c in self._c))

    def __repr__(self):
        names = self._names
        body = ", ".join(f"{n}={c!r}" for n, c in zip(names, self._c))
        return f"{type(self).__name__}({body})"


class ComplexScalar(_Perturbed):
    """``re + im*i`` with the ``im*im`` product term discarded."""

    __slots__ = ()
    nchannels = 2
    _names = ("re", "im")

    def __init__(self, re, im=0.0):
        super().__init__(re, im)

    @property
    def im(self) -> np.ndarray:
        return self._c[1]

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return self._scale(other)
        a0, a1 = self._c
        b0, b1 = o._c
        return self._make((a0 * b0, a0 * b1 + b0 * a1))

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make(tuple(c / other for c in self._c))
        a0, a1 = self._c
        b0, b1 = o._c
        if np.any(b0 == 0):
            raise ZeroDivisionError("CSFD division by a zero real part")
        q0 = a0 / b0
        return self._make((q0, (a1 - q0 * b1) / b0))

    def _lift(self, f0, f1, f2):
        return self._make((f0, _scaled(f1, self._c[1])))

    def __matmul__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make(tuple(c @ other for c in self._full()))
        a0, a1 = self._full()
        b0, b1 = o._full()
        return self._make((a0 @ b0, a0 @ b1 + a1 @ b0))

    def __rmatmul__(self, other):
        other = _arr(other)
        return self._make(tuple(other @ c for c in self._full()))


class BicomplexScalar(_Perturbed):
    """``re + im1*i1 + im2*i2 + im12*i1*i2`` truncated at second order."""

    __slots__ = ()
    nchannels = 4
    _names = ("re", "im1", "im2", "im12")

    def __init__(self, re, im1=0.0, im2=0.0, im12=0.0):
        super().__init__(re, im1, im2, im12)

    @property
    def im1(self) -> np.ndarray:
        return self._c[1]

    @property
    def im2(self) -> np.ndarray:
        return self._c[2]

    @property
    def im12(self) -> np.ndarray:
        return self._c[3]

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return self._scale(other)
        a0, a1, a2, a3 = self._c
        b0, b1, b2, b3 = o._c
        return self._make((
            a0 * b0,
            a0 * b1 + a1 * b0,
            a0 * b2 + a2 * b0,
            a0 * b3 + a1 * b2 + a2 * b1 + a3 * b0,
        ))

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make(tuple(c / other for c in self._c))
        a0, a1, a2, a3 = self._c
        b0, b1, b2, b3 = o._c
        if np.any(b0 == 0):
            raise ZeroDivisionError("CSFD division by a zero real part")
        q0 = a0 / b0
        q1 = (a1 - q0 * b1) / b0
        q2 = (a2 - q0 * b2) / b0
        q3 = (a3 - q0 * b3 - q1 * b2 - q2 * b1) / b0
        return self._make((q0, q1, q2, q3))

    def _lift(self, f0, f1, f2):
        _, a1, a2, a3 = self._c
        cross = _scaled(f2, a1 * a2)
        return self._make((f0, _scaled(f1, a1), _scaled(f1, a2), cross + _scaled(f1, a3)))

    def __matmul__(self, other):
        o = self._coerce(other)
        if o is None:
            other = _arr(other)
            return self._make(tuple(c @ other for c in self._full()))
        a0, a1, a2, a3 = self._full()
        b0, b1, b2, b3 = o._full()
        return self._make((
            a0 @ b0,
            a0 @ b1 + a1 @ b0,
            a0 @ b2 + a2 @ b0,
            a0 @ b3 + a1 @ b2 + a2 @ b1 + a3 @ b0,
        ))

    def __rmatmul__(self, other):
        other = _arr(other)
        return self._make(tuple(other @ c for c in self._full()))


# ---------------------------------------------------------------------------
# seeding and extraction
# ---------------------------------------------------------------------------

def promote(x, channel=1, h: float = DEFAULT_H, order: int | None = None):
    """Lift a real value into a perturbed number.

    ``channel`` is ``1`` or ``None`` for a :class:`ComplexScalar`; for a
    :class:`BicomplexScalar` it may be ``1``, ``2``, ``(1, 2)`` (the diagonal
    Hessian seeding) or ``None``.  ``order`` picks the type explicitly and
    defaults to bicomplex when the channel mentions ``2``.
    """
    x = _arr(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot promote a non-finite value")
    h = check_step(h)
    chans = () if channel is None else ((channel,) if isinstance(channel, int) else tuple(channel))
    if any(c not in (1, 2) for c in chans):
        raise ValueError(f"unknown channel {channel!r}")
    if order is None:
        order = 2 if 2 in chans else 1
    if order == 1:
        if 2 in chans:
            raise ValueError("a complex number has only channel 1")
        return ComplexScalar(x, h if 1 in chans else 0.0)
    return BicomplexScalar(x, h if 1 in chans else 0.0, h if 2 in chans else 0.0, 0.0)


def extract_derivative(z, h: float = DEFAULT_H):
    if isinstance(z, ComplexScalar):
        return z.im / h
    if isinstance(z, BicomplexScalar):
        return z.im1 / h
    return np.zeros_like(_arr(z))


def extract_hessian_entry(z, h: float = DEFAULT_H):
    if isinstance(z, BicomplexScalar):
        return z.im12 / (h * h)
    raise TypeError("second derivatives need a BicomplexScalar")


def is_perturbed(x) -> bool:
    return isinstance(x, _Perturbed)


def real(x):
    return x.re if isinstance(x, _Perturbed) else x


def imag(x, h: float = 1.0):
    """First perturbation channel divided by ``h`` (zeros for plain reals)."""
    if isinstance(x, _Perturbed):
        return x.channels[1] / h
    return np.zeros_like(_arr(x))


# ---------------------------------------------------------------------------
# elementary functions
# ---------------------------------------------------------------------------

def _domain(cond, name):
    if not np.all(cond):
        raise DomainError(f"{name}: argument outside the real domain")


def exp(z):
    if not isinstance(z, _Perturbed):
        return np.exp(z)
    e = np.exp(z.re)
    return z._lift(e, e, e)


def log(z):
    if not isinstance(z, _Perturbed):
        return np.log(z)
    _domain(z.re > 0, "log")
    x = z.re
    return z._lift(np.log(x), 1.0 / x, -1.0 / (x * x))


def sqrt(z):
    if not isinstance(z, _Perturbed):
        return np.sqrt(z)
    _domain(z.re >= 0, "sqrt")
    s = np.sqrt(z.re)
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = 0.5 / s
        f2 = -0.25 / (s * z.re)
    return z._lift(s, f1, f2)


def sin(z):
    if not isinstance(z, _Perturbed):
        return np.sin(z)
    x = z.re
    s = np.sin(x)
    return z._lift(s, np.cos(x), -s)


def cos(z):
    if not isinstance(z, _Perturbed):
        return np.cos(z)
    x = z.re
    c = np.cos(x)
    return z._lift(c, -np.sin(x), -c)


def tan(z):
    if not isinstance(z, _Perturbed):
        return np.tan(z)
    x = z.re
    t = np.tan(x)
    sec2 = 1.0 + t * t
    return z._lift(t, sec2, 2.0 * t * sec2)


def arccos(z):
    if not isinstance(z, _Perturbed):
        return np.arccos(z)
    x = z.re
    _domain((x >= -1.0) & (x <= 1.0), "arccos")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(1.0 - x * x)
        f1 = -1.0 / r
        f2 = -x / (r * r * r)
    return z._lift(np.arccos(x), f1, f2)


def power(z, n):
    if not isinstance(z, _Perturbed):
        return np.power(z, n)
    return z ** n


def absolute(z):
    return abs(z) if isinstance(z, _Perturbed) else np.abs(z)


def sign(z):
    return np.sign(real(z))


def floor(z):
    """Floor of the real part; the result is a plain (unperturbed) array."""
    return np.floor(real(z))


def _pair(a, b):
    """Bring ``a`` and ``b`` to a common perturbed type (or leave both real)."""
    pa, pb = isinstance(a, _Perturbed), isinstance(b, _Perturbed)
    if pa and pb:
        a._coerce(b)
        return a, b, type(a)
    if pa:
        return a, type(a).constant(b), type(a)
    if pb:
        return type(b).constant(a), b, type(b)
    return a, b, None


def where(cond, a, b):
    a, b, cls = _pair(a, b)
    if cls is None:
        return np.where(cond, a, b)
    return cls._make(tuple(np.where(cond, x, y) for x, y in zip(a._c, b._c)))


def minimum(a, b):
    """Pick by real part; ties go to ``a``."""
    return where(real(b) < real(a), b, a)


def maximum(a, b):
    return where(real(b) > real(a), b, a)


def clip(z, lo, hi):
    """Clamp by real part; clamped entries lose their perturbation."""
    if not isinstance(z, _Perturbed):
        return np.clip(z, lo, hi)
    out = where(z.re < lo, lo, z)
    return where(z.re > hi, hi, out)


def clip_real(z, lo, hi):
    """Clamp only the real part, passing perturbations through untouched."""
    if not isinstance(z, _Perturbed):
        return np.clip(z, lo, hi)
    return z._make((np.clip(z.re, lo, hi),) + z._c[1:])


# ---------------------------------------------------------------------------
# array helpers
# ---------------------------------------------------------------------------

def _common(items):
    cls = None
    for it in items:
        if isinstance(it, _Perturbed):
            if cls is not None and type(it) is not cls:
                raise TypeError("cannot mix perturbed number types")
            cls = type(it)
    return cls


def stack(items: Sequence, axis: int = 0):
    cls = _common(items)
    if cls is None:
        return np.stack(items, axis=axis)
    lifted = [it if isinstance(it, _Perturbed) else cls.constant(it) for it in items]
    shp = np.broadcast_shapes(*(it.shape for it in lifted))
    return cls._make(tuple(
        np.stack([np.broadcast_to(it._c[k], shp) for it in lifted], axis=axis)
        for k in range(cls.nchannels)
    ))


def concatenate(items: Sequence, axis: int = 0):
    cls = _common(items)
    if cls is None:
        return np.concatenate(items, axis=axis)
    lifted = [it if isinstance(it, _Perturbed) else cls.constant(it) for it in items]
    return cls._make(tuple(
        np.concatenate([it._full()[k] for it in lifted], axis=axis)
        for k in range(cls.nchannels)
    ))


def asum(z, axis=None):
    return z.sum(axis=axis) if isinstance(z, _Perturbed) else np.sum(z, axis=axis)


def dot(a, b, axis: int = -1):
    """Inner product along ``axis``."""
    return asum(a * b, axis=axis)


def norm(v, axis: int = -1):
    return sqrt(dot(v, v, axis=axis))


def cross(a, b):
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def take(z, idx, axis=None):
    if isinstance(z, _Perturbed):
        return z._make(tuple(np.take(c, idx, axis=axis) for c in z._full()))
    return np.take(z, idx, axis=axis)


def like(template, x):
    """Lift real ``x`` into ``template``'s perturbed type (identity for reals)."""
    if isinstance(template, _Perturbed) and not isinstance(x, _Perturbed):
        return type(template).constant(x)
    return x


def add_at(target, idx, values):
    """Unbuffered scatter-add that keeps perturbation channels."""
    if isinstance(target, _Perturbed) or isinstance(values, _Perturbed):
        target, values, cls = _pair(target, values)
        chans = [np.array(c, dtype=float, copy=True) for c in target._full()]
        vals = values._full() if isinstance(values, _Perturbed) else (values,)
        for c, v in zip(chans, vals):
            np.add.at(c, idx, v)
        return cls._make(tuple(chans))
    out = np.array(target, dtype=float, copy=True)
    np.add.at(out, idx, values)
    return out


# ---------------------------------------------------------------------------
# derivatives of functions of a parameter vector
# ---------------------------------------------------------------------------

def gradient(f: Callable, x, h: float = DEFAULT_H):
    """Value and gradient of scalar ``f`` at real vector ``x``.

    One complex pass per component; ``f`` receives a ComplexScalar vector.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    g = np.empty(n)
    value = None
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = h
        z = f(ComplexScalar(x, seed))
        g[i] = float(np.asarray(z.im)) / h
        if value is None:
            value = float(np.asarray(z.re))
    return value, g


def hessian(f: Callable, x, h: float = DEFAULT_H):
    """Value, gradient and symmetric Hessian of scalar ``f`` at ``x``.

    Runs ``n(n+1)/2`` bicomplex passes: component ``i`` carries ``i1`` and
    component ``j`` carries ``i2``; the diagonal passes also yield the
    gradient from ``im1``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    g = np.empty(n)
    value = None
    for i in range(n):
        for j in range(i, n):
            s1 = np.zeros(n)
            s2 = np.zeros(n)
            s1[i] = h
            s2[j] = h
            z = f(BicomplexScalar(x, s1, s2, 0.0))
            H[i, j] = H[j, i] = float(np.asarray(z.im12)) / (h * h)
            if i == j:
                g[i] = float(np.asarray(z.im1)) / h
            if value is None:
                value = float(np.asarray(z.re))
    return value, g, H


def forward_difference(f: Callable, x, h: float):
    return (f(x + h) - f(x)) / h


def central_difference(f: Callable, x, h: float):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def table1_function(x):
    """``(e^x + x^3 + x) / (x + 1)``, generic over the scalar type."""
    return (exp(x) + x * x * x + x) / (x + 1.0)


def table1_derivative(x):
    """Analytic derivative of :func:`table1_function`."""
    ex = np.exp(x)
    return (x * ex + 2.0 * x ** 3 + 3.0 * x ** 2 + 1.0) / (x + 1.0) ** 2


__all__ = [
    "DEFAULT_H", "DomainError", "ComplexScalar", "BicomplexScalar", "check_step",
    "promote", "extract_derivative", "extract_hessian_entry", "is_perturbed",
    "real", "imag", "exp", "log", "sqrt", "sin", "cos", "tan", "arccos", "power",
    "absolute", "sign", "floor", "where", "minimum", "maximum", "clip", "clip_real",
    "stack", "concatenate", "asum", "dot", "norm", "cross", "take", "like", "add_at",
    "gradient", "hessian", "forward_difference", "central_difference",
    "table1_function", "table1_derivative",
]

