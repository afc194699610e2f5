"""
Special functions used by every kernel evaluation.

Covers log-gamma, digamma, trigamma, the Tricomi function U(a, 1; x) and its
scaled form Γ(a)U(a, 1; x), Hermite polynomials and normalized Hermite
functions, and the Macdonald function K0. Everything is double precision and
pure; the array routines are vectorized with numpy.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError, DomainError, PoleError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.57721566490153286061

_EPS = np.finfo(float).eps

# Stirling series for ln Γ, coefficients of y^-1, y^-3, ...
_STIRLING = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)

# B_2k / 2k, coefficients of y^-2, y^-4, ... in ψ(y) - ln y + 1/2y
_PSI_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)

# B_2k, coefficients of y^-3, y^-5, ... in ψ'(y) - 1/y - 1/2y^2
_TRIGAMMA_SERIES = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)

# window of the V(u, s) integrand: drop below the peak beyond -ln(rel_tol), left cut for the analytic tail
_WINDOW_MARGIN = 17.4
_TAIL_CUT = 1e-6
_CHUNK = 2048
_MAX_NODES = 20000
# below this Re u the 1/u pole is split off by one upward recurrence step
_SMALL_U = 0.25


@dataclass(frozen=True)
class SpecFunAccuracy:
    """Accuracy controls for the special-function layer.

    Attributes:
        rel_tol: Relative tolerance targeted by series evaluations. Also sets
            how far below its peak the Γ(a)U(a,1;x) integrand is truncated.
        max_terms: Hard cap on series length.
        crossover_x: Argument separating the log series of U(a,1;x) from its
            asymptotic series.
    """

    rel_tol: float = 1e-12
    max_terms: int = 500
    crossover_x: float = 30.0

    def __post_init__(self):
        if not 0.0 < self.rel_tol <= 1e-6:
            raise ConfigError(f"rel_tol must lie in (0, 1e-6], got {self.rel_tol}")
        if self.max_terms < 64:
            raise ConfigError(f"max_terms must be at least 64, got {self.max_terms}")
        if self.crossover_x <= 0:
            raise ConfigError(f"crossover_x must be positive, got {self.crossover_x}")

    @property
    def window_drop(self) -> float:
        """Log-drop below the peak at which the kernel quadrature window stops."""
        return _WINDOW_MARGIN - math.log(self.rel_tol)


DEFAULT_ACCURACY = SpecFunAccuracy()


def _as_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    dtype = complex if np.iscomplexobj(arr) else float
    return np.atleast_1d(arr).astype(dtype), arr.ndim == 0


def _unwrap(values: np.ndarray, scalar: bool, shape):
    if scalar:
        return values[0].item()
    return values.reshape(shape)


def _check_poles(arr: np.ndarray, name: str):
    re = np.real(arr)
    bad = (np.imag(arr) == 0) & (re <= 0) & (re == np.round(re))
    if np.any(bad):
        raise PoleError(f"{name} has a pole at {re[bad][0]}")


def log_gamma(x: float) -> tuple[float, int]:
    """ln|Γ(x)| and the sign of Γ(x) for real x.

    Raises:
        PoleError: x is a non-positive integer.
    """
    x = float(x)
    if x <= 0 and x == math.floor(x):
        raise PoleError(f"Γ has a pole at {x}")
    if x < 0.5:
        # Γ(x)Γ(1-x) = π / sin(πx)
        s = math.sin(math.pi * x)
        value, _ = log_gamma(1.0 - x)
        return math.log(math.pi) - math.log(abs(s)) - value, (1 if s > 0 else -1)

    y = x
    prod = 1.0
    while y < 10.0:
        prod *= y
        y += 1.0
    inv = 1.0 / y
    inv2 = inv * inv
    series = 0.0
    power = inv
    for c in _STIRLING:
        series += c * power
        power *= inv2
    value = (y - 0.5) * math.log(y) - y + 0.5 * math.log(2 * math.pi) + series - math.log(prod)
    return value, 1


def digamma(x):
    """ψ(x), vectorized; complex arguments allowed.

    Reflection for Re x < 1/2, upward recurrence to Re x >= 8, then the
    asymptotic expansion.

    Raises:
        PoleError: x contains a non-positive integer.
    """
    arr, scalar = _as_array(x)
    _check_poles(arr, "ψ")
    result = np.zeros_like(arr)

    reflect = np.real(arr) < 0.5
    if np.any(reflect):
        safe = np.where(reflect, arr, 0.25)
        result = result - np.where(reflect, np.pi / np.tan(np.pi * safe), 0.0)
    y = np.where(reflect, 1.0 - arr, arr)

    for _ in range(8):
        low = np.real(y) < 8.0
        if not np.any(low):
            break
        result = result - np.where(low, 1.0 / y, 0.0)
        y = np.where(low, y + 1.0, y)

    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    power = inv2
    for c in _PSI_SERIES:
        series = series + c * power
        power = power * inv2
    result = result + np.log(y) - 0.5 / y - series
    return _unwrap(result, scalar, np.shape(x))


def trigamma(x):
    """ψ'(x), vectorized; complex arguments allowed."""
    arr, scalar = _as_array(x)
    _check_poles(arr, "ψ'")
    result = np.zeros_like(arr)
    sign = np.ones(arr.shape)

    reflect = np.real(arr) < 0.5
    if np.any(reflect):
        safe = np.where(reflect, arr, 0.25)
        result = result + np.where(reflect, (np.pi / np.sin(np.pi * safe)) ** 2, 0.0)
        sign = np.where(reflect, -1.0, 1.0)
    y = np.where(reflect, 1.0 - arr, arr)

    lifted = np.zeros_like(arr)
    for _ in range(10):
        low = np.real(y) < 10.0
        if not np.any(low):
            break
        lifted = lifted + np.where(low, 1.0 / (y * y), 0.0)
        y = np.where(low, y + 1.0, y)

    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    power = inv2 * inv
    for c in _TRIGAMMA_SERIES:
        series = series + c * power
        power = power * inv2
    core = lifted + inv + 0.5 * inv2 + series
    result = result + sign * core
    return _unwrap(result, scalar, np.shape(x))


def hermite_h(l: int, x):
    """Physicists' Hermite polynomial H_l(x) by the three-term recurrence."""
    if l < 0:
        raise DomainError(f"Hermite degree must be non-negative, got {l}")
    arr = np.asarray(x, dtype=float)
    h_prev = np.ones_like(arr)
    if l == 0:
        return h_prev if arr.ndim else float(h_prev)
    h = 2.0 * arr
    for k in range(1, l):
        h_prev, h = h, 2.0 * arr * h - 2.0 * k * h_prev
    return h if arr.ndim else float(h)


def hermite_functions(l_max: int, t) -> np.ndarray:
    """Normalized Hermite functions h_0..h_{l_max} at t.

    h_l(t) = (2^l l! √π)^{-1/2} H_l(t) e^{-t²/2}, computed with a rescaled
    recurrence so that large l and large |t| neither overflow nor flush to zero.

    Returns:
        Array of shape (l_max + 1,) + shape(t).
    """
    if l_max < 0:
        raise DomainError(f"Hermite degree must be non-negative, got {l_max}")
    t = np.asarray(t, dtype=float)
    out = np.empty((l_max + 1,) + t.shape)
    log_scale = -0.5 * t * t - 0.25 * math.log(math.pi)
    h_prev = np.zeros_like(t)
    h = np.ones_like(t)
    out[0] = np.exp(log_scale)
    for l in range(l_max):
        h_next = math.sqrt(2.0 / (l + 1)) * t * h - math.sqrt(l / (l + 1)) * h_prev
        h_prev, h = h, h_next
        big = np.abs(h) > 1e150
        if np.any(big):
            factor = np.where(big, 1e-150, 1.0)
            h = h * factor
            h_prev = h_prev * factor
            log_scale = log_scale + np.where(big, 150.0 * math.log(10.0), 0.0)
        out[l + 1] = h * np.exp(log_scale)
    return out


def hermite_function(l: int, t):
    """Normalized Hermite function h_l(t)."""
    return hermite_functions(l, t)[l]


def bessel_k0(x: float) -> float:
    """Macdonald function K0(x) for x > 0.

    Power series for x <= 2, trapezoid rule on ∫_0^∞ exp(-x cosh t) dt above.
    """
    x = float(x)
    if x <= 0:
        raise DomainError(f"K0 requires x > 0, got {x}")
    if x <= 2.0:
        q = 0.25 * x * x
        term = 1.0
        i0 = 1.0
        series = 0.0
        harmonic = 0.0
        for k in range(1, 60):
            term *= q / (k * k)
            harmonic += 1.0 / k
            i0 += term
            series += term * harmonic
            if term < 1e-17 * i0:
                break
        return -(math.log(0.5 * x) + EULER_GAMMA) * i0 + series

    h = min(0.2, math.pi**2 / (x + 45.0))
    t_max = math.acosh(1.0 + 45.0 / x)
    t = np.arange(int(math.ceil(t_max / h)) + 1) * h
    f = np.exp(-x * np.cosh(t))
    return float(h * (0.5 * f[0] + f[1:].sum()))


def _softplus(y):
    return np.logaddexp(0.0, y)


def _v_integral(u: np.ndarray, s: np.ndarray, derivative: bool, drop: float):
    """V(u, s) = ∫ exp(-s e^y - u softplus(-y)) dy for Re u > 0 (and ∂V/∂u).

    Each element gets its own trapezoid grid, so a batch returns exactly what
    the elements return one at a time.
    """
    ur = np.real(u)
    t_star = 2.0 * ur / (s + np.sqrt(s * s + 4.0 * s * ur))
    y_star = np.log(t_star)
    sigma = 1.0 / np.sqrt(s * t_star + ur * t_star / (1.0 + t_star) ** 2)
    phi_star = -s * t_star - ur * _softplus(-y_star)

    def real_phi(y):
        return -s * np.exp(y) - ur * _softplus(-y)

    width_r = sigma.copy()
    for _ in range(80):
        done = real_phi(y_star + width_r) < phi_star - drop
        if np.all(done):
            break
        width_r = np.where(done, width_r, 2.0 * width_r)
    else:
        raise ConvergenceError("right integration window for Γ(u)U(u,1;s) not found")

    y_cut = np.log(_TAIL_CUT / (np.abs(u) + s))
    width_l = sigma.copy()
    for _ in range(80):
        yl = y_star - width_l
        done = (yl <= y_cut) | (real_phi(yl) < phi_star - drop)
        if np.all(done):
            break
        width_l = np.where(done, width_l, 2.0 * width_l)
    else:
        raise ConvergenceError("left integration window for Γ(u)U(u,1;s) not found")

    y_left = np.maximum(y_star - width_l, y_cut)
    span = y_star + width_r - y_left
    nodes = np.ceil(span / np.minimum(0.1, sigma / 3.0)).astype(int) + 1
    n_max = int(nodes.max())
    if n_max > _MAX_NODES:
        raise ConvergenceError(f"Γ(u)U(u,1;s) quadrature needs {n_max} nodes")
    h = span / (nodes - 1)

    steps = np.arange(n_max)[None, :]
    inside = steps < nodes[:, None]
    y = y_left[:, None] + h[:, None] * np.where(inside, steps, 0)
    sp = _softplus(-y)
    f = np.where(inside, np.exp(-s[:, None] * np.exp(y) - u[:, None] * sp - phi_star[:, None]), 0.0)
    rows = np.arange(len(nodes))
    last = nodes - 1
    body = h * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[rows, last]))

    a = y_left
    e1 = np.exp(a)
    fa = f[:, 0]
    dphi_a = -s * e1 + u / (1.0 + e1)
    em = (h * h / 12.0) * dphi_a * fa

    use_tail = (np.abs(u) + s) * e1 <= 1e-3
    c1 = -(s + u)
    c2 = 0.5 * ((s + u) ** 2 + u)
    base = np.where(use_tail, np.exp(u * a - phi_star), 0.0)
    tail = base * (1.0 / u + c1 * e1 / (u + 1.0) + c2 * e1 * e1 / (u + 2.0))

    scale = np.exp(phi_star)
    value = (body + em + tail) * scale
    if not derivative:
        return value, None

    fd = -sp * f
    body_d = h * (fd.sum(axis=1) - 0.5 * (fd[:, 0] + fd[rows, last]))
    em_d = (h * h / 12.0) * (fa / (1.0 + e1) - dphi_a * sp[:, 0] * fa)
    tail_d = base * (
        (a / u - 1.0 / u**2)
        + e1 * (-1.0 / (u + 1.0) + c1 * (a / (u + 1.0) - 1.0 / (u + 1.0) ** 2))
        + e1 * e1 * ((s + u + 0.5) / (u + 2.0) + c2 * (a / (u + 2.0) - 1.0 / (u + 2.0) ** 2))
    )
    return value, (body_d + em_d + tail_d) * scale


def _v_chunked(u: np.ndarray, s: np.ndarray, derivative: bool, drop: float):
    value = np.empty(u.shape, dtype=u.dtype)
    dvalue = np.empty(u.shape, dtype=u.dtype) if derivative else None
    for start in range(0, u.size, _CHUNK):
        part = slice(start, start + _CHUNK)
        v, dv = _v_integral(u[part], s[part], derivative, drop)
        value[part] = v
        if derivative:
            dvalue[part] = dv
    return value, dvalue


def _v_positive(u: np.ndarray, s: np.ndarray, derivative: bool, drop: float):
    """V for Re u > 0; small Re u goes through uV(u) = (2u+1+s)V(u+1) - (u+1)V(u+2)."""
    small = np.real(u) < _SMALL_U
    if not np.any(small):
        return _v_chunked(u, s, derivative, drop)

    value = np.empty(u.shape, dtype=u.dtype)
    dvalue = np.empty(u.shape, dtype=u.dtype) if derivative else None
    if np.any(~small):
        v, dv = _v_chunked(u[~small], s[~small], derivative, drop)
        value[~small] = v
        if derivative:
            dvalue[~small] = dv

    us, ss = u[small], s[small]
    v1, dv1 = _v_chunked(us + 1.0, ss, derivative, drop)
    v2, dv2 = _v_chunked(us + 2.0, ss, derivative, drop)
    # numerator tends to U(0,1;s) = 1 as u -> 0
    v = ((2.0 * us + 1.0 + ss) * v1 - (us + 1.0) * v2) / us
    value[small] = v
    if derivative:
        dnum = 2.0 * v1 + (2.0 * us + 1.0 + ss) * dv1 - v2 - (us + 1.0) * dv2
        dvalue[small] = (dnum - v) / us
    return value, dvalue


def gamma_tricomi_u_1(a, x, derivative: bool = False, accuracy: SpecFunAccuracy | None = None):
    """Scaled kernel V(a, x) = Γ(a)·U(a, 1; x), vectorized over a and x.

    Re a > 0 uses the integral representation on a saddle-centred trapezoid
    grid; other a are reached from a + k in (0, 1] by the three-term
    recurrence in a. Near a pole the 1/a part is split off by one upward
    step, so a close to a non-positive integer needs no extra nodes. Complex
    a is allowed.

    Args:
        a: First parameter (array-like, real or complex).
        x: Argument, x > 0.
        derivative: Also return ∂V/∂a.
        accuracy: Sets the truncation of the integrand window.

    Returns:
        V, or (V, ∂V/∂a) when derivative is set.

    Raises:
        DomainError: x <= 0.
        PoleError: a is a non-positive integer.
    """
    a_arr, x_arr = np.broadcast_arrays(np.asarray(a), np.asarray(x, dtype=float))
    shape = a_arr.shape
    dtype = complex if np.iscomplexobj(a_arr) else float
    u = np.atleast_1d(a_arr).astype(dtype).ravel()
    s = np.atleast_1d(x_arr).astype(float).ravel()
    if np.any(s <= 0):
        raise DomainError("Γ(a)U(a,1;x) requires x > 0")
    _check_poles(u, "Γ(a)U(a,1;x)")
    drop = (accuracy or DEFAULT_ACCURACY).window_drop

    re = np.real(u)
    shift = np.where(re > 0, 0, np.floor(-re) + 1).astype(int)
    value = np.empty(u.shape, dtype=dtype)
    dvalue = np.empty(u.shape, dtype=dtype) if derivative else None

    direct = shift == 0
    if np.any(direct):
        v, dv = _v_positive(u[direct], s[direct], derivative, drop)
        value[direct] = v
        if derivative:
            dvalue[direct] = dv

    for k in np.unique(shift[~direct]):
        idx = shift == k
        a0 = u[idx] + k
        xs = s[idx]
        v_hi, dv_hi = _v_positive(a0 + 1.0, xs, derivative, drop)
        v_lo, dv_lo = _v_positive(a0, xs, derivative, drop)
        for _ in range(k):
            # (a-1)V(a-1) = (2a-1+x)V(a) - aV(a+1)
            v_new = ((2.0 * a0 - 1.0 + xs) * v_lo - a0 * v_hi) / (a0 - 1.0)
            if derivative:
                dv_new = (
                    2.0 * v_lo + (2.0 * a0 - 1.0 + xs) * dv_lo - v_hi - a0 * dv_hi - v_new
                ) / (a0 - 1.0)
                dv_hi, dv_lo = dv_lo, dv_new
            v_hi, v_lo = v_lo, v_new
            a0 = a0 - 1.0
        value[idx] = v_lo
        if derivative:
            dvalue[idx] = dv_lo

    scalar = np.ndim(a_arr) == 0
    out = _unwrap(value, scalar, shape)
    if derivative:
        return out, _unwrap(dvalue, scalar, shape)
    return out


def _u_from_integral(a: float, x: float) -> float:
    log_g, sign = log_gamma(a)
    return sign * math.exp(-log_g) * float(gamma_tricomi_u_1(a, x))


def _u_polynomial(m: int, x: float) -> float:
    # U(-m, 1, x) = (-1)^m m! L_m(x)
    l_prev, l_cur = 1.0, 1.0 - x
    if m == 0:
        return 1.0
    for k in range(1, m):
        l_prev, l_cur = l_cur, ((2 * k + 1 - x) * l_cur - k * l_prev) / (k + 1)
    return (-1) ** m * math.factorial(m) * l_cur


def _u_log_series(a: float, x: float, acc: SpecFunAccuracy) -> float | None:
    log_x = math.log(x)
    coeff = 1.0
    psi_a = digamma(a)
    psi_1 = -EULER_GAMMA
    total = 0.0
    largest = 0.0
    for k in range(acc.max_terms):
        term = coeff * (log_x + psi_a - 2.0 * psi_1)
        total += term
        largest = max(largest, abs(term))
        if k > x + abs(a) and abs(term) <= 1e-3 * acc.rel_tol * abs(total):
            break
        coeff *= (a + k) * x / (k + 1) ** 2
        psi_a += 1.0 / (a + k)
        psi_1 += 1.0 / (k + 1)
    else:
        return None
    if 64 * _EPS * largest > acc.rel_tol * abs(total):
        return None
    log_g, sign = log_gamma(a)
    return -sign * math.exp(-log_g) * total


def _u_asymptotic(a: float, x: float, acc: SpecFunAccuracy) -> float | None:
    term = 1.0
    total = 1.0
    for k in range(acc.max_terms):
        nxt = term * (a + k) ** 2 / ((k + 1) * (-x))
        if abs(nxt) >= abs(term):
            break
        term = nxt
        total += term
        if abs(term) <= acc.rel_tol * abs(total):
            return total * x ** (-a)
    if abs(term) <= acc.rel_tol * abs(total):
        return total * x ** (-a)
    return None


def tricomi_u_1(a: float, x: float, accuracy: SpecFunAccuracy | None = None, method: str = "auto") -> float:
    """Tricomi confluent hypergeometric function U(a, 1; x) for real a, x > 0.

    Below crossover_x the logarithmic Kummer series is used, above it the
    asymptotic series truncated at its smallest term. When the selected series
    misses rel_tol (cancellation near the seam) the integral representation
    of Γ(a)U(a,1;x) takes over.

    Args:
        a: First parameter; non-positive integers give the Laguerre polynomial case.
        x: Argument, x > 0.
        accuracy: Series controls.
        method: "auto", "series", "asymptotic" or "integral".

    Raises:
        DomainError: x <= 0 or unknown method.
        ConvergenceError: a forced series regime misses the target.
    """
    acc = accuracy or DEFAULT_ACCURACY
    a = float(a)
    x = float(x)
    if x <= 0:
        raise DomainError(f"U(a,1;x) requires x > 0, got {x}")
    if method not in ("auto", "series", "asymptotic", "integral"):
        raise DomainError(f"unknown U evaluation method: {method}")
    if a <= 0 and a == math.floor(a):
        return _u_polynomial(int(-a), x)
    if method == "integral":
        return _u_from_integral(a, x)

    if method == "asymptotic" or (method == "auto" and x >= acc.crossover_x):
        value = _u_asymptotic(a, x, acc)
        if value is None and method == "asymptotic":
            raise ConvergenceError(f"asymptotic U series missed rel_tol at a={a}, x={x}")
    else:
        value = _u_log_series(a, x, acc)
        if value is None and method == "series":
            raise ConvergenceError(f"log series for U missed rel_tol at a={a}, x={x}")
    if value is None:
        logger.debug(f"U(a,1;x) at a={a}, x={x}: falling back to the integral representation")
        value = _u_from_integral(a, x)
    return value
