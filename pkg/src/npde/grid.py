"""Uniform grids on a box, total-space evaluation, and CSV serialization.

A grid function stores node values on the closed box [-R, R]^n and carries an
exterior closure that extends it to all of R^n, so integro-differential
operators can see the whole space: node lookups are exact, points inside the
box interpolate multilinearly, and points outside the box evaluate the
closure.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import NpdeError

__all__ = [
    "GridError",
    "GridSpec",
    "ExteriorClosure",
    "constant_closure",
    "power_decay_closure",
    "sign_step_closure",
    "zero_closure",
    "radial_table_closure",
    "derived_closure",
    "GridFunction",
    "sample_function",
    "write_grid_csv",
    "read_grid_csv",
]


class GridError(NpdeError, ValueError):
    """Raised when grid-level contracts are violated."""


def _as_points(x, n: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1 and pts.shape == (n,):
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != n:
        raise GridError(f"expected points of shape (k, {n}), got {pts.shape}")
    return pts


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a uniform node lattice on [-R_box, R_box]^n.

    Parameters
    ----------
    n : int
        Dimension, 1 or 2.
    h : float
        Node spacing.
    R_box : float
        Nominal box radius. The lattice uses m = round(R_box / h) steps per
        half axis, so the covered extent is m * h and the per-axis point
        count 2 m + 1 is odd with the origin a node.
    """

    n: int
    h: float
    R_box: float

    def __post_init__(self):
        if self.n not in (1, 2):
            raise GridError(f"dimension must be 1 or 2, got {self.n}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise GridError(f"spacing must be positive, got {self.h}")
        min_r = 4.0 * math.sqrt(self.n)
        if self.R_box < min_r * (1.0 - 1e-12):
            raise GridError(
                f"R_box = {self.R_box} too small: the box must contain "
                f"B_{{2 sqrt n}} and Q_3 with room, need R_box >= {min_r}"
            )
        if self.m < 2:
            raise GridError("grid must have at least two steps per half axis")

    @property
    def m(self) -> int:
        return int(round(self.R_box / self.h))

    @property
    def extent(self) -> float:
        return self.m * self.h

    @property
    def npts(self) -> int:
        return 2 * self.m + 1

    @property
    def shape(self) -> tuple:
        return (self.npts,) * self.n

    def axis(self) -> np.ndarray:
        return (np.arange(self.npts) - self.m) * self.h

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (npts**n, n), axis-0 fastest last."""
        ax = self.axis()
        if self.n == 1:
            return ax[:, None]
        x1, x2 = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([x1.ravel(), x2.ravel()], axis=1)

    def node_radii(self) -> np.ndarray:
        ax = self.axis()
        if self.n == 1:
            return np.abs(ax)
        return np.hypot(ax[:, None], ax[None, :])

    def index_of(self, x) -> tuple:
        """Indices of the node at coordinate x; rejects non-node points."""
        pt = np.asarray(x, dtype=float).reshape(self.n)
        idx = np.rint(pt / self.h).astype(int) + self.m
        snapped = (idx - self.m) * self.h
        if np.max(np.abs(snapped - pt)) > 1e-9 * max(self.h, 1.0):
            raise GridError(f"{pt.tolist()} is not a grid node (h = {self.h})")
        if np.any(idx < 0) or np.any(idx > 2 * self.m):
            raise GridError(f"{pt.tolist()} lies outside the box")
        return tuple(int(i) for i in idx)

    def interior_margin_mask(self, margin: float) -> np.ndarray:
        """Boolean node mask: max-norm distance to the box boundary >= margin."""
        keep = self.extent - margin + 1e-12 * self.h
        ax_ok = np.abs(self.axis()) <= keep
        if self.n == 1:
            return ax_ok
        return ax_ok[:, None] & ax_ok[None, :]


class ExteriorClosure:
    """Bounded extension of a grid function outside the box.

    Subclass contract: vectorized ``values(pts)``; ``bound(r)`` dominating
    |closure| on {|x| >= r}; ``pair_limit(x, dirs)`` giving
    lim_{r->inf} [cl(x + r theta) + cl(x - r theta)] per direction; and
    ``power_terms()`` listing (coef, p) so that the same pair sum behaves
    like pair_limit + sum coef * r^-p at large radius.
    """

    tag = "abstract"

    def values(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, pts) -> np.ndarray:
        return self.values(np.asarray(pts, dtype=float))

    def bound(self, r: float) -> float:
        raise NotImplementedError

    def pair_limit(self, x: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def power_terms(self) -> list:
        return []

    def params_text(self) -> str:
        return ""

    def check_bound(self, R_box: float, n: int) -> None:
        """Sample the closure on exterior rings and verify the stored bound."""
        radii = R_box * np.array([1.0 + 1e-6, 1.5, 2.0, 5.0, 10.0, 100.0])
        if n == 1:
            dirs = np.array([[1.0], [-1.0]])
        else:
            ang = np.linspace(0.0, 2.0 * np.pi, 32, endpoint=False) + 0.1
            dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n)
        vals = self.values(pts)
        cap = self.bound(R_box)
        if not np.all(np.isfinite(vals)):
            raise GridError(f"exterior closure '{self.tag}' is not finite")
        worst = float(np.max(np.abs(vals)))
        if worst > cap * (1.0 + 1e-9) + 1e-300:
            raise GridError(
                f"exterior closure '{self.tag}' exceeds its bound: "
                f"sampled {worst} > {cap}"
            )


class _Constant(ExteriorClosure):
    tag = "constant"

    def __init__(self, value: float):
        self.value = float(value)
        if not math.isfinite(self.value):
            raise GridError("constant closure must be finite")

    def values(self, pts):
        pts = np.atleast_2d(pts)
        return np.full(pts.shape[0], self.value)

    def bound(self, r):
        return abs(self.value)

    def pair_limit(self, x, dirs):
        return np.full(len(dirs), 2.0 * self.value)

    def params_text(self):
        return f"{self.value:.17g}"


class _Zero(_Constant):
    tag = "zero"

    def __init__(self):
        super().__init__(0.0)

    def params_text(self):
        return ""


class _PowerDecay(ExteriorClosure):
    tag = "power_decay"

    def __init__(self, amplitude: float, exponent: float):
        self.amplitude = float(amplitude)
        self.exponent = float(exponent)
        if self.exponent < 0:
            raise GridError("power_decay exponent must be >= 0 to stay bounded")

    def values(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        r = np.maximum(r, 1e-300)
        return self.amplitude * r ** (-self.exponent)

    def bound(self, r):
        if r <= 0:
            raise GridError("power_decay bound needs r > 0")
        return abs(self.amplitude) * r ** (-self.exponent)

    def pair_limit(self, x, dirs):
        lim = 2.0 * self.amplitude if self.exponent == 0 else 0.0
        return np.full(len(dirs), lim)

    def power_terms(self):
        if self.exponent == 0:
            return []
        return [(2.0 * self.amplitude, self.exponent)]

    def params_text(self):
        return f"{self.amplitude:.17g};{self.exponent:.17g}"


class _SignStep(ExteriorClosure):
    tag = "sign_step"

    def __init__(self, axis: int = 0):
        self.axis = int(axis)
        if self.axis not in (0, 1):
            raise GridError("sign_step axis must be 0 or 1")

    def values(self, pts):
        pts = np.atleast_2d(pts)
        return np.sign(pts[:, self.axis])

    def bound(self, r):
        return 1.0

    def pair_limit(self, x, dirs):
        x = np.asarray(x, dtype=float).reshape(-1)
        d = np.asarray(dirs, dtype=float)[:, self.axis]
        out = np.where(d != 0.0, 0.0, 2.0 * np.sign(x[self.axis]))
        return out

    def params_text(self):
        return f"{self.axis}"


class _RadialTable(ExteriorClosure):
    tag = "table"

    def __init__(self, radii: Sequence[float], table: Sequence[float]):
        self.radii = np.asarray(radii, dtype=float)
        self.table = np.asarray(table, dtype=float)
        if self.radii.ndim != 1 or self.radii.shape != self.table.shape:
            raise GridError("table closure needs matching 1d radii and values")
        if len(self.radii) < 2 or np.any(np.diff(self.radii) <= 0):
            raise GridError("table radii must be strictly increasing")
        if not np.all(np.isfinite(self.table)):
            raise GridError("table values must be finite")

    def values(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        return np.interp(r, self.radii, self.table)

    def bound(self, r):
        return float(np.max(np.abs(self.table)))

    def pair_limit(self, x, dirs):
        return np.full(len(dirs), 2.0 * self.table[-1])

    def params_text(self):
        rs = ";".join(f"{r:.17g}" for r in self.radii)
        vs = ";".join(f"{v:.17g}" for v in self.table)
        return f"{rs}|{vs}"


class _Derived(ExteriorClosure):
    """Closure computed from other data (differences, quotients, shifts).

    Not serializable: it exists so derived grid functions stay total.
    """

    tag = "derived"

    def __init__(self, func: Callable, bound_value: float,
                 pair_limit_func: Callable | None = None,
                 power_terms: list | None = None):
        self._func = func
        self._bound = float(bound_value)
        self._pair_limit = pair_limit_func
        self._power_terms = list(power_terms or [])

    def values(self, pts):
        return np.asarray(self._func(np.atleast_2d(pts)), dtype=float)

    def bound(self, r):
        return self._bound

    def pair_limit(self, x, dirs):
        if self._pair_limit is None:
            return np.zeros(len(dirs))
        return np.asarray(self._pair_limit(x, np.asarray(dirs, dtype=float)))

    def power_terms(self):
        return list(self._power_terms)

    def params_text(self):
        raise GridError("derived closures cannot be serialized")


def constant_closure(value: float) -> ExteriorClosure:
    return _Constant(value)


def power_decay_closure(amplitude: float, exponent: float) -> ExteriorClosure:
    return _PowerDecay(amplitude, exponent)


def sign_step_closure(axis: int = 0) -> ExteriorClosure:
    return _SignStep(axis)


def zero_closure() -> ExteriorClosure:
    return _Zero()


def radial_table_closure(radii, table) -> ExteriorClosure:
    return _RadialTable(radii, table)


def derived_closure(func, bound_value, pair_limit_func=None,
                    power_terms=None) -> ExteriorClosure:
    return _Derived(func, bound_value, pair_limit_func, power_terms)


_CLOSURE_TAGS = {
    "constant": lambda p: _Constant(float(p)),
    "zero": lambda p: _Zero(),
    "power_decay": lambda p: _PowerDecay(*(float(t) for t in p.split(";"))),
    "sign_step": lambda p: _SignStep(int(p)),
    "table": lambda p: _RadialTable(
        [float(t) for t in p.split("|")[0].split(";")],
        [float(t) for t in p.split("|")[1].split(";")],
    ),
}


class GridFunction:
    """Node values on a box lattice plus an exterior closure.

    Immutable by convention: the value array is flagged read-only and all
    transforms return new instances. Evaluation is total on R^n: exact at
    nodes, multilinear inside the box, closure outside.
    """

    def __init__(self, spec: GridSpec, values: np.ndarray,
                 closure: ExteriorClosure, check: bool = True):
        values = np.asarray(values, dtype=float)
        if values.shape != spec.shape:
            raise GridError(
                f"value array shape {values.shape} does not match grid {spec.shape}"
            )
        if check and not np.all(np.isfinite(values)):
            raise GridError("grid function values must be finite")
        self.spec = spec
        self.values = values.copy()
        self.values.setflags(write=False)
        self.closure = closure
        if check:
            closure.check_bound(spec.extent, spec.n)
        self.ext_bound = closure.bound(spec.extent)
        self._extended_cache: dict = {}

    @property
    def n(self) -> int:
        return self.spec.n

    def sup_norm(self) -> float:
        return max(float(np.max(np.abs(self.values))), self.ext_bound)

    def value_at(self, x) -> float:
        idx = self.spec.index_of(x)
        return float(self.values[idx])

    def eval(self, pts) -> np.ndarray:
        """Total evaluation at arbitrary points, shape (k, n) -> (k,)."""
        pts = _as_points(pts, self.n)
        ext = self.spec.extent
        inside = np.all(np.abs(pts) <= ext * (1.0 + 1e-12) + 1e-300, axis=1)
        out = np.empty(pts.shape[0])
        if np.any(inside):
            out[inside] = self._interp(pts[inside])
        if not np.all(inside):
            out[~inside] = self.closure.values(pts[~inside])
        return out

    def _interp(self, pts: np.ndarray) -> np.ndarray:
        spec = self.spec
        t = (pts + spec.extent) / spec.h
        i0 = np.floor(t).astype(int)
        np.clip(i0, 0, spec.npts - 2, out=i0)
        w = t - i0
        if self.n == 1:
            a = self.values[i0[:, 0]]
            b = self.values[i0[:, 0] + 1]
            return a * (1.0 - w[:, 0]) + b * w[:, 0]
        v = self.values
        i, j = i0[:, 0], i0[:, 1]
        wi, wj = w[:, 0], w[:, 1]
        return ((v[i, j] * (1 - wi) + v[i + 1, j] * wi) * (1 - wj)
                + (v[i, j + 1] * (1 - wi) + v[i + 1, j + 1] * wi) * wj)

    def extended(self, pad: int) -> np.ndarray:
        """Node values on the lattice padded by `pad` cells of closure values.

        The result is cached and read-only; index [pad + i] corresponds to
        lattice index i of the base grid.
        """
        pad = int(pad)
        if pad < 0:
            raise GridError("pad must be nonnegative")
        cached = self._extended_cache.get(pad)
        if cached is not None:
            return cached
        spec = self.spec
        P = spec.npts
        ax = (np.arange(P + 2 * pad) - pad - spec.m) * spec.h
        if self.n == 1:
            ext = np.empty(P + 2 * pad)
            ext[pad:pad + P] = self.values
            if pad:
                left = ax[:pad][:, None]
                right = ax[pad + P:][:, None]
                ext[:pad] = self.closure.values(left)
                ext[pad + P:] = self.closure.values(right)
        else:
            ext = np.empty((P + 2 * pad, P + 2 * pad))
            ext[pad:pad + P, pad:pad + P] = self.values
            if pad:
                mask = np.ones(ext.shape, dtype=bool)
                mask[pad:pad + P, pad:pad + P] = False
                ii, jj = np.nonzero(mask)
                pts = np.stack([ax[ii], ax[jj]], axis=1)
                ext[ii, jj] = self.closure.values(pts)
        ext.setflags(write=False)
        self._extended_cache[pad] = ext
        return ext

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.spec, values, self.closure, check=False)

    def shifted_eval(self, offset) -> np.ndarray:
        """Values of x -> u(x + offset) at all nodes (total evaluation)."""
        off = np.asarray(offset, dtype=float).reshape(self.n)
        pts = self.spec.nodes() + off[None, :]
        return self.eval(pts).reshape(self.spec.shape)

    def sub(self, other: "GridFunction") -> "GridFunction":
        """Difference u - v with a derived exterior closure."""
        if other.spec != self.spec:
            raise GridError("grid functions live on different grids")
        a, b = self.closure, other.closure
        cl = derived_closure(
            lambda pts: a.values(pts) - b.values(pts),
            a.bound(self.spec.extent) + b.bound(self.spec.extent),
            lambda x, dirs: a.pair_limit(x, dirs) - b.pair_limit(x, dirs),
            a.power_terms() + [(-c, p) for (c, p) in b.power_terms()],
        )
        return GridFunction(self.spec, self.values - other.values, cl,
                            check=False)


def sample_function(spec: GridSpec, f: Callable, closure: ExteriorClosure,
                    check: bool = True) -> GridFunction:
    """Sample a callable f(points (k, n)) -> (k,) at all nodes."""
    vals = np.asarray(f(spec.nodes()), dtype=float).reshape(spec.shape)
    return GridFunction(spec, vals, closure, check=check)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_grid_csv(u: GridFunction, path_or_buf, provenance: str | None = None):
    spec = u.spec
    buf = io.StringIO()
    if provenance:
        buf.write(f"# provenance: {provenance}\n")
    buf.write(f"# {spec.n},{_fmt(spec.h)},{_fmt(spec.R_box)},"
              f"{u.closure.tag},{u.closure.params_text()}\n")
    if spec.n == 1:
        buf.write("i1,x1,value\n")
        ax = spec.axis()
        for i in range(spec.npts):
            buf.write(f"{i},{_fmt(ax[i])},{_fmt(u.values[i])}\n")
    else:
        buf.write("i1,i2,x1,x2,value\n")
        ax = spec.axis()
        for i in range(spec.npts):
            xi = _fmt(ax[i])
            for j in range(spec.npts):
                buf.write(f"{i},{j},{xi},{_fmt(ax[j])},{_fmt(u.values[i, j])}\n")
    text = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def read_grid_csv(path_or_buf) -> GridFunction:
    if hasattr(path_or_buf, "read"):
        lines = path_or_buf.read().splitlines()
    else:
        with open(path_or_buf) as fh:
            lines = fh.read().splitlines()
    header = None
    rows = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("provenance:"):
                continue
            header = body
            continue
        if line[0].isalpha() or line.startswith("i1"):
            continue
        rows.append(line)
    if header is None:
        raise GridError("missing grid header line '# n,h,R_box,ext_tag,ext_params'")
    parts = header.split(",", 4)
    if len(parts) != 5:
        raise GridError(f"malformed grid header: {header!r}")
    n = int(parts[0])
    h = float(parts[1])
    R_box = float(parts[2])
    tag = parts[3].strip()
    params = parts[4].strip()
    if tag not in _CLOSURE_TAGS:
        raise GridError(f"unknown exterior closure tag {tag!r}")
    closure = _CLOSURE_TAGS[tag](params)
    spec = GridSpec(n=n, h=h, R_box=R_box)
    vals = np.full(spec.shape, np.nan)
    for row in rows:
        fields = row.split(",")
        if n == 1:
            i1 = int(fields[0])
            vals[i1] = float(fields[2])
        else:
            i1, i2 = int(fields[0]), int(fields[1])
            vals[i1, i2] = float(fields[4])
    if np.any(np.isnan(vals)):
        raise GridError("grid CSV does not cover every node")
    return GridFunction(spec, vals, closure)
