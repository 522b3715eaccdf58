"""Cell-perturbed quadratics used as adversarial normalizing-constant instances.

Start from f0(x) = |x|^2 / 2 on R^k, split the cube [-1/sqrt(k), 1/sqrt(k)]^k
into n = m^k cells of side 2l with l = 1/(sqrt(k) m), and on each type-2 cell
add c_tau q((x - v_tau) / l), where q(u) = prod_j p(u_j) and
p(u) = (1 - u^2)^3. q and its first two derivatives vanish on cell faces, so
the pieces glue into a C^2 function whose Hessian stays within [0.5, 1.5]
whenever c_tau <= l^2 / (72 k).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .potentials import TargetPotential

MU, L_SMOOTH = 0.5, 1.5


# ------------------------------------------------------------------ p and q

def _check_unit(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1):
        raise ValueError("p is defined on [-1, 1]")
    return x


def p_value(x):
    x = _check_unit(x)
    return (1 - x * x) ** 3


def p_derivs(x):
    """(p, p', p'') with p' = -6x(1-x^2)^2 and p'' = (1-x^2)(30x^2 - 6)."""
    x = _check_unit(x)
    w = 1 - x * x
    return w**3, -6 * x * w * w, w * (30 * x * x - 6)


def q_value(u):
    u = np.asarray(u, dtype=float)
    return np.prod(p_value(u), axis=-1)


def q_grad(u):
    u = np.asarray(u, dtype=float)
    p, dp, _ = p_derivs(u)
    k = u.shape[-1]
    out = np.empty_like(u)
    for j in range(k):
        others = np.prod(np.delete(p, j, axis=-1), axis=-1) if k > 1 else 1.0
        out[..., j] = dp[..., j] * others
    return out


def q_hessian(u):
    u = np.asarray(u, dtype=float)
    p, dp, d2p = p_derivs(u)
    k = u.shape[-1]
    H = np.empty(u.shape + (k,))
    for i in range(k):
        for j in range(k):
            fac = np.ones(u.shape[:-1])
            for t in range(k):
                if t == i and t == j:
                    fac = fac * d2p[..., t]
                elif t == i or t == j:
                    fac = fac * dp[..., t]
                else:
                    fac = fac * p[..., t]
            H[..., i, j] = fac
    return H


# ------------------------------------------------------------------ instance

def _side(k, n):
    m = round(n ** (1 / k))
    for cand in (m - 1, m, m + 1):
        if cand >= 1 and cand**k == n:
            return cand
    raise ValueError(f"n^(1/k) must be an integer, got n={n}, k={k}")


class HardInstance(TargetPotential):
    """f = f0 + sum over type-2 cells of c_tau q((x - v_tau) / l)."""

    def __init__(self, k: int, n: int, types, c, mode: str = "uniform", meta=None):
        k, n = int(k), int(n)
        if k < 1:
            raise ValueError("k must be >= 1")
        self.m = _side(k, n)
        super().__init__(k, MU, L_SMOOTH)
        self.k, self.n = k, n
        self.l = 1 / (math.sqrt(k) * self.m)
        self.half = 1 / math.sqrt(k)
        types = np.asarray(types, dtype=int).ravel()
        c = np.asarray(c, dtype=float).ravel()
        if types.size != n or c.size != n:
            raise ValueError(f"need {n} cell types and coefficients")
        if np.any((types != 1) & (types != 2)):
            raise ValueError("cell types must be 1 or 2")
        if np.any(c < 0) or np.any(c > self.c_max * (1 + 1e-12)):
            raise ValueError("coefficients must lie in [0, l^2/(72k)]")
        self.types = types
        self.c = c
        self.mode = mode
        self.meta = dict(meta or {})
        self._eff = np.where(types == 2, c, 0.0)

    @property
    def c_max(self) -> float:
        return self.l**2 / (72 * self.k)

    @property
    def n_type2(self) -> int:
        return int(np.sum(self.types == 2))

    def cell_center(self, idx) -> np.ndarray:
        """Center v_tau of the cell with multi-index idx (0-based)."""
        idx = np.asarray(idx)
        return -self.half + (2 * idx + 1) * self.l

    def cell_multi_index(self, flat: int) -> tuple:
        return tuple(int(v) for v in np.unravel_index(flat, (self.m,) * self.k))

    def _locate(self, x):
        """(flat cell index, local coordinate u, inside mask) for each row."""
        x = np.atleast_2d(x)
        t = (x + self.half) / (2 * self.l)
        idx = np.clip(np.ceil(t) - 1, 0, self.m - 1).astype(int)
        inside = np.all(np.abs(x) <= self.half, axis=-1)
        u = np.clip((x - self.cell_center(idx)) / self.l, -1.0, 1.0)
        flat = np.ravel_multi_index(tuple(idx.T), (self.m,) * self.k)
        return flat, u, inside

    def _coef(self, x):
        flat, u, inside = self._locate(x)
        return np.where(inside, self._eff[flat], 0.0), u

    def _value(self, x):
        c, u = self._coef(x)
        out = 0.5 * np.sum(np.atleast_2d(x) ** 2, axis=-1) + c * q_value(u)
        return out[0] if x.ndim == 1 else out

    def _grad(self, x):
        c, u = self._coef(x)
        out = np.atleast_2d(x) + (c / self.l)[:, None] * q_grad(u)
        return out[0] if x.ndim == 1 else out

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        c, u = self._coef(x)
        H = np.eye(self.k) + (c / self.l**2)[:, None, None] * q_hessian(u)
        return H[0] if x.ndim == 1 else H

    # ------------------------------------------------ mass and normalizer
    def cell_decrease(self, flat: int, c: float, nodes: int = 48) -> float:
        """int over the cell of exp(-f0) (1 - exp(-c q)), by tensor Gauss-Legendre."""
        return _cell_decrease(self.k, self.l, self.cell_center(self.cell_multi_index(flat)), c, nodes)

    def log_z(self):
        """Exact log Z up to quadrature error: (2 pi)^{k/2} minus the cell decreases."""
        dec = sum(self.cell_decrease(t, self.c[t]) for t in range(self.n) if self.types[t] == 2)
        return math.log((2 * math.pi) ** (self.k / 2) - dec)

    def describe(self):
        return {"name": "hard_instance", "k": self.k, "n": self.n, "mode": self.mode}

    # ------------------------------------------------ serialization
    def to_dict(self) -> dict:
        return {"k": self.k, "n": self.n, "l": self.l, "mode": self.mode,
                "types": self.types.tolist(), "c": self.c.tolist(), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "HardInstance":
        return cls(data["k"], data["n"], data["types"], data["c"], data.get("mode", "uniform"),
                   data.get("meta"))

    @classmethod
    def from_json(cls, text: str) -> "HardInstance":
        return cls.from_dict(json.loads(text))


def _cell_decrease(k, l, center, c, nodes=48):
    z, w = np.polynomial.legendre.leggauss(nodes)
    grids = np.meshgrid(*([z] * k), indexing="ij")
    u = np.stack([g.ravel() for g in grids], axis=-1)
    wt = np.prod(np.stack(np.meshgrid(*([w] * k), indexing="ij")).reshape(k, -1), axis=0)
    x = center + l * u
    f0 = 0.5 * np.sum(x * x, axis=-1)
    vals = np.exp(-f0) * -np.expm1(-c * q_value(u))
    return float(np.sum(wt * vals) * l**k)


# ---------------------------------------------------------------- generation

def generate(k: int, n: int, types=None, p_type1=None, seed=None, mode: str = "uniform",
             target: str = "all", xtol: float = 1e-15) -> HardInstance:
    """Build an instance from explicit types or i.i.d. types (type 1 w.p. p_type1).

    uniform mode: every type-2 cell gets c = l^2 / (72 k).
    equalized mode: c_tau is chosen so every type-2 cell's mass decrease equals
    the smallest full-strength decrease, taken over all cells (target="all")
    or over the actual type-2 cells only (target="type2").
    """
    k, n = int(k), int(n)
    m = _side(k, n)
    if types is None:
        if p_type1 is None:
            raise ValueError("give explicit types or p_type1")
        if not 0 <= p_type1 <= 1:
            raise ValueError("p_type1 must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        types = np.where(rng.random(n) < p_type1, 1, 2)
    types = np.asarray(types, dtype=int).ravel()
    if types.size != n:
        raise ValueError(f"need {n} cell types, got {types.size}")
    l = 1 / (math.sqrt(k) * m)
    cmax = l**2 / (72 * k)
    meta = {"p_type1": p_type1, "seed": seed, "target": target if mode == "equalized" else None}
    if mode == "uniform":
        return HardInstance(k, n, types, np.full(n, cmax), mode, meta)
    if mode != "equalized":
        raise ValueError(f"unknown mode {mode!r}")
    if target not in ("all", "type2"):
        raise ValueError("target must be 'all' or 'type2'")
    probe = HardInstance(k, n, types, np.full(n, cmax), mode)
    full = np.array([probe.cell_decrease(t, cmax) for t in range(n)])
    pool = full if target == "all" else full[types == 2]
    c = np.full(n, cmax)
    if pool.size == 0:
        return HardInstance(k, n, types, c, mode, meta)
    D = float(pool.min())
    for t in range(n):
        if types[t] != 2:
            continue
        if full[t] <= D:
            c[t] = cmax
            continue
        fn = lambda cc, t=t: probe.cell_decrease(t, cc) - D
        # decrease is increasing in c, zero at c = 0 and >= D at cmax
        assert fn(0.0) < 0 < fn(cmax), "cell decrease is not monotone in c"
        c[t] = brentq(fn, 0.0, cmax, xtol=xtol, rtol=4 * np.finfo(float).eps)
    meta["target_decrease"] = D
    return HardInstance(k, n, types, c, mode, meta)


# ---------------------------------------------------------------- verification

def _sample_points(inst: HardInstance, count, rng):
    k, a, l = inst.k, inst.half, inst.l
    third = count // 3
    interior = rng.uniform(-a, a, size=(third, k))
    faces = rng.uniform(-a, a, size=(third, k))
    ax = rng.integers(0, k, size=third)
    grid = -a + 2 * l * rng.integers(0, inst.m + 1, size=third)
    faces[np.arange(third), ax] = grid
    outside = rng.uniform(-3 * a - 1, 3 * a + 1, size=(count - 2 * third, k))
    return np.concatenate([interior, faces, outside]), faces, ax


def verify_instance(inst: HardInstance, count: int = 10_000, seed: int = 0, tol: float = 1e-9,
                    fd_step: float = 1e-5) -> dict:
    """Hessian eigenvalue range and C^1 / C^2 continuity across cell faces."""
    rng = np.random.default_rng(seed)
    pts, faces, ax = _sample_points(inst, count, rng)
    eig = np.linalg.eigvalsh(inst.hessian(pts))
    lo, hi = float(eig.min()), float(eig.max())
    # one-sided finite differences of the gradient across faces
    e = np.zeros_like(faces)
    e[np.arange(len(faces)), ax] = fd_step
    g0 = inst.grad(faces)
    g_plus, g_minus = inst.grad(faces + e), inst.grad(faces - e)
    grad_jump = float(np.max(np.abs(g0 - 0.5 * (g_plus + g_minus))))
    h_plus = (g_plus - g0) / fd_step
    h_minus = (g0 - g_minus) / fd_step
    hess_jump = float(np.max(np.abs(h_plus - h_minus)))
    f0_grad_gap = float(np.max(np.abs(g0 - faces)))
    ok = (lo >= MU - tol) and (hi <= L_SMOOTH + tol) and f0_grad_gap <= tol
    return {"points": int(count), "min_eig": lo, "max_eig": hi,
            "face_grad_vs_f0": f0_grad_gap, "grad_jump": grad_jump, "hessian_jump": hess_jump,
            "ok": bool(ok)}
