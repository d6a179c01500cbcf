"""Hot numeric kernels, generated per system and JIT-compiled.

Surface systems are turned into straight-line source (values and forward-mode
partials unrolled) and compiled twice: a scalar flavor wrapped with numba
@njit, and a vectorized numpy flavor used as the fallback batch path. Setting
GVFTOOL_PURE_NUMPY=1 (or a missing numba) selects the numpy path everywhere.
Both flavors emit the identical arithmetic, in the identical order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Add, Const, Div, Expr, Mul, Neg, Pow, Sub, Var, parse_expr


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


PURE_NUMPY = _env_flag("GVFTOOL_PURE_NUMPY")

try:
    if PURE_NUMPY:
        raise ImportError("numba disabled by GVFTOOL_PURE_NUMPY")
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False

TERM_HORIZON = 0
TERM_CONVERGED = 1
TERM_HIT = 2
TERM_STALL = 3
TERM_LEFT = 4
TERM_FAIL = 5

TERM_NAMES = {
    TERM_HORIZON: "horizon_reached",
    TERM_CONVERGED: "converged_to_path",
    TERM_HIT: "hit_surface",
    TERM_STALL: "singular_stall",
    TERM_LEFT: "left_domain",
    TERM_FAIL: "step_failure",
}


# --- expression -> straight-line source ----------------------------------

class _Ssa:
    """Emits SSA-style lines; operands are ('lit', float) or ('ref', name)."""

    def __init__(self):
        self.lines: list[str] = []
        self.counter = 0

    def fresh(self) -> str:
        self.counter += 1
        return f"t{self.counter}"

    @staticmethod
    def text(op) -> str:
        if op[0] == "lit":
            return repr(float(op[1]))
        return op[1]

    def assign(self, expr_text: str):
        name = self.fresh()
        self.lines.append(f"{name} = {expr_text}")
        return ("ref", name)

    def add(self, a, b):
        if a[0] == "lit" and b[0] == "lit":
            return ("lit", a[1] + b[1])
        if a == ("lit", 0.0):
            return b
        if b == ("lit", 0.0):
            return a
        return self.assign(f"{self.text(a)} + {self.text(b)}")

    def sub(self, a, b):
        if a[0] == "lit" and b[0] == "lit":
            return ("lit", a[1] - b[1])
        if b == ("lit", 0.0):
            return a
        if a == ("lit", 0.0):
            return self.neg(b)
        return self.assign(f"{self.text(a)} - {self.text(b)}")

    def neg(self, a):
        if a[0] == "lit":
            return ("lit", -a[1])
        return self.assign(f"-{self.text(a)}")

    def mul(self, a, b):
        if a[0] == "lit" and b[0] == "lit":
            return ("lit", a[1] * b[1])
        if a == ("lit", 0.0) or b == ("lit", 0.0):
            return ("lit", 0.0)
        if a == ("lit", 1.0):
            return b
        if b == ("lit", 1.0):
            return a
        return self.assign(f"{self.text(a)} * {self.text(b)}")

    def div(self, a, b):
        # never fold: runtime division faults must stay observable
        return self.assign(f"{self.text(a)} / {self.text(b)}")

    def pow_chain(self, a, k: int):
        if k == 0:
            return ("lit", 1.0)
        if k == 1:
            return a
        if a[0] == "lit":
            return ("lit", float(a[1]) ** k)
        if 2 <= k <= 4:
            sq = self.assign(f"{self.text(a)} * {self.text(a)}")
            if k == 2:
                return sq
            if k == 3:
                return self.assign(f"{self.text(sq)} * {self.text(a)}")
            return self.assign(f"{self.text(sq)} * {self.text(sq)}")
        return self.assign(f"{self.text(a)}**({k})")


def _emit_dual(e: Expr, n: int, ssa: _Ssa, want_grad: bool):
    """Returns (value operand, list of n partial operands or None)."""
    zeros = [("lit", 0.0)] * n

    def rec(node):
        if isinstance(node, Const):
            return ("lit", float(node.value)), list(zeros)
        if isinstance(node, Var):
            d = list(zeros)
            d[node.index] = ("lit", 1.0)
            return ("ref", f"x{node.index}"), d
        if isinstance(node, Neg):
            v, d = rec(node.arg)
            return ssa.neg(v), [ssa.neg(di) for di in d]
        if isinstance(node, Add):
            va, da = rec(node.left)
            vb, db = rec(node.right)
            return ssa.add(va, vb), [ssa.add(x, y) for x, y in zip(da, db)]
        if isinstance(node, Sub):
            va, da = rec(node.left)
            vb, db = rec(node.right)
            return ssa.sub(va, vb), [ssa.sub(x, y) for x, y in zip(da, db)]
        if isinstance(node, Mul):
            va, da = rec(node.left)
            vb, db = rec(node.right)
            v = ssa.mul(va, vb)
            d = [ssa.add(ssa.mul(x, vb), ssa.mul(va, y)) for x, y in zip(da, db)]
            return v, d
        if isinstance(node, Div):
            va, da = rec(node.left)
            vb, db = rec(node.right)
            v = ssa.div(va, vb)
            # (da - v*db) / vb  ==  (da*vb - va*db) / vb^2
            d = [ssa.div(ssa.sub(x, ssa.mul(v, y)), vb) for x, y in zip(da, db)]
            return v, d
        if isinstance(node, Pow):
            va, da = rec(node.base)
            v = ssa.pow_chain(va, node.exponent)
            if all(x == ("lit", 0.0) for x in da):
                return v, list(zeros)
            pw = ssa.pow_chain(va, node.exponent - 1)
            factor = ssa.mul(("lit", float(node.exponent)), pw)
            return v, [ssa.mul(factor, x) for x in da]
        raise TypeError(f"not an expression node: {node!r}")

    v, d = rec(e)
    return (v, d) if want_grad else (v, None)


def _unpack_lines(n: int, flavor: str) -> list[str]:
    if flavor == "scalar":
        return [f"    x{i} = xi[{i}]" for i in range(n)]
    return [f"    x{i} = X[:, {i}]" for i in range(n)]


def _body(ssa: _Ssa) -> list[str]:
    return [f"    {line}" for line in ssa.lines]


def _txt(op) -> str:
    return _Ssa.text(op)


def _wedge_exprs(ssa: _Ssa, grads: list[list], n: int) -> list:
    """Wedge of the stacked gradient operands; sign row-last determinant."""
    if n == 2:
        g = grads[0]
        return [ssa.neg(g[1]), g[0]]
    if n == 3:
        a, b = grads
        return [
            ssa.sub(ssa.mul(a[1], b[2]), ssa.mul(a[2], b[1])),
            ssa.sub(ssa.mul(a[2], b[0]), ssa.mul(a[0], b[2])),
            ssa.sub(ssa.mul(a[0], b[1]), ssa.mul(a[1], b[0])),
        ]
    return None  # generic path handled with runtime determinants


def _gvf_function_sources(
    n: int,
    surface_texts: tuple[str, ...],
    gains: tuple[float, ...],
    normalize: bool,
    dist_expr: str | None,
    flavor: str,
) -> str:
    """Source for err/errgrad/rhs/vval/vrate/distp in one flavor."""
    exprs = [parse_expr(t, n) for t in surface_texts]
    m = len(exprs)
    sfx = "" if flavor == "scalar" else "_b"
    sig_x = "xi" if flavor == "scalar" else "X"
    out = []

    def set_scalar(target: str, op) -> str:
        return f"    {target} = {_txt(op)}"

    # err
    ssa = _Ssa()
    vals = [_emit_dual(e, n, ssa, want_grad=False)[0] for e in exprs]
    lines = [f"def err{sfx}({sig_x}, e):"] + _unpack_lines(n, flavor) + _body(ssa)
    for i, v in enumerate(vals):
        tgt = f"e[{i}]" if flavor == "scalar" else f"e[:, {i}]"
        lines.append(set_scalar(tgt, v))
    out.append("\n".join(lines))

    # errgrad
    ssa = _Ssa()
    duals = [_emit_dual(e, n, ssa, want_grad=True) for e in exprs]
    lines = [f"def errgrad{sfx}({sig_x}, e, G):"] + _unpack_lines(n, flavor) + _body(ssa)
    for i, (v, d) in enumerate(duals):
        tgt = f"e[{i}]" if flavor == "scalar" else f"e[:, {i}]"
        lines.append(set_scalar(tgt, v))
        for j in range(n):
            gt = f"G[{i}, {j}]" if flavor == "scalar" else f"G[:, {i}, {j}]"
            lines.append(set_scalar(gt, d[j]))
    out.append("\n".join(lines))

    # rhs: chi = wedge(grads) - sum_i k_i e_i grad_i, optionally normalized
    ssa = _Ssa()
    duals = [_emit_dual(e, n, ssa, want_grad=True) for e in exprs]
    evals = [v for v, _ in duals]
    grads = [d for _, d in duals]
    lines = [f"def rhs{sfx}({sig_x}, f):"] + _unpack_lines(n, flavor)
    if m == n - 1 and n <= 3:
        w = _wedge_exprs(ssa, grads, n)
        chi = []
        for j in range(n):
            corr = ("lit", 0.0)
            for i in range(m):
                corr = ssa.add(corr, ssa.mul(ssa.mul(("lit", gains[i]), evals[i]), grads[i][j]))
            chi.append(ssa.sub(w[j], corr))
        if normalize:
            nn = ("lit", 1.0)
            for j in range(n):
                nn = ssa.add(nn, ssa.mul(chi[j], chi[j]))
            chi = [ssa.div(c, nn) for c in chi]
        lines += _body(ssa)
        for j in range(n):
            tgt = f"f[{j}]" if flavor == "scalar" else f"f[:, {j}]"
            lines.append(set_scalar(tgt, chi[j]))
    else:
        # generic wedge by runtime cofactor determinants (n >= 4)
        lines += _body(ssa)
        if flavor == "scalar":
            lines.append(f"    Ga = np.empty(({m}, {n}))")
            for i in range(m):
                for j in range(n):
                    lines.append(f"    Ga[{i}, {j}] = {_txt(grads[i][j])}")
            lines.append(f"    Mi = np.empty(({n - 1}, {n - 1}))")
            lines.append(f"    for j in range({n}):")
            lines.append("        col = 0")
            lines.append(f"        for c in range({n}):")
            lines.append("            if c != j:")
            lines.append(f"                for r in range({m}):")
            lines.append("                    Mi[r, col] = Ga[r, c]")
            lines.append("                col += 1")
            lines.append(f"        sgn_w = 1.0 if ({n} + j + 1) % 2 == 0 else -1.0")
            lines.append("        f[j] = sgn_w * np.linalg.det(Mi)")
            for j in range(n):
                corr = " + ".join(
                    f"{repr(float(gains[i]))} * {_txt(evals[i])} * {_txt(grads[i][j])}"
                    for i in range(m)
                )
                lines.append(f"    f[{j}] = f[{j}] - ({corr})")
            if normalize:
                nn = " + ".join(f"f[{j}] * f[{j}]" for j in range(n))
                lines.append(f"    nn = 1.0 + {nn}")
                for j in range(n):
                    lines.append(f"    f[{j}] = f[{j}] / nn")
        else:
            lines.append("    rows = X.shape[0]")
            lines.append("    for r in range(rows):")
            lines.append("        rhs(X[r], f[r])")
    out.append("\n".join(lines))

    # vval: sum_i k_i e_i^2, accumulated in index order
    ssa = _Ssa()
    vals = [_emit_dual(e, n, ssa, want_grad=False)[0] for e in exprs]
    acc = ("lit", 0.0)
    for i in range(m):
        acc = ssa.add(acc, ssa.mul(("lit", gains[i]), ssa.mul(vals[i], vals[i])))
    if flavor == "scalar":
        lines = [f"def vval(xi):"] + _unpack_lines(n, flavor) + _body(ssa)
        lines.append(f"    return {_txt(acc)}")
    else:
        lines = [f"def vval_b(X, out):"] + _unpack_lines(n, flavor) + _body(ssa)
        lines.append(f"    out[:] = {_txt(acc)}")
    out.append("\n".join(lines))

    # vrate: -2 * || sum_i k_i e_i grad_i ||^2
    ssa = _Ssa()
    duals = [_emit_dual(e, n, ssa, want_grad=True) for e in exprs]
    comps = []
    for j in range(n):
        lj = ("lit", 0.0)
        for i in range(m):
            lj = ssa.add(lj, ssa.mul(ssa.mul(("lit", gains[i]), duals[i][0]), duals[i][1][j]))
        comps.append(lj)
    acc = ("lit", 0.0)
    for j in range(n):
        acc = ssa.add(acc, ssa.mul(comps[j], comps[j]))
    acc = ssa.mul(("lit", -2.0), acc)
    if flavor == "scalar":
        lines = [f"def vrate(xi):"] + _unpack_lines(n, flavor) + _body(ssa)
        lines.append(f"    return {_txt(acc)}")
    else:
        lines = [f"def vrate_b(X, out):"] + _unpack_lines(n, flavor) + _body(ssa)
        lines.append(f"    out[:] = {_txt(acc)}")
    out.append("\n".join(lines))

    # distp: analytic expression if given, Gauss-Newton estimate otherwise
    if dist_expr is not None:
        expr = dist_expr
        for i in reversed(range(n)):  # reversed so x10 is not clobbered by x1
            expr = expr  # placeholder, substitution below uses x{i} names directly
        if flavor == "scalar":
            lines = ["def distp(xi):"] + _unpack_lines(n, flavor)
            lines.append(f"    return {dist_expr}")
        else:
            lines = ["def distp_b(X, out):"] + _unpack_lines(n, flavor)
            lines.append(f"    out[:] = {dist_expr}")
        out.append("\n".join(lines))
    else:
        ssa = _Ssa()
        duals = [_emit_dual(e, n, ssa, want_grad=True) for e in exprs]
        lines = [f"def distp{sfx}({sig_x}{'' if flavor == 'scalar' else ', out'}):"]
        lines += _unpack_lines(n, flavor) + _body(ssa)
        e0, g0 = duals[0]
        if m == 1:
            den = " + ".join(f"{_txt(g0[j])} * {_txt(g0[j])}" for j in range(n))
            lines.append(f"    den = {den}")
            if flavor == "scalar":
                lines.append("    if den <= 1e-300:")
                lines.append("        return np.inf")
                lines.append(f"    return np.abs({_txt(e0)}) / np.sqrt(den)")
            else:
                lines.append(
                    f"    out[:] = np.where(den <= 1e-300, np.inf,"
                    f" np.abs({_txt(e0)}) / np.sqrt(np.where(den <= 1e-300, 1.0, den)))"
                )
        else:
            # solve (G G^T) c = e, distance = ||G^T c||
            if flavor == "scalar":
                lines.append(f"    Ga = np.empty(({m}, {n}))")
                lines.append(f"    ee = np.empty({m})")
                for i, (vi, di) in enumerate(duals):
                    lines.append(f"    ee[{i}] = {_txt(vi)}")
                    for j in range(n):
                        lines.append(f"    Ga[{i}, {j}] = {_txt(di[j])}")
                lines.append("    A = Ga @ Ga.T")
                lines.append("    if np.abs(np.linalg.det(A)) <= 1e-300:")
                lines.append("        return np.inf")
                lines.append("    c = np.linalg.solve(A, ee)")
                lines.append("    w = Ga.T @ c")
                lines.append("    s = 0.0")
                lines.append(f"    for j in range({n}):")
                lines.append("        s += w[j] * w[j]")
                lines.append("    return np.sqrt(s)")
            else:
                lines.append("    rows = X.shape[0]")
                lines.append("    for r in range(rows):")
                lines.append("        out[r] = distp(X[r])")
        out.append("\n".join(lines))

    return "\n\n\n".join(out)


_DRIVER_SRC = '''
def rk4_into(x, h, sgn, k1, k2, k3, k4, xt, xn, k1_ready):
    n = x.shape[0]
    if not k1_ready:
        rhs(x, k1)
    for i in range(n):
        xt[i] = x[i] + 0.5 * h * sgn * k1[i]
    rhs(xt, k2)
    for i in range(n):
        xt[i] = x[i] + 0.5 * h * sgn * k2[i]
    rhs(xt, k3)
    for i in range(n):
        xt[i] = x[i] + h * sgn * k3[i]
    rhs(xt, k4)
    for i in range(n):
        xn[i] = x[i] + (h * sgn / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


def simulate(x, h, sgn, max_steps, record_stride, rec_t, rec_x, rec_v,
             conv_dist, conv_v, conv_hold, stall_tol, stop_level,
             box_lo, box_hi, punct, punct_r):
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xt = np.empty(n)
    xn = np.empty(n)
    xp = np.empty(n)
    v = vval(x)
    d = distp(x)
    vmax = v
    dvmax = -np.inf
    dmin = d
    nrec = 0
    if record_stride > 0:
        rec_t[0] = 0.0
        rec_v[0] = v
        for i in range(n):
            rec_x[0, i] = x[i]
        nrec = 1
    term = TERM_HORIZON
    t = 0.0
    hold = 0
    step = 0
    while step < max_steps:
        rhs(x, k1)
        sp = 0.0
        for i in range(n):
            sp += k1[i] * k1[i]
        if np.sqrt(sp) <= stall_tol:
            term = TERM_STALL
            break
        for i in range(n):
            xp[i] = x[i]
        rk4_into(x, h, sgn, k1, k2, k3, k4, xt, xn, True)
        step += 1
        t = step * h
        for i in range(n):
            x[i] = xn[i]
        bad = False
        for i in range(n):
            if not (x[i] == x[i]):
                bad = True
        if bad:
            term = TERM_FAIL
            break
        v_new = vval(x)
        if stop_level >= 0.0 and v >= stop_level and v_new < stop_level:
            s_lo = 0.0
            s_hi = h
            for _ in range(64):
                s_mid = 0.5 * (s_lo + s_hi)
                rk4_into(xp, s_mid, sgn, k1, k2, k3, k4, xt, xn, False)
                vm = vval(xn)
                if vm >= stop_level:
                    s_lo = s_mid
                else:
                    s_hi = s_mid
            for i in range(n):
                x[i] = xn[i]
            t = (step - 1) * h + 0.5 * (s_lo + s_hi)
            term = TERM_HIT
            break
        left = False
        for i in range(n):
            if x[i] < box_lo[i] or x[i] > box_hi[i]:
                left = True
        if punct_r > 0.0:
            for p in range(punct.shape[0]):
                dd = 0.0
                for i in range(n):
                    dd += (x[i] - punct[p, i]) * (x[i] - punct[p, i])
                if dd <= punct_r * punct_r:
                    left = True
        if left:
            term = TERM_LEFT
            break
        dv = v_new - v
        if dv > dvmax:
            dvmax = dv
        v = v_new
        if v > vmax:
            vmax = v
        d = distp(x)
        if d < dmin:
            dmin = d
        if record_stride > 0 and step % record_stride == 0 and nrec < rec_t.shape[0]:
            rec_t[nrec] = t
            rec_v[nrec] = v
            for i in range(n):
                rec_x[nrec, i] = x[i]
            nrec += 1
        if conv_dist > 0.0 and d <= conv_dist and v <= conv_v:
            hold += 1
            if hold >= conv_hold:
                term = TERM_CONVERGED
                break
        else:
            hold = 0
    v_fin = vval(x)
    if record_stride > 0 and nrec < rec_t.shape[0]:
        if nrec == 0 or rec_t[nrec - 1] != t:
            rec_t[nrec] = t
            rec_v[nrec] = v_fin
            for i in range(n):
                rec_x[nrec, i] = x[i]
            nrec += 1
    return term, nrec, t, v_fin, vmax, dvmax, dmin


def simulate_batch(X, h, sgn, max_steps, conv_dist, conv_v, conv_hold,
                   stall_tol, box_lo, box_hi, punct, punct_r,
                   term, t_end, v_end, vmax, dvmax, dmin):
    rows = X.shape[0]
    n = X.shape[1]
    rt = np.empty(1)
    rv = np.empty(1)
    rx = np.empty((1, n))
    for r in range(rows):
        res = simulate(X[r], h, sgn, max_steps, 0, rt, rx, rv,
                       conv_dist, conv_v, conv_hold, stall_tol, -1.0,
                       box_lo, box_hi, punct, punct_r)
        term[r] = res[0]
        t_end[r] = res[2]
        v_end[r] = res[3]
        vmax[r] = res[4]
        dvmax[r] = res[5]
        dmin[r] = res[6]
'''


@dataclass
class SystemKernels:
    """Compiled evaluators and drivers for one dynamical system."""

    n: int
    m: int
    numba: bool
    source: str
    # scalar flavor (jitted when numba is on); *_py are the plain versions
    rhs: Callable
    vval: Callable
    distp: Callable
    simulate: Callable
    simulate_batch: Callable
    rhs_py: Callable
    vval_py: Callable
    distp_py: Callable
    simulate_py: Callable
    # batch flavor (always plain numpy)
    rhs_b: Callable
    vval_b: Callable
    distp_b: Callable
    err: Callable | None = None
    errgrad: Callable | None = None
    vrate: Callable | None = None
    err_b: Callable | None = None
    vrate_b: Callable | None = None
    no_punctures: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        self.no_punctures = np.zeros((0, self.n))

    def run_batch(self, X, h, sgn, max_steps, conv_dist, conv_v, conv_hold,
                  stall_tol, box_lo, box_hi, punct=None, punct_r=0.0):
        """Dispatch the batch advance: numba per-row loop or numpy lockstep."""
        rows = X.shape[0]
        if punct is None:
            punct = self.no_punctures
        out = tuple(np.empty(rows) for _ in range(5))
        term = np.empty(rows, dtype=np.int64)
        if self.numba:
            self.simulate_batch(X, h, sgn, max_steps, conv_dist, conv_v,
                                conv_hold, stall_tol, box_lo, box_hi,
                                punct, punct_r, term, *out)
            return (term,) + out
        return lockstep_batch(self, X, h, sgn, max_steps, conv_dist, conv_v,
                              conv_hold, stall_tol, box_lo, box_hi, punct, punct_r)


def _materialize(scalar_src: str, batch_src: str, n: int, m: int,
                 use_numba: bool) -> SystemKernels:
    const = {k: v for k, v in globals().items() if k.startswith("TERM_") and isinstance(v, int)}
    ns: dict = {"np": np, **const}
    src = scalar_src + "\n\n" + _DRIVER_SRC + "\n\n" + batch_src
    exec(compile(src, "<gvftool-kernels>", "exec"), ns)
    plain = {name: ns[name] for name in
             ("err", "errgrad", "rhs", "vval", "vrate", "distp",
              "rk4_into", "simulate", "simulate_batch") if name in ns}
    if use_numba:
        for name in ("err", "errgrad", "rhs", "vval", "vrate", "distp",
                     "rk4_into", "simulate", "simulate_batch"):
            if name in ns:
                ns[name] = _njit(cache=False, nogil=True)(ns[name])
    return SystemKernels(
        n=n, m=m, numba=use_numba, source=src,
        rhs=ns["rhs"], vval=ns["vval"], distp=ns["distp"],
        simulate=ns["simulate"], simulate_batch=ns["simulate_batch"],
        rhs_py=plain["rhs"], vval_py=plain["vval"], distp_py=plain["distp"],
        simulate_py=plain["simulate"],
        rhs_b=ns.get("rhs_b"), vval_b=ns.get("vval_b"), distp_b=ns.get("distp_b"),
        err=ns.get("err"), errgrad=ns.get("errgrad"), vrate=ns.get("vrate"),
        err_b=ns.get("err_b"), vrate_b=ns.get("vrate_b"),
    )


_CACHE: dict = {}


def gvf_kernels(n: int, surface_texts: tuple[str, ...], gains: tuple[float, ...],
                normalize: bool = False, dist_expr: str | None = None,
                use_numba: bool | None = None) -> SystemKernels:
    """Kernels for chi = wedge(grad e) - sum k_i e_i grad e_i."""
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    key = ("gvf", n, surface_texts, gains, normalize, dist_expr, use_numba)
    if key in _CACHE:
        return _CACHE[key]
    m = len(surface_texts)
    scalar = _gvf_function_sources(n, surface_texts, gains, normalize, dist_expr, "scalar")
    batch = _gvf_function_sources(n, surface_texts, gains, normalize, dist_expr, "batch")
    kern = _materialize(scalar, batch, n, m, use_numba)
    _CACHE[key] = kern
    return kern


def custom_kernels(n: int, scalar_src: str, batch_src: str, tag: str,
                   use_numba: bool | None = None) -> SystemKernels:
    """Kernels from handwritten rhs/vval/distp sources (both flavors)."""
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    key = ("custom", n, tag, use_numba)
    if key in _CACHE:
        return _CACHE[key]
    kern = _materialize(scalar_src, batch_src, n, 0, use_numba)
    _CACHE[key] = kern
    return kern


def lockstep_batch(kern: SystemKernels, X, h, sgn, max_steps, conv_dist, conv_v,
                   conv_hold, stall_tol, box_lo, box_hi, punct, punct_r):
    """Vectorized numpy fallback: advance all rows of X in lockstep.

    Semantics match the scalar driver step for step (same update order, same
    termination tests); finished rows are frozen in place.
    """
    rows, n = X.shape
    term = np.full(rows, -1, dtype=np.int64)
    t_end = np.zeros(rows)
    v = np.empty(rows)
    d = np.empty(rows)
    with np.errstate(all="ignore"):
        kern.vval_b(X, v)
        kern.distp_b(X, d)
        vmax = v.copy()
        dvmax = np.full(rows, -np.inf)
        dmin = d.copy()
        hold = np.zeros(rows, dtype=np.int64)
        K1 = np.empty_like(X)
        K2 = np.empty_like(X)
        K3 = np.empty_like(X)
        K4 = np.empty_like(X)
        XT = np.empty_like(X)
        XN = np.empty_like(X)
        vn = np.empty(rows)
        dn = np.empty(rows)
        for step in range(1, max_steps + 1):
            act = term < 0
            if not act.any():
                break
            kern.rhs_b(X, K1)
            speed2 = np.einsum("ij,ij->i", K1, K1)
            stall = act & (np.sqrt(speed2) <= stall_tol)
            if stall.any():
                term[stall] = TERM_STALL
                t_end[stall] = (step - 1) * h
                act = act & ~stall
                if not act.any():
                    continue
            np.multiply(K1, 0.5 * h * sgn, out=XT)
            XT += X
            kern.rhs_b(XT, K2)
            np.multiply(K2, 0.5 * h * sgn, out=XT)
            XT += X
            kern.rhs_b(XT, K3)
            np.multiply(K3, h * sgn, out=XT)
            XT += X
            kern.rhs_b(XT, K4)
            XN[:] = X + (h * sgn / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
            X[act] = XN[act]
            t = step * h
            t_end[act] = t
            kern.vval_b(X, vn)
            bad = act & (np.isnan(X).any(axis=1) | np.isnan(vn))
            if bad.any():
                term[bad] = TERM_FAIL
                act = act & ~bad
            left = act & ((X < box_lo).any(axis=1) | (X > box_hi).any(axis=1))
            if punct_r > 0.0 and punct.shape[0]:
                for p in range(punct.shape[0]):
                    dd = ((X - punct[p]) ** 2).sum(axis=1)
                    left |= act & (dd <= punct_r * punct_r)
            if left.any():
                term[left] = TERM_LEFT
                act = act & ~left
            if not act.any():
                continue
            dv = vn - v
            dvmax[act] = np.maximum(dvmax[act], dv[act])
            v[act] = vn[act]
            vmax[act] = np.maximum(vmax[act], v[act])
            kern.distp_b(X, dn)
            d[act] = dn[act]
            dmin[act] = np.minimum(dmin[act], d[act])
            if conv_dist > 0.0:
                ok = act & (d <= conv_dist) & (v <= conv_v)
                hold[ok] += 1
                hold[act & ~ok] = 0
                done = ok & (hold >= conv_hold)
                if done.any():
                    term[done] = TERM_CONVERGED
        term[term < 0] = TERM_HORIZON
        v_end = np.empty(rows)
        kern.vval_b(X, v_end)
    return term, t_end, v_end, vmax, dvmax, dmin
