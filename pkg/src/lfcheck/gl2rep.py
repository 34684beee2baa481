"""GL_2(F) elements, generator words, and the module structures they act on.

The central object is Y = S(M_2(F) x F^x), stored as an ``SBFunction`` on the
five-coordinate space (a, b, c, d, y).  Three commuting GL_2-actions live on
it: two "outer" slots acting on the matrix argument by left/right translation,
and a middle slot given on the generators m(a,b) = (a b; 0 1) and
w = (0 -1; 1 0) by a scaling-and-phase formula and a kernel transform.

Also here: the torus-module tags (one_T and the normalization module L, with
twists and the Weyl flag), the embedding eta of one_T into L and its
Weyl-twisted companion, parabolically induced functions in bottom-row
coordinates, and Whittaker data.

Convention notes (load-bearing, fixed by the worked checkpoint computations):

  * the middle-slot kernel transform is applied with phase e(+y<x,z>); the
    opposite sign fails to reproduce the pinned checkpoint values, see
    MID_W_SIGN;
  * the determinant factor in the outer slots is read as y * det(g1) * det(g3);
    SLOT_DET_MODE switches to the literal transcription y * det(g1 g2^T) for
    comparison.
"""

from __future__ import annotations

from fractions import Fraction

from .field import (
    CycScalar,
    InsufficientPrecision,
    LocalElem,
    SingularMap,
    ZeroToPrecision,
    theta,
)
from .schwartz import (
    ADD,
    MULT,
    DEFAULT_BUDGET,
    AddCoset,
    MultCoset,
    SBFunction,
    SpaceDescriptor,
    comp_children,
    comp_contains_point,
)

# Middle-slot Weyl kernel sign; +1 reproduces the printed checkpoint values.
MID_W_SIGN = +1

# "g1g3": read the slot determinant factor as det(g1)det(g3) (adopted);
# "g1g2": the literal display, with the middle component's determinant.
SLOT_DET_MODE = "g1g3"

_Y_SPACE = SpaceDescriptor([ADD, ADD, ADD, ADD, MULT], names=["a", "b", "c", "d", "y"])
_L_SPACE = SpaceDescriptor([ADD, MULT], names=["lam", "y"])
_T_SPACE = SpaceDescriptor([MULT, MULT], names=["a", "d"])
_UG_SPACE = SpaceDescriptor([ADD, ADD, MULT], punctured=(0, 1), names=["c", "d", "det"])


def y_space():
    """Coordinates (a, b, c, d, y) of S(M_2(F) x F^x)."""
    return _Y_SPACE


def l_space():
    """Coordinates (lambda, y) of the normalization module S(F x F^x)."""
    return _L_SPACE


def t_space():
    """Coordinates (a, d) of S(F^x x F^x) = S(T)."""
    return _T_SPACE


def ug_space():
    """Bottom-row coordinates (c, d, det) of U\\G, with (c, d) != (0, 0)."""
    return _UG_SPACE


class GL2Elem:
    """An element of GL_2(F) with cached determinant."""

    __slots__ = ("a", "b", "c", "d", "det")

    def __init__(self, a, b, c, d):
        self.a, self.b, self.c, self.d = a, b, c, d
        self.det = a * d - b * c
        if self.det.is_exact_zero:
            raise SingularMap("determinant is zero")

    @property
    def cfg(self):
        return self.a.cfg

    @staticmethod
    def identity(cfg):
        o, z = LocalElem.one(cfg), LocalElem.zero(cfg)
        return GL2Elem(o, z, z, o)

    @staticmethod
    def w(cfg):
        o, z = LocalElem.one(cfg), LocalElem.zero(cfg)
        return GL2Elem(z, -o, o, z)

    @staticmethod
    def upper(cfg, a, b):
        """The generator m(a, b) = (a b; 0 1)."""
        return GL2Elem(a, b, LocalElem.zero(cfg), LocalElem.one(cfg))

    @staticmethod
    def n(x):
        cfg = x.cfg
        return GL2Elem(LocalElem.one(cfg), x, LocalElem.zero(cfg), LocalElem.one(cfg))

    @staticmethod
    def n_lower(x):
        cfg = x.cfg
        return GL2Elem(LocalElem.one(cfg), LocalElem.zero(cfg), x, LocalElem.one(cfg))

    @staticmethod
    def diag(a, d):
        z = LocalElem.zero(a.cfg)
        return GL2Elem(a, z, z, d)

    def __mul__(self, other):
        return GL2Elem(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )

    def inverse(self):
        di = self.det.inverse()
        return GL2Elem(self.d * di, -(self.b * di), -(self.c * di), self.a * di)

    def transpose(self):
        return GL2Elem(self.a, self.c, self.b, self.d)

    def entries(self):
        return (self.a, self.b, self.c, self.d)

    def __eq__(self, other):
        if not isinstance(other, GL2Elem):
            return NotImplemented
        return all((x - y).is_exact_zero for x, y in zip(self.entries(), other.entries()))

    def agrees_with(self, other):
        """Entrywise agreement at the shared precision."""
        for x, y in zip(self.entries(), other.entries()):
            d = x - y
            if not d.is_zeroish:
                return False
        return True

    def __repr__(self):
        return f"[{self.a}, {self.b}; {self.c}, {self.d}]"


class GenWord:
    """A word in the generators m(a, b) and w whose ordered product is the
    decomposed element."""

    __slots__ = ("cfg", "letters")

    def __init__(self, cfg, letters):
        self.cfg = cfg
        self.letters = tuple(letters)

    def product(self):
        g = GL2Elem.identity(self.cfg)
        for letter in self.letters:
            if letter[0] == "w":
                g = g * GL2Elem.w(self.cfg)
            else:
                _, a, b = letter
                g = g * GL2Elem.upper(self.cfg, a, b)
        return g

    def __len__(self):
        return len(self.letters)

    def __repr__(self):
        parts = ["w" if l[0] == "w" else f"m({l[1]},{l[2]})" for l in self.letters]
        return "*".join(parts) or "1"


def bruhat_decompose(g):
    """Express g exactly as a word in m(a, b) and w.

    For c != 0, g = m(det/c, a/c) * w * m(c, d); for c = 0 the diagonal part
    goes through diag(1, d) = w m(d,0) m(-1,0) w m(-1,0).
    """
    cfg = g.cfg
    c = g.c
    if c.is_ztp:
        raise InsufficientPrecision("cannot decide whether the (2,1) entry vanishes")
    one = LocalElem.one(cfg)
    neg = -one
    zero = LocalElem.zero(cfg)
    letters = []
    if not c.is_exact_zero:
        ci = c.inverse()
        letters.append(("m", g.det * ci, g.a * ci))
        letters.append(("w",))
        letters.append(("m", c, g.d))
        return GenWord(cfg, letters)
    if g.d.is_ztp:
        raise InsufficientPrecision("cannot invert the (2,2) entry at this precision")
    di = g.d.inverse()
    ma, mb = g.a * di, g.b * di
    if not ((ma - one).is_zeroish and mb.is_zeroish):
        letters.append(("m", ma, mb))
    # diag(1, d) expanded into generators
    letters.extend([("w",), ("m", g.d, zero), ("m", neg, zero), ("w",), ("m", neg, zero)])
    return GenWord(cfg, letters)


# -- Y-module actions ----------------------------------------------------------


def as_y_elem(f):
    if f.space != _Y_SPACE:
        raise ValueError("expected a function on the Y-space (a,b,c,d,y)")
    return f


def act_slot1(g, psi):
    """(g, 1, 1) . Psi: x -> Psi(g^{-1} x, y det g)."""
    as_y_elem(psi)
    gi = g.inverse()
    mat = ((gi.a, gi.b), (gi.c, gi.d))
    out = psi.pullback_linear_pair(0, 2, mat)
    out = out.pullback_linear_pair(1, 3, mat)
    return out.pullback_affine([None, None, None, None, (g.det, None)])


def act_slot3(g, psi):
    """(1, 1, g) . Psi: x -> Psi(x g^{-T}, y det g); under the literal
    det(g1 g2^T) transcription the third slot carries no det factor."""
    as_y_elem(psi)
    gi = g.inverse()
    mat = ((gi.a, gi.b), (gi.c, gi.d))
    out = psi.pullback_linear_pair(0, 1, mat)
    out = out.pullback_linear_pair(2, 3, mat)
    if SLOT_DET_MODE == "g1g2":
        return out
    return out.pullback_affine([None, None, None, None, (g.det, None)])


def transpose_13(psi):
    """The S_3-transposition exchanging the outer slots: Psi(x^T, y)."""
    as_y_elem(psi)
    return psi.pullback_perm((0, 2, 1, 3, 4))


def act_mid_upper(a, b, psi, budget=DEFAULT_BUDGET):
    """Middle action of m(a, b): |a| e(b y det x) Psi(x, a y)."""
    as_y_elem(psi)
    out = psi.pullback_affine([None, None, None, None, (a, None)])
    if not b.is_exact_zero:
        phase = [(b, (1, 0, 0, 1, 1)), (-b, (0, 1, 1, 0, 1))]
        out = out.modulate(phase, budget)
    return out.scale(Fraction(a.cfg.q) ** (-a.valuation()))


def act_mid_w(psi, budget=DEFAULT_BUDGET):
    """Middle action of w: the kernel transform with phase e(MID_W_SIGN y<x,z>)."""
    as_y_elem(psi)
    return psi.fourier_m2((0, 1, 2, 3), 4, sign=MID_W_SIGN, budget=budget)


def act_mid(g, psi, budget=DEFAULT_BUDGET):
    """Middle action of an arbitrary g, through its generator word."""
    as_y_elem(psi)
    word = bruhat_decompose(g)
    out = psi
    for letter in reversed(word.letters):
        if letter[0] == "w":
            out = act_mid_w(out, budget)
        else:
            out = act_mid_upper(letter[1], letter[2], out, budget)
    return out


def act_y(g1, g2, g3, psi, budget=DEFAULT_BUDGET):
    """Simultaneous action of (g1, g2, g3) in the three slots."""
    out = psi
    if g2 is not None:
        out = act_mid(g2, out, budget)
    if g1 is not None:
        out = act_slot1(g1, out)
    if g3 is not None:
        out = act_slot3(g3, out)
    return out


# -- torus modules -------------------------------------------------------------


class TModuleTag:
    """Base T-module space plus twist metadata.

    base 'one_T' is S(F^x x F^x) with the translation action; base 'L' is
    S(F x F^x) with (a,d) . F(lam, y) = |a/d| F(d^{-1} lam, a d y).  The twist
    (m, n) multiplies the action by |a|^m |d|^n; the Weyl flag precomposes
    with pi(a,d) -> |a/d| pi(d,a).
    """

    __slots__ = ("base", "twist", "weyl")

    def __init__(self, base, twist=(0, 0), weyl=False):
        if base not in ("one_T", "L"):
            raise ValueError("base must be one_T or L")
        self.base = base
        self.twist = tuple(twist)
        self.weyl = weyl

    def space(self):
        return _T_SPACE if self.base == "one_T" else _L_SPACE

    def twisted(self, m, n):
        return TModuleTag(self.base, (self.twist[0] + m, self.twist[1] + n), self.weyl)

    def weyl_flip(self):
        return TModuleTag(self.base, self.twist, not self.weyl)

    def __repr__(self):
        w = "(w)" if self.weyl else ""
        return f"{self.base}{self.twist}{w}"


ONE_T = TModuleTag("one_T")
L_TAG = TModuleTag("L")


def t_act(tag, a, d, f):
    """The tagged T-action of diag(a, d) on an SBFunction over tag's space."""
    if f.space != tag.space():
        raise ValueError("function lives on the wrong space for this tag")
    if a.is_zeroish or d.is_zeroish:
        raise SingularMap("torus entries must be invertible")
    q = Fraction(a.cfg.q)
    if tag.weyl:
        base = TModuleTag(tag.base, tag.twist, False)
        return t_act(base, d, a, f).scale(q ** (d.valuation() - a.valuation()))
    if tag.base == "one_T":
        out = f.pullback_affine([(a.inverse(), None), (d.inverse(), None)])
    else:
        out = f.pullback_affine([(d.inverse(), None), (a * d, None)])
        out = out.scale(q ** (d.valuation() - a.valuation()))
    m, n = tag.twist
    if (m, n) != (0, 0):
        out = out.scale(q ** (-m * a.valuation() - n * d.valuation()))
    return out


def _mult_cells_of(comp, kind):
    """View an additive 0-free coset as a multiplicative one."""
    if isinstance(comp, MultCoset):
        return comp
    if comp.contains_zero:
        raise ValueError("coset contains 0, no multiplicative view")
    v = comp.center.valuation()
    return MultCoset(comp.center, comp.level - v)


def _monomial_pullback(f, out_space, exps, consts, prefactor):
    """g on out_space with g(x) = f(values), where input coordinate l takes
    the value consts[l] * prod_m x_m^{exps[l][m]}.

    All input cells must avoid 0.  ``prefactor(cell) -> Fraction`` scales each
    output cell's coefficient.  Output cells are produced at a uniform
    refinement level and re-merged by canonicalization.
    """
    if not f.terms:
        return SBFunction.zero(out_space, f.p)
    cfg = f.cfg()
    dim_out = out_space.dim
    out = []
    for cell, coeff in f.terms:
        mults = [_mult_cells_of(comp, kind) for comp, kind in zip(cell, f.space.kinds)]
        K = max(1, max(mc.level for mc in mults))
        rhs = []
        for mc, const in zip(mults, consts):
            rhs.append(mc.center.valuation() - const.valuation())
        vout = _solve_integer(exps, rhs)
        if vout is None:
            continue
        axes = []
        for m in range(dim_out):
            shell = MultCoset(LocalElem.monomial(cfg, vout[m]), 0)
            axes.append(comp_children(shell, K))
        combos = [()]
        for axis in axes:
            combos = [cb + (u,) for cb in combos for u in axis]
        for combo in combos:
            ok = True
            for l, (mc, const) in enumerate(zip(mults, consts)):
                val = const
                for m in range(dim_out):
                    e = exps[l][m]
                    if e:
                        val = val * combo[m].center ** e
                if not comp_contains_point(mc, val):
                    ok = False
                    break
            if not ok:
                continue
            newcell = []
            for m, kind in enumerate(out_space.kinds):
                u = combo[m]
                if kind == MULT:
                    newcell.append(u)
                else:
                    newcell.append(AddCoset(u.center, u.center.valuation() + u.level))
            newcell = tuple(newcell)
            out.append((newcell, coeff * prefactor(newcell)))
    return SBFunction(out_space, out, p=f.p)


def _solve_integer(exps, rhs):
    """Integer solution v of exps . v = rhs (possibly overdetermined), or None."""
    rows = [list(map(Fraction, row)) + [Fraction(r)] for row, r in zip(exps, rhs)]
    ncols = len(exps[0])
    pivots = []
    r = 0
    for cidx in range(ncols):
        piv = next((i for i in range(r, len(rows)) if rows[i][cidx] != 0), None)
        if piv is None:
            return None  # underdetermined direction; callers use full-rank maps
        rows[r], rows[piv] = rows[piv], rows[r]
        rows[r] = [x / rows[r][cidx] for x in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][cidx] != 0:
                fac = rows[i][cidx]
                rows[i] = [x - fac * y for x, y in zip(rows[i], rows[r])]
        pivots.append(cidx)
        r += 1
        if r == len(rows):
            break
    for i in range(r, len(rows)):
        if rows[i][ncols] != 0:
            return None
    sol = [rows[i][ncols] for i in range(ncols)]
    if any(s.denominator != 1 for s in sol):
        return None
    return [int(s) for s in sol]


def eta(f):
    """The embedding of one_T into L: (lam, y) -> |lam^2 y|^{-1} f(lam y, lam^{-1})."""
    if f.space != _T_SPACE:
        raise ValueError("eta expects a function on the torus space")
    q = None if f.is_zero else Fraction(f.cfg().q)

    def prefactor(cell):
        vl = cell[0].center.valuation()
        vy = cell[1].center.valuation()
        return q ** (2 * vl + vy)

    return _monomial_pullback(f, _L_SPACE, ((1, 1), (-1, 0)), _ones(f), prefactor)


def eta_w(f):
    """The Weyl-twisted companion of eta, conjugated through the canonical
    isomorphisms one_T ~ one_T(w) and L ~ L(w):

        (lam, y) -> |lam^2 y| f(lam y, lam^{-1}).
    """
    if f.space != _T_SPACE:
        raise ValueError("eta_w expects a function on the torus space")
    q = None if f.is_zero else Fraction(f.cfg().q)

    def prefactor(cell):
        vl = cell[0].center.valuation()
        vy = cell[1].center.valuation()
        return q ** (-(2 * vl + vy))

    return _monomial_pullback(f, _L_SPACE, ((1, 1), (-1, 0)), _ones(f), prefactor)


def weyl_swap_one_t(f):
    """The canonical isomorphism one_T -> one_T(w): f -> |d/a| f(d, a)."""
    if f.space != _T_SPACE:
        raise ValueError("expected a torus-space function")
    out = f.pullback_perm((1, 0))
    q = Fraction(f.cfg().q) if f.terms else None
    terms = []
    for cell, coeff in out.terms:
        va = cell[0].center.valuation()
        vd = cell[1].center.valuation()
        terms.append((cell, coeff * q ** (vd - va)))
    return SBFunction(_T_SPACE, terms, p=f.p)


def weyl_swap_l(f):
    """The canonical isomorphism L -> L(w): F -> |lam^2 y|^{-1} F(1/(lam y), y)."""
    if f.space != _L_SPACE:
        raise ValueError("expected an L-space function")
    q = None if f.is_zero else Fraction(f.cfg().q)

    def prefactor(cell):
        vl = cell[0].center.valuation()
        vy = cell[1].center.valuation()
        return q ** (2 * vl + vy)

    return _monomial_pullback(f, _L_SPACE, ((-1, -1), (0, 1)), _ones(f), prefactor)


def _ones(f):
    cfg = f.cfg()
    return tuple(LocalElem.one(cfg) for _ in range(f.space.dim))


# -- induced functions in bottom-row coordinates --------------------------------


class InducedFn:
    """An element of i(one_T) in the S(U\\G) model: a Schwartz-Bruhat function
    of the bottom row (c, d) != (0, 0) and the determinant.

    The torus-valued picture of parabolic induction is recovered on demand:
    ``value_at(g)`` returns the S(T)-valued evaluation, and ``table_at_level``
    tabulates it over P^1(O/t^n) section points.  The T-action carried by the
    bottom-row model is translation twisted by (1, -1).
    """

    __slots__ = ("fn", "tag")

    def __init__(self, fn, tag=None):
        if fn.space != _UG_SPACE:
            raise ValueError("InducedFn expects bottom-row coordinates (c, d, det)")
        self.fn = fn
        self.tag = tag or TModuleTag("one_T", twist=(1, -1))

    @staticmethod
    def zero(p=None):
        return InducedFn(SBFunction.zero(_UG_SPACE, p))

    @staticmethod
    def congruence_unit(cfg, n):
        """f_n: the indicator of U.K_n, i.e. of the cell
        {c in t^n O, d in 1 + t^n O, det in 1 + t^n O}."""
        one = LocalElem.one(cfg)
        cell = (
            AddCoset(LocalElem.zero(cfg), n),
            AddCoset(one, n),
            MultCoset(one, n),
        )
        return InducedFn(SBFunction.indicator(_UG_SPACE, cell))

    @property
    def is_zero(self):
        return self.fn.is_zero

    def __eq__(self, other):
        return isinstance(other, InducedFn) and self.fn == other.fn

    def eval_bottom(self, c, d, det):
        return self.fn.evaluate([c, d, det])

    def eval_at(self, g):
        return self.fn.evaluate([g.c, g.d, g.det])

    def act(self, g):
        """Right translation R_g: bottom row (c,d) -> (c,d) g, det -> det g."""
        mat = ((g.a, g.c), (g.b, g.d))
        out = self.fn.pullback_linear_pair(0, 1, mat)
        out = out.pullback_affine([None, None, (g.det, None)])
        return InducedFn(out, self.tag)

    def value_at(self, g):
        """The S(T)-valued evaluation F(a0, d0) = |a0/d0| fn(d0^{-1} c,
        d0^{-1} d, (a0 d0)^{-1} det)."""
        return self._value_at_bottom(g.c, g.d, g.det)

    def _value_at_bottom(self, c, d, det):
        cfg = self.fn.cfg()
        if cfg is None:
            return SBFunction.zero(_T_SPACE, self.fn.p)
        q = Fraction(cfg.q)
        out = []
        for cell, coeff in self.fn.terms:
            Cc, Cd, CD = cell
            d0_cells = _solve_scaled_membership(cfg, c, Cc, d, Cd)
            if d0_cells is None:
                continue
            kD = CD.level
            for d0 in d0_cells:
                for d0f in comp_children(d0, max(d0.level, kD)):
                    # a0 d0 in det * CD^{-1}  =>  a0 in a single coset
                    a_center = det * CD.center.inverse() * d0f.center.inverse()
                    a0 = MultCoset(a_center, kD)
                    va, vd = a_center.valuation(), d0f.center.valuation()
                    out.append(((a0, d0f), coeff * q ** (vd - va)))
        return SBFunction(_T_SPACE, out, p=self.fn.p)

    def table_at_level(self, n):
        """Values on the P^1(O/t^n) section points, charts [1 : x] and [xt : 1]."""
        cfg = self.fn.cfg()
        one, zero = LocalElem.one(cfg), LocalElem.zero(cfg)
        table = {}
        for rep in comp_children(AddCoset(zero, 0), n):
            x = rep.center
            sigma = GL2Elem(zero, -one, one, x)
            table[("c", x.val if x.digits else 0, x.digits)] = self.value_at(sigma)
        for rep in comp_children(AddCoset(zero, 1), n):
            x = rep.center
            sigma = GL2Elem(one, zero, x, one)
            table[("d", x.val if x.digits else 0, x.digits)] = self.value_at(sigma)
        return table

    def smoothness_level(self):
        """A level n at which the P^1 table determines the function."""
        lv = 1
        for cell, _ in self.fn.terms:
            for comp in cell:
                lv = max(lv, comp.level + max(0, -comp.min_valuation()))
        return lv


def _solve_scaled_membership(cfg, c, Cc, d, Cd):
    """Multiplicative cells of d0 with d0^{-1} c in Cc and d0^{-1} d in Cd,
    or None when unsatisfiable.  One of the two constraints is always a
    genuine coset because (c, d) != (0, 0) and cells avoid the puncture."""

    def coset_constraint(x, comp):
        # {d0 : d0^{-1} x in comp}; returns ('coset', MultCoset),
        # ('all',), or ('none',) / valuation threshold ('vmax', m)
        if x.is_exact_zero:
            return ("all",) if comp.contains_zero else ("none",)
        if comp.contains_zero:
            # v(x) - v(d0) >= level  <=>  v(d0) <= v(x) - level
            return ("vmax", x.valuation() - comp.level)
        k = comp.level - comp.center.valuation()
        return ("coset", MultCoset(x * comp.center.inverse(), k))

    c1 = coset_constraint(c, Cc)
    c2 = coset_constraint(d, Cd)
    for kind, other in ((c1, c2), (c2, c1)):
        if kind[0] == "none":
            return None
    cosets = [c for c in (c1, c2) if c[0] == "coset"]
    if not cosets:
        raise AssertionError("puncture violated: both constraints degenerate")
    if len(cosets) == 2:
        a, b = cosets[0][1], cosets[1][1]
        from .schwartz import comp_intersect

        inter = comp_intersect(a, b)
        base = [inter] if inter is not None else []
    else:
        base = [cosets[0][1]]
    out = []
    for cell in base:
        ok = True
        for cons in (c1, c2):
            if cons[0] == "vmax" and cell.center.valuation() > cons[1]:
                ok = False
        if ok:
            out.append(cell)
    return out or None


# -- Whittaker data ---------------------------------------------------------------


def whittaker_section(c, d, det):
    """The explicit section of U\\G: for v(c) <= v(d) (ties to the c-chart)
    sigma = (0, -det/c; c, d), otherwise sigma = (det/d, 0; c, d)."""
    cfg = det.cfg
    zero = LocalElem.zero(cfg)
    if c.is_ztp or d.is_ztp:
        if c.is_ztp and not d.is_zeroish and d.valuation() < c.prec:
            return GL2Elem(det * d.inverse(), zero, c, d)
        raise InsufficientPrecision("cannot decide the section chart")
    use_c = not c.is_exact_zero and (d.is_exact_zero or c.valuation() <= d.valuation())
    if use_c:
        return GL2Elem(zero, -(det * c.inverse()), c, d)
    return GL2Elem(det * d.inverse(), zero, c, d)


class WhittakerFn:
    """A Whittaker datum: left (U, theta)-equivariant, compactly supported
    mod U; stored through its values on the section sigma(c, d, det)."""

    __slots__ = ("fn",)

    def __init__(self, fn):
        if fn.space != _UG_SPACE:
            raise ValueError("WhittakerFn expects bottom-row coordinates")
        self.fn = fn

    @property
    def is_zero(self):
        return self.fn.is_zero

    def eval_at(self, h):
        """Value at h in G: theta(x) * stored(c, d, det) for h = n(x) sigma."""
        c, d, det = h.c, h.d, h.det
        stored = self.fn.evaluate([c, d, det])
        if stored.is_zero:
            return stored
        sigma = whittaker_section(c, d, det)
        if not c.is_zeroish:
            x = (h.a - sigma.a) * c.inverse()
        else:
            x = (h.b - sigma.b) * d.inverse()
        return theta(x) * stored

    def translate(self, g):
        """R_g W as a Whittaker datum, re-tabulated on the section.

        The support moves by the exact pullback; within each moved cell the
        value picks up the theta-phase mismatch between the moved section
        point and the canonical one, resolved by region evaluation.
        """
        from .schwartz import tabulate

        mat = ((g.a, g.c), (g.b, g.d))
        moved = self.fn.pullback_linear_pair(0, 1, mat)
        moved = moved.pullback_affine([None, None, (g.det, None)])

        def evaluator(pt):
            c, d, det = pt
            return self.eval_at(whittaker_section(c, d, det) * g)

        return WhittakerFn(tabulate(_UG_SPACE, self.fn.p, evaluator, [c for c, _ in moved.terms]))

    def __eq__(self, other):
        return isinstance(other, WhittakerFn) and self.fn == other.fn
