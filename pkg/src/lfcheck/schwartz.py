"""Cell calculus for Schwartz-Bruhat functions on products of F and F^x.

A function is stored as a finite list of (cell, scalar) pairs, where a cell is
a product of cosets:

  * additive coordinate: c + t^n O          (center c, level n)
  * multiplicative coordinate: c * U_k      (U_0 = O^x, U_k = 1 + t^k O)

Cells are kept pairwise disjoint; the fully merged, sorted representation is
a canonical normal form, so equality of functions is decidable and exact.
Character phases e(P(x)) are eliminated by refining cells until the phase is
constant per cell, which keeps the representation closed under every operator
in the engine (a refinement budget bounds the blow-up).

Measures: additive Haar dx with vol(O) = 1 (self-dual for the fixed e) and
multiplicative Haar d*x = dx/|x|, so vol(c U_0, d*x) = 1 - 1/q and
vol(c U_k, d*x) = q^{-k} for k >= 1.
"""

from __future__ import annotations

import json
from fractions import Fraction

from .field import (
    CycScalar,
    InsufficientPrecision,
    LocalElem,
    RefinementBudgetExceeded,
    SingularMap,
    add_char,
)

ADD = "add"
MULT = "mult"

DEFAULT_BUDGET = 6


class SpaceDescriptor:
    """Ordered coordinates, each additive (over F) or multiplicative (over
    F^x), with an optional punctured-pair constraint forbidding two additive
    coordinates from vanishing simultaneously."""

    __slots__ = ("kinds", "punctured", "names")

    def __init__(self, kinds, punctured=None, names=None):
        kinds = tuple(kinds)
        if not kinds:
            raise ValueError("need at least one coordinate")
        for k in kinds:
            if k not in (ADD, MULT):
                raise ValueError(f"bad coordinate kind {k!r}")
        if punctured is not None:
            punctured = tuple(punctured)
            i, j = punctured
            if kinds[i] != ADD or kinds[j] != ADD:
                raise ValueError("punctured pair must reference additive coordinates")
        self.kinds = kinds
        self.punctured = punctured
        self.names = tuple(names) if names else tuple(f"x{i}" for i in range(len(kinds)))

    @property
    def dim(self):
        return len(self.kinds)

    def drop(self, coords):
        """Space with the given coordinate indices removed."""
        keep = [i for i in range(self.dim) if i not in coords]
        if not keep:
            raise ValueError("cannot drop every coordinate")
        punct = None
        if self.punctured is not None and all(i in keep for i in self.punctured):
            punct = tuple(keep.index(i) for i in self.punctured)
        return SpaceDescriptor([self.kinds[i] for i in keep], punct, [self.names[i] for i in keep])

    def __eq__(self, other):
        return (
            isinstance(other, SpaceDescriptor)
            and self.kinds == other.kinds
            and self.punctured == other.punctured
        )

    def __hash__(self):
        return hash((self.kinds, self.punctured))

    def __repr__(self):
        extra = f", punctured={self.punctured}" if self.punctured else ""
        return f"Space({','.join(self.kinds)}{extra})"


class AddCoset:
    """The coset center + t^level O; the center is stored exactly, reduced
    modulo t^level (so a coset containing 0 has center 0)."""

    __slots__ = ("center", "level")

    def __init__(self, center, level):
        self.center = center.reduce_mod(level)
        self.level = level

    @property
    def contains_zero(self):
        return self.center.is_exact_zero

    def min_valuation(self):
        return self.level if self.contains_zero else self.center.valuation()

    def center_point(self):
        return self.center

    def key(self):
        c = self.center
        return (0, self.level, c.val if c.digits else self.level, c.digits)

    def __eq__(self, other):
        return isinstance(other, AddCoset) and self.level == other.level and self.center == other.center

    def __hash__(self):
        return hash((0, self.level, self.center))

    def __repr__(self):
        return f"[{self.center}+t^{self.level}O]"


class MultCoset:
    """The coset center * U_level in F^x (level >= 0); the center keeps
    exactly the digits that matter, with a level-0 center normalized to t^v."""

    __slots__ = ("center", "level")

    def __init__(self, center, level):
        if level < 0:
            raise ValueError("multiplicative level must be >= 0")
        v = center.valuation()
        if level == 0:
            center = LocalElem.monomial(center.cfg, v)
        else:
            center = center.reduce_mod(v + level)
        self.center = center
        self.level = level

    @property
    def contains_zero(self):
        return False

    def min_valuation(self):
        return self.center.valuation()

    def valuation(self):
        return self.center.valuation()

    def center_point(self):
        return self.center

    def key(self):
        return (1, self.level, self.center.val, self.center.digits)

    def __eq__(self, other):
        return isinstance(other, MultCoset) and self.level == other.level and self.center == other.center

    def __hash__(self):
        return hash((1, self.level, self.center))

    def __repr__(self):
        return f"[{self.center}*U_{self.level}]"


# -- component-level operations ------------------------------------------------


def comp_contains_point(comp, x):
    if isinstance(comp, AddCoset):
        d = x - comp.center
        if d.is_exact_zero:
            return True
        if d.is_ztp:
            if d.prec >= comp.level:
                return True
            raise InsufficientPrecision("membership undecidable at this precision")
        return d.valuation() >= comp.level
    try:
        v = x.valuation()
    except Exception as exc:
        raise InsufficientPrecision("valuation of point unknown") from exc
    if v != comp.center.valuation():
        return False
    if comp.level == 0:
        return True
    r = x * comp.center.inverse() - LocalElem.one(x.cfg)
    if r.is_exact_zero:
        return True
    if r.is_ztp:
        if r.prec >= comp.level:
            return True
        raise InsufficientPrecision("membership undecidable at this precision")
    return r.valuation() >= comp.level


def comp_contains(a, b):
    """Whole-coset containment b subseteq a (same kind, exact)."""
    if type(a) is not type(b):
        raise TypeError("mixed component kinds")
    if b.level < a.level:
        return False
    if isinstance(a, AddCoset):
        d = b.center - a.center
        return d.is_exact_zero or d.valuation() >= a.level
    if a.center.valuation() != b.center.valuation():
        return False
    if a.level == 0:
        return True
    r = b.center * a.center.inverse() - LocalElem.one(a.center.cfg)
    return r.is_exact_zero or r.valuation() >= a.level


def comp_intersect(a, b):
    """Intersection of two cosets: nested or disjoint, so a coset or None."""
    if comp_contains(a, b):
        return b
    if comp_contains(b, a):
        return a
    return None


def comp_children(comp, target_level):
    """All sub-cosets of comp at the given (deeper or equal) level."""
    if target_level < comp.level:
        raise ValueError("cannot coarsen a component")
    if target_level == comp.level:
        return [comp]
    cfg = comp.center.cfg
    q = cfg.q
    if isinstance(comp, AddCoset):
        centers = [comp.center]
        for j in range(comp.level, target_level):
            centers = [c + LocalElem.monomial(cfg, j, d) for c in centers for d in range(q)]
        return [AddCoset(c, target_level) for c in centers]
    centers = [comp.center]
    start = comp.level
    if comp.level == 0:
        centers = [comp.center * LocalElem.monomial(cfg, 0, u) for u in range(1, q)]
        start = 1
    one = LocalElem.one(cfg)
    for j in range(start, target_level):
        centers = [c * (one + LocalElem.monomial(cfg, j, d)) for c in centers for d in range(q)]
    return [MultCoset(c, target_level) for c in centers]


def comp_volume(comp, measure):
    """Exact volume under 'dx' (additive Haar) or 'dmult' (d*x = dx/|x|)."""
    q = comp.center.cfg.q
    if isinstance(comp, AddCoset):
        if measure == "dx":
            return Fraction(q) ** (-comp.level)
        if comp.contains_zero:
            raise ValueError("d*x volume of a coset containing 0 is infinite")
        return Fraction(q) ** (comp.center.valuation() - comp.level)
    v = comp.center.valuation()
    if measure == "dx":
        if comp.level == 0:
            return (Fraction(q) ** (-v)) * (1 - Fraction(1, q))
        return Fraction(q) ** (-(v + comp.level))
    if comp.level == 0:
        return 1 - Fraction(1, q)
    return Fraction(q) ** (-comp.level)


def _comp_serial(comp):
    c = comp.center
    return {
        "kind": "add" if isinstance(comp, AddCoset) else "mult",
        "level": comp.level,
        "val": c.val if c.digits else None,
        "digits": list(c.digits),
    }


class MeasureSpec:
    """Per-coordinate measure choice; the standard spec is dx on additive
    coordinates and d*x on multiplicative ones."""

    __slots__ = ("kinds",)

    def __init__(self, kinds):
        self.kinds = tuple(kinds)

    @staticmethod
    def standard(space):
        return MeasureSpec(["dx" if k == ADD else "dmult" for k in space.kinds])

    @staticmethod
    def additive(space):
        return MeasureSpec(["dx"] * space.dim)


class SBFunction:
    """Finite linear combination of disjoint cell indicators, exact scalars.

    Terms are kept disjoint and sorted; ``canonical()`` additionally merges
    complete sibling families, producing the unique normal form used for
    equality tests and golden files.
    """

    __slots__ = ("space", "terms", "p")

    def __init__(self, space, terms, p=None, merged=True, _trusted=False):
        self.space = space
        terms = [tc for tc in terms if not tc[1].is_zero]
        if terms and p is None:
            p = terms[0][1].p
        self.p = p
        if _trusted:
            self.terms = tuple(terms)
            return
        for cell, _ in terms:
            self._validate_cell(space, cell)
        terms = _disjointify(terms)
        if merged:
            terms = _merge(space, terms)
        terms.sort(key=lambda tc: _cell_key(tc[0]))
        self.terms = tuple(terms)

    @staticmethod
    def _validate_cell(space, cell):
        if len(cell) != space.dim:
            raise ValueError("cell arity mismatch")
        for comp, kind in zip(cell, space.kinds):
            if kind == ADD and not isinstance(comp, AddCoset):
                raise ValueError("additive coordinate needs an additive coset")
            if kind == MULT and not isinstance(comp, MultCoset):
                raise ValueError("multiplicative coordinate needs a multiplicative coset")
        if space.punctured is not None:
            i, j = space.punctured
            if cell[i].contains_zero and cell[j].contains_zero:
                raise ValueError("cell meets the puncture (0,0)")

    @staticmethod
    def zero(space, p=None):
        return SBFunction(space, [], p=p, _trusted=True)

    @staticmethod
    def indicator(space, cell):
        p = cell[0].center.cfg.p
        return SBFunction(space, [(tuple(cell), CycScalar.one(p))])

    @property
    def is_zero(self):
        return not self.terms

    def cfg(self):
        return self.terms[0][0][0].center.cfg if self.terms else None

    def scalar_zero(self):
        return CycScalar.zero(self.p if self.p is not None else 3)

    # -- algebra -----------------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, SBFunction) or other.space != self.space:
            raise ValueError("space mismatch in addition")
        return SBFunction(self.space, list(self.terms) + list(other.terms), p=self.p or other.p)

    def __neg__(self):
        return SBFunction(self.space, [(c, -k) for c, k in self.terms], p=self.p, _trusted=True)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, s):
        if isinstance(s, (int, Fraction)):
            if s == 0:
                return SBFunction.zero(self.space, self.p)
            return SBFunction(self.space, [(c, k * Fraction(s)) for c, k in self.terms], p=self.p, _trusted=True)
        if s.is_zero:
            return SBFunction.zero(self.space, self.p)
        return SBFunction(self.space, [(c, k * s) for c, k in self.terms], p=self.p, _trusted=True)

    def __mul__(self, other):
        """Pointwise product."""
        if not isinstance(other, SBFunction) or other.space != self.space:
            raise ValueError("space mismatch in product")
        out = []
        for ca, ka in self.terms:
            for cb, kb in other.terms:
                inter = _cell_intersect(ca, cb)
                if inter is not None:
                    out.append((inter, ka * kb))
        return SBFunction(self.space, out, p=self.p or other.p)

    def canonical(self):
        return SBFunction(self.space, list(self.terms), p=self.p)

    def __eq__(self, other):
        if not isinstance(other, SBFunction):
            return NotImplemented
        if self.space != other.space:
            return False
        return self.canonical().terms == other.canonical().terms

    def __hash__(self):
        return hash((self.space, self.canonical().terms))

    def __repr__(self):
        body = " + ".join(f"({k})*1{list(c)}" for c, k in self.terms[:6])
        more = f" ... [{len(self.terms)} cells]" if len(self.terms) > 6 else ""
        return f"SB[{body or '0'}{more}]"

    # -- evaluation / refinement / integration -------------------------------------

    def evaluate(self, point):
        """Value at a point (list of LocalElem), exact or raising."""
        if len(point) != self.space.dim:
            raise ValueError("point arity mismatch")
        for cell, coeff in self.terms:
            inside = True
            for comp, x in zip(cell, point):
                if not comp_contains_point(comp, x):
                    inside = False
                    break
            if inside:
                return coeff
        if self.p is not None:
            return CycScalar.zero(self.p)
        return CycScalar.zero(point[0].cfg.p)

    def refine(self, levels):
        """Pointwise-equal function with every cell refined to the target
        levels (per-coordinate; None leaves a coordinate untouched)."""
        out = []
        for cell, coeff in self.terms:
            tgt = [levels[i] if levels[i] is not None else cell[i].level for i in range(self.space.dim)]
            for i in range(self.space.dim):
                if tgt[i] < cell[i].level:
                    raise ValueError("coarsening is not provided")
            out.extend((pc, coeff) for pc in _split_to_levels(cell, tgt))
        out.sort(key=lambda tc: _cell_key(tc[0]))
        return SBFunction(self.space, out, p=self.p, _trusted=True)

    def integrate(self, measure, coords=None):
        """Exact partial integral over the given coordinate subset (all
        coordinates when omitted); a bare CycScalar when nothing remains."""
        if coords is None:
            coords = tuple(range(self.space.dim))
        coords = tuple(sorted(set(coords)))
        if not coords:
            raise ValueError("empty coordinate subset")
        full = len(coords) == self.space.dim
        if full:
            total = self.scalar_zero()
            for cell, coeff in self.terms:
                vol = Fraction(1)
                for i in coords:
                    vol *= comp_volume(cell[i], measure.kinds[i])
                total = total + coeff * vol
            return total
        rest = self.space.drop(coords)
        out = []
        for cell, coeff in self.terms:
            vol = Fraction(1)
            for i in coords:
                vol *= comp_volume(cell[i], measure.kinds[i])
            newcell = tuple(comp for i, comp in enumerate(cell) if i not in coords)
            out.append((newcell, coeff * vol))
        return SBFunction(rest, out, p=self.p)

    # -- pullbacks -------------------------------------------------------------------

    def pullback_affine(self, maps):
        """g with g(x) = f(map(x)) for per-coordinate maps x -> a x + b.

        ``maps[i]`` is None (identity) or a pair (a, b); b must be None or
        exactly 0 on multiplicative coordinates.
        """
        out = []
        for cell, coeff in self.terms:
            newcell = []
            for i, comp in enumerate(cell):
                m = maps[i]
                if m is None:
                    newcell.append(comp)
                    continue
                a, b = m
                if a.is_zeroish:
                    raise SingularMap("scaling by (possibly) zero")
                if isinstance(comp, AddCoset):
                    c = comp.center if b is None else comp.center - b
                    newcell.append(AddCoset(c * a.inverse(), comp.level - a.valuation()))
                else:
                    if b is not None and not b.is_exact_zero:
                        raise SingularMap("affine shift on a multiplicative coordinate")
                    newcell.append(MultCoset(comp.center * a.inverse(), comp.level))
            out.append((tuple(newcell), coeff))
        return SBFunction(self.space, out, p=self.p)

    def pullback_perm(self, perm, new_space=None):
        """g(x_0,..,x_{n-1}) = f(x_{perm[0]},..,x_{perm[n-1]})."""
        space = new_space or self.space
        out = []
        for cell, coeff in self.terms:
            newcell = [None] * len(cell)
            for i, src in enumerate(perm):
                newcell[src] = cell[i]
            out.append((tuple(newcell), coeff))
        return SBFunction(space, out, p=self.p)

    def pullback_linear_pair(self, i, j, matrix, shift=None):
        """g(x) = f(y) with (y_i, y_j) = M (x_i, x_j)^T + shift, all other
        coordinates fixed; coordinates i and j must be additive."""
        (m00, m01), (m10, m11) = matrix
        det = m00 * m11 - m01 * m10
        if det.is_zeroish:
            raise SingularMap("linear part not invertible at available precision")
        cfg = det.cfg
        di = det.inverse()
        inv = ((m11 * di, -(m01 * di)), (-(m10 * di), m00 * di))
        vM = min((x.valuation() for x in (m00, m01, m10, m11) if not x.is_zeroish))
        vI = min((x.valuation() for x in (inv[0][0], inv[0][1], inv[1][0], inv[1][1]) if not x.is_zeroish))
        out = []
        for cell, coeff in self.terms:
            ci, cj = cell[i], cell[j]
            ni, nj = ci.level, cj.level
            # the preimage lattice of t^ni O x t^nj O contains t^m O x t^m O
            # and is contained in t^l O x t^l O
            m = max(ni, nj) - vM
            l = min(ni, nj) + vI
            ti = ci.center if shift is None else ci.center - shift[0]
            tj = cj.center if shift is None else cj.center - shift[1]
            x0 = (inv[0][0] * ti + inv[0][1] * tj, inv[1][0] * ti + inv[1][1] * tj)
            box = comp_children(AddCoset(LocalElem.zero(cfg), l), m)
            for ri in box:
                for rj in box:
                    xi = x0[0] + ri.center
                    xj = x0[1] + rj.center
                    yi = m00 * xi + m01 * xj
                    yj = m10 * xi + m11 * xj
                    if shift is not None:
                        yi, yj = yi + shift[0], yj + shift[1]
                    if _in_coset(yi, ci) and _in_coset(yj, cj):
                        newcell = list(cell)
                        newcell[i] = AddCoset(xi, m)
                        newcell[j] = AddCoset(xj, m)
                        out.append((tuple(newcell), coeff))
        return SBFunction(self.space, out, p=self.p)

    # -- phases and Fourier transforms --------------------------------------------------

    def modulate(self, phase, budget=DEFAULT_BUDGET):
        """x -> e(P(x)) f(x) for P a sum of monomials (coeff, exponents).

        Exponents are >= 0 on additive coordinates and arbitrary integers on
        multiplicative ones.  Each cell is refined until every monomial of P
        varies within O across it; the coefficient then picks up
        e(P(center)).
        """
        kept = []
        for c, exps in phase:
            if c.is_ztp:
                raise InsufficientPrecision("phase coefficient known only to precision")
            if c.is_exact_zero:
                continue
            exps = tuple(exps)
            for i, e in enumerate(exps):
                if self.space.kinds[i] == ADD and e < 0:
                    raise ValueError("negative exponent on an additive coordinate")
            kept.append((c, exps))
        if not kept:
            return self
        out = []
        for cell, coeff in self.terms:
            out.extend(_modulate_cell(self.space, cell, coeff, kept, budget))
        return SBFunction(self.space, out, p=self.p)

    def fourier(self, coord, sign=-1, budget=DEFAULT_BUDGET):
        """Self-dual Fourier transform in one additive coordinate:
        fhat(xi) = int f(x) e(sign * x xi) dx."""
        if self.space.kinds[coord] != ADD:
            raise ValueError("fourier needs an additive coordinate")
        if not self.terms:
            return self
        cfg = self.cfg()
        q = Fraction(cfg.q)
        result = SBFunction.zero(self.space, self.p)
        sgn = LocalElem.from_int(cfg, sign)
        for cell, coeff in self.terms:
            comp = cell[coord]
            n = comp.level
            newcell = list(cell)
            newcell[coord] = AddCoset(LocalElem.zero(cfg), -n)
            piece = SBFunction(self.space, [(tuple(newcell), coeff * q**-n)], p=self.p, _trusted=True)
            if not comp.contains_zero:
                exps = tuple(1 if i == coord else 0 for i in range(self.space.dim))
                piece = piece.modulate([(sgn * comp.center, exps)], budget)
            result = result + piece
        return result

    def fourier_m2(self, matrix_coords, y, sign=-1, budget=DEFAULT_BUDGET):
        """Kernel transform on four additive matrix coordinates (a, b, c, d)
        against the det-polarization pairing, with scale y (a multiplicative
        coordinate index or a constant LocalElem):

            (F f)(x, y) = |y|^2 int f(z, y) e(sign * y <x, z>) dz,
            <x, z> = a d' + d a' - b c' - c b'.
        """
        ia, ib, ic, id_ = matrix_coords
        for i in (ia, ib, ic, id_):
            if self.space.kinds[i] != ADD:
                raise ValueError("matrix coordinates must be additive")
        if not self.terms:
            return self
        cfg = self.cfg()
        q = Fraction(cfg.q)
        y_is_coord = isinstance(y, int)
        result = SBFunction.zero(self.space, self.p)
        sgn = LocalElem.from_int(cfg, sign)
        for cell, coeff in self.terms:
            Ca, Cb, Cc, Cd = cell[ia], cell[ib], cell[ic], cell[id_]
            vy = cell[y].valuation() if y_is_coord else y.valuation()
            zero = LocalElem.zero(cfg)
            newcell = list(cell)
            newcell[ia] = AddCoset(zero, -Cd.level - vy)
            newcell[ib] = AddCoset(zero, -Cc.level - vy)
            newcell[ic] = AddCoset(zero, -Cb.level - vy)
            newcell[id_] = AddCoset(zero, -Ca.level - vy)
            vol = q ** -(Ca.level + Cb.level + Cc.level + Cd.level) * q ** (-2 * vy)
            piece = SBFunction(self.space, [(tuple(newcell), coeff * vol)], p=self.p, _trusted=True)
            phase = []
            for out_coord, src, s in ((id_, Ca, 1), (ic, Cb, -1), (ib, Cc, -1), (ia, Cd, 1)):
                if src.contains_zero:
                    continue
                gamma = sgn * src.center if s == 1 else -(sgn * src.center)
                if y_is_coord:
                    exps = tuple(
                        (1 if i == out_coord else 0) + (1 if i == y else 0) for i in range(self.space.dim)
                    )
                else:
                    gamma = gamma * y
                    exps = tuple(1 if i == out_coord else 0 for i in range(self.space.dim))
                phase.append((gamma, exps))
            if phase:
                piece = piece.modulate(phase, budget)
            result = result + piece
        return result

    # -- serialization ---------------------------------------------------------------------

    def to_jsonable(self):
        f = self.canonical()
        return {
            "space": {
                "kinds": list(f.space.kinds),
                "punctured": list(f.space.punctured) if f.space.punctured else None,
                "names": list(f.space.names),
            },
            "terms": [
                {"cell": [_comp_serial(c) for c in cell], "coeff": coeff.serialize()}
                for cell, coeff in f.terms
            ],
        }

    def serialize(self):
        """Canonical text form (deterministic, byte-exact for equal functions)."""
        return json.dumps(self.to_jsonable(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def deserialize(cfg, text):
        data = json.loads(text)
        sp = data["space"]
        space = SpaceDescriptor(
            sp["kinds"], tuple(sp["punctured"]) if sp["punctured"] else None, sp["names"]
        )
        terms = []
        for t in data["terms"]:
            comps = []
            for cs in t["cell"]:
                center = (
                    LocalElem.zero(cfg)
                    if cs["val"] is None
                    else LocalElem.from_digits(cfg, cs["val"], cs["digits"])
                )
                comps.append(
                    AddCoset(center, cs["level"]) if cs["kind"] == "add" else MultCoset(center, cs["level"])
                )
            terms.append((tuple(comps), CycScalar.deserialize(cfg.p, t["coeff"])))
        return SBFunction(space, terms, p=cfg.p)


# -- internal helpers --------------------------------------------------------------


def _in_coset(y, comp):
    """Exact membership of a computed (finite-precision) element in a coset."""
    d = y - comp.center
    if d.is_exact_zero:
        return True
    if d.is_ztp:
        if d.prec >= comp.level:
            return True
        raise InsufficientPrecision("membership undecidable")
    return d.valuation() >= comp.level


def _cell_key(cell):
    return tuple(comp.key() for comp in cell)


def _cell_intersect(ca, cb):
    comps = []
    for a, b in zip(ca, cb):
        inter = comp_intersect(a, b)
        if inter is None:
            return None
        comps.append(inter)
    return tuple(comps)


def _split_to_levels(cell, levels):
    pieces = [()]
    for comp, tgt in zip(cell, levels):
        kids = comp_children(comp, max(comp.level, tgt))
        pieces = [pc + (kid,) for pc in pieces for kid in kids]
    return pieces


def _disjointify(terms):
    out = []
    queue = list(terms)
    while queue:
        cell, coeff = queue.pop()
        placed = False
        for idx, (ecell, ecoeff) in enumerate(out):
            if ecell == cell:
                s = ecoeff + coeff
                if s.is_zero:
                    out.pop(idx)
                else:
                    out[idx] = (ecell, s)
                placed = True
                break
            if _cell_intersect(ecell, cell) is not None:
                levels = tuple(max(a.level, b.level) for a, b in zip(ecell, cell))
                out.pop(idx)
                queue.extend((pc, ecoeff) for pc in _split_to_levels(ecell, levels))
                queue.extend((pc, coeff) for pc in _split_to_levels(cell, levels))
                placed = True
                break
        if not placed:
            out.append((cell, coeff))
    return out


def _parent_and_slot(comp):
    """Parent coset one level up and this child's slot key under it, or None
    when there is no parent (level-0 multiplicative coset)."""
    cfg = comp.center.cfg
    if isinstance(comp, AddCoset):
        parent = AddCoset(comp.center, comp.level - 1)
        return parent, comp.center.digit(comp.level - 1)
    if comp.level == 0:
        return None
    if comp.level == 1:
        v = comp.center.valuation()
        return MultCoset(LocalElem.monomial(cfg, v), 0), comp.center.digit(v)
    parent = MultCoset(comp.center, comp.level - 1)
    r = comp.center * parent.center.inverse()
    return parent, r.digit(comp.level - 1)


def _merge(space, terms):
    terms = list(terms)
    changed = True
    while changed:
        changed = False
        for i in range(space.dim):
            groups = {}
            for cell, coeff in terms:
                key = tuple(comp.key() for j, comp in enumerate(cell) if j != i)
                groups.setdefault(key, []).append((cell, coeff))
            newterms = []
            any_merge = False
            for members in groups.values():
                merged = _merge_coordinate(members, i)
                if len(merged) != len(members):
                    any_merge = True
                newterms.extend(merged)
            if any_merge:
                terms = newterms
                changed = True
    return terms


def _merge_coordinate(members, i):
    """Merge complete equal-coefficient sibling families along coordinate i."""
    work = list(members)
    if not work:
        return work
    q = work[0][0][0].center.cfg.q
    while True:
        by_parent = {}
        for idx, (cell, coeff) in enumerate(work):
            ps = _parent_and_slot(cell[i])
            if ps is None:
                continue
            parent, slot = ps
            by_parent.setdefault(parent.key(), []).append((idx, parent, slot, cell, coeff))
        remove = set()
        additions = []
        for fam in by_parent.values():
            parent = fam[0][1]
            need = q - 1 if isinstance(parent, MultCoset) and parent.level == 0 else q
            if len(fam) != need or len({f[2] for f in fam}) != need:
                continue
            if any(f[4] != fam[0][4] for f in fam[1:]):
                continue
            cell0 = fam[0][3]
            newcell = tuple(parent if j == i else comp for j, comp in enumerate(cell0))
            remove.update(f[0] for f in fam)
            additions.append((newcell, fam[0][4]))
        if not remove:
            return work
        work = [tc for idx, tc in enumerate(work) if idx not in remove] + additions


# -- region evaluation ------------------------------------------------------------


def cell_as_region_point(cell):
    """A truncated point representing a whole cell: each coordinate's center
    with its precision capped at the coset radius, so exact arithmetic on the
    point is interval arithmetic on the cell.  Multiplicative components must
    have level >= 1 (a level-0 coset is not an additive ball)."""
    pt = []
    for comp in cell:
        if isinstance(comp, AddCoset):
            pt.append(comp.center.with_prec(comp.level))
        else:
            if comp.level == 0:
                raise ValueError("refine level-0 multiplicative cosets before region evaluation")
            pt.append(comp.center.with_prec(comp.center.valuation() + comp.level))
    return pt


def tabulate(space, p, evaluator, regions, max_level=24):
    """Build an SBFunction from an exact pointwise evaluator.

    ``regions`` must cover the support.  Each cell is fed to the evaluator as
    a truncated point; a returned scalar is therefore valid on the whole
    cell, and an InsufficientPrecision escape splits the cell.  The evaluator
    must consume its argument through precision-honest operations only.
    """
    out = []
    stack = []
    for cell in regions:
        tgt = [c.level if isinstance(c, AddCoset) else max(1, c.level) for c in cell]
        stack.extend(_split_to_levels(cell, tgt))
    while stack:
        cell = stack.pop()
        try:
            val = evaluator(cell_as_region_point(cell))
        except InsufficientPrecision:
            levels = []
            for comp in cell:
                lv = comp.level + 1
                rel = lv if isinstance(comp, MultCoset) else lv - min(0, comp.min_valuation())
                if rel > max_level:
                    raise RefinementBudgetExceeded(
                        f"tabulation refinement exceeded level {max_level}"
                    )
                levels.append(lv)
            stack.extend(_split_to_levels(cell, levels))
            continue
        if not val.is_zero:
            out.append((cell, val))
    return SBFunction(space, out, p=p)


def integrate_adaptive(coset, evaluator, max_level=24):
    """Exact integral over an additive coset of an evaluator obeying the
    region-point contract; refines on InsufficientPrecision."""
    total = None
    stack = [coset]
    while stack:
        comp = stack.pop()
        try:
            val = evaluator(comp.center.with_prec(comp.level))
        except InsufficientPrecision:
            if comp.level + 1 - min(0, comp.min_valuation()) > max_level:
                raise RefinementBudgetExceeded("adaptive integration exceeded its budget")
            stack.extend(comp_children(comp, comp.level + 1))
            continue
        piece = val * comp_volume(comp, "dx")
        total = piece if total is None else total + piece
    return total


# -- phase refinement -----------------------------------------------------------------


def _monomial_constant_on_cell(cell, coeff, exps):
    """True when e(coeff * prod x_i^{e_i}) is constant across the cell.

    Uses ultrametric value/variation bounds: w_i bounds v(x_i) from below,
    d_i bounds the displacement from the center.
    """
    vc = coeff.valuation()
    w = []
    d = []
    for comp, e in zip(cell, exps):
        if e == 0:
            w.append(0)
            d.append(0)
            continue
        if isinstance(comp, AddCoset):
            if comp.contains_zero:
                w.append(comp.level)
                d.append(comp.level)
            else:
                w.append(comp.center.valuation())
                d.append(comp.level)
        else:
            w.append(comp.center.valuation())
            d.append(comp.center.valuation() + comp.level)
    total = vc + sum(e * wi for e, wi in zip(exps, w))
    if total >= 0:
        return True
    bound = None
    for l, e in enumerate(exps):
        if e == 0:
            continue
        b = vc + sum(em * w[m] for m, em in enumerate(exps) if m != l) + (e - 1) * w[l] + d[l]
        bound = b if bound is None else min(bound, b)
    return bound is not None and bound >= 0


def _modulate_cell(space, cell, coeff, phase, budget):
    bad = [m for m in phase if not _monomial_constant_on_cell(cell, m[0], m[1])]
    if not bad:
        cfg = cell[0].center.cfg
        point = [comp.center_point() for comp in cell]
        val = LocalElem.zero(cfg)
        for c, exps in phase:
            term = c
            for x, e in zip(point, exps):
                if e:
                    term = term * x**e
            val = val + term
        return [(cell, coeff * add_char(val))]
    levels = [comp.level for comp in cell]
    split = [False] * space.dim
    for _, exps in bad:
        for i, e in enumerate(exps):
            if e != 0:
                split[i] = True
    for i, s in enumerate(split):
        if not s:
            continue
        levels[i] += 1
        if levels[i] > budget:
            raise RefinementBudgetExceeded(
                f"phase refinement needs level {levels[i]} > budget {budget} on coordinate {i}"
            )
    out = []
    for sub in _split_to_levels(cell, levels):
        out.extend(_modulate_cell(space, sub, coeff, phase, budget))
    return out
