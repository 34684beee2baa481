"""Exact arithmetic for F_q, F = F_q((t)), q-power magnitudes and Q(zeta_p).

Everything downstream computes in two exact coefficient domains:

  * truncated Laurent series over F_q with explicit precision tracking
    (``LocalElem``) -- the points of the local field F = F_q((t)); and
  * the cyclotomic field Q(zeta_p) (``CycScalar``) -- the value field of all
    functions and integrals, so that the additive character
    e(x) = zeta_p^{Tr(c_{-1}(x))} stays exact.

No floating point appears anywhere.  A ``LocalElem`` either knows its leading
digit (then it has a valuation) or is *zero to precision N*: indistinguishable
from 0 below t^N.  Operations that would need an unknown digit raise instead
of guessing.
"""

from __future__ import annotations

from fractions import Fraction

# Relative number of digits produced when inverting an exact element
# (1/(1+t) has no finite exact form).  Generous for the desk-scale levels
# (<= 6) used by every check.
DEFAULT_REL_PREC = 40


class ZeroToPrecision(Exception):
    """A valuation was required but no nonzero digit is known."""


class InsufficientPrecision(Exception):
    """A digit or membership decision exceeds the known precision."""


class SingularMap(Exception):
    """A linear/affine substitution is not invertible at known precision."""


class RefinementBudgetExceeded(Exception):
    """Cell refinement hit the configured maximum level."""


class BudgetExceeded(Exception):
    """A brute-force enumeration was asked to exceed its sampling budget."""


class UnknownCheck(Exception):
    """The harness was asked to run a check that is not registered."""


def _is_prime(n):
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


class FieldConfig:
    """Parameters of F_q((t)): an odd prime p, exponent f, q = p^f.

    Residue-field elements are stored as integer codes 0..q-1 (base-p digit
    vectors of polynomial coefficients for f > 1).  All F_q arithmetic is
    table driven, with the tables built once per configuration.
    """

    def __init__(self, p=3, f=1):
        if not _is_prime(p) or p == 2:
            raise ValueError("p must be an odd prime (characteristic != 2)")
        if f < 1:
            raise ValueError("f must be >= 1")
        self.p = p
        self.f = f
        self.q = p**f
        self._modulus = self._find_irreducible() if f > 1 else None
        self._build_tables()

    # -- residue field internals ------------------------------------------

    def _poly_of(self, code):
        p = self.p
        return tuple((code // p**i) % p for i in range(self.f))

    def _code_of(self, poly):
        return sum(c * self.p**i for i, c in enumerate(poly))

    def _poly_mul(self, a, b):
        p, f = self.p, self.f
        prod = [0] * (2 * f - 1)
        for i, ai in enumerate(a):
            if ai:
                for j, bj in enumerate(b):
                    prod[i + j] = (prod[i + j] + ai * bj) % p
        # reduce modulo the fixed irreducible x^f - m(x)
        for k in range(2 * f - 2, f - 1, -1):
            c = prod[k]
            if c:
                prod[k] = 0
                for i, mi in enumerate(self._modulus):
                    prod[k - f + i] = (prod[k - f + i] - c * mi) % p
        return tuple(prod[:f])

    def _find_irreducible(self):
        # monic x^f + m_{f-1}x^{f-1} + ... + m_0, smallest in lex code order;
        # irreducibility by exhaustive root/factor check is fine at this size
        p, f = self.p, self.f
        for code in range(p**f):
            m = self._poly_of(code)
            if self._is_irreducible(m):
                return m
        raise AssertionError("no irreducible polynomial found")

    def _is_irreducible(self, m):
        # x^f = -m(x) defines the quotient ring; test that x^(p^f) == x and
        # x^(p^(f/l)) != x for prime divisors l of f
        p, f = self.p, self.f
        self._modulus = m

        def frob_pow(code, e):
            # e-fold Frobenius: code ^ (p^e)
            r = self._poly_of(code)
            for _ in range(e):
                acc = r
                for _ in range(p - 1):
                    acc = self._poly_mul(acc, r)
                r = acc
            return self._code_of(r)

        x = self._code_of(tuple(1 if i == 1 else 0 for i in range(f)))
        if frob_pow(x, f) != x:
            return False
        for l in range(2, f + 1):
            if f % l == 0 and _is_prime(l):
                if frob_pow(x, f // l) == x:
                    return False
        return True

    def _build_tables(self):
        p, f, q = self.p, self.f, self.q
        if f == 1:
            self.add_table = None  # modular arithmetic directly
            self.mul_table = None
            self.inv_table = tuple(pow(a, p - 2, p) if a else 0 for a in range(p))
            self.neg_table = tuple((-a) % p for a in range(p))
            self.trace_table = tuple(range(p))
            return
        add = []
        mul = []
        for a in range(q):
            pa = self._poly_of(a)
            add.append(tuple(self._code_of(tuple((x + y) % p for x, y in zip(pa, self._poly_of(b)))) for b in range(q)))
            mul.append(tuple(self._code_of(self._poly_mul(pa, self._poly_of(b))) for b in range(q)))
        self.add_table = tuple(add)
        self.mul_table = tuple(mul)
        inv = [0] * q
        for a in range(1, q):
            for b in range(1, q):
                if mul[a][b] == 1:
                    inv[a] = b
                    break
        self.inv_table = tuple(inv)
        self.neg_table = tuple(self._code_of(tuple((-x) % p for x in self._poly_of(a))) for a in range(q))
        # Tr(a) = a + a^p + ... + a^(p^(f-1)), an element of F_p
        trace = []
        for a in range(q):
            s, frob = 0, a
            for _ in range(f):
                s = add[s][frob]
                fr = frob
                for _ in range(p - 1):
                    fr = mul[fr][frob]
                frob = fr
            poly = self._poly_of(s)
            assert all(c == 0 for c in poly[1:])
            trace.append(poly[0])
        self.trace_table = tuple(trace)

    # -- residue field API (elements are int codes 0..q-1) -----------------

    def fq_add(self, a, b):
        if self.f == 1:
            return (a + b) % self.p
        return self.add_table[a][b]

    def fq_neg(self, a):
        return self.neg_table[a]

    def fq_sub(self, a, b):
        return self.fq_add(a, self.fq_neg(b))

    def fq_mul(self, a, b):
        if self.f == 1:
            return (a * b) % self.p
        return self.mul_table[a][b]

    def fq_inv(self, a):
        if a == 0:
            raise ZeroDivisionError("0 has no inverse in F_q")
        return self.inv_table[a]

    def fq_trace(self, a):
        """Trace to F_p, as an integer 0..p-1."""
        return self.trace_table[a]

    def fq_from_int(self, n):
        """Image of an integer under Z -> F_p -> F_q."""
        return n % self.p

    def __eq__(self, other):
        return isinstance(other, FieldConfig) and (self.p, self.f) == (other.p, other.f)

    def __hash__(self):
        return hash((self.p, self.f))

    def __repr__(self):
        return f"FieldConfig(p={self.p}, f={self.f})"


class QPower:
    """The exact rational q^k, tracked by its exponent."""

    __slots__ = ("q", "k")

    def __init__(self, q, k):
        self.q = q
        self.k = k

    def __mul__(self, other):
        if isinstance(other, QPower):
            if other.q != self.q:
                raise ValueError("mixed q")
            return QPower(self.q, self.k + other.k)
        return NotImplemented

    def __pow__(self, e):
        return QPower(self.q, self.k * e)

    def inverse(self):
        return QPower(self.q, -self.k)

    def as_fraction(self):
        return Fraction(self.q**self.k) if self.k >= 0 else Fraction(1, self.q ** (-self.k))

    def __eq__(self, other):
        if isinstance(other, QPower):
            return self.q == other.q and self.k == other.k
        if isinstance(other, (int, Fraction)):
            return self.as_fraction() == other
        return NotImplemented

    def __hash__(self):
        return hash(self.as_fraction())

    def __repr__(self):
        return f"q^{self.k}"


class LocalElem:
    """A truncated Laurent series sum_{i} digits[i] t^(val+i) + O(t^prec).

    ``prec is None`` means the element is exact (all unstored digits are 0).
    ``digits == ()`` with finite ``prec`` is the distinguished
    zero-to-precision state: the element lies in t^prec O but no nonzero
    digit is known.  ``digits == ()`` with ``prec is None`` is the exact 0.

    Values are immutable; arithmetic propagates precision pessimistically and
    never fabricates digits.
    """

    __slots__ = ("cfg", "val", "digits", "prec")

    def __init__(self, cfg, val, digits, prec=None):
        self.cfg = cfg
        digits = tuple(digits)
        # strip leading zeros (raising val), then trailing zeros
        while digits and digits[0] == 0:
            digits = digits[1:]
            val += 1
        while digits and digits[-1] == 0:
            digits = digits[:-1]
        if prec is not None and digits:
            if val >= prec:
                digits = ()
            else:
                digits = digits[: prec - val]
                while digits and digits[-1] == 0:
                    digits = digits[:-1]
                if not digits:
                    pass
        if not digits:
            val = 0
        self.val = val
        self.digits = digits
        self.prec = prec

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zero(cfg):
        return LocalElem(cfg, 0, ())

    @staticmethod
    def ztp(cfg, n):
        """Zero to precision n: an unknown element of t^n O."""
        return LocalElem(cfg, 0, (), n)

    @staticmethod
    def one(cfg):
        return LocalElem(cfg, 0, (1,))

    @staticmethod
    def monomial(cfg, k, c=1):
        """c * t^k for a residue code c."""
        return LocalElem(cfg, k, (c % cfg.q if isinstance(c, int) else c,))

    @staticmethod
    def from_int(cfg, n):
        return LocalElem(cfg, 0, (cfg.fq_from_int(n),))

    @staticmethod
    def from_digits(cfg, val, digits, prec=None):
        return LocalElem(cfg, val, digits, prec)

    # -- basic queries -------------------------------------------------------

    @property
    def is_exact_zero(self):
        return not self.digits and self.prec is None

    @property
    def is_ztp(self):
        return not self.digits and self.prec is not None

    @property
    def is_zeroish(self):
        return not self.digits

    def valuation(self):
        if self.is_ztp:
            raise ZeroToPrecision(f"no known digit below t^{self.prec}")
        if self.is_exact_zero:
            raise ZeroToPrecision("exact zero has no valuation")
        return self.val

    def abs_q(self):
        """|x| = q^{-v(x)} as an exact QPower."""
        return QPower(self.cfg.q, -self.valuation())

    def digit(self, i):
        """Coefficient of t^i, raising if it is not determined."""
        if self.prec is not None and i >= self.prec:
            raise InsufficientPrecision(f"digit of t^{i} unknown (precision {self.prec})")
        if not self.digits:
            return 0
        if i < self.val or i >= self.val + len(self.digits):
            return 0
        return self.digits[i - self.val]

    def known_to(self, n):
        """True when every digit below t^n is determined."""
        return self.prec is None or self.prec >= n

    # -- arithmetic -----------------------------------------------------------

    def _merge_prec(self, other):
        a, b = self.prec, other.prec
        if a is None:
            return b
        if b is None:
            return a
        return min(a, b)

    def __add__(self, other):
        if not isinstance(other, LocalElem):
            return NotImplemented
        cfg = self.cfg
        prec = self._merge_prec(other)
        if not self.digits:
            return LocalElem(cfg, other.val, other.digits, prec)
        if not other.digits:
            return LocalElem(cfg, self.val, self.digits, prec)
        lo = min(self.val, other.val)
        hi = max(self.val + len(self.digits), other.val + len(other.digits))
        if prec is not None:
            hi = min(hi, prec)
        out = []
        for i in range(lo, hi):
            a = self.digits[i - self.val] if self.val <= i < self.val + len(self.digits) else 0
            b = other.digits[i - other.val] if other.val <= i < other.val + len(other.digits) else 0
            out.append(cfg.fq_add(a, b))
        return LocalElem(cfg, lo, out, prec)

    def __neg__(self):
        return LocalElem(self.cfg, self.val, tuple(self.cfg.fq_neg(d) for d in self.digits), self.prec)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if not isinstance(other, LocalElem):
            return NotImplemented
        cfg = self.cfg
        if self.is_exact_zero or other.is_exact_zero:
            return LocalElem.zero(cfg)
        if not self.digits or not other.digits:
            # zero-to-precision times anything: bound the valuation shift
            if not self.digits and not other.digits:
                return LocalElem.ztp(cfg, self.prec + other.prec)
            z, x = (self, other) if not self.digits else (other, self)
            return LocalElem.ztp(cfg, z.prec + x.val)
        # relative precisions: digits known beyond the lead
        ra = None if self.prec is None else self.prec - self.val
        rb = None if other.prec is None else other.prec - other.val
        if ra is None:
            rel = rb
        elif rb is None:
            rel = ra
        else:
            rel = min(ra, rb)
        val = self.val + other.val
        prec = None if rel is None else val + rel
        n = len(self.digits) + len(other.digits) - 1
        if rel is not None:
            n = min(n, rel)
        out = [0] * n
        for i, a in enumerate(self.digits):
            if a == 0 or i >= n:
                continue
            for j, b in enumerate(other.digits):
                if i + j >= n:
                    break
                if b:
                    out[i + j] = cfg.fq_add(out[i + j], cfg.fq_mul(a, b))
        return LocalElem(cfg, val, out, prec)

    def inverse(self):
        if self.is_zeroish:
            if self.is_exact_zero:
                raise ZeroDivisionError("exact zero is not invertible")
            raise ZeroToPrecision("cannot invert zero-to-precision element")
        cfg = self.cfg
        rel = DEFAULT_REL_PREC if self.prec is None else self.prec - self.val
        u = self.digits
        inv0 = cfg.fq_inv(u[0])
        out = [inv0]
        # schoolbook series inversion: sum_{j<=i} u_j out_{i-j} = 0 for i >= 1
        for i in range(1, rel):
            s = 0
            for j in range(1, min(i, len(u) - 1) + 1):
                s = cfg.fq_add(s, cfg.fq_mul(u[j], out[i - j]))
            out.append(cfg.fq_mul(cfg.fq_neg(s), inv0))
        return LocalElem(cfg, -self.val, out, -self.val + rel)

    def __truediv__(self, other):
        return self * other.inverse()

    def __pow__(self, e):
        if e == 0:
            return LocalElem.one(self.cfg)
        base = self if e > 0 else self.inverse()
        out = base
        for _ in range(abs(e) - 1):
            out = out * base
        return out

    def shift(self, k):
        """Multiply by t^k."""
        if not self.digits:
            return LocalElem(self.cfg, 0, (), None if self.prec is None else self.prec + k)
        return LocalElem(self.cfg, self.val + k, self.digits, None if self.prec is None else self.prec + k)

    def reduce_mod(self, n):
        """Exact truncation keeping digits below t^n (requires them known)."""
        if not self.known_to(n):
            raise InsufficientPrecision(f"digits below t^{n} not all known")
        if not self.digits:
            return LocalElem.zero(self.cfg)
        return LocalElem(self.cfg, self.val, self.digits[: max(0, n - self.val)])

    def with_prec(self, n):
        """Forget digits at and beyond t^n."""
        return LocalElem(self.cfg, self.val, self.digits, n if self.prec is None else min(n, self.prec))

    def exact(self):
        """Reinterpret the stored digits as an exact element."""
        return LocalElem(self.cfg, self.val, self.digits)

    # -- comparisons ----------------------------------------------------------

    def __eq__(self, other):
        if not isinstance(other, LocalElem):
            return NotImplemented
        return (self.val, self.digits, self.prec) == (other.val, other.digits, other.prec)

    def __hash__(self):
        return hash((self.val, self.digits, self.prec))

    def __repr__(self):
        if self.is_exact_zero:
            return "0"
        if self.is_ztp:
            return f"O(t^{self.prec})"
        terms = [f"{d}*t^{self.val + i}" if self.val + i else str(d) for i, d in enumerate(self.digits) if d]
        s = " + ".join(terms)
        if self.prec is not None:
            s += f" + O(t^{self.prec})"
        return s


class CycScalar:
    """An exact element of Q(zeta_p), stored in the basis 1, z, ..., z^(p-2).

    The basis is a Q-basis, so equality of coefficient vectors is exact
    equality in the field; z^(p-1) reduces to -(1 + z + ... + z^(p-2)).
    """

    __slots__ = ("p", "coeffs")

    def __init__(self, p, coeffs):
        coeffs = tuple(Fraction(c) for c in coeffs)
        if len(coeffs) != p - 1:
            raise ValueError("coefficient vector must have length p-1")
        self.p = p
        self.coeffs = coeffs

    @staticmethod
    def zero(p):
        return CycScalar(p, (0,) * (p - 1))

    @staticmethod
    def one(p):
        return CycScalar(p, (1,) + (0,) * (p - 2))

    @staticmethod
    def rational(p, r):
        return CycScalar(p, (Fraction(r),) + (0,) * (p - 2))

    @staticmethod
    def zeta_pow(p, k):
        k %= p
        if k == p - 1:
            return CycScalar(p, (-1,) * (p - 1))
        v = [0] * (p - 1)
        v[k] = 1
        return CycScalar(p, v)

    @property
    def is_zero(self):
        return all(c == 0 for c in self.coeffs)

    def __add__(self, other):
        other = self._coerce(other)
        return CycScalar(self.p, tuple(a + b for a, b in zip(self.coeffs, other.coeffs)))

    __radd__ = __add__

    def __neg__(self):
        return CycScalar(self.p, tuple(-a for a in self.coeffs))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def _coerce(self, other):
        if isinstance(other, CycScalar):
            if other.p != self.p:
                raise ValueError("mixed cyclotomic orders")
            return other
        if isinstance(other, (int, Fraction)):
            return CycScalar.rational(self.p, other)
        if isinstance(other, QPower):
            return CycScalar.rational(self.p, other.as_fraction())
        raise TypeError(f"cannot coerce {type(other)} to CycScalar")

    def __mul__(self, other):
        if isinstance(other, (int, Fraction)):
            r = Fraction(other)
            return CycScalar(self.p, tuple(c * r for c in self.coeffs))
        if isinstance(other, QPower):
            return self * other.as_fraction()
        other = self._coerce(other)
        p = self.p
        conv = [Fraction(0)] * (2 * p - 3)
        for i, a in enumerate(self.coeffs):
            if a:
                for j, b in enumerate(other.coeffs):
                    if b:
                        conv[i + j] += a * b
        out = list(conv[: p - 1])
        # z^k for k >= p-1: z^(p-1) = -(1+...+z^(p-2)), z^p = 1, ...
        for k in range(p - 1, 2 * p - 3):
            c = conv[k]
            if not c:
                continue
            r = k % p
            if r == p - 1:
                for i in range(p - 1):
                    out[i] -= c
            else:
                out[r] += c
        return CycScalar(p, out)

    __rmul__ = __mul__

    def scale(self, r):
        return self * Fraction(r)

    def __eq__(self, other):
        if isinstance(other, (int, Fraction, QPower, CycScalar)):
            return self.coeffs == self._coerce(other).coeffs
        return NotImplemented

    def __hash__(self):
        return hash((self.p, self.coeffs))

    def __repr__(self):
        if self.is_zero:
            return "0"
        parts = []
        for i, c in enumerate(self.coeffs):
            if c == 0:
                continue
            base = "1" if i == 0 else ("z" if i == 1 else f"z^{i}")
            parts.append(f"{c}*{base}" if i else str(c))
        return " + ".join(parts)

    def serialize(self):
        return [f"{c.numerator}/{c.denominator}" for c in self.coeffs]

    @staticmethod
    def deserialize(p, data):
        return CycScalar(p, tuple(Fraction(s) for s in data))


def add_char(x):
    """The fixed additive character e(x) = zeta_p^{Tr(c_{-1}(x))}.

    Trivial on O, nontrivial on t^{-1}O (conductor O).  Requires the t^{-1}
    digit of x to be determined.
    """
    c = x.digit(-1)
    return CycScalar.zeta_pow(x.cfg.p, x.cfg.fq_trace(c))


def theta(u):
    """Character of the unipotent group: theta(n(b)) = e(b)."""
    return add_char(u)
