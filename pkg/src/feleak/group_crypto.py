"""Inner-product functional encryption over a safe-prime group.

Implements the classic DDH-based scheme: a key bound to a vector y decrypts
an encryption of x to the inner product <x,y> and nothing else. Decryption
lands on g^<x,y>, so the final step is a discrete logarithm over a bounded
signed range, done with baby-step/giant-step. Also provides the four-branch
key-derivation algebra for scalar ops (+,-,*,/) against a committed operand.

Parameter sizes here are demonstration-scale. Nothing in this module is
hardened against side channels and the defaults are far below production
security margins.
"""

import random
from dataclasses import dataclass

import gmpy2 as gp

DEFAULT_BITS = 512
MIN_BITS = 64
PLAINTEXT_BOUND = 2 ** 16  # default per-component bound for x and y
FEBO_OPS = ("+", "-", "*", "/")


class DlogNotFound(Exception):
    """No exponent within the searched range maps to the target element."""


class NonInvertible(Exception):
    """Division key requested for a y with no inverse mod q."""


@dataclass(frozen=True)
class GroupParams:
    """Multiplicative subgroup of order q inside Z_p*, p = 2q + 1."""

    p: int
    g: int
    q: int

    def validate(self):
        if not (gp.is_prime(self.p) and gp.is_prime(self.q)):
            raise ValueError("p and q must both be prime")
        if self.p != 2 * self.q + 1:
            raise ValueError("p must equal 2q + 1")
        if self.g in (0, 1) or gp.powmod(self.g, self.q, self.p) != 1:
            raise ValueError("g must generate the order-q subgroup")


@dataclass
class MasterKeys:
    """Master secret vector s and the matching public vector h_i = g^s_i."""

    msk: list
    mpk: list

    @property
    def dimension(self):
        return len(self.msk)

    def verify(self, params: GroupParams) -> bool:
        """Recheck h_i = g^s_i for every component."""
        return all(
            gp.powmod(params.g, s, params.p) == h
            for s, h in zip(self.msk, self.mpk)
        ) and len(self.msk) == len(self.mpk)


@dataclass
class Ciphertext:
    ct0: int            # g^r
    cts: list           # h_i^r * g^{x_i}, one per component

    @property
    def dimension(self):
        return len(self.cts)


@dataclass
class FunctionalKey:
    y: list             # the function vector, known to the key holder
    sk: int             # <y, s> mod q


@dataclass
class FeboKey:
    op: str
    key: int


def _make_rng(seed):
    # OS entropy unless a seed is given; tests need reproducible keys
    return random.SystemRandom() if seed is None else random.Random(seed)


def _generate_group(bits, rng) -> GroupParams:
    # safe prime: draw q candidates of bits-1 bits until p = 2q+1 is prime
    while True:
        cand = gp.mpz(rng.getrandbits(bits - 1))
        cand = gp.bit_set(cand, bits - 2)
        q = gp.next_prime(cand)
        p = 2 * q + 1
        if q.bit_length() == bits - 1 and gp.is_prime(p):
            break
    while True:
        h = rng.randrange(2, int(p) - 1)
        g = gp.powmod(h, 2, p)  # squares form the order-q subgroup
        if g != 1:
            break
    return GroupParams(p=int(p), g=int(g), q=int(q))


def setup(dimension: int, bits: int = DEFAULT_BITS, seed=None):
    """Generate group parameters and a master key pair of the given dimension."""
    if dimension < 1:
        raise ValueError("dimension must be at least 1")
    if bits < MIN_BITS:
        raise ValueError("bits must be at least %d" % MIN_BITS)
    rng = _make_rng(seed)
    params = _generate_group(bits, rng)
    msk = [rng.randrange(params.q) for _ in range(dimension)]
    mpk = [int(gp.powmod(params.g, s, params.p)) for s in msk]
    return params, MasterKeys(msk=msk, mpk=mpk)


def _check_vector(v, eta, bound, name):
    if len(v) != eta:
        raise ValueError("%s has length %d, expected %d" % (name, len(v), eta))
    for comp in v:
        if abs(int(comp)) > bound:
            raise ValueError("%s component %d exceeds bound %d" % (name, comp, bound))


def feip_encrypt(params: GroupParams, mpk, x, bound=PLAINTEXT_BOUND, seed=None) -> Ciphertext:
    """Encrypt integer vector x under the public key vector mpk."""
    _check_vector(x, len(mpk), bound, "x")
    rng = _make_rng(seed)
    p, g, q = params.p, params.g, params.q
    r = rng.randrange(1, q)
    ct0 = gp.powmod(g, r, p)
    cts = [
        int(gp.powmod(h, r, p) * gp.powmod(g, int(xi) % q, p) % p)
        for h, xi in zip(mpk, x)
    ]
    return Ciphertext(ct0=int(ct0), cts=cts)


def feip_keyderive(params: GroupParams, msk, y, bound=PLAINTEXT_BOUND) -> FunctionalKey:
    """Derive the decryption key for the inner product with y: sk = <y,s> mod q."""
    _check_vector(y, len(msk), bound, "y")
    sk = sum(int(yi) * int(si) for yi, si in zip(y, msk)) % params.q
    return FunctionalKey(y=[int(yi) for yi in y], sk=sk)


class BsgsTable:
    """Shared baby-step table for discrete logs base g, read-only once built.

    Keys are the low 64 bits of the group element, so lookups are cheap and
    the table stays small; a candidate hit is confirmed with one
    exponentiation, and same-key truncation collisions go to an overflow map
    keyed by the full residue.
    """

    __slots__ = ("p", "g", "bound", "baby_count", "_baby", "_overflow", "_giant")

    _MASK = (1 << 64) - 1

    def __init__(self, params: GroupParams, bound: int, baby_count=None):
        if bound < 1:
            raise ValueError("bound must be positive")
        self.p = gp.mpz(params.p)
        self.g = gp.mpz(params.g)
        self.bound = int(bound)
        m = baby_count or gp.isqrt(2 * self.bound) + 1
        self.baby_count = int(m)
        baby = {}
        overflow = {}
        w = gp.mpz(1)
        for j in range(self.baby_count):
            key = int(w) & self._MASK
            if key in baby:
                overflow[int(w)] = j
            else:
                baby[key] = j
            w = w * self.g % self.p
        self._baby = baby
        self._overflow = overflow
        # giant stride g^{-m}
        self._giant = gp.invert(gp.powmod(self.g, self.baby_count, self.p), self.p)

    def solve(self, target, bound=None) -> int:
        """Return e in [-bound, bound] with g^e = target, else DlogNotFound."""
        bound = self.bound if bound is None else int(bound)
        if bound > self.bound:
            raise ValueError("table built for bound %d, asked for %d" % (self.bound, bound))
        p, g = self.p, self.g
        # shift to the nonnegative range [0, 2*bound]
        w = gp.mpz(target) * gp.powmod(g, bound, p) % p
        span = 2 * bound
        m = self.baby_count
        steps = span // m + 1
        baby, overflow, mask = self._baby, self._overflow, self._MASK
        for i in range(steps):
            j = baby.get(int(w) & mask)
            if j is not None:
                if gp.powmod(g, j, p) != w:
                    # truncated-key collision; the overflow map settles it
                    j = overflow.get(int(w))
                if j is not None:
                    e = i * m + j
                    if e <= span:
                        return e - bound
            w = w * self._giant % p
        raise DlogNotFound("no exponent within [-%d, %d] matches target" % (bound, bound))


def dlog_bsgs(params: GroupParams, target, bound: int, table: BsgsTable = None) -> int:
    """Discrete log of target base g over the signed range [-bound, bound].

    Builds a one-shot table unless a prebuilt (larger or equal bound) one is
    supplied; sharing the table is what makes bulk decryption fast.
    """
    if table is None:
        table = BsgsTable(params, bound)
    return table.solve(target, bound)


def feip_decrypt(params: GroupParams, ct: Ciphertext, fk: FunctionalKey,
                 bound: int, table: BsgsTable = None) -> int:
    """Recover <x,y> from a ciphertext and the key for y.

    The pairing collapses to g^<x,y>; the caller promises |<x,y>| <= bound
    (eta * B^2 is always safe for components bounded by B).
    """
    if len(fk.y) != len(ct.cts):
        raise ValueError("key dimension %d does not match ciphertext %d"
                         % (len(fk.y), len(ct.cts)))
    p, q = params.p, params.q
    num = gp.mpz(1)
    for cti, yi in zip(ct.cts, fk.y):
        num = num * gp.powmod(cti, int(yi) % q, p) % p
    den = gp.powmod(ct.ct0, fk.sk, p)
    t = num * gp.invert(den, p) % p
    return dlog_bsgs(params, t, bound, table)


def febo_keyderive(params: GroupParams, s: int, cmt, op: str, y: int) -> FeboKey:
    """Derive the scalar-operation key against commitment cmt, secret s.

    The four branches:
      +  cmt^s * g^-y
      -  cmt^s * g^y
      *  (cmt^s)^y
      /  (cmt^s)^(y^-1 mod q), defined only when y is invertible mod q
    """
    if op not in FEBO_OPS:
        raise ValueError("op must be one of %s" % (FEBO_OPS,))
    p, g, q = params.p, params.g, params.q
    base = gp.powmod(cmt, s, p)
    if op == "+":
        key = base * gp.powmod(g, (-int(y)) % q, p) % p
    elif op == "-":
        key = base * gp.powmod(g, int(y) % q, p) % p
    elif op == "*":
        key = gp.powmod(base, int(y) % q, p)
    else:
        if gp.gcd(y, q) != 1:
            raise NonInvertible("y = %d has no inverse mod q" % y)
        key = gp.powmod(base, gp.invert(y, q), p)
    return FeboKey(op=op, key=int(key))


# ---------------------------------------------------------------------------
# serialization: integer vectors as length-prefixed big-endian byte arrays
# ---------------------------------------------------------------------------

def _signed_length(v: int) -> int:
    # minimal byte count for two's-complement, always at least one byte
    if v >= 0:
        return v.bit_length() // 8 + 1
    return max(1, (v + 1).bit_length() // 8 + 1)


def encode_int_vector(vec) -> bytes:
    """4-byte big-endian count, then per component a 4-byte big-endian length
    and that many bytes of minimal two's-complement signed big-endian."""
    out = bytearray(len(vec).to_bytes(4, "big"))
    for comp in vec:
        v = int(comp)
        raw = v.to_bytes(_signed_length(v), "big", signed=True)
        out += len(raw).to_bytes(4, "big")
        out += raw
    return bytes(out)


def decode_int_vector(data: bytes) -> list:
    """Inverse of encode_int_vector; rejects truncated or oversized buffers."""
    if len(data) < 4:
        raise ValueError("truncated vector header")
    count = int.from_bytes(data[:4], "big")
    pos = 4
    vec = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError("truncated component header")
        ln = int.from_bytes(data[pos:pos + 4], "big")
        pos += 4
        if pos + ln > len(data):
            raise ValueError("truncated component body")
        vec.append(int.from_bytes(data[pos:pos + ln], "big", signed=True))
        pos += ln
    if pos != len(data):
        raise ValueError("%d trailing bytes after vector" % (len(data) - pos))
    return vec


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    return encode_int_vector([ct.ct0, *ct.cts])


def deserialize_ciphertext(data: bytes) -> Ciphertext:
    vec = decode_int_vector(data)
    if not vec:
        raise ValueError("empty ciphertext")
    return Ciphertext(ct0=vec[0], cts=vec[1:])


def serialize_functional_key(fk: FunctionalKey) -> bytes:
    return encode_int_vector([fk.sk, *fk.y])


def deserialize_functional_key(data: bytes) -> FunctionalKey:
    vec = decode_int_vector(data)
    if not vec:
        raise ValueError("empty functional key")
    return FunctionalKey(sk=vec[0], y=vec[1:])


def vector_to_hex(vec) -> str:
    return encode_int_vector(vec).hex()


def vector_from_hex(text: str) -> list:
    return decode_int_vector(bytes.fromhex(text))
