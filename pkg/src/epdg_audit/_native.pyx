# cython: language_level=3, boundscheck=False, wraparound=False
"""GMP-backed modular exponentiation kernels.

Mirrors the interface of :mod:`epdg_audit._pure`.
"""

from libc.stdlib cimport free, malloc

cdef extern from "gmp.h" nogil:
    ctypedef struct __mpz_struct:
        pass
    ctypedef __mpz_struct mpz_t[1]
    ctypedef __mpz_struct* mpz_ptr
    void mpz_init(mpz_ptr)
    void mpz_clear(mpz_ptr)
    void mpz_set_ui(mpz_ptr, unsigned long)
    void mpz_set(mpz_ptr, const mpz_ptr)
    void mpz_mul(mpz_ptr, const mpz_ptr, const mpz_ptr)
    void mpz_mod(mpz_ptr, const mpz_ptr, const mpz_ptr)
    void mpz_powm(mpz_ptr, const mpz_ptr, const mpz_ptr, const mpz_ptr)
    void mpz_import(mpz_ptr, size_t, int, size_t, int, size_t, const void*)
    void* mpz_export(void*, size_t*, int, size_t, int, size_t, const mpz_ptr)
    int mpz_sgn(const mpz_ptr)


cdef int _load(mpz_ptr r, object v) except -1:
    if v < 0:
        raise ValueError("negative operand")
    cdef bytes b = v.to_bytes((v.bit_length() + 7) // 8 or 1, "big")
    mpz_import(r, len(b), 1, 1, 1, 0, <const char*>b)
    return 0


cdef object _store(mpz_ptr r):
    cdef size_t n = 0
    cdef char* buf
    if mpz_sgn(r) == 0:
        return 0
    buf = <char*>mpz_export(NULL, &n, 1, 1, 1, 0, r)
    try:
        return int.from_bytes(buf[:n], "big")
    finally:
        free(buf)


def powmod(base, exponent, modulus):
    """Return ``base ** exponent % modulus`` for non-negative operands."""
    if modulus <= 0:
        raise ValueError("modulus must be positive")
    cdef mpz_t b, e, m, r
    mpz_init(b); mpz_init(e); mpz_init(m); mpz_init(r)
    try:
        _load(b, base)
        _load(e, exponent)
        _load(m, modulus)
        with nogil:
            mpz_powm(r, b, e, m)
        return _store(r)
    finally:
        mpz_clear(b); mpz_clear(e); mpz_clear(m); mpz_clear(r)


def window_width(int bits):
    cdef int w, best = 1
    cdef long cost, best_cost = -1
    for w in range(1, 11):
        cost = (bits + w - 1) // w + (2 << w)
        if best_cost < 0 or cost < best_cost:
            best, best_cost = w, cost
    return best


cdef class FixedBase:
    """Fixed-base exponentiation with a precomputed table (Yao's method)."""

    cdef mpz_t _mod
    cdef mpz_ptr _table
    cdef int _count
    cdef readonly int width
    cdef readonly int bits
    cdef readonly object base
    cdef readonly object modulus

    def __cinit__(self):
        self._table = NULL
        self._count = 0
        mpz_init(self._mod)

    def __init__(self, base, modulus, int bits):
        cdef int i, j
        self.base = base
        self.modulus = modulus
        self.bits = bits
        self.width = window_width(bits)
        self._count = (bits + self.width - 1) // self.width
        _load(self._mod, modulus)
        self._table = <mpz_ptr>malloc(self._count * sizeof(__mpz_struct))
        if self._table == NULL:
            raise MemoryError()
        for i in range(self._count):
            mpz_init(&self._table[i])
        _load(&self._table[0], base % modulus)
        for i in range(1, self._count):
            mpz_set(&self._table[i], &self._table[i - 1])
            for j in range(self.width):
                mpz_mul(&self._table[i], &self._table[i], &self._table[i])
                mpz_mod(&self._table[i], &self._table[i], self._mod)

    def __dealloc__(self):
        cdef int i
        if self._table != NULL:
            for i in range(self._count):
                mpz_clear(&self._table[i])
            free(self._table)
        mpz_clear(self._mod)

    def pow(self, exponent):
        """Return ``base ** exponent % modulus``."""
        if exponent < 0:
            raise ValueError("negative exponent")
        if exponent.bit_length() > self.bits:
            return powmod(self.base, exponent, self.modulus)
        cdef int w = self.width
        cdef int i, d
        cdef int top = (1 << w) - 1
        cdef int* digits = <int*>malloc(self._count * sizeof(int))
        if digits == NULL:
            raise MemoryError()
        cdef mpz_t acc, run
        mpz_init(acc); mpz_init(run)
        try:
            e = exponent
            for i in range(self._count):
                digits[i] = <int>(e & top)
                e >>= w
            with nogil:
                mpz_set_ui(acc, 1)
                mpz_set_ui(run, 1)
                for d in range(top, 0, -1):
                    for i in range(self._count):
                        if digits[i] == d:
                            mpz_mul(run, run, &self._table[i])
                            mpz_mod(run, run, self._mod)
                    mpz_mul(acc, acc, run)
                    mpz_mod(acc, acc, self._mod)
            return _store(acc)
        finally:
            mpz_clear(acc); mpz_clear(run)
            free(digits)
