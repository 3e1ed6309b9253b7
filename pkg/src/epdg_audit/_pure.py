"""Pure-Python modular exponentiation kernels.

Fallback for :mod:`epdg_audit._native` when the extension is not built.
"""

from __future__ import annotations


def powmod(base: int, exponent: int, modulus: int) -> int:
    if modulus <= 0:
        raise ValueError("modulus must be positive")
    if base < 0 or exponent < 0:
        raise ValueError("negative operand")
    return pow(base, exponent, modulus)


def window_width(bits: int) -> int:
    return min(range(1, 11), key=lambda w: (-(-bits // w) + (2 << w), w))


class FixedBase:
    """Fixed-base exponentiation with a precomputed table (Yao's method)."""

    def __init__(self, base: int, modulus: int, bits: int):
        self.base = base
        self.modulus = modulus
        self.bits = bits
        self.width = window_width(bits)
        count = -(-bits // self.width)
        step = 1 << self.width
        table = [base % modulus]
        for _ in range(count - 1):
            table.append(pow(table[-1], step, modulus))
        self._table = table

    def pow(self, exponent: int) -> int:
        if exponent < 0:
            raise ValueError("negative exponent")
        if exponent.bit_length() > self.bits:
            return pow(self.base, exponent, self.modulus)
        w, m = self.width, self.modulus
        top = (1 << w) - 1
        buckets: dict[int, list[int]] = {}
        for i in range(len(self._table)):
            d = exponent & top
            exponent >>= w
            if d:
                buckets.setdefault(d, []).append(i)
        acc = run = 1
        for d in range(top, 0, -1):
            for i in buckets.get(d, ()):
                run = run * self._table[i] % m
            acc = acc * run % m
        return acc
