"""Compare the native and pure-Python modexp kernels against builtin pow.

    python3 benchmarks/bench_modexp.py [--groups 2,14,18] [--repeat 20]

Generic powmod runs a random base to a full-width exponent; fixed-base runs
g^a with the precomputed table for the group generator.
"""

from __future__ import annotations

import argparse
import random
import timeit

from epdg_audit import _pure
from epdg_audit.dh_engine import group_params

try:
    from epdg_audit import _native
except ImportError:  # extension not built
    _native = None


def bench(fn, repeat: int) -> float:
    """Best per-call time in milliseconds."""
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1000


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", default="1,2,5,14,15,16,17,18")
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = random.Random(args.seed)
    backends = [("builtin", None), ("pure", _pure)] + ([("native", _native)] if _native else [])
    header = f"{'group':>5} {'bits':>5}  {'kernel':<8} {'powmod ms':>10} {'fixed-base ms':>14}"
    print(header)
    print("-" * len(header))
    for gid in (int(g) for g in args.groups.split(",")):
        grp = group_params(gid)
        base, exp = rng.randrange(2, grp.p - 1), rng.randrange(2, grp.p - 1)
        expected = pow(base, exp, grp.p)
        expected_fb = pow(grp.g, exp, grp.p)
        for name, mod in backends:
            if mod is None:
                generic = bench(lambda: pow(base, exp, grp.p), args.repeat)
                fixed = bench(lambda: pow(grp.g, exp, grp.p), args.repeat)
            else:
                assert mod.powmod(base, exp, grp.p) == expected
                table = mod.FixedBase(grp.g, grp.p, grp.bits)
                assert table.pow(exp) == expected_fb
                generic = bench(lambda: mod.powmod(base, exp, grp.p), args.repeat)
                fixed = bench(lambda: table.pow(exp), args.repeat)
            print(f"{gid:>5} {grp.bits:>5}  {name:<8} {generic:>10.3f} {fixed:>14.3f}")


if __name__ == "__main__":
    main()
