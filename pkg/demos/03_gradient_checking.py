"""Verify every layer's analytic gradients with finite differences.

Each layer's backward pass is compared against central differences of its
forward pass; the full network (two extractors, attention, outer-product
fusion, sex-aware classifier, cross-entropy) is checked end to end. The same
machinery backs the `respifuse gradcheck` CLI command. To see the checker
catch a real error, corrupt one layer's gradient:

    respifuse gradcheck --corrupt conv2d
"""

import sys
import time

from respifuse.cli import run_gradcheck


def main():
    t0 = time.time()
    ok = run_gradcheck()
    print(f"\nall checks {'passed' if ok else 'FAILED'} "
          f"in {time.time() - t0:.1f} s")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
