"""Linear-assignment solver front end.

Selects the compiled kernel when the extension is importable, else the
numpy fallback (force the fallback with CRATERKIT_PURE_PYTHON=1). On top of
the raw solve it applies a lexicographic tie-break so that, among cost-equal
optimal permutations, the smallest one is returned deterministically.
"""
from __future__ import annotations

import os

import numpy as np

if os.environ.get("CRATERKIT_PURE_PYTHON") == "1":
    from ._lapjv_py import lapjv as _lapjv

    _BACKEND = "python"
else:
    try:
        from ._lapjv import lapjv as _lapjv  # type: ignore[attr-defined]

        _BACKEND = "cython"
    except ImportError:
        from ._lapjv_py import lapjv as _lapjv

        _BACKEND = "python"


def solver_backend() -> str:
    """Name of the active assignment kernel: 'cython' or 'python'."""
    return _BACKEND


def solve(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost row-to-column permutation of a square matrix.

    Ties between cost-equal optima resolve to the lexicographically
    smallest permutation.
    """
    C = np.ascontiguousarray(cost, dtype=np.float64)
    x, u, v = _lapjv(C)
    return _lex_smallest(C, x, u, v)


def _lex_smallest(C: np.ndarray, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rewire an optimal assignment to the lexicographically smallest one.

    Optimal permutations are exactly the perfect matchings of the
    tight-edge graph (reduced cost ~ 0 under the optimal duals). Rows are
    fixed in order to their smallest feasible tight column; feasibility of
    a candidate is checked with an augmenting-path search for the row it
    displaces.
    """
    n = x.shape[0]
    if n == 0:
        return x
    tol = 1e-10 * (1.0 + float(np.abs(C).max()))

    # Unique-optimum fast path: exactly one tight edge per row means the
    # matching cannot be rewired. Counted in row blocks to keep the scan
    # vectorized without materializing the full reduced-cost matrix.
    n_tight = 0
    block = max(1, min(n, 4_000_000 // max(n, 1)))
    for start in range(0, n, block):
        stop = min(start + block, n)
        reduced = C[start:stop] - u[start:stop, None] - v[None, :]
        n_tight += int((reduced <= tol).sum())
        if n_tight > n:
            break
    if n_tight <= n:
        return x

    x = x.copy()
    y = np.empty(n, dtype=np.intp)
    y[x] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)

    for i in range(n):
        cur = int(x[i])
        tight_i = np.nonzero((C[i] - u[i] - v <= tol) & ~fixed)[0]
        for j in tight_i:
            j = int(j)
            if j >= cur:
                break
            if _reroute(C, u, v, tol, x, y, fixed, i, j):
                break
        fixed[x[i]] = True
    return x


def _reroute(C, u, v, tol, x, y, fixed, i, j) -> bool:
    """Try to fix row i to column j, rematching the displaced row.

    Searches an augmenting path over tight edges from the row that owned j;
    the only free column is row i's former one. Mutates x/y on success.
    """
    k = int(y[j])
    freecol = int(x[i])
    x[i] = j
    y[j] = i
    y[freecol] = -1

    visited = fixed.copy()
    visited[j] = True
    # Each frame: [row, candidate columns, position, chosen column].
    frames = [[k, np.nonzero((C[k] - u[k] - v <= tol) & ~visited)[0], 0, -1]]
    while frames:
        fr = frames[-1]
        row, cand, pos = fr[0], fr[1], fr[2]
        advanced = False
        while pos < len(cand):
            c = int(cand[pos])
            pos += 1
            if visited[c]:
                continue
            visited[c] = True
            fr[2] = pos
            fr[3] = c
            owner = int(y[c])
            if owner == -1:
                for frame in frames:
                    x[frame[0]] = frame[3]
                    y[frame[3]] = frame[0]
                return True
            frames.append(
                [owner, np.nonzero((C[owner] - u[owner] - v <= tol) & ~visited)[0], 0, -1]
            )
            advanced = True
            break
        if not advanced:
            fr[2] = pos
            frames.pop()

    # No augmenting path: restore the matching.
    x[i] = freecol
    y[freecol] = i
    y[j] = k
    return False
