"""Pure-numpy fallback for the compiled assignment kernel.

Same algorithm as craterkit._lapjv (column reduction + shortest augmenting
paths), with the inner column scan vectorized. Kept in lockstep with the
Cython source: both backends must return identical assignments and duals.
"""
from __future__ import annotations

import numpy as np


def lapjv(cost: np.ndarray):
    """Solve min-cost square assignment. Returns (row_to_col, u, v)."""
    C = np.ascontiguousarray(cost, dtype=np.float64)
    n = C.shape[0]
    if C.ndim != 2 or C.shape[1] != n:
        raise ValueError("cost matrix must be square")

    x = np.full(n, -1, dtype=np.intp)
    y = np.full(n, -1, dtype=np.intp)
    u = np.zeros(n, dtype=np.float64)
    v = np.zeros(n, dtype=np.float64)
    if n == 0:
        return x, u, v

    # Column reduction: v[j] = column minimum; assign the argmin row when
    # it is still free. Columns processed in ascending order.
    v[:] = C.min(axis=0)
    argmin_rows = C.argmin(axis=0)
    for j in range(n):
        i1 = argmin_rows[j]
        if x[i1] == -1:
            x[i1] = j
            y[j] = i1

    # Augmenting row reduction (two passes): each free row grabs its best
    # column, lowering that column's dual so a displaced row can usually
    # re-match cheaply. Unbounded it degenerates into a slow auction on
    # dense uniform costs, so each pass is capped; leftovers fall through
    # to the augmenting-path phase.
    if n >= 2:
        free_rows = [i for i in range(n) if x[i] == -1]
        for _ in range(2):
            guard = 4 * n + 100
            k = 0
            next_free = []
            while k < len(free_rows) and guard > 0:
                guard -= 1
                i = free_rows[k]
                k += 1
                r = C[i] - v
                j1 = int(r.argmin())
                u1 = float(r[j1])
                r2 = r.copy()
                r2[j1] = np.inf
                j2 = int(r2.argmin())
                u2 = float(r2[j2])
                i0 = int(y[j1])
                if u1 < u2:
                    v[j1] -= u2 - u1
                elif i0 != -1:
                    j1 = j2
                    i0 = int(y[j1])
                x[i] = j1
                y[j1] = i
                u[i] = u2
                if i0 != -1:
                    x[i0] = -1
                    if u1 < u2:
                        k -= 1
                        free_rows[k] = i0
                    else:
                        next_free.append(i0)
            next_free.extend(free_rows[k:])
            free_rows = next_free

    d = np.empty(n, dtype=np.float64)
    pred = np.empty(n, dtype=np.intp)
    rem = np.empty(n, dtype=np.intp)
    sr = np.zeros(n, dtype=bool)
    sc = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for f in range(n):
        if x[f] != -1:
            continue
        d.fill(np.inf)
        pred.fill(f)
        rem[:] = rows
        sr.fill(False)
        sc.fill(False)
        num_rem = n
        minval = 0.0
        cur = f
        sink = -1
        while sink == -1:
            sr[cur] = True
            active = rem[:num_rem]
            r = minval + C[cur, active] - u[cur] - v[active]
            better = r < d[active]
            if better.any():
                upd = active[better]
                d[upd] = r[better]
                pred[upd] = cur
            dact = d[active]
            lowest = dact.min()
            if not np.isfinite(lowest):
                raise ValueError("cost matrix is infeasible")
            # Mirror of the compiled scan's running selection: the first
            # position attaining the minimum, overridden by any later
            # equal-cost position whose column is free.
            eq = np.nonzero(dact == lowest)[0]
            free_eq = eq[y[active[eq]] == -1]
            index = int(free_eq[-1]) if free_eq.size else int(eq[0])
            minval = lowest
            j = int(rem[index])
            if y[j] == -1:
                sink = j
            else:
                cur = int(y[j])
            sc[j] = True
            num_rem -= 1
            rem[index] = rem[num_rem]

        u[f] += minval
        other = sr.copy()
        other[f] = False
        if other.any():
            u[other] += minval - d[x[other]]
        v[sc] -= minval - d[sc]

        j = sink
        while True:
            i = int(pred[j])
            y[j] = i
            j, x[i] = int(x[i]), j
            if i == f:
                break

    return x, u, v
