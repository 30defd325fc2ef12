# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dense linear-assignment kernel.

Column reduction and augmenting row reduction initialize duals and a
partial assignment; the remaining free rows are matched with shortest
augmenting paths under incremental dual updates. Mirrors
craterkit._lapjv_py step for step so both backends return identical
assignments and duals.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

INFINITY = float("inf")


def lapjv(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] cost not None):
    """Solve min-cost square assignment. Returns (row_to_col, u, v)."""
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")

    x_arr = np.full(n, -1, dtype=np.intp)
    y_arr = np.full(n, -1, dtype=np.intp)
    u_arr = np.zeros(n, dtype=np.float64)
    v_arr = np.zeros(n, dtype=np.float64)
    if n == 0:
        return x_arr, u_arr, v_arr

    d_arr = np.empty(n, dtype=np.float64)
    pred_arr = np.empty(n, dtype=np.intp)
    rem_arr = np.empty(n, dtype=np.intp)
    sr_arr = np.zeros(n, dtype=np.uint8)
    sc_arr = np.zeros(n, dtype=np.uint8)

    cdef cnp.float64_t[:, ::1] C = cost
    cdef cnp.intp_t[::1] x = x_arr
    cdef cnp.intp_t[::1] y = y_arr
    cdef cnp.float64_t[::1] u = u_arr
    cdef cnp.float64_t[::1] v = v_arr
    cdef cnp.float64_t[::1] d = d_arr
    cdef cnp.intp_t[::1] pred = pred_arr
    cdef cnp.intp_t[::1] rem = rem_arr
    cdef cnp.uint8_t[::1] sr = sr_arr
    cdef cnp.uint8_t[::1] sc = sc_arr

    cdef Py_ssize_t i, j, f, it, i1, cur, sink, index, num_rem
    cdef double cmin, r, lowest, minval
    cdef double inf = INFINITY

    # Column reduction: v[j] = column minimum; assign the argmin row when
    # it is still free. Columns processed in ascending order.
    for j in range(n):
        cmin = C[0, j]
        i1 = 0
        for i in range(1, n):
            if C[i, j] < cmin:
                cmin = C[i, j]
                i1 = i
        v[j] = cmin
        if x[i1] == -1:
            x[i1] = j
            y[j] = i1

    cdef Py_ssize_t n_free, k, j1, j2, i0, guard
    cdef double u1, u2, rj
    cdef cnp.intp_t[::1] free_rows = rem  # reused buffer
    cdef cnp.intp_t[::1] next_free = pred  # reused buffer

    # Augmenting row reduction (two passes): each free row grabs its best
    # column, lowering that column's dual so a displaced row can usually
    # re-match cheaply. Unbounded it degenerates into a slow auction on
    # dense uniform costs, so each pass is capped; leftovers fall through
    # to the augmenting-path phase.
    if n >= 2:
        n_free = 0
        for i in range(n):
            if x[i] == -1:
                free_rows[n_free] = i
                n_free += 1
        for it in range(2):
            guard = 4 * n + 100
            k = 0
            num_rem = 0  # next pass free count
            while k < n_free and guard > 0:
                guard -= 1
                i = free_rows[k]
                k += 1
                u1 = C[i, 0] - v[0]
                j1 = 0
                u2 = inf
                j2 = -1
                for j in range(1, n):
                    rj = C[i, j] - v[j]
                    if rj < u1:
                        u2 = u1
                        j2 = j1
                        u1 = rj
                        j1 = j
                    elif rj < u2:
                        u2 = rj
                        j2 = j
                i0 = y[j1]
                if u1 < u2:
                    v[j1] = v[j1] - (u2 - u1)
                elif i0 != -1:
                    j1 = j2
                    i0 = y[j1]
                x[i] = j1
                y[j1] = i
                u[i] = u2
                if i0 != -1:
                    x[i0] = -1
                    if u1 < u2:
                        k -= 1
                        free_rows[k] = i0
                    else:
                        next_free[num_rem] = i0
                        num_rem += 1
            for j in range(k, n_free):
                next_free[num_rem] = free_rows[j]
                num_rem += 1
            for j in range(num_rem):
                free_rows[j] = next_free[j]
            n_free = num_rem

    # Shortest augmenting path for each remaining free row.
    for f in range(n):
        if x[f] != -1:
            continue
        for j in range(n):
            d[j] = inf
            pred[j] = f
            rem[j] = j
            sr[j] = 0
            sc[j] = 0
        num_rem = n
        minval = 0.0
        cur = f
        sink = -1
        while sink == -1:
            sr[cur] = 1
            lowest = inf
            index = -1
            for it in range(num_rem):
                j = rem[it]
                r = minval + C[cur, j] - u[cur] - v[j]
                if r < d[j]:
                    d[j] = r
                    pred[j] = cur
                # Among equal-lowest columns prefer one whose row is free
                # (reaches the sink sooner); the refinement pass normalizes
                # any remaining tie choice.
                if d[j] < lowest or (d[j] == lowest and y[j] == -1):
                    lowest = d[j]
                    index = it
            minval = lowest
            if index == -1 or minval == inf:
                raise ValueError("cost matrix is infeasible")
            j = rem[index]
            if y[j] == -1:
                sink = j
            else:
                cur = y[j]
            sc[j] = 1
            num_rem -= 1
            rem[index] = rem[num_rem]

        u[f] = u[f] + minval
        for i in range(n):
            if sr[i] and i != f:
                u[i] = u[i] + (minval - d[x[i]])
        for j in range(n):
            if sc[j]:
                v[j] = v[j] - (minval - d[j])

        j = sink
        while True:
            i = pred[j]
            y[j] = i
            j, x[i] = x[i], j
            if i == f:
                break

    return x_arr, u_arr, v_arr
