"""Numeric hot kernels: dense simplex, streaming LSTM step, ADMM inner loop.

These run once per simulation slot (or per LP pivot), so they carry @njit.
With ``MGEMS_DISABLE_NUMBA=1`` the same source runs interpreted as the
pure-numpy fallback; results agree to floating-point noise and the parity
tests in tests/test_kernels.py hold either way.
"""

import numpy as np

from ._jit import njit

LP_OPTIMAL = 0
LP_INFEASIBLE = 1
LP_UNBOUNDED = 2
LP_ITERLIMIT = 3
LP_NUMERIC = 4

_PIVOT_TOL = 1e-7   # entries at most this are ineligible pivots (stability)
_COST_TOL = 1e-9
_FEAS_TOL = 1e-7


_BLAND_TRIGGER = 40  # degenerate pivots in a row before anti-cycling kicks in


@njit(cache=True)
def _pivot_loop(T, basis, n_scan, max_iter):
    """Simplex pivoting on a tableau with the objective in the last row.

    Fast mode scores entering columns by reduced cost over column norm (a
    steepest-edge flavor, an order of magnitude fewer pivots here than the
    plain most-negative rule) and breaks minimum-ratio ties on the largest
    pivot element, which keeps the arithmetic well-conditioned on the
    heavily degenerate equilibrium instances.  After a run of zero-progress
    pivots the loop switches to Bland's rule (lowest-index entering column,
    lowest basic-variable ties), whose no-cycling guarantee ensures
    termination; it switches back as soon as the objective moves.  Both
    modes are deterministic.
    """
    m = T.shape[0] - 1
    rhs = T.shape[1] - 1
    stalled = 0
    for it in range(max_iter):
        bland = stalled >= _BLAND_TRIGGER
        enter = -1
        if bland:
            for j in range(n_scan):
                if T[m, j] < -_COST_TOL:
                    enter = j
                    break
        else:
            best_score = -_COST_TOL
            for j in range(n_scan):
                red = T[m, j]
                if red < -_COST_TOL:
                    norm2 = 1.0
                    for i in range(m):
                        norm2 += T[i, j] * T[i, j]
                    score = red / np.sqrt(norm2)
                    if score < best_score:
                        best_score = score
                        enter = j
        if enter == -1:
            return LP_OPTIMAL
        # ratio test; numerators clamped at zero so roundoff on degenerate
        # rows cannot produce negative ratios, ties exact.  Entries below
        # the conditioning threshold become eligible only if nothing
        # better exists in the column.
        piv_tol = _PIVOT_TOL
        best = np.inf
        for attempt in range(2):
            for i in range(m):
                a = T[i, enter]
                if a > piv_tol:
                    num = T[i, rhs]
                    if num < 0.0:
                        num = 0.0
                    ratio = num / a
                    if ratio < best:
                        best = ratio
            if best < np.inf or attempt == 1:
                break
            piv_tol = _COST_TOL
        if best == np.inf:
            return LP_UNBOUNDED
        leave = -1
        for i in range(m):
            a = T[i, enter]
            if a > piv_tol:
                num = T[i, rhs]
                if num < 0.0:
                    num = 0.0
                if num / a == best:
                    if leave == -1:
                        leave = i
                    elif bland:
                        if basis[i] < basis[leave]:
                            leave = i
                    elif (T[i, enter] > T[leave, enter]
                          or (T[i, enter] == T[leave, enter]
                              and basis[i] < basis[leave])):
                        leave = i
        obj_before = T[m, rhs]
        piv = T[leave, enter]
        T[leave] /= piv
        for i in range(m + 1):
            if i != leave:
                f = T[i, enter]
                if f != 0.0:
                    T[i] -= f * T[leave]
        basis[leave] = enter
        if T[m, rhs] > obj_before + 1e-12:
            stalled = 0
        else:
            stalled += 1
    return LP_ITERLIMIT


@njit(cache=True)
def lp_solve_dense(c, A_ub, b_ub, A_eq, b_eq, max_iter=50000):
    """Maximize c.x s.t. A_ub x <= b_ub, A_eq x = b_eq, x >= 0.

    Two-phase dense simplex.  Returns (status, x, objective).
    """
    n = c.shape[0]
    m_ub = A_ub.shape[0]
    m_eq = A_eq.shape[0]
    m = m_ub + m_eq

    n_art = m_eq
    for i in range(m_ub):
        if b_ub[i] < 0.0:
            n_art += 1

    n_slack = m_ub
    art_start = n + n_slack
    n_total = art_start + n_art
    T = np.zeros((m + 1, n_total + 1))
    basis = np.empty(m, dtype=np.int64)

    k_art = 0
    for i in range(m_ub):
        sgn = 1.0 if b_ub[i] >= 0.0 else -1.0
        for j in range(n):
            T[i, j] = sgn * A_ub[i, j]
        T[i, n_total] = sgn * b_ub[i]
        T[i, n + i] = sgn
        if sgn > 0.0:
            basis[i] = n + i
        else:
            T[i, art_start + k_art] = 1.0
            basis[i] = art_start + k_art
            k_art += 1
    for r in range(m_eq):
        i = m_ub + r
        sgn = 1.0 if b_eq[r] >= 0.0 else -1.0
        for j in range(n):
            T[i, j] = sgn * A_eq[r, j]
        T[i, n_total] = sgn * b_eq[r]
        T[i, art_start + k_art] = 1.0
        basis[i] = art_start + k_art
        k_art += 1

    T0 = T[:m].copy()  # untouched constraint rows for the final refinement
    # tiny fixed right-hand-side perturbation: breaks the massive degeneracy
    # of the equilibrium instances so the ratio test rarely ties; the final
    # refinement against T0 removes it again
    for i in range(m):
        T[i, n_total] += 1e-10 * (1.0 + ((i * 2654435761) % 97) / 97.0)
    x = np.zeros(n)
    if n_art > 0:
        # phase 1: drive the artificial variables to zero
        for j in range(n_total + 1):
            T[m, j] = 0.0
        for j in range(n_art):
            T[m, art_start + j] = 1.0
        for i in range(m):
            if basis[i] >= art_start:
                T[m] -= T[i]
        status = _pivot_loop(T, basis, n_total, max_iter)
        if status == LP_ITERLIMIT:
            return status, x, 0.0
        if T[m, n_total] < -_FEAS_TOL:
            return LP_INFEASIBLE, x, 0.0
        # pivot any degenerate artificials out of the basis where possible
        for i in range(m):
            if basis[i] >= art_start:
                for j in range(art_start):
                    if abs(T[i, j]) > _PIVOT_TOL:
                        piv = T[i, j]
                        T[i] /= piv
                        for k in range(m + 1):
                            if k != i:
                                f = T[k, j]
                                if f != 0.0:
                                    T[k] -= f * T[i]
                        basis[i] = j
                        break

    # phase 2 objective, priced out against the current basis
    for j in range(n_total + 1):
        T[m, j] = 0.0
    for j in range(n):
        T[m, j] = -c[j]
    for i in range(m):
        if basis[i] < n and c[basis[i]] != 0.0:
            T[m] += c[basis[i]] * T[i]
    status = _pivot_loop(T, basis, art_start, max_iter)
    if status != LP_OPTIMAL:
        return status, x, 0.0

    # recompute the basic solution from the original (unperturbed) data;
    # pivoting drift and the perturbation never touch T0
    B = np.empty((m, m))
    for col in range(m):
        for row in range(m):
            B[row, col] = T0[row, basis[col]]
    xb, _, rank, _ = np.linalg.lstsq(B, T0[:, n_total].copy())
    if rank < m:
        return LP_NUMERIC, x, 0.0
    resid = 0.0
    for row in range(m):
        acc = -T0[row, n_total]
        for col in range(m):
            acc += B[row, col] * xb[col]
        resid += acc * acc
    feasible = resid < 1e-12
    for i in range(m):
        if xb[i] < -1e-8 or (basis[i] >= art_start and xb[i] > _FEAS_TOL):
            feasible = False
    if not feasible:
        return LP_NUMERIC, x, 0.0
    obj = 0.0
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = xb[i]
            obj += c[basis[i]] * xb[i]
    return LP_OPTIMAL, x, obj


@njit(cache=True)
def lstm_step(w_in, b_in, W, U, bg, w_out, b_out, x, h, c):
    """One streaming step: linear input layer, stacked LSTM cells, linear head.

    h and c have shape (layers, hidden) and are advanced in place.
    """
    z = w_in @ x + b_in
    L = W.shape[0]
    H = U.shape[2]
    for l in range(L):
        gates = W[l] @ z + U[l] @ h[l] + bg[l]
        gi = 1.0 / (1.0 + np.exp(-gates[:H]))
        gf = 1.0 / (1.0 + np.exp(-gates[H:2 * H]))
        gg = np.tanh(gates[2 * H:3 * H])
        go = 1.0 / (1.0 + np.exp(-gates[3 * H:]))
        cl = gf * c[l] + gi * gg
        hl = go * np.tanh(cl)
        for k in range(H):
            c[l, k] = cl[k]
            h[l, k] = hl[k]
        z = hl
    return w_out @ z + b_out


@njit(cache=True)
def admm_consensus(lin, lo, hi, active, cvec, offset, slope_lo, slope_hi,
                   rho, tol_primal, tol_dual, max_iters, x, u, z):
    """Consensus ADMM on: sum_i lin_i.z (box_i) + two-slope cost of c.z + offset.

    The two-slope term prices net grid power: slope_hi per kW imported,
    slope_lo per kW exported (slope_lo < slope_hi keeps it convex).  x, u
    hold per-agent local copies and duals, z the consensus vector; all are
    updated in place.  Agent subproblems are box-clipped closed forms; the
    z-update is the exact prox of the two-slope term.  Returns
    (iterations, primal residual, dual residual, converged).
    """
    n_agents, dim = lin.shape
    n_active = 0
    for a in range(n_agents):
        if active[a]:
            n_active += 1
    cnorm2 = 0.0
    for j in range(dim):
        cnorm2 += cvec[j] * cvec[j]

    r = 0.0
    s = 0.0
    for it in range(1, max_iters + 1):
        for a in range(n_agents):
            if active[a]:
                for j in range(dim):
                    v = z[j] - u[a, j] - lin[a, j] / rho
                    x[a, j] = min(max(v, lo[a, j]), hi[a, j])

        z_old = z.copy()
        for j in range(dim):
            acc = 0.0
            for a in range(n_agents):
                if active[a]:
                    acc += x[a, j] + u[a, j]
            z[j] = acc / n_active
        # prox of the two-slope grid cost along cvec
        if cnorm2 > 0.0:
            scale = 1.0 / (n_active * rho)
            w_hi = offset
            w_lo = offset
            for j in range(dim):
                w_hi += cvec[j] * (z[j] - slope_hi * scale * cvec[j])
                w_lo += cvec[j] * (z[j] - slope_lo * scale * cvec[j])
            if w_hi > 0.0:
                for j in range(dim):
                    z[j] -= slope_hi * scale * cvec[j]
            elif w_lo < 0.0:
                for j in range(dim):
                    z[j] -= slope_lo * scale * cvec[j]
            else:
                lam = offset
                for j in range(dim):
                    lam += cvec[j] * z[j]
                lam /= cnorm2
                for j in range(dim):
                    z[j] -= lam * cvec[j]

        r2 = 0.0
        dz2 = 0.0
        for j in range(dim):
            d = z[j] - z_old[j]
            dz2 += d * d
        for a in range(n_agents):
            if active[a]:
                for j in range(dim):
                    d = x[a, j] - z[j]
                    u[a, j] += d
                    r2 += d * d
        r = np.sqrt(r2)
        s = rho * np.sqrt(n_active * dz2)
        if r < tol_primal and s < tol_dual:
            return it, r, s, True
    return max_iters, r, s, False
