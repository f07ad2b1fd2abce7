# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled physics kernel.

Mirrors kernel/reference.py operation for operation; the build disables FMA
contraction (-ffp-contract=off) so trajectories from the two backends are
bit-identical. Any change here must be made in reference.py as well.
"""

from libc.math cimport cos, sin, sqrt

BACKEND = "compiled"

STEP_OK = 0
STEP_DIVERGED = 1
STEP_SOLVER_FAILED = 2
STEP_BAD_MODEL = 3

MAX_LINKS = 16
MAX_CONTACTS = 40

cdef double _BIG = 1.0e12

DEF MAXL = 16
DEF MAXN = 18          # 3 base dofs + 15 joints
DEF MAXC = 40          # root + distal points + foot heel points


def step_control(int[::1] parents, double[::1] lengths, double[::1] masses,
                 double[::1] coms, double[::1] inertias, double[::1] anchors,
                 double[::1] rests, int[::1] path_ptr, int[::1] path_idx,
                 double[::1] kp, double[::1] kd, double[::1] damping_b,
                 double[::1] q_lo,
                 double[::1] q_hi, double[::1] tau_max, int[::1] contact_link,
                 double[::1] contact_dist, int[::1] contact_foot,
                 double stiffness, double damping, double friction,
                 double gravity, int base_fixed, int n_feet,
                 double[::1] state, double[::1] action, double[::1] tau_noise,
                 double dt, int n_sub, double[::1] diag):
    """Advance one control step = n_sub semi-implicit Euler substeps of dt.

    Mutates state and diag in place; returns a STEP_* status code.
    """
    cdef int L = lengths.shape[0]
    cdef int nc = contact_link.shape[0]
    if L > MAXL or nc > MAXC:
        return STEP_BAD_MODEL
    cdef int nj = L - 1
    cdef int n = nj if base_fixed else 3 + nj
    cdef int off = 0 if base_fixed else 3
    cdef int nst = 6 + 2 * nj

    cdef double ang[MAXL]
    cdef double cs[MAXL]
    cdef double sn[MAXL]
    cdef double w[MAXL]
    cdef double px[MAXL]
    cdef double pz[MAXL]
    cdef double vx[MAXL]
    cdef double vz[MAXL]
    cdef double ax[MAXL]
    cdef double az[MAXL]
    cdef double cx[MAXL]
    cdef double cz[MAXL]
    cdef double cax[MAXL]
    cdef double caz[MAXL]
    cdef double tau[MAXL]
    cdef double cfx[MAXC]
    cdef double cfz[MAXC]
    cdef double cpx[MAXC]
    cdef double cpz[MAXC]
    cdef int csat[MAXC]
    cdef double M[MAXN * MAXN]
    cdef double rhs[MAXN]
    cdef double y[MAXN]
    cdef double qdd[MAXN]
    cdef int dof[MAXN]
    cdef double jvx_[MAXN]
    cdef double jvz_[MAXN]
    cdef double jw_[MAXN]
    cdef double foot_hit[MAXL]
    cdef double acc_foot[MAXL]
    cdef double st[6 + 2 * (MAXL - 1)]

    cdef double acc_tau = 0.0
    cdef double acc_slip = 0.0
    cdef double acc_fsum = 0.0
    cdef double acc_ncon = 0.0

    cdef int _sub, i, j, p, c, lk, a, b, k, aa, bb, nd, da, t_, f, fs, fail
    cdef double d, cp, sp, wp, ww, ci, si, wi, t, tj, tm, pxc, pzc, wl
    cdef double vxc, vzc, fn, ft, lim, mi, Ii, jax, jaz, jaw, s, fxc, fzc, v
    cdef double a_n, coef, va

    for k in range(nst):
        st[k] = state[k]
    for f in range(n_feet):
        acc_foot[f] = 0.0

    for _sub in range(n_sub):
        # ---- forward kinematics with velocities and the velocity-product
        # (qdd-independent) accelerations needed for the bias force
        ang[0] = st[2] + rests[0]
        w[0] = st[5]
        px[0] = st[0]
        pz[0] = st[1]
        vx[0] = st[3]
        vz[0] = st[4]
        ax[0] = 0.0
        az[0] = 0.0
        for i in range(L):
            if i > 0:
                p = parents[i]
                d = anchors[i]
                cp = cs[p]
                sp = sn[p]
                wp = w[p]
                px[i] = px[p] + d * cp
                pz[i] = pz[p] + d * sp
                vx[i] = vx[p] - d * wp * sp
                vz[i] = vz[p] + d * wp * cp
                ww = wp * wp
                ax[i] = ax[p] - d * ww * cp
                az[i] = az[p] - d * ww * sp
                ang[i] = ang[p] + rests[i] + st[6 + i - 1]
                w[i] = wp + st[6 + nj + i - 1]
            ci = cos(ang[i])
            si = sin(ang[i])
            cs[i] = ci
            sn[i] = si
            d = coms[i]
            wi = w[i]
            cx[i] = px[i] + d * ci
            cz[i] = pz[i] + d * si
            ww = wi * wi
            cax[i] = ax[i] - d * ww * ci
            caz[i] = az[i] - d * ww * si

        # ---- PD torques toward the clamped action target
        for j in range(nj):
            t = action[j]
            if t < q_lo[j]:
                t = q_lo[j]
            elif t > q_hi[j]:
                t = q_hi[j]
            tj = kp[j] * (t - st[6 + j]) - kd[j] * st[6 + nj + j] + tau_noise[j]
            tm = tau_max[j]
            if tm > 0.0:
                if tj > tm:
                    tj = tm
                elif tj < -tm:
                    tj = -tm
            tau[j] = tj
            acc_tau += tj if tj >= 0.0 else -tj

        # ---- penalty ground contact at sample points (ground is z = 0)
        # Normal force: spring at the current penetration plus damping at the
        # post-step contact velocity. Writing the force at the current
        # velocity and moving dt*(k*dt + c) * Jz^T Jz onto the mass matrix
        # integrates the normal direction implicitly (same trick as the
        # joint damping below). The rocking mode of a light foot on two
        # penalty points runs at w*dt near 2 where the explicit update
        # pumps energy instead of dissipating it. Friction is implicit the
        # same way while unsaturated; at the cone limit it is a constant
        # force over the substep.
        a_n = stiffness * dt + damping
        for f in range(n_feet):
            foot_hit[f] = 0.0
        for c in range(nc):
            lk = contact_link[c]
            d = contact_dist[c]
            pxc = px[lk] + d * cs[lk]
            pzc = pz[lk] + d * sn[lk]
            cpx[c] = pxc
            cpz[c] = pzc
            csat[c] = 1
            if pzc < 0.0:
                wl = w[lk]
                vxc = vx[lk] - d * wl * sn[lk]
                vzc = vz[lk] + d * wl * cs[lk]
                fn = -stiffness * pzc - a_n * vzc
                if fn < 0.0:
                    fn = 0.0
                ft = -damping * vxc
                lim = friction * fn
                if ft > lim:
                    ft = lim
                elif ft < -lim:
                    ft = -lim
                else:
                    csat[c] = 0
                cfx[c] = ft
                cfz[c] = fn
                if fn > 0.0:
                    acc_ncon += 1.0
                    acc_fsum += fn
                    acc_slip += vxc if vxc >= 0.0 else -vxc
                    fs = contact_foot[c]
                    if fs >= 0:
                        foot_hit[fs] = 1.0
            else:
                cfx[c] = 0.0
                cfz[c] = 0.0
        for f in range(n_feet):
            acc_foot[f] += foot_hit[f]

        # ---- mass matrix and bias/gravity via per-link COM Jacobians
        for a in range(n):
            rhs[a] = 0.0
        for a in range(n * n):
            M[a] = 0.0
        for i in range(L):
            nd = 0
            if not base_fixed:
                dof[0] = 0
                jvx_[0] = 1.0
                jvz_[0] = 0.0
                jw_[0] = 0.0
                dof[1] = 1
                jvx_[1] = 0.0
                jvz_[1] = 1.0
                jw_[1] = 0.0
                dof[2] = 2
                jvx_[2] = -(cz[i] - st[1])
                jvz_[2] = cx[i] - st[0]
                jw_[2] = 1.0
                nd = 3
            for t_ in range(path_ptr[i], path_ptr[i + 1]):
                j = path_idx[t_]
                dof[nd] = off + j
                jvx_[nd] = -(cz[i] - pz[j + 1])
                jvz_[nd] = cx[i] - px[j + 1]
                jw_[nd] = 1.0
                nd += 1
            mi = masses[i]
            Ii = inertias[i]
            for aa in range(nd):
                da = dof[aa]
                jax = jvx_[aa]
                jaz = jvz_[aa]
                jaw = jw_[aa]
                rhs[da] += mi * (-gravity * jaz - jax * cax[i] - jaz * caz[i])
                for bb in range(nd):
                    M[da * n + dof[bb]] += (mi * (jax * jvx_[bb] + jaz * jvz_[bb])
                                            + Ii * (jaw * jw_[bb]))

        # Joint viscous damping -b*qd is integrated implicitly (torque uses
        # the post-step velocity), which moves dt*b onto the diagonal and
        # keeps the damping unconditionally stable at this substep size.
        for j in range(nj):
            rhs[off + j] += tau[j] - damping_b[j] * st[6 + nj + j]
            M[(off + j) * n + off + j] += dt * damping_b[j]

        # ---- contact wrenches through point Jacobians; loaded contacts also
        # put their implicit-damping coefficients on the mass matrix
        for c in range(nc):
            fxc = cfx[c]
            fzc = cfz[c]
            if fxc == 0.0 and fzc == 0.0:
                continue
            lk = contact_link[c]
            nd = 0
            if not base_fixed:
                dof[0] = 0
                jvx_[0] = 1.0
                jvz_[0] = 0.0
                dof[1] = 1
                jvx_[1] = 0.0
                jvz_[1] = 1.0
                dof[2] = 2
                jvx_[2] = -(cpz[c] - st[1])
                jvz_[2] = cpx[c] - st[0]
                nd = 3
            for t_ in range(path_ptr[lk], path_ptr[lk + 1]):
                j = path_idx[t_]
                dof[nd] = off + j
                jvx_[nd] = -(cpz[c] - pz[j + 1])
                jvz_[nd] = cpx[c] - px[j + 1]
                nd += 1
            for aa in range(nd):
                rhs[dof[aa]] += jvx_[aa] * fxc + jvz_[aa] * fzc
            if fzc > 0.0:
                coef = dt * a_n
                for aa in range(nd):
                    va = coef * jvz_[aa]
                    for bb in range(nd):
                        M[dof[aa] * n + dof[bb]] += va * jvz_[bb]
                if csat[c] == 0:
                    coef = dt * damping
                    for aa in range(nd):
                        va = coef * jvx_[aa]
                        for bb in range(nd):
                            M[dof[aa] * n + dof[bb]] += va * jvx_[bb]

        # ---- M qdd = rhs by Cholesky (M is SPD for a positive-mass tree)
        fail = 0
        for a in range(n):
            for b in range(a):
                s = M[a * n + b]
                for k in range(b):
                    s -= M[a * n + k] * M[b * n + k]
                M[a * n + b] = s / M[b * n + b]
            s = M[a * n + a]
            for k in range(a):
                s -= M[a * n + k] * M[a * n + k]
            if s <= 0.0:
                fail = 1
                break
            M[a * n + a] = sqrt(s)
        if fail:
            return STEP_SOLVER_FAILED
        for a in range(n):
            s = rhs[a]
            for k in range(a):
                s -= M[a * n + k] * y[k]
            y[a] = s / M[a * n + a]
        for a in range(n - 1, -1, -1):
            s = y[a]
            for k in range(a + 1, n):
                s -= M[k * n + a] * qdd[k]
            qdd[a] = s / M[a * n + a]

        # ---- semi-implicit Euler
        if not base_fixed:
            st[3] += dt * qdd[0]
            st[4] += dt * qdd[1]
            st[5] += dt * qdd[2]
            st[0] += dt * st[3]
            st[1] += dt * st[4]
            st[2] += dt * st[5]
        for j in range(nj):
            st[6 + nj + j] += dt * qdd[off + j]
            st[6 + j] += dt * st[6 + nj + j]

        # ---- joint hard stops: clamp and kill inward velocity
        for j in range(nj):
            if st[6 + j] < q_lo[j]:
                st[6 + j] = q_lo[j]
                if st[6 + nj + j] < 0.0:
                    st[6 + nj + j] = 0.0
            elif st[6 + j] > q_hi[j]:
                st[6 + j] = q_hi[j]
                if st[6 + nj + j] > 0.0:
                    st[6 + nj + j] = 0.0

        for k in range(nst):
            v = st[k]
            if not (-_BIG < v < _BIG):
                for k in range(nst):
                    state[k] = st[k]
                return STEP_DIVERGED

    for k in range(nst):
        state[k] = st[k]
    diag[0] = acc_tau / n_sub
    diag[1] = acc_slip / n_sub
    diag[2] = acc_fsum / n_sub
    diag[3] = acc_ncon / n_sub
    for f in range(n_feet):
        diag[4 + f] = acc_foot[f] / n_sub
    return STEP_OK
