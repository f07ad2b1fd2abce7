"""Pure-Python physics kernel, the fallback backend.

Integrates a planar floating-base tree with PD actuation, penalty ground
contact and joint hard stops. All loops are scalar on purpose: the compiled
backend executes the same operations in the same order, and the two must
produce bit-identical trajectories (the extension is built with
-ffp-contract=off for that reason). Keep both files in lockstep when editing
either.

State layout, flat float64 of size 6 + 2*J:
  [x, z, theta, vx, vz, omega, q_0..q_{J-1}, qd_0..qd_{J-1}]

Diagnostics written per control step (means over substeps):
  diag[0] total |torque|, diag[1] slip speed over loaded contacts,
  diag[2] normal force sum, diag[3] loaded contact count,
  diag[4+f] contact fraction for foot slot f.
"""

import math

BACKEND = "python"

STEP_OK = 0
STEP_DIVERGED = 1
STEP_SOLVER_FAILED = 2
STEP_BAD_MODEL = 3

MAX_LINKS = 16
MAX_CONTACTS = 40

_BIG = 1.0e12


def step_control(parents, lengths, masses, coms, inertias, anchors, rests,
                 path_ptr, path_idx, kp, kd, damping_b, q_lo, q_hi, tau_max,
                 contact_link, contact_dist, contact_foot,
                 stiffness, damping, friction, gravity, base_fixed, n_feet,
                 state, action, tau_noise, dt, n_sub, diag):
    """Advance one control step = n_sub semi-implicit Euler substeps of dt.

    Mutates state and diag in place; returns a STEP_* status code.
    """
    L = len(lengths)
    nc = len(contact_link)
    if L > MAX_LINKS or nc > MAX_CONTACTS:
        return STEP_BAD_MODEL
    nj = L - 1
    n = nj if base_fixed else 3 + nj
    off = 0 if base_fixed else 3

    parents = [int(v) for v in parents]
    lengths = [float(v) for v in lengths]
    masses = [float(v) for v in masses]
    coms = [float(v) for v in coms]
    inertias = [float(v) for v in inertias]
    anchors = [float(v) for v in anchors]
    rests = [float(v) for v in rests]
    path_ptr = [int(v) for v in path_ptr]
    path_idx = [int(v) for v in path_idx]
    kp = [float(v) for v in kp]
    kd = [float(v) for v in kd]
    damping_b = [float(v) for v in damping_b]
    q_lo = [float(v) for v in q_lo]
    q_hi = [float(v) for v in q_hi]
    tau_max = [float(v) for v in tau_max]
    contact_link = [int(v) for v in contact_link]
    contact_dist = [float(v) for v in contact_dist]
    contact_foot = [int(v) for v in contact_foot]
    st = [float(v) for v in state]
    act = [float(v) for v in action]
    tnoise = [float(v) for v in tau_noise]
    stiffness = float(stiffness)
    damping = float(damping)
    friction = float(friction)
    gravity = float(gravity)
    dt = float(dt)

    ang = [0.0] * L
    cs = [0.0] * L
    sn = [0.0] * L
    w = [0.0] * L
    px = [0.0] * L
    pz = [0.0] * L
    vx = [0.0] * L
    vz = [0.0] * L
    ax = [0.0] * L
    az = [0.0] * L
    cx = [0.0] * L
    cz = [0.0] * L
    cax = [0.0] * L
    caz = [0.0] * L
    tau = [0.0] * max(nj, 1)
    cfx = [0.0] * nc
    cfz = [0.0] * nc
    cpx = [0.0] * nc
    cpz = [0.0] * nc
    csat = [1] * nc
    M = [0.0] * (n * n)
    rhs = [0.0] * n
    y = [0.0] * n
    qdd = [0.0] * n
    dof = [0] * n
    jvx_ = [0.0] * n
    jvz_ = [0.0] * n
    jw_ = [0.0] * n
    foot_hit = [0.0] * max(n_feet, 1)

    acc_tau = 0.0
    acc_slip = 0.0
    acc_fsum = 0.0
    acc_ncon = 0.0
    acc_foot = [0.0] * max(n_feet, 1)

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
            ci = math.cos(ang[i])
            si = math.sin(ang[i])
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
            t = act[j]
            if t < q_lo[j]:
                t = q_lo[j]
            elif t > q_hi[j]:
                t = q_hi[j]
            tj = kp[j] * (t - st[6 + j]) - kd[j] * st[6 + nj + j] + tnoise[j]
            tm = tau_max[j]
            if tm > 0.0:
                if tj > tm:
                    tj = tm
                elif tj < -tm:
                    tj = -tm
            tau[j] = tj
            acc_tau += tj if tj >= 0.0 else -tj

        # ---- penalty ground contact at sample points (ground is z = 0)
        for f in range(n_feet):
            foot_hit[f] = 0.0
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
            M[a * n + a] = math.sqrt(s)
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
            qj = st[6 + j]
            if qj < q_lo[j]:
                st[6 + j] = q_lo[j]
                if st[6 + nj + j] < 0.0:
                    st[6 + nj + j] = 0.0
            elif qj > q_hi[j]:
                st[6 + j] = q_hi[j]
                if st[6 + nj + j] > 0.0:
                    st[6 + nj + j] = 0.0

        for v in st:
            if not (-_BIG < v < _BIG):
                for k in range(len(st)):
                    state[k] = st[k]
                return STEP_DIVERGED

    for k in range(len(st)):
        state[k] = st[k]
    diag[0] = acc_tau / n_sub
    diag[1] = acc_slip / n_sub
    diag[2] = acc_fsum / n_sub
    diag[3] = acc_ncon / n_sub
    for f in range(n_feet):
        diag[4 + f] = acc_foot[f] / n_sub
    return STEP_OK
