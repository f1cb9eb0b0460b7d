"""Hot numeric kernels: batched 1-D convolution and serial-chain kinematics.

Every kernel exists twice: a pure-numpy implementation (``*_numpy``) and a
numba ``@njit`` twin (``*_numba``).  The public names dispatch to the numba
versions when numba imports cleanly and ``KINEDIFF_NO_NUMBA`` is unset;
``scripts/bench_kernels.py`` times the two paths against each other.

Kernels are dtype-generic (float32 in normal operation, float64 inside the
finite-difference oracles) and avoid fastmath so repeated runs are
bit-identical.
"""

import os

import numpy as np

_FLAG = os.environ.get("KINEDIFF_NO_NUMBA", "").strip().lower()
_NUMBA_DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    if _NUMBA_DISABLED:
        raise ImportError("numba disabled via KINEDIFF_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# -----------------------------------------------------------------------------
# 1-D convolution, numpy path (im2col + BLAS matmul)
# -----------------------------------------------------------------------------


def _im2col(x, kernel, stride):
    """x (B, C, Tp) -> windows (B, C, K, To) as a strided view."""
    b, c, tp = x.shape
    to = (tp - kernel) // stride + 1
    sb, sc, st = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, kernel, to), (sb, sc, st, st * stride)
    )


def conv1d_fwd_numpy(x, w, stride, pad):
    """y[b,o,t] = sum_{c,k} w[o,c,k] * x[b,c,t*stride+k-pad]."""
    b, ci, _ = x.shape
    co, _, kk = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col(x, kk, stride)  # (B, Ci, K, To)
    to = cols.shape[3]
    cols2 = np.ascontiguousarray(cols).reshape(b, ci * kk, to)
    y = np.matmul(w.reshape(co, ci * kk), cols2)  # (B, Co, To)
    return np.ascontiguousarray(y)


def conv1d_bwd_w_numpy(gy, x, kernel, stride, pad):
    """Weight gradient: gw[o,c,k] = sum_{b,t} gy[b,o,t] * x_pad[b,c,t*stride+k]."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col(x, kernel, stride)  # (B, C, K, To)
    return np.einsum("bot,bckt->ock", gy, cols, optimize=True)


def conv1d_bwd_x_numpy(gy, w, t_in, stride, pad):
    """Input gradient, scattered back through the padded window positions."""
    b, _, to = gy.shape
    co, ci, kk = w.shape
    gxp = np.zeros((b, ci, t_in + 2 * pad), dtype=gy.dtype)
    # tmp[b,c,k,t] = sum_o gy[b,o,t] * w[o,c,k]
    tmp = np.einsum("bot,ock->bckt", gy, w, optimize=True)
    for k in range(kk):
        gxp[:, :, k : k + to * stride : stride] += tmp[:, :, k, :]
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + t_in])
    return gxp


# -----------------------------------------------------------------------------
# GELU (tanh approximation)
# -----------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd_numpy(x):
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    return 0.5 * x * (1.0 + th), th


def gelu_bwd_numpy(g, x, th):
    sech2 = 1.0 - th * th
    d_inner = _GELU_C * (1.0 + 0.134145 * (x * x))
    return g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner)


# the tanh evaluation is memory/libm-bound; BLAS-free numpy is as fast as a
# compiled loop here, so both backends share one implementation
gelu_fwd = gelu_fwd_numpy
gelu_bwd = gelu_bwd_numpy


# -----------------------------------------------------------------------------
# Serial-chain forward kinematics, numpy path
#
# Pose layout is (px, py, pz, qw, qx, qy, qz).  Link i applies a rotation of
# joint angle i about its axis, then the fixed rotation offset, then the fixed
# translation offset expressed in the rotated frame.
# -----------------------------------------------------------------------------


def _quat_mul_rows(a, b):
    """Hamilton product of stacked (M, 4) quaternions, wxyz layout."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.empty_like(a)
    out[:, 0] = aw * bw - ax * bx - ay * by - az * bz
    out[:, 1] = aw * bx + ax * bw + ay * bz - az * by
    out[:, 2] = aw * by - ax * bz + ay * bw + az * bx
    out[:, 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def _rotate_rows(q, d):
    """Rotate the fixed 3-vector d by stacked (M, 4) unit quaternions."""
    w = q[:, 0:1]
    u = q[:, 1:4]
    uxd = np.cross(u, np.broadcast_to(d, u.shape))
    return d + 2.0 * w * uxd + 2.0 * np.cross(u, uxd)


def fk_fwd_numpy(joints, axes, offsets, rot_offsets):
    """joints (M, N) -> poses (M, 7) plus per-link cumulative quats (M, N, 4)."""
    m, n = joints.shape
    dt = joints.dtype
    q = np.zeros((m, 4), dtype=dt)
    q[:, 0] = 1.0
    p = np.zeros((m, 3), dtype=dt)
    link_qs = np.empty((m, n, 4), dtype=dt)
    for i in range(n):
        half = 0.5 * joints[:, i]
        r = np.empty((m, 4), dtype=dt)
        r[:, 0] = np.cos(half)
        r[:, 1:4] = np.sin(half)[:, None] * axes[i].astype(dt)
        q = _quat_mul_rows(q, r)
        q = _quat_mul_rows(q, np.broadcast_to(rot_offsets[i].astype(dt), (m, 4)))
        link_qs[:, i, :] = q
        p = p + _rotate_rows(q, offsets[i].astype(dt))
    poses = np.concatenate([p, q], axis=1)
    return poses, link_qs


def fk_bwd_numpy(joints, link_qs, axes, offsets, rot_offsets, cot):
    """Pullback of pose cotangents (M, 7) to joint gradients (M, N)."""
    m, n = joints.shape
    dt = joints.dtype
    pbar = cot[:, 0:3].astype(dt, copy=True)
    qbar = cot[:, 3:7].astype(dt, copy=True)
    gj = np.empty((m, n), dtype=dt)
    for i in range(n - 1, -1, -1):
        qi = link_qs[:, i, :]
        d = offsets[i].astype(dt)
        # p += rotate(q_i, d): accumulate d(rotate)/dq_i^T pbar into qbar
        w = qi[:, 0:1]
        u = qi[:, 1:4]
        uxd = np.cross(u, np.broadcast_to(d, u.shape))
        qbar = qbar.copy()
        qbar[:, 0] += 2.0 * np.sum(uxd * pbar, axis=1)
        qbar[:, 1:4] += (
            2.0 * w * np.cross(np.broadcast_to(d, u.shape), pbar)
            + 2.0 * np.cross(uxd, pbar)
            + 2.0 * np.cross(np.broadcast_to(d, u.shape), np.cross(pbar, u))
        )
        # q_i = q_{i-1} * rot(axis, theta) * c_i
        half = 0.5 * joints[:, i]
        ch, sh = np.cos(half), np.sin(half)
        ax = axes[i].astype(dt)
        dr = np.empty((m, 4), dtype=dt)
        dr[:, 0] = -0.5 * sh
        dr[:, 1:4] = (0.5 * ch)[:, None] * ax
        if i > 0:
            qprev = link_qs[:, i - 1, :]
        else:
            qprev = np.zeros((m, 4), dtype=dt)
            qprev[:, 0] = 1.0
        ci = np.broadcast_to(rot_offsets[i].astype(dt), (m, 4))
        dq = _quat_mul_rows(_quat_mul_rows(qprev, dr), ci)
        gj[:, i] = np.sum(qbar * dq, axis=1)
        # qbar_{i-1} = qbar * conj(rot(axis, theta) * c_i)
        r = np.empty((m, 4), dtype=dt)
        r[:, 0] = ch
        r[:, 1:4] = sh[:, None] * ax
        a = _quat_mul_rows(r, ci)
        a_conj = a * np.array([1.0, -1.0, -1.0, -1.0], dtype=dt)
        qbar = _quat_mul_rows(qbar, a_conj)
    return gj


# -----------------------------------------------------------------------------
# numba twins
# -----------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, inline="always")
    def _valid_range(to, t, stride, shift):
        """Output positions it with 0 <= it*stride + shift < t."""
        if shift >= 0:
            lo = 0
        else:
            lo = (-shift + stride - 1) // stride
        hi = (t - 1 - shift) // stride + 1
        if hi > to:
            hi = to
        if lo > hi:
            lo = hi
        return lo, hi

    @njit(cache=True)
    def _fill_cols(x, kk, stride, pad, to):
        """cols[(ic*kk + ik), ib*to + it] = x_padded[ib, ic, it*stride + ik]."""
        b, ci, t = x.shape
        cols = np.zeros((ci * kk, b * to), dtype=x.dtype)
        for ib in range(b):
            for ic in range(ci):
                xrow = x[ib, ic]
                for ik in range(kk):
                    shift = ik - pad
                    row = cols[ic * kk + ik]
                    lo, hi = _valid_range(to, t, stride, shift)
                    base = ib * to
                    if stride == 1:
                        for it in range(lo, hi):
                            row[base + it] = xrow[it + shift]
                    else:
                        for it in range(lo, hi):
                            row[base + it] = xrow[it * stride + shift]
        return cols

    @njit(cache=True)
    def _flatten_bt(y3):
        """(B, C, T) -> (C, B*T) contiguous."""
        b, c, t = y3.shape
        out = np.empty((c, b * t), dtype=y3.dtype)
        for ib in range(b):
            for ic in range(c):
                out[ic, ib * t : (ib + 1) * t] = y3[ib, ic]
        return out

    @njit(cache=True)
    def _unflatten_bt(y2, b):
        """(C, B*T) -> (B, C, T) contiguous."""
        c, bt = y2.shape
        t = bt // b
        out = np.empty((b, c, t), dtype=y2.dtype)
        for ib in range(b):
            for ic in range(c):
                out[ib, ic] = y2[ic, ib * t : (ib + 1) * t]
        return out

    @njit(cache=True)
    def conv1d_fwd_numba(x, w, stride, pad):
        b, ci, t = x.shape
        co, _, kk = w.shape
        to = (t + 2 * pad - kk) // stride + 1
        w2 = np.ascontiguousarray(w.reshape(co, ci * kk))
        cols = _fill_cols(x, kk, stride, pad, to)
        return _unflatten_bt(np.dot(w2, cols), b)

    @njit(cache=True)
    def conv1d_bwd_w_numba(gy, x, kernel, stride, pad):
        b, co, to = gy.shape
        _, ci, t = x.shape
        cols = _fill_cols(x, kernel, stride, pad, to)
        gy2 = _flatten_bt(gy)
        return np.dot(gy2, cols.T).reshape(co, ci, kernel)

    @njit(cache=True)
    def conv1d_bwd_x_numba(gy, w, t_in, stride, pad):
        b, co, to = gy.shape
        _, ci, kk = w.shape
        w2t = np.ascontiguousarray(w.reshape(co, ci * kk).T)
        gcols = np.dot(w2t, _flatten_bt(gy))  # (ci*kk, b*to)
        gx = np.zeros((b, ci, t_in), dtype=gy.dtype)
        for ib in range(b):
            base = ib * to
            for ic in range(ci):
                gxrow = gx[ib, ic]
                for ik in range(kk):
                    shift = ik - pad
                    grow = gcols[ic * kk + ik]
                    lo, hi = _valid_range(to, t_in, stride, shift)
                    if stride == 1:
                        for it in range(lo, hi):
                            gxrow[it + shift] += grow[base + it]
                    else:
                        for it in range(lo, hi):
                            gxrow[it * stride + shift] += grow[base + it]
        return gx

    @njit(cache=True)
    def _quat_mul1(a, b, out):
        out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
        out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
        out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
        out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]

    @njit(cache=True)
    def fk_fwd_numba(joints, axes, offsets, rot_offsets):
        m, n = joints.shape
        poses = np.empty((m, 7), dtype=joints.dtype)
        link_qs = np.empty((m, n, 4), dtype=joints.dtype)
        for im in range(m):
            q = np.zeros(4, dtype=joints.dtype)
            q[0] = 1.0
            p = np.zeros(3, dtype=joints.dtype)
            r = np.empty(4, dtype=joints.dtype)
            tmp = np.empty(4, dtype=joints.dtype)
            for i in range(n):
                half = 0.5 * joints[im, i]
                ch = np.cos(half)
                sh = np.sin(half)
                r[0] = ch
                r[1] = sh * axes[i, 0]
                r[2] = sh * axes[i, 1]
                r[3] = sh * axes[i, 2]
                _quat_mul1(q, r, tmp)
                _quat_mul1(tmp, rot_offsets[i], q)
                for j in range(4):
                    link_qs[im, i, j] = q[j]
                # p += rotate(q, offset_i)
                w = q[0]
                ux, uy, uz = q[1], q[2], q[3]
                dx, dy, dz = offsets[i, 0], offsets[i, 1], offsets[i, 2]
                cx = uy * dz - uz * dy
                cy = uz * dx - ux * dz
                cz = ux * dy - uy * dx
                p[0] += dx + 2.0 * (w * cx + uy * cz - uz * cy)
                p[1] += dy + 2.0 * (w * cy + uz * cx - ux * cz)
                p[2] += dz + 2.0 * (w * cz + ux * cy - uy * cx)
            poses[im, 0] = p[0]
            poses[im, 1] = p[1]
            poses[im, 2] = p[2]
            for j in range(4):
                poses[im, 3 + j] = q[j]
        return poses, link_qs

    @njit(cache=True)
    def fk_bwd_numba(joints, link_qs, axes, offsets, rot_offsets, cot):
        m, n = joints.shape
        gj = np.empty((m, n), dtype=joints.dtype)
        for im in range(m):
            pbar = np.empty(3, dtype=joints.dtype)
            qbar = np.empty(4, dtype=joints.dtype)
            for j in range(3):
                pbar[j] = cot[im, j]
            for j in range(4):
                qbar[j] = cot[im, 3 + j]
            r = np.empty(4, dtype=joints.dtype)
            dr = np.empty(4, dtype=joints.dtype)
            a = np.empty(4, dtype=joints.dtype)
            tmp = np.empty(4, dtype=joints.dtype)
            dq = np.empty(4, dtype=joints.dtype)
            qprev = np.empty(4, dtype=joints.dtype)
            for i in range(n - 1, -1, -1):
                w = link_qs[im, i, 0]
                ux, uy, uz = link_qs[im, i, 1], link_qs[im, i, 2], link_qs[im, i, 3]
                dx, dy, dz = offsets[i, 0], offsets[i, 1], offsets[i, 2]
                # c = u x d, e = d x pbar, f = c x pbar, g = d x (pbar x u)
                cx = uy * dz - uz * dy
                cy = uz * dx - ux * dz
                cz = ux * dy - uy * dx
                qbar[0] += 2.0 * (cx * pbar[0] + cy * pbar[1] + cz * pbar[2])
                ex = dy * pbar[2] - dz * pbar[1]
                ey = dz * pbar[0] - dx * pbar[2]
                ez = dx * pbar[1] - dy * pbar[0]
                fx = cy * pbar[2] - cz * pbar[1]
                fy = cz * pbar[0] - cx * pbar[2]
                fz = cx * pbar[1] - cy * pbar[0]
                hx = pbar[1] * uz - pbar[2] * uy
                hy = pbar[2] * ux - pbar[0] * uz
                hz = pbar[0] * uy - pbar[1] * ux
                gx = dy * hz - dz * hy
                gy_ = dz * hx - dx * hz
                gz = dx * hy - dy * hx
                qbar[1] += 2.0 * (w * ex + fx + gx)
                qbar[2] += 2.0 * (w * ey + fy + gy_)
                qbar[3] += 2.0 * (w * ez + fz + gz)
                half = 0.5 * joints[im, i]
                ch = np.cos(half)
                sh = np.sin(half)
                dr[0] = -0.5 * sh
                dr[1] = 0.5 * ch * axes[i, 0]
                dr[2] = 0.5 * ch * axes[i, 1]
                dr[3] = 0.5 * ch * axes[i, 2]
                if i > 0:
                    for j in range(4):
                        qprev[j] = link_qs[im, i - 1, j]
                else:
                    qprev[0] = 1.0
                    qprev[1] = 0.0
                    qprev[2] = 0.0
                    qprev[3] = 0.0
                _quat_mul1(qprev, dr, tmp)
                _quat_mul1(tmp, rot_offsets[i], dq)
                gj[im, i] = (
                    qbar[0] * dq[0]
                    + qbar[1] * dq[1]
                    + qbar[2] * dq[2]
                    + qbar[3] * dq[3]
                )
                r[0] = ch
                r[1] = sh * axes[i, 0]
                r[2] = sh * axes[i, 1]
                r[3] = sh * axes[i, 2]
                _quat_mul1(r, rot_offsets[i], a)
                a[1] = -a[1]
                a[2] = -a[2]
                a[3] = -a[3]
                _quat_mul1(qbar, a, tmp)
                for j in range(4):
                    qbar[j] = tmp[j]
            # pbar is untouched by the recurrence, nothing else to do
        return gj

    BACKEND = "numba"
    conv1d_fwd = conv1d_fwd_numba
    conv1d_bwd_w = conv1d_bwd_w_numba
    conv1d_bwd_x = conv1d_bwd_x_numba
    fk_fwd = fk_fwd_numba
    fk_bwd = fk_bwd_numba
else:
    BACKEND = "numpy"
    conv1d_fwd_numba = None
    conv1d_bwd_w_numba = None
    conv1d_bwd_x_numba = None
    fk_fwd_numba = None
    fk_bwd_numba = None
    conv1d_fwd = conv1d_fwd_numpy
    conv1d_bwd_w = conv1d_bwd_w_numpy
    conv1d_bwd_x = conv1d_bwd_x_numpy
    fk_fwd = fk_fwd_numpy
    fk_bwd = fk_bwd_numpy
