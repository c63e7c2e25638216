"""Numba-compiled inner loops.

Everything here is deterministic: loop orders are fixed, there is no
threading, and `fastmath` only licenses a reassociation that is frozen at
compile time, so repeated runs on the same build produce identical bits.
All arrays are C-contiguous float64; image-like data is (batch, channels,
height, width) with the batch axis also carrying the four Hough branches.

The 3x3 convolution kernels fuse all nine taps (and optionally the ReLU)
into a single store per output element, which is what lets LLVM vectorize
them; separate accumulate-then-clamp passes are several times slower.
"""

import numpy as np
from numba import njit

# ---------------------------------------------------------------- conv fwd


@njit(cache=True, fastmath=True)
def conv3x3_fwd(xp, w, bias, dil, ho, wo, relu, y):
    """Cross-correlation, kernel 3x3, input pre-padded, output into y."""
    nb, ci = xp.shape[0], xp.shape[1]
    co = w.shape[0]
    d = dil
    d2 = 2 * dil
    for b in range(nb):
        for o in range(co):
            bo = bias[o]
            ybo = y[b, o]
            x0 = xp[b, 0]
            w00 = w[o, 0, 0, 0]; w01 = w[o, 0, 0, 1]; w02 = w[o, 0, 0, 2]
            w10 = w[o, 0, 1, 0]; w11 = w[o, 0, 1, 1]; w12 = w[o, 0, 1, 2]
            w20 = w[o, 0, 2, 0]; w21 = w[o, 0, 2, 1]; w22 = w[o, 0, 2, 2]
            if ci == 1 and relu:
                for i in range(ho):
                    yr = ybo[i]
                    r0 = x0[i]
                    r1 = x0[i + d]
                    r2 = x0[i + d2]
                    for j in range(wo):
                        v = bo + (w00 * r0[j] + w01 * r0[j + d] + w02 * r0[j + d2]
                                  + w10 * r1[j] + w11 * r1[j + d] + w12 * r1[j + d2]
                                  + w20 * r2[j] + w21 * r2[j + d] + w22 * r2[j + d2])
                        yr[j] = v if v > 0.0 else 0.0
            else:
                for i in range(ho):
                    yr = ybo[i]
                    r0 = x0[i]
                    r1 = x0[i + d]
                    r2 = x0[i + d2]
                    for j in range(wo):
                        yr[j] = bo + (w00 * r0[j] + w01 * r0[j + d] + w02 * r0[j + d2]
                                      + w10 * r1[j] + w11 * r1[j + d] + w12 * r1[j + d2]
                                      + w20 * r2[j] + w21 * r2[j + d] + w22 * r2[j + d2])
                for c in range(1, ci):
                    xc = xp[b, c]
                    v00 = w[o, c, 0, 0]; v01 = w[o, c, 0, 1]; v02 = w[o, c, 0, 2]
                    v10 = w[o, c, 1, 0]; v11 = w[o, c, 1, 1]; v12 = w[o, c, 1, 2]
                    v20 = w[o, c, 2, 0]; v21 = w[o, c, 2, 1]; v22 = w[o, c, 2, 2]
                    for i in range(ho):
                        yr = ybo[i]
                        q0 = xc[i]
                        q1 = xc[i + d]
                        q2 = xc[i + d2]
                        for j in range(wo):
                            yr[j] += (v00 * q0[j] + v01 * q0[j + d] + v02 * q0[j + d2]
                                      + v10 * q1[j] + v11 * q1[j + d] + v12 * q1[j + d2]
                                      + v20 * q2[j] + v21 * q2[j + d] + v22 * q2[j + d2])
                if relu:
                    for i in range(ho):
                        yr = ybo[i]
                        for j in range(wo):
                            v = yr[j]
                            yr[j] = v if v > 0.0 else 0.0
    return y


@njit(cache=True, fastmath=True)
def conv1x1_fwd(x, w, bias, relu, y):
    """1x1 convolution: per-pixel channel mix (no padding needed); the
    4- and 8-channel mixes are fused into one store per element."""
    nb, ci, h, wd = x.shape
    co = w.shape[0]
    for b in range(nb):
        for o in range(co):
            bo = bias[o]
            ybo = y[b, o]
            xb = x[b]
            if ci == 4:
                w0 = w[o, 0, 0, 0]; w1 = w[o, 1, 0, 0]
                w2 = w[o, 2, 0, 0]; w3 = w[o, 3, 0, 0]
                for i in range(h):
                    yr = ybo[i]
                    r0 = xb[0, i]; r1 = xb[1, i]; r2 = xb[2, i]; r3 = xb[3, i]
                    for j in range(wd):
                        v = bo + (w0 * r0[j] + w1 * r1[j]
                                  + w2 * r2[j] + w3 * r3[j])
                        yr[j] = 0.0 if relu and v < 0.0 else v
            elif ci == 8:
                w0 = w[o, 0, 0, 0]; w1 = w[o, 1, 0, 0]
                w2 = w[o, 2, 0, 0]; w3 = w[o, 3, 0, 0]
                w4 = w[o, 4, 0, 0]; w5 = w[o, 5, 0, 0]
                w6 = w[o, 6, 0, 0]; w7 = w[o, 7, 0, 0]
                for i in range(h):
                    yr = ybo[i]
                    r0 = xb[0, i]; r1 = xb[1, i]; r2 = xb[2, i]; r3 = xb[3, i]
                    r4 = xb[4, i]; r5 = xb[5, i]; r6 = xb[6, i]; r7 = xb[7, i]
                    for j in range(wd):
                        v = bo + (w0 * r0[j] + w1 * r1[j] + w2 * r2[j]
                                  + w3 * r3[j] + w4 * r4[j] + w5 * r5[j]
                                  + w6 * r6[j] + w7 * r7[j])
                        yr[j] = 0.0 if relu and v < 0.0 else v
            else:
                w0 = w[o, 0, 0, 0]
                for i in range(h):
                    yr = ybo[i]
                    r0 = xb[0, i]
                    for j in range(wd):
                        yr[j] = bo + w0 * r0[j]
                for c in range(1, ci):
                    wc = w[o, c, 0, 0]
                    for i in range(h):
                        yr = ybo[i]
                        rc = xb[c, i]
                        for j in range(wd):
                            yr[j] += wc * rc[j]
                if relu:
                    for i in range(h):
                        yr = ybo[i]
                        for j in range(wd):
                            v = yr[j]
                            yr[j] = v if v > 0.0 else 0.0
    return y


@njit(cache=True, fastmath=True)
def conv_generic_fwd(xp, w, bias, dil, ho, wo, relu, y):
    """Any kernel size; used off the hot path (odd specs, tests)."""
    nb, ci = xp.shape[0], xp.shape[1]
    co, _, kh, kw = w.shape
    for b in range(nb):
        for o in range(co):
            bo = bias[o]
            for i in range(ho):
                yr = y[b, o, i]
                for j in range(wo):
                    yr[j] = bo
                for c in range(ci):
                    for ki in range(kh):
                        xr = xp[b, c, i + ki * dil]
                        for kj in range(kw):
                            wv = w[o, c, ki, kj]
                            off = kj * dil
                            for j in range(wo):
                                yr[j] += wv * xr[j + off]
                if relu:
                    for j in range(wo):
                        v = yr[j]
                        yr[j] = v if v > 0.0 else 0.0
    return y


# ------------------------------------------------------- conv weight grads
# Register accumulators per tap, one fused pass per (batch, out, in, row);
# fastmath lets LLVM vectorize the row reductions.


@njit(cache=True, fastmath=True)
def conv3x3_wgrad(xp, gy, goi, goj, dil):
    """(gy may live inside a padded buffer; (goi, goj) is its origin.)"""
    nb, ci = xp.shape[0], xp.shape[1]
    co = gy.shape[1]
    d = dil
    d2 = 2 * dil
    ho = xp.shape[2] - d2
    wo = xp.shape[3] - d2
    gw = np.zeros((co, ci, 3, 3))
    gb = np.zeros(co)
    for b in range(nb):
        for o in range(co):
            gbo = gy[b, o]
            sb = 0.0
            for c in range(ci):
                xc = xp[b, c]
                for i in range(ho):
                    gr = gbo[goi + i]
                    if c == 0:
                        t = 0.0
                        for j in range(wo):
                            t += gr[goj + j]
                        sb += t
                    r0 = xc[i]
                    r1 = xc[i + d]
                    r2 = xc[i + d2]
                    t00 = 0.0; t01 = 0.0; t02 = 0.0
                    t10 = 0.0; t11 = 0.0; t12 = 0.0
                    t20 = 0.0; t21 = 0.0; t22 = 0.0
                    for j in range(wo):
                        g = gr[goj + j]
                        t00 += g * r0[j]; t01 += g * r0[j + d]; t02 += g * r0[j + d2]
                        t10 += g * r1[j]; t11 += g * r1[j + d]; t12 += g * r1[j + d2]
                        t20 += g * r2[j]; t21 += g * r2[j + d]; t22 += g * r2[j + d2]
                    gw[o, c, 0, 0] += t00; gw[o, c, 0, 1] += t01; gw[o, c, 0, 2] += t02
                    gw[o, c, 1, 0] += t10; gw[o, c, 1, 1] += t11; gw[o, c, 1, 2] += t12
                    gw[o, c, 2, 0] += t20; gw[o, c, 2, 1] += t21; gw[o, c, 2, 2] += t22
            gb[o] += sb
    return gw, gb


@njit(cache=True, fastmath=True)
def conv1x1_wgrad(x, gy, goi, goj):
    nb, ci, h, wd = x.shape
    co = gy.shape[1]
    gw = np.zeros((co, ci, 1, 1))
    gb = np.zeros(co)
    for b in range(nb):
        for o in range(co):
            gbo = gy[b, o]
            sb = 0.0
            for c in range(ci):
                xc = x[b, c]
                s = 0.0
                for i in range(h):
                    gr = gbo[goi + i]
                    xr = xc[i]
                    t = 0.0
                    tb = 0.0
                    for j in range(wd):
                        g = gr[goj + j]
                        t += g * xr[j]
                        tb += g
                    s += t
                    if c == 0:
                        sb += tb
                gw[o, c, 0, 0] += s
            gb[o] += sb
    return gw, gb


@njit(cache=True, fastmath=True)
def conv_generic_wgrad(xp, gy, goi, goj, dil, kh, kw):
    nb, ci = xp.shape[0], xp.shape[1]
    co = gy.shape[1]
    ho = xp.shape[2] - dil * (kh - 1)
    wo = xp.shape[3] - dil * (kw - 1)
    gw = np.zeros((co, ci, kh, kw))
    gb = np.zeros(co)
    for b in range(nb):
        for o in range(co):
            sb = 0.0
            for i in range(ho):
                gr = gy[b, o, goi + i]
                t = 0.0
                for j in range(wo):
                    t += gr[goj + j]
                sb += t
            gb[o] += sb
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        off = kj * dil
                        s = 0.0
                        for i in range(ho):
                            gr = gy[b, o, goi + i]
                            xr = xp[b, c, i + ki * dil]
                            t = 0.0
                            for j in range(wo):
                                t += gr[goj + j] * xr[j + off]
                            s += t
                        gw[o, c, ki, kj] += s
    return gw, gb


@njit(cache=True, fastmath=True)
def conv_generic_igrad(gy, w, dil, hp, wp):
    """Scatter form of the input gradient; only used for kernel shapes
    where the flipped-forward trick (see ops) does not apply."""
    nb = gy.shape[0]
    co, ci, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((nb, ci, hp, wp))
    for b in range(nb):
        for c in range(ci):
            for o in range(co):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[o, c, ki, kj]
                        off = kj * dil
                        for i in range(ho):
                            gr = gy[b, o, i]
                            tr = gxp[b, c, i + ki * dil]
                            for j in range(wo):
                                tr[j + off] += wv * gr[j]
    return gxp


# ------------------------------------------------------------------- relu


@njit(cache=True)
def relu_bwd(act, g):
    """g where act > 0 else 0; `act` may be pre- or post-activation (both
    have the same positivity pattern).  Subgradient at 0 is 0."""
    out = np.empty(g.shape)
    a = act.ravel()
    gr = g.ravel()
    o = out.ravel()
    for k in range(a.size):
        o[k] = gr[k] if a[k] > 0.0 else 0.0
    return out


@njit(cache=True)
def relu_bwd_into(act, g, out, oi, oj):
    """Masked gradient written into the center of a padded buffer `out`
    at origin (oi, oj); the pad margins are left untouched."""
    nb, nc, h, wd = g.shape
    for b in range(nb):
        for c in range(nc):
            for i in range(h):
                ar = act[b, c, i]
                gr = g[b, c, i]
                orow = out[b, c, oi + i]
                for j in range(wd):
                    orow[oj + j] = gr[j] if ar[j] > 0.0 else 0.0


# ---------------------------------------------------------- FHT butterfly
# Canonical (quadrant 0) transform over a padded column range
# xpad = x + (N-1), xpad in [0, 3N-3].  Strips of height h live in row
# blocks of the (N, 3N-2) work buffers; stage h merges strip pairs:
#   out[s] = bottom[s//2] + shift(top[s//2], by s//2 + s%2).
#
# Work is banded: a strip row with shift s only ever needs columns
# xpad in [N-1-s, 3N-3-s].  Cells left of the band are the zero region
# and are written as zeros (later stages read them); cells right of it
# are never read and stay garbage.  The caller passes two (N, 3N-2)
# scratch buffers which may contain anything.


@njit(cache=True, fastmath=True)
def fht_fwd(img, cur, nxt):
    n = img.shape[0]
    wp = 3 * n - 2
    for r in range(n):
        row = cur[r]
        for c in range(n - 1):
            row[c] = 0.0
        for c in range(n):
            row[n - 1 + c] = img[r, c]
        for c in range(2 * n - 1, wp):
            row[c] = 0.0
    h = 1
    while h < n:
        nstrips = n // (2 * h)
        for k in range(nstrips):
            for s in range(2 * h):
                s2 = s >> 1
                shf = s2 + (s & 1)
                bot = cur[2 * k * h + s2]
                top = cur[(2 * k + 1) * h + s2]
                out = nxt[2 * k * h + s]
                lo = n - 1 - s
                hi = min(3 * n - 3 - s, wp - 1)
                for j in range(lo):
                    out[j] = 0.0
                for j in range(lo, hi + 1):
                    out[j] = bot[j] + top[j + shf]
        tmp = cur
        cur = nxt
        nxt = tmp
        h *= 2
    return cur


@njit(cache=True, fastmath=True)
def fht_rev(gplane, cur, nxt):
    """Adjoint of fht_fwd restricted to the (N, 2N-1) output window;
    returns the (N, N) image-space gradient.

    Descending the reverse stages only moves mass toward larger xpad, and
    the final image read uses xpad in [N-1, 2N-2], so cells with
    xpad > 2N-2 never matter and each row with shift s only needs
    xpad >= N-1-s (smaller xpad drains out of the image).
    """
    n = gplane.shape[0]
    hi = 2 * n - 2
    for s in range(n):
        row = cur[s]
        lo = n - 1 - s
        for j in range(lo):
            row[j] = 0.0
        for j in range(lo, hi + 1):
            row[j] = gplane[s, j]
    h = n >> 1
    while h >= 1:
        nstrips = n // (2 * h)
        for k in range(nstrips):
            for s2 in range(h):
                g0 = cur[2 * k * h + 2 * s2]
                g1 = cur[2 * k * h + 2 * s2 + 1]
                bot = nxt[2 * k * h + s2]
                top = nxt[(2 * k + 1) * h + s2]
                lo = n - 1 - s2
                for j in range(lo):
                    bot[j] = 0.0
                for j in range(lo, hi + 1):
                    bot[j] = g0[j] + g1[j]
                # top[j] gets g0[j-s2] + g1[j-s2-1]; entries with j < s2
                # have no contributors and must be written as zeros too.
                zlim = min(max(lo, s2), hi + 1)
                for j in range(zlim):
                    top[j] = 0.0
                if lo <= s2 <= hi:
                    top[s2] = g0[0]
                for j in range(max(lo, s2 + 1), hi + 1):
                    top[j] = g0[j - s2] + g1[j - s2 - 1]
        tmp = cur
        cur = nxt
        nxt = tmp
        h >>= 1
    gimg = np.empty((n, n))
    for r in range(n):
        for c in range(n):
            gimg[r, c] = cur[r, n - 1 + c]
    return gimg


# ---------------------------------------------------------- weighted MSE


@njit(cache=True, fastmath=True)
def wmse_loss_grad(pred, target, coeff):
    p = pred.ravel()
    t = target.ravel()
    grad = np.empty(pred.shape)
    g = grad.ravel()
    m = p.size
    inv = 1.0 / m
    loss = 0.0
    for k in range(m):
        w = 1.0 + coeff * t[k]
        d = p[k] - t[k]
        loss += w * d * d
        g[k] = 2.0 * w * d * inv
    return loss * inv, grad


# ------------------------------------------------------------------- NMS


@njit(cache=True)
def nms_mask(hmap, half, min_conf):
    """Local-max mask per plane; equal values lose to lexicographically
    smaller (s, x); zero-region cells (x < -s) never win."""
    nq, n, width = hmap.shape
    mask = np.zeros((nq, n, width), dtype=np.uint8)
    for q in range(nq):
        plane = hmap[q]
        for s in range(n):
            for c in range(width):
                x = c - (n - 1)
                if x < -s:
                    continue
                v = plane[s, c]
                if v < min_conf:
                    continue
                keep = True
                for ns in range(max(0, s - half), min(n, s + half + 1)):
                    for nc in range(max(0, c - half), min(width, c + half + 1)):
                        if ns == s and nc == c:
                            continue
                        nv = plane[ns, nc]
                        if nv > v or (nv == v and (ns < s or (ns == s and nc < c))):
                            keep = False
                            break
                    if not keep:
                        break
                if keep:
                    mask[q, s, c] = 1
    return mask


# ------------------------------------------------------ stroke rasterizer


@njit(cache=True)
def draw_aa_segment(img, x0, y0, x1, y1):
    """Anti-aliased 1-px stroke: walk the major axis, split unit coverage
    between the two nearest pixels across the minor axis, combine by max."""
    n = img.shape[0]
    steep = abs(y1 - y0) > abs(x1 - x0)
    if steep:
        x0, y0 = y0, x0
        x1, y1 = y1, x1
    if x0 > x1:
        x0, x1 = x1, x0
        y0, y1 = y1, y0
    dx = x1 - x0
    grad = (y1 - y0) / dx if dx > 1e-12 else 0.0
    ja = int(np.ceil(x0 - 0.5))
    jb = int(np.floor(x1 + 0.5))
    for j in range(ja, jb + 1):
        if j < 0 or j >= n:
            continue
        y = y0 + (j - x0) * grad
        yi = int(np.floor(y))
        f = y - yi
        if steep:
            if 0 <= yi < n and img[j, yi] < 1.0 - f:
                img[j, yi] = 1.0 - f
            if 0 <= yi + 1 < n and img[j, yi + 1] < f:
                img[j, yi + 1] = f
        else:
            if 0 <= yi < n and img[yi, j] < 1.0 - f:
                img[yi, j] = 1.0 - f
            if 0 <= yi + 1 < n and img[yi + 1, j] < f:
                img[yi + 1, j] = f
