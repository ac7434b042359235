"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package; every formula is written out directly.
"""

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0, depthwise=False):
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(Cg):
                        src = o if depthwise else c
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i * stride + u - pad, j * stride + v - pad
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, src, r, s] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def dft2_loops(x):
    """Unnormalized forward 2-D DFT of a real ``[H, W]`` array."""
    H, W = x.shape
    out = np.zeros((H, W), dtype=complex)
    for u in range(H):
        for v in range(W):
            acc = 0j
            for h in range(H):
                for w in range(W):
                    acc += x[h, w] * complex(math.cos(-2 * math.pi * (u * h / H + v * w / W)),
                                             math.sin(-2 * math.pi * (u * h / H + v * w / W)))
            out[u, v] = acc
    return out


def layer_norm_loops(x, gamma, beta, eps=1e-6):
    B, C, H, W = x.shape
    out = np.zeros_like(x, dtype=float)
    for n in range(B):
        for i in range(H):
            for j in range(W):
                v = [x[n, c, i, j] for c in range(C)]
                mu = sum(v) / C
                var = sum((t - mu) ** 2 for t in v) / C
                for c in range(C):
                    out[n, c, i, j] = (v[c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def softplus(v):
    return max(v, 0.0) + math.log1p(math.exp(-abs(v)))


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def silu(v):
    return v * sigmoid(v)


def scan_loops(x, delta, A, B, Cm, D):
    """The selective recurrence, one scalar at a time."""
    C, L = x.shape
    N = A.shape[1]
    h = [[0.0] * N for _ in range(C)]
    y = np.zeros((C, L))
    for t in range(L):
        for c in range(C):
            acc = 0.0
            for j in range(N):
                h[c][j] = math.exp(delta[c, t] * A[c, j]) * h[c][j] + delta[c, t] * B[j, t] * x[c, t]
                acc += Cm[j, t] * h[c][j]
            y[c, t] = acc + D[c] * x[c, t]
    return y


def linear_loops(W, b, x):
    """``W @ x + b`` for a ``[O, I]`` matrix and ``[I, L]`` columns."""
    O, I = W.shape
    L = x.shape[1]
    out = np.zeros((O, L))
    for o in range(O):
        for t in range(L):
            out[o, t] = b[o] + sum(W[o, i] * x[i, t] for i in range(I))
    return out


def s6_loops(seq, A_log, Wb, bb, Wc, bc, Wd, bd, D):
    delta = np.vectorize(softplus)(linear_loops(Wd, bd, seq))
    Bm = linear_loops(Wb, bb, seq)
    Cm = linear_loops(Wc, bc, seq)
    A = -np.exp(A_log)
    return scan_loops(seq, delta, A, Bm, Cm, D)


def cosine_pdf_loops(F, cent, eps=1e-8, pdf_eps=1e-8):
    """Raw cosine similarities ``[n, P]`` and rectified, row-normalized PDFs."""
    C = F.shape[0]
    flat = F.reshape(C, -1)
    P, n = flat.shape[1], cent.shape[1]
    raw = np.zeros((n, P))
    for k in range(n):
        ck = math.sqrt(sum(cent[c, k] ** 2 for c in range(C)) + eps * eps)
        for p in range(P):
            fp = math.sqrt(sum(flat[c, p] ** 2 for c in range(C)) + eps * eps)
            raw[k, p] = sum(flat[c, p] * cent[c, k] for c in range(C)) / (ck * fp)
    pdf = np.zeros_like(raw)
    for k in range(n):
        mass = [max(raw[k, p], 0.0) + pdf_eps for p in range(P)]
        total = sum(mass)
        for p in range(P):
            pdf[k, p] = mass[p] / total
    return raw, pdf


def assign_invert_loops(pdf, a, b, Wk):
    """Softmax over centroids per pixel, then the expected centroid weight per pixel."""
    n, P = pdf.shape
    C = Wk.shape[0]
    alpha = np.zeros((P, n))
    for p in range(P):
        z = sum(math.exp(a * pdf[j, p] + b) for j in range(n))
        for k in range(n):
            alpha[p, k] = math.exp(a * pdf[k, p] + b) / z
    w = np.zeros((C, P))
    for c in range(C):
        for p in range(P):
            w[c, p] = sum(alpha[p, k] * Wk[c, k] for k in range(n))
    return alpha, w


def refine_loops(F, cent, pdf, a, b, Wv, bv, Wp, bp):
    """Gated one-step refinement with per-pixel projections, evaluated directly."""
    C = F.shape[0]
    flat = F.reshape(C, -1)
    n, P = pdf.shape
    Co = Wv.shape[0]
    refined = np.zeros((Co, n))
    norms = np.zeros(n)
    fhat = linear_loops(Wp, bp, flat)
    v = linear_loops(Wv, bv, cent)
    for k in range(n):
        gates = [sigmoid(a * pdf[k, p] + b) for p in range(P)]
        norms[k] = 1.0 + sum(gates)
        for c in range(Co):
            refined[c, k] = (v[c, k] + sum(gates[p] * fhat[c, p] for p in range(P))) / norms[k]
    return refined, norms


def neighborhood_mean_loops(F, positions, k=3):
    C, H, W = F.shape
    r = k // 2
    out = np.zeros((C, len(positions)))
    for i, pos in enumerate(positions):
        y0, x0 = divmod(int(pos), W)
        for c in range(C):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y = min(max(y0 + dy, 0), H - 1)
                    x = min(max(x0 + dx, 0), W - 1)
                    acc += F[c, y, x]
            out[c, i] = acc / (k * k)
    return out


def ssim_loops(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM of two ``[H, W]`` images over every fully contained window."""
    H, W = a.shape
    r = size // 2
    g = [[math.exp(-((u - r) ** 2 + (v - r) ** 2) / (2 * sigma * sigma)) for v in range(size)] for u in range(size)]
    total = sum(sum(row) for row in g)
    g = [[t / total for t in row] for row in g]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(size):
                for v in range(size):
                    wt = g[u][v]
                    x, y = a[i + u, j + v], b[i + u, j + v]
                    ma += wt * x
                    mb += wt * y
                    saa += wt * x * x
                    sbb += wt * y * y
                    sab += wt * x * y
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
