"""Slow, independent reference computations used as test oracles.

Everything here works on numpy arrays with explicit Python loops and never
calls into the package under test.
"""

import math

import numpy as np


def bilinear_pixel(img, x, y):
    """img: (C, H, W); scalar sample with clamp-to-edge."""
    c, h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    out = np.zeros(c)
    for ch in range(c):
        out[ch] = (
            img[ch, y0, x0] * (1 - fx) * (1 - fy)
            + img[ch, y0, x1] * fx * (1 - fy)
            + img[ch, y1, x0] * (1 - fx) * fy
            + img[ch, y1, x1] * fx * fy
        )
    return out


def bilinear_sample(img, xs, ys):
    c = img.shape[0]
    ho, wo = xs.shape
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = bilinear_pixel(img, xs[i, j], ys[i, j])
    return out


def multi_warp(img, u, v, w):
    """img (C, H, W); u, v, w (n, H, W). Direct per-pixel sum over coordinates."""
    c, h, wd = img.shape
    n = u.shape[0]
    out = np.zeros((c, h, wd))
    for y in range(h):
        for x in range(wd):
            acc = np.zeros(c)
            for i in range(n):
                acc += w[i, y, x] * bilinear_pixel(img, x + u[i, y, x], y + v[i, y, x])
            out[:, y, x] = acc
    return out


def space_to_depth(img, s):
    c, h, w = img.shape
    out = np.zeros((c * s * s, h // s, w // s))
    for y in range(h // s):
        for x in range(w // s):
            k = 0
            for dy in range(s):
                for dx in range(s):
                    for ch in range(c):
                        out[k, y, x] = img[ch, y * s + dy, x * s + dx]
                        k += 1
    return out


def nn_upsample(img, r):
    c, h, w = img.shape
    out = np.zeros((c, h * r, w * r))
    for y in range(h * r):
        for x in range(w * r):
            out[:, y, x] = img[:, y // r, x // r]
    return out


def cubic_kernel(t, a=-0.5):
    t = abs(t)
    if t < 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def antialiased_bicubic_downsample(img, s):
    """Per-output-pixel kernel convolution with the cubic kernel stretched by ``s``.

    Taps that fall outside the image are dropped and the remaining weights
    renormalised.
    """
    c, h, w = img.shape
    ho, wo = h // s, w // s

    def taps(out_index, size):
        centre = (out_index + 0.5) * s
        support = 2.0 * s
        lo = max(int(math.floor(centre - support + 0.5)), 0)
        hi = min(int(math.floor(centre + support + 0.5)), size)
        idx = list(range(lo, hi))
        wts = [cubic_kernel((j - centre + 0.5) / s) for j in idx]
        tot = sum(wts)
        return idx, [x / tot for x in wts]

    out = np.zeros((c, ho, wo))
    for oy in range(ho):
        yi, yw = taps(oy, h)
        for ox in range(wo):
            xi, xw = taps(ox, w)
            for ch in range(c):
                acc = 0.0
                for a, wy in zip(yi, yw):
                    for b, wx in zip(xi, xw):
                        acc += wy * wx * img[ch, a, b]
                out[ch, oy, ox] = acc
    return out


def gram(feat):
    """feat (C, H, W) -> (C, C), normalised by H*W*C."""
    c, h, w = feat.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    acc += feat[i, y, x] * feat[j, y, x]
            g[i, j] = acc
    return g / (h * w * c)


def mse(a, b):
    tot = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        tot += (x - y) ** 2
    return tot / a.size


def psnr(a, b, cap=99.0):
    m = mse(np.clip(a, 0, 1), np.clip(b, 0, 1))
    if m == 0:
        return cap
    return min(10 * math.log10(1.0 / m), cap)


def gaussian_window(size=11, sigma=1.5):
    ax = [i - size // 2 for i in range(size)]
    g = np.array([[math.exp(-(a * a + b * b) / (2 * sigma * sigma)) for b in ax] for a in ax])
    return g / g.sum()


def ssim(a, b, size=11, sigma=1.5):
    """Mean SSIM over channels and every fully-inside window position."""
    c1, c2 = 0.01**2, 0.03**2
    win = gaussian_window(size, sigma)
    ch, h, w = a.shape
    vals = []
    for k in range(ch):
        for y in range(h - size + 1):
            for x in range(w - size + 1):
                pa = a[k, y:y + size, x:x + size]
                pb = b[k, y:y + size, x:x + size]
                ma = (win * pa).sum()
                mb = (win * pb).sum()
                va = (win * (pa - ma) ** 2).sum()
                vb = (win * (pb - mb) ** 2).sum()
                cov = (win * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def central_difference_grad(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at numpy array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g
