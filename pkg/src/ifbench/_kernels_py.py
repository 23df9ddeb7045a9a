"""Pure numpy/scipy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np
from scipy import ndimage


def ssim_mean(a, b, win, c1, c2):
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    w = np.asarray(win, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    k = w.shape[0]
    if k > x.shape[0] or k > x.shape[1]:
        raise ValueError("window larger than image")
    lo = k // 2
    hi_r = x.shape[0] - (k - 1 - lo)
    hi_c = x.shape[1] - (k - 1 - lo)

    def filt(img):
        # 'valid' region of a same-size correlation; origin keeps the window
        # left-aligned so even-length windows line up with the C kernel
        origin = (k - 1) // 2 - lo
        out = ndimage.correlate1d(img, w, axis=0, mode="constant", origin=origin)
        out = ndimage.correlate1d(out, w, axis=1, mode="constant", origin=origin)
        return out[lo:hi_r, lo:hi_c]

    ux, uy = filt(x), filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    cxy = filt(x * y) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


def glcm(q, mask, dy, dx, nlevels):
    lv = np.asarray(q, dtype=np.int64)
    mk = np.asarray(mask, dtype=bool)
    h, w = lv.shape
    r0, r1 = max(0, -dy), min(h, h - dy)
    c0, c1 = max(0, -dx), min(w, w - dx)
    out = np.zeros((nlevels, nlevels), dtype=np.int64)
    if r1 <= r0 or c1 <= c0:
        return out
    a = lv[r0:r1, c0:c1]
    b = lv[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
    keep = mk[r0:r1, c0:c1] & mk[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
    keep &= (a >= 0) & (b >= 0) & (a < nlevels) & (b < nlevels)
    idx = a[keep] * nlevels + b[keep]
    out += np.bincount(idx, minlength=nlevels * nlevels).reshape(nlevels, nlevels)
    return out
