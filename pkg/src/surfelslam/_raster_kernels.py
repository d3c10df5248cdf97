"""Inner rasterization loops: front-to-back alpha blending over surfel footprints.

Plain-python implementations, jitted with numba when available.  All kernels
iterate surfels in pre-sorted depth order and maintain a per-pixel
transmittance buffer; blending for a pixel stops once its transmittance falls
below ``term_t``.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    _jit = numba.njit(cache=True)
except ImportError:  # pragma: no cover - numba is a declared dependency
    def _jit(f):
        return f


@_jit
def blend_forward(centers, inv_abc, zs, opacities, colors, bbox, w_clamp, term_t,
                  maha_cut, color, depth, trans, max_w, arg_w):
    n = centers.shape[0]
    for i in range(n):
        cx = centers[i, 0]
        cy = centers[i, 1]
        ia = inv_abc[i, 0]
        ib = inv_abc[i, 1]
        ic = inv_abc[i, 2]
        for y in range(bbox[i, 2], bbox[i, 3] + 1):
            dy = y - cy
            for x in range(bbox[i, 0], bbox[i, 1] + 1):
                t = trans[y, x]
                if t < term_t:
                    continue
                dx = x - cx
                m = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if m > maha_cut:
                    continue
                w = opacities[i] * np.exp(-0.5 * m)
                if w > w_clamp:
                    w = w_clamp
                if w <= 0.0:
                    continue
                contrib = w * t
                color[y, x, 0] += contrib * colors[i, 0]
                color[y, x, 1] += contrib * colors[i, 1]
                color[y, x, 2] += contrib * colors[i, 2]
                depth[y, x] += contrib * zs[i]
                if contrib > max_w[y, x]:
                    max_w[y, x] = contrib
                    arg_w[y, x] = i
                trans[y, x] = t * (1.0 - w)


@_jit
def blend_gradients(centers, inv_abc, zs, opacities, colors, bbox, w_clamp, term_t,
                    maha_cut, final_color, final_depth, g_rgb, g_depth,
                    grad_color, grad_opacity):
    h, w_img = final_depth.shape
    trans = np.ones((h, w_img))
    prefix_c = np.zeros((h, w_img, 3))
    prefix_d = np.zeros((h, w_img))
    n = centers.shape[0]
    for i in range(n):
        cx = centers[i, 0]
        cy = centers[i, 1]
        ia = inv_abc[i, 0]
        ib = inv_abc[i, 1]
        ic = inv_abc[i, 2]
        for y in range(bbox[i, 2], bbox[i, 3] + 1):
            dy = y - cy
            for x in range(bbox[i, 0], bbox[i, 1] + 1):
                t = trans[y, x]
                if t < term_t:
                    continue
                dx = x - cx
                m = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if m > maha_cut:
                    continue
                g = np.exp(-0.5 * m)
                w_raw = opacities[i] * g
                clamped = w_raw > w_clamp
                w = w_clamp if clamped else w_raw
                if w <= 0.0:
                    continue
                alpha = w * t
                # color gradient: dL/dc_i = sum_p g_rgb(p) * alpha_i(p)
                grad_color[i, 0] += g_rgb[y, x, 0] * alpha
                grad_color[i, 1] += g_rgb[y, x, 1] * alpha
                grad_color[i, 2] += g_rgb[y, x, 2] * alpha
                if not clamped:
                    # suffix sums: contribution of everything behind this surfel
                    acc = 0.0
                    if w < 1.0:
                        inv_rest = 1.0 / (1.0 - w)
                        for ch in range(3):
                            suffix = final_color[y, x, ch] - prefix_c[y, x, ch] - alpha * colors[i, ch]
                            acc += g_rgb[y, x, ch] * (t * colors[i, ch] - suffix * inv_rest)
                        suffix_d = final_depth[y, x] - prefix_d[y, x] - alpha * zs[i]
                        acc += g_depth[y, x] * (t * zs[i] - suffix_d * inv_rest)
                    else:
                        for ch in range(3):
                            acc += g_rgb[y, x, ch] * t * colors[i, ch]
                        acc += g_depth[y, x] * t * zs[i]
                    grad_opacity[i] += g * acc
                prefix_c[y, x, 0] += alpha * colors[i, 0]
                prefix_c[y, x, 1] += alpha * colors[i, 1]
                prefix_c[y, x, 2] += alpha * colors[i, 2]
                prefix_d[y, x] += alpha * zs[i]
                trans[y, x] = t * (1.0 - w)


@_jit
def max_blend_weights(centers, inv_abc, opacities, bbox, w_clamp, term_t, maha_cut,
                      mask, h, w_img, max_all, max_marked):
    trans = np.ones((h, w_img))
    n = centers.shape[0]
    for i in range(n):
        cx = centers[i, 0]
        cy = centers[i, 1]
        ia = inv_abc[i, 0]
        ib = inv_abc[i, 1]
        ic = inv_abc[i, 2]
        for y in range(bbox[i, 2], bbox[i, 3] + 1):
            dy = y - cy
            for x in range(bbox[i, 0], bbox[i, 1] + 1):
                t = trans[y, x]
                if t < term_t:
                    continue
                dx = x - cx
                m = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if m > maha_cut:
                    continue
                w = opacities[i] * np.exp(-0.5 * m)
                if w > w_clamp:
                    w = w_clamp
                if w <= 0.0:
                    continue
                alpha = w * t
                if alpha > max_all[i]:
                    max_all[i] = alpha
                if mask[y, x] != 0 and alpha > max_marked[i]:
                    max_marked[i] = alpha
                trans[y, x] = t * (1.0 - w)
