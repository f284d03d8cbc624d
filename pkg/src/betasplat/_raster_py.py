"""Pure-numpy rasterizer core (fallback backend).

Mirrors the compiled extension's interface.  Per-pixel compositing order and
arithmetic match the compiled core expression-for-expression; the fallback
naive path iterates primitive-major (vectorized) instead of pixel-major, so
it trades the compiled core's speed characteristics for pure-Python
portability while producing the same per-pixel operation sequence.

All inputs arrive pre-sorted by depth (ties broken by primitive index).
"""

import numpy as np

COMPILED = False


def _composite_region(raw, trans, contrib, k, means, conics, opac, betas, colors,
                      x0, x1, y0, y1, alpha_min, t_stop):
    """Composite primitive ``k`` over an inclusive pixel rectangle."""
    dx = np.arange(x0, x1 + 1, dtype=np.float64) - means[k, 0]
    dy = np.arange(y0, y1 + 1, dtype=np.float64) - means[k, 1]
    a, b, c = conics[k]
    r2 = a * dx[None, :] * dx[None, :] + 2.0 * b * dx[None, :] * dy[:, None] \
        + c * dy[:, None] * dy[:, None]
    x = np.minimum(np.maximum(r2, 0.0), 1.0)
    kernel = (1.0 - x) ** betas[k]
    alpha = opac[k] * kernel

    t_sub = trans[y0 : y1 + 1, x0 : x1 + 1]
    take = (t_sub >= t_stop) & (alpha >= alpha_min)
    if not take.any():
        return
    weight = np.where(take, alpha * t_sub, 0.0)
    raw[y0 : y1 + 1, x0 : x1 + 1] += weight[..., None] * colors[k]
    trans[y0 : y1 + 1, x0 : x1 + 1] = np.where(take, t_sub * (1.0 - alpha), t_sub)
    contrib[k] += int(take.sum())


def forward_naive(means, conics, opac, betas, colors, bounds, height, width,
                  background, alpha_min, t_stop):
    raw = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    contrib = np.zeros(means.shape[0], dtype=np.int64)
    for k in range(means.shape[0]):
        x0, x1, y0, y1 = bounds[k]
        if x0 > x1 or y0 > y1:
            continue
        _composite_region(raw, trans, contrib, k, means, conics, opac, betas,
                          colors, x0, x1, y0, y1, alpha_min, t_stop)
    raw += background * trans[..., None]
    return raw, 1.0 - trans, trans, contrib


def forward_tiled(means, conics, opac, betas, colors, bounds, height, width,
                  background, tile_size, tile_offsets, tile_lists, threads,
                  alpha_min, t_stop):
    raw = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    contrib = np.zeros(means.shape[0], dtype=np.int64)
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_offsets.size - 1
    for t in range(n_tiles):
        lo, hi = tile_offsets[t], tile_offsets[t + 1]
        if lo == hi:
            continue
        tx0 = (t % tiles_x) * tile_size
        ty0 = (t // tiles_x) * tile_size
        tx1 = min(tx0 + tile_size - 1, width - 1)
        ty1 = min(ty0 + tile_size - 1, height - 1)
        for k in tile_lists[lo:hi]:
            x0 = max(int(bounds[k, 0]), tx0)
            x1 = min(int(bounds[k, 1]), tx1)
            y0 = max(int(bounds[k, 2]), ty0)
            y1 = min(int(bounds[k, 3]), ty1)
            if x0 > x1 or y0 > y1:
                continue
            _composite_region(raw, trans, contrib, k, means, conics, opac,
                              betas, colors, x0, x1, y0, y1, alpha_min, t_stop)
    raw += background * trans[..., None]
    return raw, 1.0 - trans, trans, contrib


def backward(means, conics, opac, betas, colors, bounds, height, width,
             background, raw, d_raw, tile_size, tile_offsets, tile_lists,
             threads, alpha_min, t_stop):
    """Replay the forward pass, accumulating analytic parameter gradients.

    ``raw`` is the forward pass's pre-clamp composited image; per pixel the
    not-yet-composited remainder (suffix plus background term) is recovered
    as ``raw - prefix``, which yields the transmittance-product derivative
    without a reverse traversal.  The tile arguments exist for signature
    parity with the compiled core; this primitive-major pass does not need
    them.
    """
    v = means.shape[0]
    trans = np.ones((height, width))
    prefix = np.zeros((height, width, 3))
    d_means = np.zeros((v, 2))
    d_conics = np.zeros((v, 3))
    d_opac = np.zeros(v)
    d_betas = np.zeros(v)
    d_colors = np.zeros((v, 3))

    for k in range(v):
        x0, x1, y0, y1 = bounds[k]
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - means[k, 0]
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - means[k, 1]
        a, b, c = conics[k]
        dxm, dym = dx[None, :], dy[:, None]
        r2 = a * dxm * dxm + 2.0 * b * dxm * dym + c * dym * dym
        x = np.minimum(np.maximum(r2, 0.0), 1.0)
        kernel = (1.0 - x) ** betas[k]
        alpha = opac[k] * kernel

        t_sub = trans[y0 : y1 + 1, x0 : x1 + 1]
        take = (t_sub >= t_stop) & (alpha >= alpha_min)
        if not take.any():
            continue
        weight = np.where(take, alpha * t_sub, 0.0)
        col = colors[k]
        contrib_rgb = weight[..., None] * col

        g_sub = d_raw[y0 : y1 + 1, x0 : x1 + 1]
        raw_sub = raw[y0 : y1 + 1, x0 : x1 + 1]
        pre_sub = prefix[y0 : y1 + 1, x0 : x1 + 1]
        # behind = suffix composited after k plus the background term
        behind = raw_sub - pre_sub - contrib_rgb
        g_dot_col = g_sub @ col
        g_dot_behind = np.einsum("...c,...c->...", g_sub, behind)
        d_alpha = np.where(
            take, g_dot_col * t_sub - g_dot_behind / (1.0 - alpha), 0.0
        )

        d_colors[k] = np.einsum("yx,yxc->c", weight, g_sub)
        d_opac[k] += float(np.sum(d_alpha * kernel))
        d_kernel = d_alpha * opac[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            log1mx = np.where(x < 1.0, np.log(np.maximum(1.0 - x, 1e-300)), 0.0)
        d_betas[k] += float(np.sum(np.where(take, d_kernel * kernel * log1mx, 0.0)))
        with np.errstate(over="ignore", divide="ignore"):
            dkdx = np.maximum(
                -betas[k] * (1.0 - x) ** (betas[k] - 1.0), -1e7
            )
        d_x = np.where((x < 1.0) & take, d_kernel * dkdx, 0.0)
        d_means[k, 0] = float(np.sum(-d_x * 2.0 * (a * dxm + b * dym)))
        d_means[k, 1] = float(np.sum(-d_x * 2.0 * (b * dxm + c * dym)))
        d_conics[k, 0] = float(np.sum(d_x * dxm * dxm))
        d_conics[k, 1] = float(np.sum(d_x * 2.0 * dxm * dym))
        d_conics[k, 2] = float(np.sum(d_x * dym * dym))

        prefix[y0 : y1 + 1, x0 : x1 + 1] = pre_sub + contrib_rgb
        trans[y0 : y1 + 1, x0 : x1 + 1] = np.where(take, t_sub * (1.0 - alpha), t_sub)

    return d_means, d_conics, d_opac, d_betas, d_colors
