"""Pure-NumPy kernel backend.

Reference implementation of the batched kernels; the Cython backend mirrors
these conventions exactly:

* rays are clipped to the grid bounding box with the slab method, sample
  count is ``floor((t_exit - t_entry)/step + 1e-9)`` and samples sit at
  segment midpoints ``t_entry + (j + 0.5) * step`` with constant ``delta =
  step``;
* fields are trilinearly interpolated between cell centers located at
  ``bmin + (i + 0.5) * cell`` with clamp-to-edge behaviour at the border;
* a sample is dropped when the skip mask (an occupancy grid at the previous
  hierarchy resolution) flags the cell containing it as empty;
* cameras look down their local -z axis; a world point at camera coordinates
  q projects to pixel-center coordinates ``u = cx + fx*qx/(-qz)``,
  ``v = cy - fy*qy/(-qz)`` and is visible when ``qz < 0`` and (u, v) lies in
  ``[0, W] x [0, H]``.

All arrays are float64 and C-contiguous. Gradient outputs use a leading
"thread slot" axis so the call signature matches the compiled backend; this
backend only ever writes slot 0.
"""

import numpy as np

BACKEND_NAME = "python"

_CORNER_SHIFTS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]

# Rays are processed in chunks to bound the (rays x samples) scratch arrays.
_CHUNK_RAYS = 2048


def trilinear_weights(pos, bmin, cell, res):
    """Interpolation corner indices and weights for world points `pos`.

    Returns (idx, w): flat C-order indices into an (nx, ny, nz) field, shape
    (N, 8), and matching weights summing to 1. Corner order is z fastest,
    then y, then x (x0y0z0, x0y0z1, ... x1y1z1).
    """
    pos = np.atleast_2d(pos)
    u = (pos - bmin) / cell - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    nx, ny, nz = int(res[0]), int(res[1]), int(res[2])
    n = np.array([nx, ny, nz], dtype=np.int64)
    ia = np.clip(i0, 0, n - 1)
    ib = np.clip(i0 + 1, 0, n - 1)
    idx = np.empty(pos.shape[:-1] + (8,), dtype=np.int64)
    w = np.empty(pos.shape[:-1] + (8,), dtype=np.float64)
    for corner, (sx, sy, sz) in enumerate(_CORNER_SHIFTS):
        cx = ib[..., 0] if sx else ia[..., 0]
        cy = ib[..., 1] if sy else ia[..., 1]
        cz = ib[..., 2] if sz else ia[..., 2]
        idx[..., corner] = (cx * ny + cy) * nz + cz
        wx = f[..., 0] if sx else 1.0 - f[..., 0]
        wy = f[..., 1] if sy else 1.0 - f[..., 1]
        wz = f[..., 2] if sz else 1.0 - f[..., 2]
        w[..., corner] = wx * wy * wz
    return idx, w


def gather(field, idx, w):
    """Weighted gather of a scalar (nx,ny,nz) or vector (nx,ny,nz,3) field."""
    if field.ndim == 3:
        return (field.reshape(-1)[idx] * w).sum(axis=-1)
    flat = field.reshape(-1, field.shape[-1])
    return (flat[idx] * w[..., None]).sum(axis=-2)


def clip_rays(bmin, bmax, origins, dirs):
    """Slab-method ray/box clip. Returns (t0, t1); a miss has t1 <= t0."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t0 = np.zeros(origins.shape[0])
    t1 = np.full(origins.shape[0], np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origins[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (bmin[ax] - o) / d
            tb = (bmax[ax] - o) / d
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        par = np.abs(d) < 1e-300
        inside = (o >= bmin[ax]) & (o <= bmax[ax])
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return t0, t1


def _skip_lookup(skip_mask, bmin, skip_cell, pos):
    """True where the skip mask flags the containing coarse cell as empty."""
    res = np.array(skip_mask.shape, dtype=np.int64)
    i = np.floor((pos - bmin) / skip_cell).astype(np.int64)
    i = np.clip(i, 0, res - 1)
    return skip_mask[i[..., 0], i[..., 1], i[..., 2]].astype(bool)


def _sample_grid(n_samples, t0, step):
    """Midpoint sample parameters for each ray, padded to the widest ray."""
    smax = int(n_samples.max()) if n_samples.size else 0
    j = np.arange(smax)
    t = t0[:, None] + (j[None, :] + 0.5) * step
    live = j[None, :] < n_samples[:, None]
    return t, live


def _ray_samples(sigma, bmin, cell, origins, dirs, step, skip_mask, skip_cell,
                 t_max=None):
    """Common sampling stage: positions, liveness, interpolation of sigma.

    Returns (t, live, idx, w, sig) where arrays are (R, S[, ...]) padded to
    the widest ray in the batch; `sig` is zero at dead samples.
    """
    t0, t1 = clip_rays(bmin, bmin + cell * np.array(sigma.shape), origins, dirs)
    if t_max is not None:
        t1 = np.minimum(t1, t_max)
    n = np.floor((t1 - t0) / step + 1e-9)
    n = np.maximum(n, 0.0).astype(np.int64)
    t, live = _sample_grid(n, t0, step)
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    if skip_mask is not None and live.any():
        live = live & ~_skip_lookup(skip_mask, bmin, skip_cell, pos)
    idx, w = trilinear_weights(pos.reshape(-1, 3), bmin, cell, sigma.shape)
    idx = idx.reshape(t.shape + (8,))
    w = w.reshape(t.shape + (8,))
    sig = gather(sigma, idx, w)
    sig[~live] = 0.0
    return t, live, idx, w, sig


def render_rays(sigma, color, bmin, cell, origins, dirs, step,
                skip_mask=None, skip_cell=None, t_max=None, want_color=True,
                n_threads=1):
    """March rays through the grid; returns (H (R,3), T (R,)).

    H is the raw accumulated emission (no background compositing) and T the
    residual transmittance after the last sample. `t_max` optionally caps
    the exit parameter per ray (used for point-to-camera visibility traces).
    """
    R = origins.shape[0]
    H = np.zeros((R, 3))
    T = np.ones(R)
    for lo in range(0, R, _CHUNK_RAYS):
        sl = slice(lo, lo + _CHUNK_RAYS)
        tm = t_max[sl] if t_max is not None else None
        _, live, idx, w, sig = _ray_samples(
            sigma, bmin, cell, origins[sl], dirs[sl], step, skip_mask,
            skip_cell, tm)
        if sig.size == 0:
            continue
        tau = sig * step
        v_excl = np.cumsum(tau, axis=1) - tau
        t_excl = np.exp(-v_excl)
        a = 1.0 - np.exp(-tau)
        a[~live] = 0.0
        T[sl] = np.exp(-(v_excl[:, -1] + tau[:, -1])) if tau.shape[1] else 1.0
        if want_color and color is not None:
            col = gather(color, idx, w)
            H[sl] = ((t_excl * a)[..., None] * col).sum(axis=1)
    return H, T


def photometric_view(sigma, color, bmin, cell, origins, dirs, ref, alpha,
                     sigma_s, bg, step, lambda_s, skip_mask, skip_cell,
                     dsig_threads, dcol_threads, dalpha, n_threads=1):
    """Photometric objective + gradients for one view's rays.

    Accumulates d/dsigma and d/dcolor into thread slot 0 of the supplied
    buffers, writes per-ray d/dalpha (when `alpha` is given), and returns
    (residual_term, visibility_term) where the first is the 0.5*sum of
    squared residuals and the second the visibility quadratic (0 when
    `lambda_s` is 0). Residuals compare against `ref` after compositing the
    ray color over the `bg` background; when `alpha` is given the composited
    color is first blended toward `ref` with weight 1 - exp(-alpha*sigma_s).
    """
    R = origins.shape[0]
    dsig_flat = dsig_threads[0].reshape(-1)
    dcol_flat = dcol_threads[0].reshape(-1, 3)
    f_sum = 0.0
    ls_sum = 0.0
    for lo in range(0, R, _CHUNK_RAYS):
        sl = slice(lo, lo + _CHUNK_RAYS)
        _, live, idx, w, sig = _ray_samples(
            sigma, bmin, cell, origins[sl], dirs[sl], step, skip_mask,
            skip_cell)
        tau = sig * step
        v_excl = np.cumsum(tau, axis=1) - tau
        t_excl = np.exp(-v_excl)
        emx = np.exp(-tau)
        a = 1.0 - emx
        a[~live] = 0.0
        col = gather(color, idx, w)
        coef = t_excl * a
        h_raw = (coef[..., None] * col).sum(axis=1)
        t_total = np.exp(-(v_excl[:, -1] + tau[:, -1])) if tau.shape[1] else \
            np.ones(h_raw.shape[0])
        h_comp = h_raw + t_total[:, None] * bg

        if alpha is not None:
            scale = np.exp(-alpha[sl] * sigma_s)
            h_hat = h_comp + (1.0 - scale)[:, None] * (ref[sl] - h_comp)
        else:
            scale = np.ones(h_comp.shape[0])
            h_hat = h_comp
        e = h_hat - ref[sl]
        f_sum += 0.5 * float((e * e).sum())
        if alpha is not None:
            dalpha[sl] += (e * (-sigma_s * scale[:, None])
                           * (ref[sl] - h_comp)).sum(axis=1)
        e_sc = e * scale[:, None]

        ls_coef = np.zeros(h_raw.shape[0])
        if lambda_s > 0.0:
            d = t_total - 0.5
            ls_sum += float((lambda_s * (-4.0 * d * d + 1.0)).sum())
            ls_coef = 8.0 * lambda_s * d * t_total

        if tau.shape[1] == 0:
            continue
        # suffix_j = sum_{m > j} T_m a_m c_m + T_total * bg, per channel
        contrib = coef[..., None] * col
        suffix = contrib[:, ::-1].cumsum(axis=1)[:, ::-1] - contrib
        suffix = suffix + (t_total[:, None] * bg)[:, None, :]
        g_col = e_sc[:, None, :] * coef[..., None]          # dF/d(col sample)
        g_sig = step * ((e_sc[:, None, :]
                         * ((t_excl * emx)[..., None] * col - suffix))
                        .sum(axis=2))
        g_sig = g_sig + ls_coef[:, None] * step
        g_sig[~live] = 0.0
        g_col[~live] = 0.0
        np.add.at(dsig_flat, idx, g_sig[..., None] * w)
        for k in range(3):
            np.add.at(dcol_flat[:, k], idx, g_col[..., k, None] * w)
    return f_sum, ls_sum


def _bilinear_fetch(image, u, v):
    """Clamped bilinear image fetch at pixel-center coordinates (u, v)."""
    h, wdt = image.shape[:2]
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    xa = np.clip(x0, 0, wdt - 1)
    xb = np.clip(x0 + 1, 0, wdt - 1)
    ya = np.clip(y0, 0, h - 1)
    yb = np.clip(y0 + 1, 0, h - 1)
    c00 = image[ya, xa]
    c01 = image[ya, xb]
    c10 = image[yb, xa]
    c11 = image[yb, xb]
    wx = fx[..., None]
    wy = fy[..., None]
    return ((1 - wy) * ((1 - wx) * c00 + wx * c01)
            + wy * ((1 - wx) * c10 + wx * c11))


def project_points(points, cam_center, rot_wc, fx, fy, cx, cy, width, height):
    """Project world points into a view. Returns (u, v, visible)."""
    q = (points - cam_center) @ rot_wc.T
    qz = q[..., 2]
    front = qz < -1e-12
    inv = np.where(front, -1.0 / np.where(front, qz, -1.0), 0.0)
    u = cx + fx * q[..., 0] * inv
    v = cy - fy * q[..., 1] * inv
    visible = front & (u >= 0) & (u <= width) & (v >= 0) & (v <= height)
    return u, v, visible


def spherical_bins(directions):
    """(theta_bin 0..3, phi_bin 0..7) of unit directions, 8x4 equiangular.

    phi = pi wraps to bin 0; at the poles (x = y = 0) the phi bin is 0 by
    convention.
    """
    d = np.atleast_2d(directions)
    tb = np.minimum((np.arccos(np.clip(d[..., 2], -1.0, 1.0)) / np.pi * 4.0)
                    .astype(np.int64), 3)
    phi = np.arctan2(d[..., 1], d[..., 0])
    pb = ((phi + np.pi) / (2.0 * np.pi) * 8.0).astype(np.int64) % 8
    pole = (np.abs(d[..., 0]) < 1e-12) & (np.abs(d[..., 1]) < 1e-12)
    pb = np.where(pole, 0, pb)
    return tb, pb


def env_prior(sigma, bmin, cell, step, guard, cam_centers, cam_rot_wc,
              cam_intr, images, skip_mask=None, skip_cell=None, per_bin=False,
              n_threads=1, chunk=4096):
    """Per-voxel environment-map fit error over all cameras.

    Returns (E, flags) at grid resolution; flags: 0 = valid error, 1 = voxel
    invisible to every camera, 2 = skipped as empty by the mask. For each
    voxel, every camera that sees it contributes its reference color (fetched
    at the voxel's projection) weighted by the camera-to-voxel transmittance
    into an 8x4 directional table; E is the transmittance-weighted mean
    squared error between the observed colors and the table's predictions.
    `per_bin` selects per-bin weight normalization instead of dividing every
    bin by the summed transmittance.
    """
    nx, ny, nz = sigma.shape
    n_cam = cam_centers.shape[0]
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    centers = bmin + (np.stack([ix, iy, iz], axis=-1).reshape(-1, 3) + 0.5) \
        * cell
    nvox = centers.shape[0]
    E = np.zeros(nvox)
    flags = np.ones(nvox, dtype=np.uint8)

    active = np.ones(nvox, dtype=bool)
    if skip_mask is not None:
        masked = _skip_lookup(skip_mask, bmin, skip_cell, centers)
        flags[masked] = 2
        active[masked] = False

    act_idx = np.nonzero(active)[0]
    for lo in range(0, act_idx.size, chunk):
        vi = act_idx[lo:lo + chunk]
        pts = centers[vi]
        m = vi.size
        obs_col = np.zeros((n_cam, m, 3))
        obs_t = np.zeros((n_cam, m))
        obs_bin = np.zeros((n_cam, m), dtype=np.int64)
        obs_vis = np.zeros((n_cam, m), dtype=bool)
        for c in range(n_cam):
            fx, fy, cx, cy = cam_intr[c, :4]
            h, wdt = images[c].shape[:2]
            u, v, vis = project_points(pts, cam_centers[c], cam_rot_wc[c],
                                       fx, fy, cx, cy, wdt, h)
            if not vis.any():
                continue
            obs_vis[c] = vis
            obs_col[c][vis] = _bilinear_fetch(images[c], u[vis], v[vis])
            delta = pts - cam_centers[c]
            dist = np.linalg.norm(delta, axis=-1)
            dirs = delta / np.maximum(dist, 1e-300)[:, None]
            _, tt = render_rays(sigma, None, bmin, cell,
                                np.broadcast_to(cam_centers[c],
                                                pts.shape).copy(),
                                dirs, step, skip_mask, skip_cell,
                                t_max=dist - guard, want_color=False)
            obs_t[c] = np.where(vis, tt, 0.0)
            tb, pb = spherical_bins(-dirs)
            obs_bin[c] = tb * 8 + pb

        t_sum = obs_t.sum(axis=0)
        env = np.zeros((m, 32, 3))
        env_w = np.zeros((m, 32))
        rows = np.arange(m)
        for c in range(n_cam):
            vis = obs_vis[c]
            np.add.at(env, (rows[vis], obs_bin[c][vis]),
                      obs_t[c][vis, None] * obs_col[c][vis])
            np.add.at(env_w, (rows[vis], obs_bin[c][vis]), obs_t[c][vis])
        good = t_sum > 0.0
        norm = env_w if per_bin else np.broadcast_to(t_sum[:, None], env_w.shape)
        pred = np.divide(env, np.maximum(norm, 1e-300)[..., None],
                         out=np.zeros_like(env),
                         where=norm[..., None] > 0.0)
        err = np.zeros(m)
        for c in range(n_cam):
            p = pred[rows, obs_bin[c]]
            d2 = ((obs_col[c] - p) ** 2).sum(axis=1)
            err += np.where(obs_vis[c], obs_t[c] * d2, 0.0)
        E[vi[good]] = err[good] / t_sum[good]
        flags[vi[good]] = 0
    return E.reshape(sigma.shape), flags.reshape(sigma.shape)
