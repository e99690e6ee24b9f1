"""Weak-perspective camera and differentiable rasterization.

Silhouettes use a soft-or over per-face coverage, where coverage is a
sigmoid of the signed pixel-to-triangle-boundary distance in normalized
device units. Normal maps blend barycentric-interpolated vertex normals
with a depth softmax and composite over a mid-gray background using the
soft silhouette. Both rasterizers are fused tape primitives with
hand-written backward passes; the backward recomputes per-face fields
chunk by chunk instead of storing pixel-by-face tensors.

Conventions: camera looks down -z (larger z is closer), x right, y up in
normalized device coordinates; image rows grow downward.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from PIL import Image as PILImage
from scipy.special import expit

from . import autodiff as ad
from .geometry import vertex_normals

DEFAULT_SHARPNESS = 1e-2  # in NDC units
_FACE_CHUNK = 16
# Coverage is clamped K sharpness-units below the boundary and renormalized,
# so pixels past the margin contribute exactly zero value AND gradient;
# rasterization can then skip everything outside a face chunk's bounding
# slab without perturbing finite-difference checks.
_COV_CLAMP = 20.0


class RenderError(ValueError):
    """Invalid camera or rasterization input."""


@dataclass
class Camera:
    s: float          # weak-perspective scale
    tx: float         # translation, normalized image units
    ty: float
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.s <= 0:
            raise RenderError("camera scale must be positive")
        if self.width < 1 or self.height < 1:
            raise RenderError("image size must be at least 1x1")

    def params(self):
        return np.array([self.s, self.tx, self.ty])

    @classmethod
    def from_params(cls, params, width=128, height=128):
        s, tx, ty = [float(x) for x in params]
        return cls(s=s, tx=tx, ty=ty, width=int(width), height=int(height))


@dataclass
class Image:
    data: np.ndarray  # (H, W) or (H, W, C), unit range for mask/normal
    kind: str         # mask | normal | descriptor | rgb

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.all(np.isfinite(self.data)):
            raise RenderError("image contains non-finite values")


def project(points, camera):
    """World points (..., 3) to pixel coordinates (u right, v down) + depth."""
    p = np.asarray(points, dtype=np.float64)
    u = (camera.s * p[..., 0] + camera.tx + 1.0) * camera.width / 2.0
    v = (1.0 - (camera.s * p[..., 1] + camera.ty)) * camera.height / 2.0
    return np.stack([u, v], axis=-1), p[..., 2].copy()


def _pixel_grid(camera, dtype):
    """Pixel-center positions in NDC, row-major (H*W, 2)."""
    j = np.arange(camera.width, dtype=dtype)
    i = np.arange(camera.height, dtype=dtype)
    px = 2.0 * (j + 0.5) / camera.width - 1.0
    py = 1.0 - 2.0 * (i + 0.5) / camera.height
    gx, gy = np.meshgrid(px, py)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(dtype)


def _ndc_xy(verts, camera):
    shift = np.array([camera.tx, camera.ty], dtype=verts.dtype)
    return verts[:, :2] * verts.dtype.type(camera.s) + shift


def _cross2(ux, uy, vx, vy):
    return ux * vy - uy * vx


def _face_pixel_fields(tri, pix):
    """Per (face, pixel): signed boundary distance and barycentrics.

    tri: (F, 3, 2) NDC corners; pix: (P, 2). Distance is positive inside.
    Components stay split by x/y (no trailing length-2 axis) and only the
    winning edge distance gets a sqrt; returns everything the backward
    pass needs so F x P tensors never persist across the whole mesh.
    """
    cx = [tri[:, i, 0][:, None] for i in range(3)]
    cy = [tri[:, i, 1][:, None] for i in range(3)]
    px, py = pix[:, 0][None, :], pix[:, 1][None, :]
    wax = px - cx[0]
    way = py - cy[0]

    ts = np.empty((3,) + wax.shape, dtype=tri.dtype)
    dxs = np.empty_like(ts)
    dys = np.empty_like(ts)
    d2s = np.empty_like(ts)
    for e in range(3):
        b = (e + 1) % 3
        evx = cx[b] - cx[e]
        evy = cy[b] - cy[e]
        wx = wax if e == 0 else px - cx[e]
        wy = way if e == 0 else py - cy[e]
        ee = np.maximum(evx * evx + evy * evy, 1e-18)
        t = np.clip((wx * evx + wy * evy) / ee, 0.0, 1.0)
        dx = wx - t * evx
        dy = wy - t * evy
        ts[e] = t
        dxs[e] = dx
        dys[e] = dy
        d2s[e] = dx * dx + dy * dy
    emin = np.argmin(d2s, axis=0)
    mind = np.sqrt(np.take_along_axis(d2s, emin[None], 0)[0])

    rx, ry = cx[1] - cx[0], cy[1] - cy[0]
    qx, qy = cx[2] - cx[0], cy[2] - cy[0]
    den = _cross2(rx, ry, qx, qy)
    degenerate = np.abs(den) < 1e-12
    dens = np.where(degenerate, np.where(den < 0, -1e-12, 1e-12), den)
    lam_b = _cross2(wax, way, qx, qy) / dens
    lam_c = _cross2(rx, ry, wax, way) / dens
    lam_a = 1.0 - lam_b - lam_c
    lam = np.stack([lam_a, lam_b, lam_c], axis=-1)  # (F, P, 3)
    inside = (lam_a >= 0) & (lam_b >= 0) & (lam_c >= 0)
    d_signed = np.where(inside, mind, -mind)

    return SimpleNamespace(ts=ts, dxs=dxs, dys=dys, d2s=d2s, emin=emin,
                           inside=inside, d_signed=d_signed, lam=lam,
                           dens=dens, degenerate=degenerate,
                           rx=rx, ry=ry, qx=qx, qy=qy, wax=wax, way=way)


def _dist_grad_to_tri(flds, g_d):
    """Chain grads w.r.t. signed distance back to the triangle corners.

    Only the nearest edge moves the distance (envelope rule); the clamp
    endpoints of the segment parameter are likewise stationary.
    """
    g_tri = np.zeros((g_d.shape[0], 3, 2), dtype=g_d.dtype)
    gd = np.where(flds.inside, g_d, -g_d)
    edge_vecs = ((flds.rx, flds.ry),
                 (flds.qx - flds.rx, flds.qy - flds.ry),
                 (-flds.qx, -flds.qy))
    orient = np.sign(flds.dens)
    for e in range(3):
        sel = flds.emin == e
        if not sel.any():
            continue
        # d dist/da = -(1 - t) u, d dist/db = -t u with u = diff / dist
        dist = np.sqrt(flds.d2s[e])
        ge = gd * (sel / np.maximum(dist, 1e-12))
        gux = flds.dxs[e] * ge
        guy = flds.dys[e] * ge
        on_edge = sel & (dist < 1e-12)
        if on_edge.any():
            # A pixel center sitting exactly on the edge zeroes the diff
            # vector, but the signed distance is still smooth there; its
            # direction limit is the inward edge normal (the inside sign
            # flip cancels, so this uses the raw incoming gradient).
            evx, evy = edge_vecs[e]
            elen = np.maximum(np.sqrt(evx * evx + evy * evy), 1e-12)
            nx = orient * (-evy) / elen
            ny = orient * evx / elen
            gux = np.where(on_edge, g_d * nx, gux)
            guy = np.where(on_edge, g_d * ny, guy)
        t = flds.ts[e]
        one_m_t = 1.0 - t
        g_tri[:, e, 0] -= (one_m_t * gux).sum(axis=1)
        g_tri[:, e, 1] -= (one_m_t * guy).sum(axis=1)
        b = (e + 1) % 3
        g_tri[:, b, 0] -= (t * gux).sum(axis=1)
        g_tri[:, b, 1] -= (t * guy).sum(axis=1)
    return g_tri


def _bary_grad_to_tri(flds, g_lam):
    """Chain grads w.r.t. raw barycentrics (F, P, 3) back to the corners."""
    live = ~flds.degenerate  # guarded denominators are held constant
    gb = g_lam[..., 1] - g_lam[..., 0]
    gc = g_lam[..., 2] - g_lam[..., 0]
    g_nb = gb / flds.dens
    g_nc = gc / flds.dens
    g_den = (-(gb * flds.lam[..., 1] + gc * flds.lam[..., 2])
             / flds.dens) * live

    rx, ry, qx, qy = flds.rx, flds.ry, flds.qx, flds.qy
    wax, way = flds.wax, flds.way

    # cross2(u, v): d/du = (v_y, -v_x), d/dv = (-u_y, u_x)
    # N_b = cross2(p - A, q), N_c = cross2(r, p - A), den = cross2(r, q)
    gax = (g_nb * (-qy + way) + g_nc * (-way + ry) + g_den * (-qy + ry)).sum(1)
    gay = (g_nb * (qx - wax) + g_nc * (wax - rx) + g_den * (qx - rx)).sum(1)
    gbx = (g_nc * way + g_den * qy).sum(1)
    gby = (g_nc * (-wax) + g_den * (-qx)).sum(1)
    gcx = (g_nb * (-way) + g_den * (-ry)).sum(1)
    gcy = (g_nb * wax + g_den * rx).sum(1)

    g_tri = np.empty((g_lam.shape[0], 3, 2), dtype=g_lam.dtype)
    g_tri[:, 0, 0], g_tri[:, 0, 1] = gax, gay
    g_tri[:, 1, 0], g_tri[:, 1, 1] = gbx, gby
    g_tri[:, 2, 0], g_tri[:, 2, 1] = gcx, gcy
    return g_tri


def _face_order(ndc, faces):
    """Order that sorts faces along the mesh's wider projected extent.

    Consecutive chunks then stay spatially tight, which shrinks the pixel
    slab each chunk has to visit.
    """
    if len(faces) == 0:
        return np.arange(0)
    cen = ndc[faces].mean(axis=1)
    spread = cen.max(axis=0) - cen.min(axis=0)
    axis = int(np.argmax(spread))
    return np.argsort(cen[:, axis], kind="stable")


def _pixel_slab(tri, camera, margin):
    """Flat indices of pixels within margin of a chunk's bbox, or None.

    Conservative by a pixel on each side. Pixels farther out see clamped,
    exactly-zero coverage, so skipping them is exact rather than an
    approximation; finite-difference checks cannot tell the difference.
    """
    x0 = float(tri[..., 0].min()) - margin
    x1 = float(tri[..., 0].max()) + margin
    y0 = float(tri[..., 1].min()) - margin
    y1 = float(tri[..., 1].max()) + margin
    w, h = camera.width, camera.height
    j0 = max(int(np.floor((x0 + 1.0) * w / 2.0 - 0.5)), 0)
    j1 = min(int(np.ceil((x1 + 1.0) * w / 2.0 - 0.5)) + 1, w)
    i0 = max(int(np.floor((1.0 - y1) * h / 2.0 - 0.5)), 0)
    i1 = min(int(np.ceil((1.0 - y0) * h / 2.0 - 0.5)) + 1, h)
    if i0 >= i1 or j0 >= j1:
        return None
    rows = np.arange(i0, i1) * w
    return np.add.outer(rows, np.arange(j0, j1)).ravel()


def rasterize_silhouette_t(verts, faces, camera, sharpness=DEFAULT_SHARPNESS,
                           chunk=_FACE_CHUNK):
    """Soft mask (H, W) as a fused tape op over vertex positions.

    Per pixel: 1 - prod_f (1 - c_f) with per-face coverage
    c = (sigmoid(d / sharpness) - floor) / (1 - floor), floor the sigmoid
    value at the -_COV_CLAMP cutoff. Accumulated in log space so full
    coverage stays finite; each chunk only ever touches its pixel slab.
    """
    v = ad.as_tensor(verts)
    data = v.data
    dtype = data.dtype
    faces = np.asarray(faces)
    pix = _pixel_grid(camera, dtype)
    ndc = _ndc_xy(data, camera)
    npix = camera.height * camera.width
    inv_sharp = dtype.type(1.0 / sharpness)
    margin = _COV_CLAMP * sharpness
    sp_floor = dtype.type(np.log1p(np.exp(-_COV_CLAMP)))
    order = _face_order(ndc, faces)
    starts = range(0, len(faces), chunk)
    slabs = [_pixel_slab(ndc[faces[order[s:s + chunk]]], camera, margin)
             for s in starts]

    log_onemc = np.zeros(npix, dtype=dtype)
    for k, start in enumerate(starts):
        if slabs[k] is None:
            continue
        fc = faces[order[start:start + chunk]]
        flds = _face_pixel_fields(ndc[fc], pix[slabs[k]])
        x = np.maximum(flds.d_signed * inv_sharp, -_COV_CLAMP)
        # log(1 - c) = -(softplus(x) - softplus(-clamp)), exactly 0 at x=-clamp
        log_onemc[slabs[k]] -= (np.logaddexp(0.0, x) - sp_floor).sum(axis=0)
    mask = 1.0 - np.exp(log_onemc)
    out = mask.reshape(camera.height, camera.width)

    def bwd(g):
        if not v.requires_grad:
            return
        g_scaled = (g.reshape(npix) * np.exp(log_onemc)).astype(dtype)
        g_ndc = np.zeros_like(ndc)
        for k, start in enumerate(starts):
            if slabs[k] is None:
                continue
            fc = faces[order[start:start + chunk]]
            flds = _face_pixel_fields(ndc[fc], pix[slabs[k]])
            x = flds.d_signed * inv_sharp
            sig = expit(np.maximum(x, -_COV_CLAMP))
            g_d = g_scaled[slabs[k]][None, :] * sig * (x > -_COV_CLAMP) \
                * inv_sharp
            np.add.at(g_ndc, fc, _dist_grad_to_tri(flds, g_d))
        gv = np.zeros_like(data)
        gv[:, :2] = g_ndc * dtype.type(camera.s)
        v.grad += gv

    return ad.custom(out, (v,), bwd)


def rasterize_frame_t(verts, vnormals, faces, camera,
                      sharpness=DEFAULT_SHARPNESS, chunk=_FACE_CHUNK):
    """Soft mask plus composited normal map in one fused op, (4, H, W).

    Channel 0 is the silhouette; channels 1..3 the normal image encoded
    (n + 1) / 2 over a mid-gray background. Visibility is a coverage-
    weighted softmax over interpolated depth with temperature = sharpness,
    composited by the soft silhouette so normals never leak outside the
    mask's soft boundary. Coverage uses the same clamped sigmoid as the
    silhouette op, so each chunk touches only its pixel slab, and fusing
    both images lets forward and backward rebuild each chunk's fields
    exactly once.
    """
    v = ad.as_tensor(verts)
    n = ad.as_tensor(vnormals)
    data = v.data
    dtype = data.dtype
    faces = np.asarray(faces)
    pix = _pixel_grid(camera, dtype)
    ndc = _ndc_xy(data, camera)
    z = data[:, 2]
    norms = n.data
    npix = camera.height * camera.width
    inv_sharp = dtype.type(1.0 / sharpness)
    tiny = np.finfo(dtype).tiny
    margin = _COV_CLAMP * sharpness
    floor = dtype.type(expit(-_COV_CLAMP))
    sp_floor = dtype.type(np.log1p(np.exp(-_COV_CLAMP)))
    inv_onemf = dtype.type(1.0 / (1.0 - expit(-_COV_CLAMP)))
    order = _face_order(ndc, faces)
    starts = range(0, len(faces), chunk)
    slabs = [_pixel_slab(ndc[faces[order[s:s + chunk]]], camera, margin)
             for s in starts]

    def chunk_fields(fc, slab):
        f = _face_pixel_fields(ndc[fc], pix[slab])
        x = f.d_signed * inv_sharp
        f.gate = x > -_COV_CLAMP
        f.x = np.maximum(x, -_COV_CLAMP)
        f.sig = expit(f.x)
        f.cov = (f.sig - floor) * inv_onemf  # exactly 0 at the clamp
        lam_c = np.clip(f.lam, 0.0, 1.0)
        f.tot = lam_c.sum(axis=-1) + 1e-12
        f.lam_h = lam_c / f.tot[..., None]  # (F, P, 3) clamped + renormalized
        f.ztri = z[fc]                      # (F, 3)
        f.ntri = norms[fc]                  # (F, 3, 3)
        f.zp = (f.lam_h @ f.ztri[:, :, None])[..., 0]  # (F, P)
        f.nface = f.lam_h @ f.ntri                     # (F, P, 3)
        f.logit = f.zp * inv_sharp
        return f

    log_onemc = np.zeros(npix, dtype=dtype)
    run_max = np.full(npix, -np.inf, dtype=dtype)
    denom = np.zeros(npix, dtype=dtype)
    numer = np.zeros((npix, 3), dtype=dtype)
    for k, start in enumerate(starts):
        slab = slabs[k]
        if slab is None:
            continue
        fc = faces[order[start:start + chunk]]
        f = chunk_fields(fc, slab)
        log_onemc[slab] -= (np.logaddexp(0.0, f.x) - sp_floor).sum(axis=0)
        new_max = np.maximum(run_max[slab], f.logit.max(axis=0))
        scale = np.exp(run_max[slab] - new_max)
        scale[~np.isfinite(scale)] = 0.0  # first touch: -inf - (-inf)
        w = f.cov * np.exp(f.logit - new_max[None, :])
        denom[slab] = denom[slab] * scale + w.sum(axis=0)
        numer[slab] = (numer[slab] * scale[:, None]
                       + np.einsum("fp,fpc->pc", w, f.nface))
        run_max[slab] = new_max
    mask = 1.0 - np.exp(log_onemc)
    n_blend = numer / (denom + tiny)[:, None]
    img = (mask[:, None] * n_blend + 1.0) / 2.0
    out = np.concatenate([mask[:, None], img], axis=1).T.reshape(
        4, camera.height, camera.width)

    def bwd(g):
        if not (v.requires_grad or n.requires_grad):
            return
        g4 = np.ascontiguousarray(g.reshape(4, npix).astype(dtype, copy=False))
        gp = g4[1:4].T  # (P, 3) normal-image grads
        g_nb = gp * (mask / 2.0)[:, None]
        g_mask = g4[0] + (gp * n_blend).sum(axis=1) / 2.0
        g_numer = g_nb / (denom + tiny)[:, None]
        g_denom = -(g_nb * n_blend).sum(axis=1) / (denom + tiny)
        g_mask_sc = g_mask * np.exp(log_onemc)

        g_ndc = np.zeros_like(ndc)
        g_z = np.zeros_like(z)
        g_norms = np.zeros_like(norms)
        for k, start in enumerate(starts):
            slab = slabs[k]
            if slab is None:
                continue
            fc = faces[order[start:start + chunk]]
            f = chunk_fields(fc, slab)
            ew = np.exp(f.logit - run_max[slab][None, :])
            w = f.cov * ew

            g_w = (np.einsum("fpc,pc->fp", f.nface, g_numer[slab])
                   + g_denom[slab][None, :])
            g_nface = w[..., None] * g_numer[slab][None, :, :]
            g_logit = g_w * w
            g_zp = g_logit * inv_sharp
            g_cov = g_w * ew
            one_m_sig = expit(-f.x)
            g_d = f.gate * (g_cov * f.sig * one_m_sig * inv_onemf
                            + g_mask_sc[slab][None, :] * f.sig) * inv_sharp

            g_lam_h = (g_nface @ f.ntri.swapaxes(1, 2)
                       + g_zp[..., None] * f.ztri[:, None, :])  # (F, P, 3)
            dot = (g_lam_h * f.lam_h).sum(axis=-1)
            g_lam_c = (g_lam_h - dot[..., None]) / f.tot[..., None]
            open_clip = (f.lam > 0.0) & (f.lam < 1.0)
            g_lam = g_lam_c * open_clip

            g_tri = _dist_grad_to_tri(f, g_d) + _bary_grad_to_tri(f, g_lam)
            np.add.at(g_ndc, fc, g_tri)
            if n.requires_grad:
                np.add.at(g_norms, fc, f.lam_h.swapaxes(1, 2) @ g_nface)
            for i in range(3):
                np.add.at(g_z, fc[:, i], (f.lam_h[..., i] * g_zp).sum(axis=1))

        if v.requires_grad:
            gv = np.zeros_like(data)
            gv[:, :2] = g_ndc * dtype.type(camera.s)
            gv[:, 2] = g_z
            v.grad += gv
        if n.requires_grad:
            n.grad += g_norms

    return ad.custom(out, (v, n), bwd)


def rasterize_normals_t(verts, vnormals, faces, camera,
                        sharpness=DEFAULT_SHARPNESS, chunk=_FACE_CHUNK):
    """Soft normal map (H, W, 3), encoded (n + 1) / 2, gray background."""
    frame = rasterize_frame_t(verts, vnormals, faces, camera, sharpness,
                              chunk)
    return ad.transpose(ad.take(frame, np.array([1, 2, 3])), (1, 2, 0))


def rasterize_descriptors_t(verts, faces, descriptors, camera,
                            chunk=_FACE_CHUNK * 2):
    """Hard z-buffered per-vertex descriptor rasterization (H, W, C).

    Differentiable w.r.t. the descriptors only; geometry is a constant.
    Background pixels are zero.
    """
    desc = ad.as_tensor(descriptors)
    if desc.ndim != 2 or desc.shape[1] == 0:
        raise RenderError("descriptors must be (N, C) with C >= 1")
    verts = np.asarray(verts, dtype=np.float64)
    if desc.shape[0] != len(verts):
        raise RenderError("descriptor rows must match vertex count")
    faces = np.asarray(faces)
    pix = _pixel_grid(camera, verts.dtype)
    ndc = _ndc_xy(verts, camera)
    z = verts[:, 2]
    npix = camera.height * camera.width

    best_z = np.full(npix, -np.inf)
    best_face = np.full(npix, -1, dtype=np.int64)
    best_lam = np.zeros((npix, 3))
    for start in range(0, len(faces), chunk):
        fc = faces[start:start + chunk]
        flds = _face_pixel_fields(ndc[fc], pix)
        zp = (flds.lam @ z[fc][:, :, None])[..., 0]  # (F, P)
        valid = flds.inside & ~flds.degenerate
        zc = np.where(valid, zp, -np.inf)
        cidx = np.argmax(zc, axis=0)
        cz = np.take_along_axis(zc, cidx[None], 0)[0]
        better = cz > best_z
        best_z = np.where(better, cz, best_z)
        best_face = np.where(better, start + cidx, best_face)
        clam = np.take_along_axis(flds.lam, cidx[None, :, None],
                                  0)[0]  # (P, 3)
        best_lam = np.where(better[:, None], clam, best_lam)

    covered = (best_face >= 0).astype(desc.dtype)[:, None]
    bf = np.maximum(best_face, 0)
    corner = [ad.take(desc, faces[bf][:, i]) for i in range(3)]
    interp = sum(best_lam[:, i:i + 1].astype(desc.dtype) * corner[i]
                 for i in range(3))
    flat = interp * covered
    return flat.reshape((camera.height, camera.width, desc.shape[1]))


# -- public mesh-level wrappers ------------------------------------------------

def rasterize_silhouette(mesh, camera, sharpness=DEFAULT_SHARPNESS):
    out = rasterize_silhouette_t(ad.Tensor(mesh.vertices), mesh.faces,
                                 camera, sharpness)
    return Image(out.data, "mask")


def rasterize_normals(mesh, camera, sharpness=DEFAULT_SHARPNESS):
    normals = vertex_normals(mesh)
    out = rasterize_normals_t(ad.Tensor(mesh.vertices), ad.Tensor(normals),
                              mesh.faces, camera, sharpness)
    return Image(out.data, "normal")


def rasterize_descriptors(mesh, descriptors, camera):
    out = rasterize_descriptors_t(mesh.vertices, mesh.faces,
                                  descriptors, camera)
    data = out.data if isinstance(out, ad.Tensor) else out
    return Image(data, "descriptor")


# -- PNG I/O -------------------------------------------------------------------

def save_png(path, array):
    """Unit-range array to 8-bit PNG; (H, W) gray or (H, W, 3) RGB."""
    arr = np.asarray(array, dtype=np.float64)
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if quant.ndim == 2 else "RGB"
    if quant.ndim == 3 and quant.shape[2] != 3:
        raise RenderError("RGB PNG needs 3 channels")
    PILImage.fromarray(quant, mode=mode).save(path)


def load_png(path):
    with PILImage.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    return arr / 255.0
