"""Perspective rasterization of the person model with texel gradients.

The renderer projects the (optionally deformed) person onto the image plane at
the placement given by RenderParams, z-buffers the triangles, applies flat
Lambertian shading with a fixed directional light plus ambient, and samples
the patch texture over the garment's front panel. For every patch-textured
pixel it records the four texels touched by the bilinear lookup together with
the shading factor, which makes the map from patch texels to rendered pixels
an explicit sparse linear operator: that is the differentiability contract the
attack gradients rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DomainError
from .geometry import GarmentMesh, PersonModel
from .scene import BoundingBox, Camera, RenderParams

AMBIENT = 0.3
LIGHT_DIR = np.array([0.3, 0.6, -0.74])  # toward the light, camera space
NEAR_PLANE = 0.05


@dataclass
class TexelRecords:
    """Sparse jacobian of rendered pixels w.r.t. flattened patch texels.

    pixel (pix_y[n], pix_x[n]) = scale[n] * sum_k tex_w[n,k] * tex[tex_idx[n,k]]
    plus terms that do not involve the texture.
    """

    pix_y: np.ndarray
    pix_x: np.ndarray
    tex_idx: np.ndarray
    tex_w: np.ndarray
    scale: np.ndarray
    tex_shape: tuple[int, int]

    def accumulate(self, g_image: np.ndarray, g_tex: np.ndarray, live_mask: np.ndarray | None = None) -> None:
        """Add d(loss)/d(texel) contributions implied by d(loss)/d(image)."""
        th, tw = self.tex_shape
        flat = g_tex.reshape(th * tw, 3)
        kernels.scatter_texel_grads(
            g_image, self.pix_y, self.pix_x, self.tex_idx, self.tex_w, self.scale, flat
        )
        if live_mask is not None:
            flat *= live_mask.reshape(th * tw, 1)


@dataclass
class RenderResult:
    image: np.ndarray
    mask: np.ndarray
    records: TexelRecords | None


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rasterize(
    model: PersonModel,
    patch: np.ndarray | None,
    params: RenderParams,
    out_size: int,
    camera: Camera = Camera(),
    garment: GarmentMesh | None = None,
    box: BoundingBox | None = None,
    with_records: bool = False,
) -> RenderResult:
    """Render the person at the given placement.

    `garment` substitutes a deformed garment mesh (topology must match the
    model's). When `box` is given the projected silhouette is uniformly
    rescaled and translated to sit inside it; otherwise the model is centered
    and its on-screen size follows the pinhole law in params.distance.
    """
    garment_mesh = garment if garment is not None else model.garment
    if garment_mesh.vertices.shape != model.garment.vertices.shape:
        raise DomainError("deformed garment does not match the model topology")

    verts = np.concatenate([model.body.vertices, garment_mesh.vertices])
    n_body = model.body.vertices.shape[0]
    faces = np.concatenate([model.body.faces, garment_mesh.faces + n_body])
    albedo = np.concatenate([model.body_albedo, model.garment_albedo])
    is_patch = np.concatenate(
        [np.zeros(model.body.faces.shape[0], dtype=bool), model.garment_is_patch]
    )
    uv = np.concatenate(
        [np.full((model.body.faces.shape[0], 3, 2), np.nan), model.garment_uv]
    )
    if patch is None:
        is_patch = np.zeros_like(is_patch)

    # model -> camera space
    centered = verts - np.array([0.0, model.height / 2.0, 0.0])
    cam = centered @ _rot_y(params.azimuth).T
    cam = cam @ _rot_x(-params.elevation).T
    cam = cam + np.array([0.0, 0.0, params.distance])
    z = cam[:, 2]
    if (z <= NEAR_PLANE).any():
        raise DomainError("model projects behind the camera near plane")

    u = camera.focal * cam[:, 0] / z
    v = -camera.focal * cam[:, 1] / z
    if box is not None:
        u0, u1 = u.min(), u.max()
        v0, v1 = v.min(), v.max()
        if u1 - u0 <= 0 or v1 - v0 <= 0:
            raise DomainError("degenerate projection")
        fit = min(box.width / (u1 - u0), box.height / (v1 - v0))
        cx, cy = box.center
        x_img = (u - 0.5 * (u0 + u1)) * fit + cx
        y_img = (v - 0.5 * (v0 + v1)) * fit + cy
    else:
        x_img = u + out_size / 2.0
        y_img = v + out_size / 2.0
    v2d = np.stack([x_img, y_img], axis=1)

    face_id, bary = kernels.raster_zbuffer(v2d, z, faces, out_size, out_size)
    mask = (face_id >= 0).astype(np.float64)

    # flat shading from camera-space face normals
    fv = cam[faces]
    normals = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    norms = np.linalg.norm(normals, axis=1)
    norms[norms == 0] = 1.0
    normals /= norms[:, None]
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    shade = AMBIENT + (1.0 - AMBIENT) * np.abs(normals @ light)

    image = np.zeros((out_size, out_size, 3), dtype=np.float64)
    py, px = np.nonzero(face_id >= 0)
    records = None
    if py.size:
        f = face_id[py, px]
        pix_shade = shade[f]
        plain = ~is_patch[f]
        if plain.any():
            image[py[plain], px[plain]] = albedo[f[plain]] * pix_shade[plain, None]
        tex_sel = is_patch[f]
        if tex_sel.any() and patch is not None:
            th, tw = patch.shape[0], patch.shape[1]
            fp = f[tex_sel]
            lam = bary[py[tex_sel], px[tex_sel]]  # (N,3)
            uv_pix = np.einsum("nk,nkc->nc", lam, uv[fp])
            uu = np.clip(uv_pix[:, 0], 0.0, 1.0)
            vv = np.clip(uv_pix[:, 1], 0.0, 1.0)
            ty = vv * (th - 1)
            tx = uu * (tw - 1)
            iy = np.minimum(np.floor(ty).astype(np.int64), th - 2)
            ix = np.minimum(np.floor(tx).astype(np.int64), tw - 2)
            dy = ty - iy
            dx = tx - ix
            wts = np.stack(
                [(1 - dy) * (1 - dx), (1 - dy) * dx, dy * (1 - dx), dy * dx], axis=1
            )
            idx = np.stack(
                [iy * tw + ix, iy * tw + ix + 1, (iy + 1) * tw + ix, (iy + 1) * tw + ix + 1],
                axis=1,
            )
            tex_flat = np.asarray(patch, dtype=np.float64).reshape(-1, 3)
            rgb = np.einsum("nk,nkc->nc", wts, tex_flat[idx])
            sh = pix_shade[tex_sel]
            image[py[tex_sel], px[tex_sel]] = rgb * sh[:, None]
            if with_records:
                records = TexelRecords(
                    pix_y=py[tex_sel].astype(np.int64),
                    pix_x=px[tex_sel].astype(np.int64),
                    tex_idx=idx,
                    tex_w=wts,
                    scale=sh.copy(),
                    tex_shape=(th, tw),
                )
    if with_records and records is None and patch is not None:
        records = TexelRecords(
            pix_y=np.empty(0, dtype=np.int64),
            pix_x=np.empty(0, dtype=np.int64),
            tex_idx=np.empty((0, 4), dtype=np.int64),
            tex_w=np.empty((0, 4)),
            scale=np.empty(0),
            tex_shape=(patch.shape[0], patch.shape[1]),
        )
    return RenderResult(image=image, mask=mask, records=records)


def mask_bbox(mask: np.ndarray) -> BoundingBox:
    """Tight bounding box of the binary mask in pixel coordinates."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DomainError("empty mask has no bounding box")
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
