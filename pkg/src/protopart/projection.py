"""Prototype projection: snap each prototype to its nearest same-class latent patch.

Within a class, prototypes claim patches greedily in ascending order of their
current best distance, and no two prototypes of a class may take patches from
the same training image. Distance ties break by (image id, row, col); ties
between prototypes break by prototype index. The claim phase is sequential
and deterministic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError


@dataclass
class PrototypeAssignment:
    proto_id: int
    image: str
    row: int
    col: int
    distance: float        # L2 distance the prototype moved


@dataclass
class ProjectionResult:
    assignments: list
    diversity_ok: bool

    def to_dict(self) -> dict:
        return {
            "diversity_ok": self.diversity_ok,
            "assignments": [
                {"proto_id": a.proto_id, "image": a.image, "row": a.row,
                 "col": a.col, "distance": float(a.distance)}
                for a in self.assignments
            ],
        }


def project_prototypes(protos: np.ndarray, proto_classes, latents: np.ndarray,
                       labels, image_ids):
    """Return (projected prototype matrix, ProjectionResult).

    latents: (n, hz, wz, d) embeddings of candidate training images.
    """
    protos = np.asarray(protos, dtype=float)
    proto_classes = np.asarray(proto_classes)
    labels = np.asarray(labels)
    image_ids = list(image_ids)
    if latents.shape[0] != len(image_ids) or latents.shape[0] != labels.shape[0]:
        raise ConfigurationError("latents, labels and image_ids must align")
    new_protos = protos.copy()
    assignments: dict[int, PrototypeAssignment] = {}

    for cls in np.unique(proto_classes):
        proto_idx = np.flatnonzero(proto_classes == cls)
        img_idx = np.flatnonzero(labels == cls)
        if len(img_idx) < len(proto_idx):
            raise ConfigurationError(
                f"class {cls}: {len(proto_idx)} prototypes need {len(proto_idx)} distinct "
                f"training images but only {len(img_idx)} are available"
            )
        # scan images in id order so argmin tie-breaks follow (image id, row, col)
        order = sorted(range(len(img_idx)), key=lambda i: image_ids[img_idx[i]])
        img_idx = img_idx[order]
        dist = kernels.distance_maps(latents[img_idx], protos[proto_idx])  # (ni, np, hz, wz)
        if not np.all(np.isfinite(dist)):
            raise NumericError(f"class {cls}: non-finite prototype-patch distances")
        ni, npr, hz, wz = dist.shape
        flat = dist.transpose(1, 0, 2, 3).reshape(npr, ni, hz * wz)  # (np, ni, patches)
        best_patch = flat.argmin(axis=2)                      # first (row-major) min per image
        best_per_image = np.take_along_axis(flat, best_patch[:, :, None], axis=2)[:, :, 0]

        available = np.ones(ni, dtype=bool)
        remaining = list(range(npr))
        while remaining:
            # each remaining prototype's best distance among still-available images
            masked = np.where(available[None, :], best_per_image[remaining], np.inf)
            img_of = masked.argmin(axis=1)
            dist_of = masked[np.arange(len(remaining)), img_of]
            pick = int(np.argmin(dist_of))  # ties -> lowest prototype index
            p_local = remaining[pick]
            i_local = int(img_of[pick])
            patch = int(best_patch[p_local, i_local])
            row, col = divmod(patch, wz)
            j = int(proto_idx[p_local])
            vec = latents[img_idx[i_local], row, col].copy()
            moved = float(np.sqrt(((protos[j] - vec) ** 2).sum()))
            new_protos[j] = vec
            assignments[j] = PrototypeAssignment(j, image_ids[img_idx[i_local]],
                                                 int(row), int(col), moved)
            available[i_local] = False
            remaining.pop(pick)

    ordered = [assignments[j] for j in range(len(protos))]
    diversity_ok = True
    for cls in np.unique(proto_classes):
        imgs = [a.image for a in ordered if proto_classes[a.proto_id] == cls]
        if len(set(imgs)) != len(imgs):
            diversity_ok = False
    return new_protos, ProjectionResult(ordered, diversity_ok)
