"""Metrics, per-image explanations, and the prototype-location audit.

Balanced accuracy and recalls are reported on the 0-100 scale. Explanations
rank prototypes by similarity and carry points = similarity x head weight of
the predicted class, mirroring how the classifier actually scored the image.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .data import Manifest, load_image, load_images, load_mask
from .errors import ConfigurationError
from .model import (ProtoPartNet, batched_topk, similarity_from_distance,
                    scale_up, load_checkpoint, checkpoint_digest)


# ---------------------------------------------------------------------------
# embedding with an optional on-disk cache (PROTOPART_CACHE)
# ---------------------------------------------------------------------------


def _weights_digest(model: ProtoPartNet) -> str:
    h = hashlib.sha1()
    for key in sorted(model.params):
        h.update(np.ascontiguousarray(model.params[key]).tobytes())
    return h.hexdigest()[:16]


def embed_records(model: ProtoPartNet, records, chunk: int = 16) -> np.ndarray:
    """Embed manifest records, reusing PROTOPART_CACHE entries when present."""
    size = model.config.image_size
    cache_dir = os.environ.get("PROTOPART_CACHE")
    if not cache_dir:
        images = load_images(records, size)
        return np.concatenate([model.embed(images[s:s + chunk])
                               for s in range(0, len(images), chunk)])
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    digest = _weights_digest(model)
    out = [None] * len(records)
    missing = []
    for i, rec in enumerate(records):
        key = hashlib.sha1(f"{digest}:{rec.image_id}:{size}".encode()).hexdigest()
        path = cache / f"emb_{key}.npy"
        if path.exists():
            out[i] = np.load(path)
        else:
            missing.append((i, rec, path))
    for s in range(0, len(missing), chunk):
        block = missing[s:s + chunk]
        z = model.embed(load_images([rec for _, rec, _ in block], size))
        for (i, _, path), zi in zip(block, z):
            np.save(path, zi)
            out[i] = zi
    return np.stack(out)


def dataset_simvec(model: ProtoPartNet, records) -> np.ndarray:
    latents = embed_records(model, records)
    dist = kernels.distance_maps(latents, model.params["protos"])
    sims = similarity_from_distance(dist, model.config.epsilon)
    vec, _ = batched_topk(sims, model.config.top_k)
    return vec


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ba: float
    recall: dict            # class id -> recall percentage
    confusion: list         # rows = true class, cols = predicted
    n_per_class: dict
    checkpoint_id: str = ""
    dataset: str = ""

    def to_dict(self) -> dict:
        return {
            "ba": self.ba,
            "recall": {str(k): v for k, v in self.recall.items()},
            "confusion": self.confusion,
            "n_per_class": {str(k): v for k, v in self.n_per_class.items()},
            "checkpoint_id": self.checkpoint_id,
            "dataset": self.dataset,
        }

    def table(self) -> str:
        lines = [f"dataset: {self.dataset}   checkpoint: {self.checkpoint_id}",
                 f"BA: {self.ba:.2f}"]
        for cls, rec in sorted(self.recall.items()):
            lines.append(f"  recall[class {cls}]: {rec:.2f}  (n={self.n_per_class[cls]})")
        lines.append("confusion (rows=true):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:6d}" for v in row))
        return "\n".join(lines)


def metrics_from_confusion(confusion: np.ndarray) -> tuple:
    """(ba, per-class recall dict) on the 0-100 scale; BA = mean of recalls."""
    confusion = np.asarray(confusion, dtype=int)
    row_sums = confusion.sum(axis=1)
    if (row_sums == 0).any():
        missing = np.flatnonzero(row_sums == 0).tolist()
        raise ConfigurationError(f"BA undefined: no samples for class(es) {missing}")
    recalls = {cls: 100.0 * confusion[cls, cls] / row_sums[cls]
               for cls in range(confusion.shape[0])}
    ba = float(np.mean(list(recalls.values())))
    return ba, recalls


def evaluate_predictions(y_true, y_pred, num_classes: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    confusion = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(confusion, (y_true, y_pred), 1)
    ba, recalls = metrics_from_confusion(confusion)
    return EvalReport(ba, recalls, confusion.tolist(),
                      {cls: int(confusion[cls].sum()) for cls in range(num_classes)})


def evaluate(model: ProtoPartNet, manifest: Manifest, checkpoint_id: str = "") -> EvalReport:
    if len(manifest) == 0:
        raise ConfigurationError("cannot evaluate an empty manifest")
    simvec = dataset_simvec(model, manifest.records)
    pred = model.logits_from_simvec(simvec).argmax(axis=1)
    report = evaluate_predictions(manifest.labels(), pred, model.config.num_classes)
    report.checkpoint_id = checkpoint_id
    report.dataset = manifest.split
    return report


def evaluate_checkpoint(ckpt_path, manifest: Manifest) -> EvalReport:
    model, _, _ = load_checkpoint(ckpt_path)
    return evaluate(model, manifest, checkpoint_id=checkpoint_digest(ckpt_path))


# ---------------------------------------------------------------------------
# explanations
# ---------------------------------------------------------------------------


@dataclass
class ExplanationEntry:
    proto_id: int
    class_id: int
    similarity: float
    weight: float
    points: float
    overlay_bbox: tuple           # argmax latent cell footprint on the test image
    source: dict | None = None    # projected prototype provenance, when known


@dataclass
class Explanation:
    image_id: str
    predicted_class: int
    logits: list
    entries: list
    top_n: int

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "predicted_class": self.predicted_class,
            "logits": self.logits,
            "top_n": self.top_n,
            "entries": [
                {"proto_id": e.proto_id, "class": e.class_id,
                 "similarity": e.similarity, "weight": e.weight, "points": e.points,
                 "overlay_bbox": list(e.overlay_bbox), "source": e.source}
                for e in self.entries
            ],
        }


def explain(model: ProtoPartNet, sources, image: np.ndarray, image_id: str,
            top_n: int) -> Explanation:
    cfg = model.config
    if not 1 <= top_n <= cfg.num_prototypes:
        raise ConfigurationError(f"top_n must lie in [1, {cfg.num_prototypes}]")
    res = model.forward(image[None])
    pred = int(res.logits[0].argmax())
    tile = cfg.image_size // cfg.latent_size
    order = np.argsort(-res.simvec[0], kind="stable")[:top_n]
    entries = []
    for j in order:
        j = int(j)
        amax = int(res.sims[0, j].argmax())
        row, col = divmod(amax, cfg.latent_size)
        weight = float(model.params["head_w"][pred, j])
        sim = float(res.simvec[0, j])
        src = sources[j].to_dict() if sources and sources[j] is not None else None
        entries.append(ExplanationEntry(
            j, int(model.proto_classes[j]), sim, weight, sim * weight,
            (col * tile, row * tile, tile, tile), src))
    return Explanation(image_id, pred, [float(v) for v in res.logits[0]], entries, top_n)


def render_explanation(expl: Explanation, model: ProtoPartNet, image: np.ndarray,
                       image_lookup, out_path) -> None:
    """Fig-style panel: test image | activation overlay | prototype patch | points."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import matplotlib.patches as patches

    res = model.forward(image[None])
    n = len(expl.entries)
    fig, axes = plt.subplots(n, 4, figsize=(11, 2.8 * n), squeeze=False)
    size = model.config.image_size
    for i, entry in enumerate(expl.entries):
        ax = axes[i][0]
        ax.imshow(image)
        x, y, w, h = entry.overlay_bbox
        ax.add_patch(patches.Rectangle((x, y), w, h, fill=False, color="yellow", lw=2))
        ax.set_title(f"test image ({expl.image_id})", fontsize=8)

        ax = axes[i][1]
        pam = scale_up(res.sims[0, entry.proto_id], size, size)
        ax.imshow(image)
        ax.imshow(pam, cmap="jet", alpha=0.4)
        ax.set_title(f"activation p{entry.proto_id} (sim {entry.similarity:.2f})", fontsize=8)

        ax = axes[i][2]
        if entry.source is not None:
            src_img = image_lookup(entry.source["image"])
            bx, by, bw, bh = entry.source["bbox"]
            ax.imshow(src_img[by:by + bh, bx:bx + bw])
            ax.set_title(f"prototype patch (class {entry.class_id})", fontsize=8)
        else:
            ax.text(0.5, 0.5, "unprojected\nprototype", ha="center", va="center")
        ax = axes[i][3]
        ax.axis("off")
        ax.text(0.1, 0.5, f"weight {entry.weight:+.3f}\npoints {entry.points:+.3f}",
                fontsize=10, va="center")
    for row in axes:
        for ax in row[:3]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.suptitle(f"predicted class {expl.predicted_class}  logits {np.round(expl.logits, 3)}",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# prototype audit
# ---------------------------------------------------------------------------


@dataclass
class AuditRow:
    proto_id: int
    class_id: int
    image: str | None
    max_row: int = -1
    max_col: int = -1
    center_px: tuple = (-1, -1)
    inside: bool = False
    auditable: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return {"proto_id": self.proto_id, "class": self.class_id, "image": self.image,
                "max_row": self.max_row, "max_col": self.max_col,
                "center_px": list(self.center_px), "inside": self.inside,
                "auditable": self.auditable, "reason": self.reason}


@dataclass
class PrototypeAudit:
    rows: list
    boundary_px: int

    @property
    def fraction_inside(self) -> float:
        auditable = [r for r in self.rows if r.auditable]
        if not auditable:
            return float("nan")
        return float(np.mean([r.inside for r in auditable]))

    def per_class_fraction(self, num_classes: int = 2) -> dict:
        out = {}
        for cls in range(num_classes):
            rows = [r for r in self.rows if r.auditable and r.class_id == cls]
            out[cls] = float(np.mean([r.inside for r in rows])) if rows else float("nan")
        return out

    def to_dict(self) -> dict:
        return {"boundary_px": self.boundary_px,
                "fraction_inside": self.fraction_inside,
                "per_class_fraction": {str(k): v for k, v in self.per_class_fraction().items()},
                "rows": [r.to_dict() for r in self.rows]}


def audit_prototypes(model: ProtoPartNet, sources, manifest: Manifest,
                     boundary_px: int = 8, mask_polarity: str = "lesion-white") -> PrototypeAudit:
    """Check whether each projected prototype activates inside its source lesion.

    The prototype's activation map is recomputed on its source image; the
    argmax cell's input-space center is tested against the lesion mask with a
    boundary tolerance band of `boundary_px` pixels.
    """
    cfg = model.config
    size = cfg.image_size
    tile = size // cfg.latent_size
    by_id = manifest.by_id()
    rows = []
    # embed each distinct auditable source image once
    needed = {}
    for j, src in enumerate(sources):
        if src is not None and src.image in by_id:
            needed.setdefault(src.image, by_id[src.image])
    latents = {}
    if needed:
        recs = list(needed.values())
        z = embed_records(model, recs)
        latents = {rec.image_id: z[i] for i, rec in enumerate(recs)}

    for j, src in enumerate(sources):
        cls = int(model.proto_classes[j])
        if src is None:
            rows.append(AuditRow(j, cls, None, reason="prototype not projected"))
            continue
        rec = by_id.get(src.image)
        if rec is None:
            rows.append(AuditRow(j, cls, src.image, reason="source image not in manifest"))
            continue
        if rec.mask_path is None:
            rows.append(AuditRow(j, cls, src.image, reason="source image has no mask"))
            continue
        dist = kernels.distance_maps(latents[src.image][None], model.params["protos"][j][None])
        sims = similarity_from_distance(dist[0, 0], cfg.epsilon)
        amax = int(sims.argmax())
        row, col = divmod(amax, cfg.latent_size)
        cy = int((row + 0.5) * tile)
        cx = int((col + 0.5) * tile)
        mask = load_mask(rec.mask_path, size, size, mask_polarity)
        if (mask == 0).any():
            # distance from every pixel to the nearest lesion (mask-0) pixel
            dist_to_lesion = ndimage.distance_transform_edt(mask)
            inside = bool(dist_to_lesion[cy, cx] <= boundary_px)
        else:
            inside = False
        rows.append(AuditRow(j, cls, src.image, row, col, (cx, cy), inside, True))
    return PrototypeAudit(rows, boundary_px)
