"""Local HTTP service for human review of projected prototypes.

Serves the prototype roster with patch/context thumbnails, records
valid/discard verdicts into an append-only event log (atomic rewrite on
every event, last write wins), and exports the approved patches as a
valid_set.json the trainer consumes for remembering-loss runs.

One session per checkpoint: the session file is keyed by the checkpoint
digest, so reviewing a retrained model automatically starts fresh.
"""

from __future__ import annotations

import datetime
import io
import json
import os
import threading
import warnings
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from PIL import Image, ImageDraw
from pydantic import BaseModel

from .data import ValidEntry, ValidPrototypeSet, load_manifest, save_valid_set
from .errors import ConfigurationError, ValidationError
from .model import load_checkpoint, checkpoint_digest

VERDICTS = ("valid", "discard")

REVIEW_GUIDANCE = (
    "Keep patches that lie inside the lesion or along its border. "
    "Discard patches that activate on artifacts: dark corners, black borders, "
    "rulers, hair, or bare skin."
)

THUMB_SIZE = 128


class ReviewSession:
    """Event-sourced verdict store bound to one checkpoint digest."""

    def __init__(self, path, checkpoint_id: str, num_prototypes: int):
        self.path = Path(path)
        self.checkpoint_id = checkpoint_id
        self.num_prototypes = num_prototypes
        self.events: list = []
        self.created_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._persist()

    def _load(self) -> None:
        lines = [json.loads(s) for s in self.path.read_text().splitlines() if s.strip()]
        if not lines or lines[0].get("event") != "session_start":
            raise ValidationError(f"{self.path}: not a review session file")
        head = lines[0]
        if head.get("checkpoint") != self.checkpoint_id:
            raise ValidationError(
                f"{self.path}: session belongs to checkpoint {head.get('checkpoint')!r}, "
                f"not {self.checkpoint_id!r}")
        self.created_at = head.get("created_at", self.created_at)
        self.events = lines[1:]

    def _persist(self) -> None:
        lines = [json.dumps({"event": "session_start", "checkpoint": self.checkpoint_id,
                             "created_at": self.created_at})]
        lines += [json.dumps(e) for e in self.events]
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, self.path)

    def record(self, proto_id: int, verdict: str, note: str = "") -> dict:
        if verdict not in VERDICTS:
            raise ValidationError(f"verdict must be one of {VERDICTS}, got {verdict!r}")
        with self._lock:
            event = {"event": "verdict", "seq": len(self.events), "proto_id": int(proto_id),
                     "verdict": verdict, "note": note,
                     "at": datetime.datetime.now(datetime.timezone.utc).isoformat()}
            self.events.append(event)
            self._persist()
        return event

    def current_verdicts(self) -> dict:
        state = {}
        for e in self.events:
            if e.get("event") == "verdict":
                state[e["proto_id"]] = {"verdict": e["verdict"], "note": e.get("note", "")}
        return state

    def history(self, proto_id: int) -> list:
        return [e for e in self.events
                if e.get("event") == "verdict" and e["proto_id"] == proto_id]


class _VerdictBody(BaseModel):
    verdict: str
    note: str = ""


class _ExportBody(BaseModel):
    path: str | None = None
    allow_partial: bool = False


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def build_app(ckpt_path, run_dir, manifest_path=None, session_path=None,
              static_dir=None) -> FastAPI:
    """Assemble the review app; refuses checkpoints without a source table."""
    ckpt_path = Path(ckpt_path)
    run_dir = Path(run_dir)
    model, sources, meta = load_checkpoint(ckpt_path)
    if any(s is None for s in sources):
        raise ConfigurationError(
            f"{ckpt_path}: prototypes have no source table (pre-projection checkpoint); "
            "review needs a checkpoint written at or after a projection epoch")
    if meta.get("prototypes_match_sources") is False:
        warnings.warn(
            f"{ckpt_path}: prototypes were trained past their last projection; the "
            "source patches are approximate. Prefer a ckpt-epoch{N}.ppt checkpoint.")
    digest = checkpoint_digest(ckpt_path)
    if manifest_path is None:
        manifest_path = meta.get("train_manifest")
        if manifest_path is None:
            raise ConfigurationError(
                "no manifest given and the checkpoint does not record one (--data)")
    manifest = load_manifest(manifest_path)
    by_id = manifest.by_id()
    for src in sources:
        if src.image not in by_id:
            raise ConfigurationError(
                f"prototype source image {src.image!r} missing from manifest {manifest_path}")
    session = ReviewSession(
        session_path or run_dir / "sessions" / f"{digest}.jsonl",
        digest, model.config.num_prototypes)

    proto_classes = model.proto_classes
    app = FastAPI(title="protopart review")
    app.state.session = session
    app.state.model = model
    app.state.sources = sources
    app.state.run_dir = run_dir

    def roster():
        verdicts = session.current_verdicts()
        out = []
        for j, src in enumerate(sources):
            v = verdicts.get(j, {"verdict": "pending", "note": ""})
            out.append({
                "id": j,
                "class": int(proto_classes[j]),
                "class_name": "MEL" if proto_classes[j] == 1 else "NV",
                "verdict": v["verdict"],
                "note": v["note"],
                "image": src.image,
                "bbox": list(src.bbox),
                "patch_url": f"/api/prototypes/{j}/patch.png",
                "context_url": f"/api/prototypes/{j}/context.png",
                "history": session.history(j),
            })
        return out

    def counts():
        verdicts = session.current_verdicts()
        per_class = {}
        totals = {"pending": 0, "valid": 0, "discard": 0}
        for j in range(len(sources)):
            cls = int(proto_classes[j])
            state = verdicts.get(j, {"verdict": "pending"})["verdict"]
            per_class.setdefault(cls, {"pending": 0, "valid": 0, "discard": 0})
            per_class[cls][state] += 1
            totals[state] += 1
        return totals, per_class

    @app.get("/api/session")
    def get_session():
        totals, per_class = counts()
        return {
            "checkpoint": digest,
            "checkpoint_path": str(ckpt_path),
            "created_at": session.created_at,
            "num_prototypes": len(sources),
            "image_size": model.config.image_size,
            "counts": totals,
            "per_class": {str(k): v for k, v in per_class.items()},
            "guidance": REVIEW_GUIDANCE,
            "export_ready": totals["pending"] == 0,
            "mode_hint": "lp+lr",
        }

    @app.get("/api/prototypes")
    def get_prototypes():
        return roster()

    def _source_or_404(proto_id: int):
        if not 0 <= proto_id < len(sources):
            raise HTTPException(status_code=404, detail=f"unknown prototype id {proto_id}")
        return sources[proto_id]

    @app.get("/api/prototypes/{proto_id}/patch.png")
    def get_patch(proto_id: int):
        src = _source_or_404(proto_id)
        with Image.open(by_id[src.image].path) as im:
            im = im.convert("RGB")
            x, y, w, h = src.bbox
            patch = im.crop((x, y, x + w, y + h)).resize(
                (THUMB_SIZE, THUMB_SIZE), Image.NEAREST)
        return Response(_png_bytes(patch), media_type="image/png")

    @app.get("/api/prototypes/{proto_id}/context.png")
    def get_context(proto_id: int, plain: bool = False):
        """Source image at 2x thumb size; bbox drawn in unless plain=1."""
        src = _source_or_404(proto_id)
        with Image.open(by_id[src.image].path) as im:
            orig_w = im.size[0]
            im = im.convert("RGB").resize((THUMB_SIZE * 2, THUMB_SIZE * 2), Image.NEAREST)
            if not plain:
                scale = (THUMB_SIZE * 2) / orig_w
                x, y, w, h = (int(round(v * scale)) for v in src.bbox)
                draw = ImageDraw.Draw(im)
                draw.rectangle((x, y, x + w, y + h), outline=(255, 40, 40), width=3)
        return Response(_png_bytes(im), media_type="image/png")

    @app.post("/api/prototypes/{proto_id}/verdict")
    def post_verdict(proto_id: int, body: _VerdictBody):
        _source_or_404(proto_id)
        try:
            event = session.record(proto_id, body.verdict, body.note)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        verdicts = session.current_verdicts()
        return {"ok": True, "event": event, "state": verdicts[proto_id]}

    @app.post("/api/export")
    def post_export(body: _ExportBody):
        totals, per_class = counts()
        if totals["pending"] > 0 and not body.allow_partial:
            raise HTTPException(
                status_code=409,
                detail=f"{totals['pending']} prototypes still pending; "
                       "finish the review or export with allow_partial")
        verdicts = session.current_verdicts()
        entries = []
        for j, src in enumerate(sources):
            v = verdicts.get(j)
            if v and v["verdict"] == "valid":
                entries.append(ValidEntry(int(proto_classes[j]), src.image,
                                          tuple(src.bbox), v.get("note", "")))
        out_path = Path(body.path) if body.path else run_dir / "valid_set.json"
        vset = ValidPrototypeSet(entries)
        save_valid_set(out_path, vset)
        warnings = []
        counts_per_class = vset.per_class_counts(model.config.num_classes)
        for cls in range(model.config.num_classes):
            if counts_per_class[cls] == 0:
                warnings.append(
                    f"class {cls}: no valid prototypes exported; the remembering loss "
                    "will be vacuous for this class")
        return {
            "path": str(out_path),
            "per_class_valid": {str(c): int(n) for c, n in enumerate(counts_per_class)},
            "warnings": warnings,
            "document_text": out_path.read_text(),
            "next_step": (f"protopart train --data {manifest_path} --mode lp+lr "
                          f"--valid-set {out_path} --out <RUNDIR>"),
        }

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def default_static_dir() -> Path | None:
    """The built single-page UI, when the frontend has been compiled."""
    here = Path(__file__).resolve()
    for base in (here.parents[2], here.parents[1]):
        candidate = base / "frontend" / "dist"
        if candidate.exists():
            return candidate
    return None
