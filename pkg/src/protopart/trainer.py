"""Three-stage training loop.

Epochs 0..warmup-1 train only the add-on layers and prototypes (trunk and
head frozen). Every later epoch jointly trains trunk, add-on and prototypes
with the head fixed. At each projection epoch the prototypes are snapped to
their nearest same-class latent patches (distinct source images per class)
and the head alone is then optimized for a fixed number of iterations
against cross-entropy plus the off-class L1 penalty.

Every phase logs a JSON line; identical seeds give byte-identical loss
columns. Parameter-group hashes are logged around each phase so stage
exclusivity is checkable from the log alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import kernels
from . import losses as L
from .data import (Manifest, load_images, load_mask, compute_channel_stats,
                   ValidPrototypeSet)
from .errors import ConfigurationError, DivergenceError
from .model import (ProtoPartNet, PrototypeSource, batched_topk,
                    batched_topk_backward, similarity_from_distance,
                    similarity_distance_factor, scale_up, scale_up_backward,
                    save_checkpoint)
from .projection import project_prototypes

STAGES = ("warmup", "joint", "last_layer")


@dataclass
class TrainConfig:
    epochs: int = 21
    warmup_epochs: int = 5
    projection_epochs: tuple = (5, 10, 15, 20)
    last_layer_iters: int = 10
    batch_size: int = 75
    lr_trunk: float = 2e-4
    lr_addon: float = 3e-3
    lr_addon_warmup: float = 2e-3
    lr_prototypes: float = 3e-3
    lr_last_layer: float = 1e-3
    lr_step_size: int = 5
    lr_decay: float = 0.5
    seed: int = 0
    mode: str = "lp"
    standardize: bool = True
    mask_polarity: str = "lesion-white"

    def validate(self) -> None:
        if self.epochs < 1 or self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < epochs")
        for e in self.projection_epochs:
            if not 0 <= e < self.epochs:
                raise ConfigurationError(f"projection epoch {e} outside [0, {self.epochs})")
            if e < self.warmup_epochs:
                raise ConfigurationError(f"projection epoch {e} overlaps the warm-up phase")
        if self.batch_size < 1 or self.last_layer_iters < 0:
            raise ConfigurationError("batch_size and last_layer_iters must be positive")
        if self.lr_step_size < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError("bad lr schedule (step size >= 1, decay in (0, 1])")
        if self.mode not in L.MODES:
            raise ConfigurationError(f"mode must be one of {L.MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projection_epochs"] = list(self.projection_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "projection_epochs" in d:
            d["projection_epochs"] = tuple(d["projection_epochs"])
        return cls(**d)


class Adam:
    """Adaptive-moment optimizer over a fixed set of parameter keys."""

    def __init__(self, lr_by_key: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr_by_key = dict(lr_by_key)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, lr in self.lr_by_key.items():
            g = grads.get(key)
            if g is None:
                continue
            m = self.m.setdefault(key, np.zeros_like(params[key]))
            v = self.v.setdefault(key, np.zeros_like(params[key]))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[key] -= scale * lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, tag: str) -> dict:
        out = {}
        for key in self.m:
            out[f"adam_{tag}_m_{key}"] = self.m[key]
            out[f"adam_{tag}_v_{key}"] = self.v[key]
        return out

    def load_state_arrays(self, tag: str, arrays: dict, t: int) -> None:
        self.t = t
        for name, arr in arrays.items():
            if name.startswith(f"adam_{tag}_m_"):
                self.m[name[len(f"adam_{tag}_m_"):]] = arr.copy()
            elif name.startswith(f"adam_{tag}_v_"):
                self.v[name[len(f"adam_{tag}_v_"):]] = arr.copy()


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def write(self, event: str, **fields) -> None:
        rec = {"event": event}
        rec.update(fields)
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class ValidPatchRef:
    img_pos: int   # index into the trainer's valid-image array
    row: int
    col: int
    class_id: int


class Trainer:
    def __init__(self, model: ProtoPartNet, train_manifest: Manifest, cfg: TrainConfig,
                 weights: L.LossWeights, run_dir, val_manifest: Manifest | None = None,
                 valid_set: ValidPrototypeSet | None = None):
        cfg.validate()
        weights.validate()
        self.model = model
        self.cfg = cfg
        self.weights = weights
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log = JsonlLogger(self.run_dir / "log.jsonl")

        size = model.config.image_size
        self.train_manifest = train_manifest
        self.labels = train_manifest.labels()
        self.image_ids = [r.image_id for r in train_manifest]
        self.images = load_images(train_manifest.records, size)
        self.val_manifest = val_manifest or train_manifest
        self.val_images = (self.images if val_manifest is None
                           else load_images(val_manifest.records, size))
        self.val_labels = self.val_manifest.labels()

        if cfg.standardize and tuple(model.config.channel_std) == (1.0, 1.0, 1.0) \
                and tuple(model.config.channel_mean) == (0.0, 0.0, 0.0):
            mean, std = compute_channel_stats(self.images)
            model.config.channel_mean = mean
            model.config.channel_std = std

        self.kappa = weights.resolve_kappa(model.config.top_k)
        self.class_weights = self._resolve_class_weights()
        self.masks = self._load_masks() if cfg.mode == "lp+lm" else None
        self.valid_refs, self.valid_images = self._resolve_valid_set(valid_set)

        seq = np.random.SeedSequence(cfg.seed)
        batch_seed, proto_seed = seq.spawn(2)
        self.batch_rng = np.random.default_rng(batch_seed)
        if model.config.proto_init == "patches":
            self._init_prototypes_from_patches(np.random.default_rng(proto_seed))
        self.step_count = 0
        self.weight_version = 0
        self.best_ba = -1.0
        self.sources = [None] * model.config.num_prototypes
        self._sources_fresh = False  # prototypes bitwise-match the source table
        self._stage = None
        self._optim: Adam | None = None
        self._valid_embed_cache = (None, None)  # (weight_version, latents)

    # -- setup helpers -----------------------------------------------------

    def _init_prototypes_from_patches(self, rng: np.random.Generator) -> None:
        """Seed each prototype with a random same-class training patch.

        Keeps prototypes on the data manifold from step 0, which matters for
        randomly initialized trunks (uniform init parks them nearest to
        whatever latent cluster happens to dominate, usually background).
        Cells are drawn center-weighted: dermoscopy acquisition centers the
        lesion, so central patches are likelier to carry class evidence.
        """
        z = self.embed_dataset(self.images)
        hz = self.model.config.latent_size
        protos = self.model.params["protos"]
        ctr = (hz - 1) / 2.0
        rr, cc = np.mgrid[0:hz, 0:hz]
        cell_w = np.exp(-((rr - ctr) ** 2 + (cc - ctr) ** 2) / (2 * (hz / 4.0) ** 2)).ravel()
        cell_w /= cell_w.sum()
        for j, cls in enumerate(self.model.proto_classes):
            candidates = np.flatnonzero(self.labels == cls)
            if candidates.size == 0:
                raise ConfigurationError(f"proto_init='patches': no training images of class {cls}")
            i = int(rng.choice(candidates))
            r, c = divmod(int(rng.choice(hz * hz, p=cell_w)), hz)
            protos[j] = z[i, r, c] + rng.normal(0.0, 0.01, protos.shape[1])

    def _resolve_class_weights(self):
        cw = self.weights.class_weights
        if cw is None:
            return None
        if cw == "inverse-frequency":
            return L.inverse_frequency_weights(self.labels, self.model.config.num_classes)
        return np.asarray(cw, dtype=float)

    def _load_masks(self) -> np.ndarray:
        size = self.model.config.image_size
        masks = []
        for rec in self.train_manifest:
            if rec.mask_path is None:
                raise ConfigurationError(
                    f"mode lp+lm needs a mask for every training image; {rec.image_id!r} has none")
            masks.append(load_mask(rec.mask_path, size, size, self.cfg.mask_polarity))
        return np.stack(masks).astype(float)

    def _resolve_valid_set(self, valid_set):
        if self.cfg.mode != "lp+lr":
            return [], None
        if valid_set is None or len(valid_set) == 0:
            raise ConfigurationError("mode lp+lr needs a non-empty valid prototype set")
        size = self.model.config.image_size
        tile = size // self.model.config.latent_size
        by_id = self.train_manifest.by_id()
        refs, images, pos_by_id = [], [], {}
        for entry in valid_set.entries:
            rec = by_id.get(entry.image)
            if rec is None:
                raise ConfigurationError(
                    f"valid-set image {entry.image!r} is not in the training manifest")
            if entry.image not in pos_by_id:
                pos_by_id[entry.image] = len(images)
                images.append(load_images([rec], size)[0])
            x, y, w, h = entry.bbox
            row = min(int((y + h / 2) // tile), self.model.config.latent_size - 1)
            col = min(int((x + w / 2) // tile), self.model.config.latent_size - 1)
            refs.append(ValidPatchRef(pos_by_id[entry.image], row, col, entry.class_id))
        return refs, np.stack(images)

    # -- per-batch objective -------------------------------------------------

    def _objective_grads(self, batch_idx: np.ndarray, stage: str):
        """LossReport plus parameter gradients for one batch in one stage."""
        model = self.model
        cfg = model.config
        protos = model.params["protos"]
        proto_classes = model.proto_classes
        imgs = self.images[batch_idx]
        labels = self.labels[batch_idx]
        n = len(batch_idx)
        train_trunk = stage == "joint"

        z, cache = model.embed(imgs, want_cache=True)
        dist = kernels.distance_maps(z, protos)
        sims = similarity_from_distance(dist, cfg.epsilon)
        simvec, topk_idx = batched_topk(sims, cfg.top_k)
        logits = model.logits_from_simvec(simvec)

        terms = {}
        ce, dlogits = L.cross_entropy_grads(logits, labels, self.class_weights)
        terms["cross_entropy"] = ce
        dsimvec = dlogits @ model.params["head_w"]
        hz = cfg.latent_size
        dsims = batched_topk_backward(dsimvec, topk_idx, hz, hz)
        ddist = np.zeros_like(dist)

        clu, clu_sel = L.cluster_from_dist(dist, labels, proto_classes, self.kappa)
        terms["cluster"] = clu
        ddist += self.weights.lambda1 * L._mink_dist_grad(dist.shape, clu_sel, self.kappa, 1.0)

        sep, sep_sel = L.separation_from_dist(dist, labels, proto_classes, self.kappa)
        if sep <= self.weights.separation_floor:  # clamped: constant, no gradient
            terms["separation"] = self.weights.separation_floor
        else:
            terms["separation"] = sep
            ddist += self.weights.lambda2 * L._mink_dist_grad(dist.shape, sep_sel, self.kappa, -1.0)

        if self.cfg.mode == "lp+lm":
            match = proto_classes[None, :] == labels[:, None]
            pair_i, pair_j = np.nonzero(match)
            pams = scale_up(sims[pair_i, pair_j], cfg.image_size, cfg.image_size)
            pmasks = self.masks[batch_idx][pair_i]
            prod = pmasks * pams
            norms = np.sqrt((prod * prod).sum(axis=(1, 2)))
            terms["mask"] = float(norms.sum() / n)
            safe = np.where(norms > 0.0, norms, 1.0)
            gpam = prod * (1.0 / (n * safe))[:, None, None]
            gs_pairs = scale_up_backward(gpam, hz, hz)
            np.add.at(dsims, (pair_i, pair_j), self.weights.lambda3 * gs_pairs)

        extra_grads = {}
        gp_remember = None
        if self.cfg.mode == "lp+lr":
            vz, vcache = self.model.embed(self.valid_images, want_cache=True)
            pos = np.array([r.img_pos for r in self.valid_refs])
            rows = np.array([r.row for r in self.valid_refs])
            cols = np.array([r.col for r in self.valid_refs])
            vcls = np.array([r.class_id for r in self.valid_refs])
            v = vz[pos, rows, cols]
            rem, gv, gp_remember = L.remembering_grads(v, vcls, protos, proto_classes, cfg.epsilon)
            terms["remembering"] = rem
            gvz = np.zeros_like(vz)
            np.add.at(gvz, (pos, rows, cols), self.weights.lambda4 * gv)
            extra_grads = self.model.embed_backward(vcache, gvz, train_trunk=train_trunk)

        ddist += dsims * similarity_distance_factor(dist, cfg.epsilon)
        gz, gp = kernels.distance_maps_backward(z, protos, dist, ddist)
        if gp_remember is not None:
            gp = gp + self.weights.lambda4 * gp_remember
        grads = self.model.embed_backward(cache, gz, train_trunk=train_trunk)
        for key, val in extra_grads.items():
            grads[key] = grads[key] + val
        grads["protos"] = gp

        report = L.build_report(terms, self.weights, self.cfg.mode)
        return report, grads

    # -- stages --------------------------------------------------------------

    def _stage_lrs(self, stage: str) -> dict:
        model = self.model
        if stage == "warmup":
            lrs = {k: self.cfg.lr_addon_warmup for k in model.group_keys("addon")}
            lrs["protos"] = self.cfg.lr_prototypes
            return lrs
        if stage == "joint":
            lrs = {k: self.cfg.lr_trunk for k in model.group_keys("trunk")}
            lrs.update({k: self.cfg.lr_addon for k in model.group_keys("addon")})
            lrs["protos"] = self.cfg.lr_prototypes
            return lrs
        if stage == "last_layer":
            return {k: self.cfg.lr_last_layer for k in model.group_keys("head")}
        raise KeyError(stage)

    def _enter_stage(self, stage: str) -> None:
        if stage != self._stage:
            self._stage = stage
            self._optim = Adam(self._stage_lrs(stage))
            self.log.write("optimizer_reset", stage=stage)

    def lr_scale(self, epoch: int) -> float:
        if epoch < self.cfg.warmup_epochs:
            return 1.0
        steps = (epoch - self.cfg.warmup_epochs) // self.cfg.lr_step_size
        return self.cfg.lr_decay ** steps

    def _log_phase_hashes(self, epoch: int, phase: str, before: dict) -> None:
        after = self.model.group_hashes()
        changed = sorted(g for g in before if before[g] != after[g])
        unchanged = sorted(g for g in before if before[g] == after[g])
        self.log.write("stage_hashes", epoch=epoch, phase=phase,
                       changed=changed, unchanged=unchanged)

    def _run_training_epoch(self, epoch: int, stage: str) -> None:
        self._enter_stage(stage)
        self.log.write("stage_start", epoch=epoch, stage=stage,
                       lr_scale=self.lr_scale(epoch))
        before = self.model.group_hashes()
        order = self.batch_rng.permutation(len(self.images))
        scale = self.lr_scale(epoch)
        for start in range(0, len(order), self.cfg.batch_size):
            batch_idx = order[start:start + self.cfg.batch_size]
            report, grads = self._objective_grads(batch_idx, stage)
            if not np.isfinite(report.total):
                self._abort_divergence(epoch, report)
            self._optim.step(self.model.params, grads, scale=scale)
            self.step_count += 1
            self.weight_version += 1
            self._sources_fresh = False  # prototypes moved
            self.log.write("step", step=self.step_count, epoch=epoch, stage=stage,
                           total=report.total, terms=report.terms)
        self._log_phase_hashes(epoch, stage, before)

    def run_warmup_epoch(self, epoch: int) -> None:
        self._run_training_epoch(epoch, "warmup")

    def run_joint_epoch(self, epoch: int) -> None:
        self._run_training_epoch(epoch, "joint")

    def embed_dataset(self, images: np.ndarray, chunk: int = 16) -> np.ndarray:
        outs = [self.model.embed(images[s:s + chunk]) for s in range(0, len(images), chunk)]
        return np.concatenate(outs, axis=0)

    def run_projection(self, epoch: int) -> None:
        before = self.model.group_hashes()
        latents = self.embed_dataset(self.images)
        new_protos, result = project_prototypes(
            self.model.params["protos"], self.model.proto_classes,
            latents, self.labels, self.image_ids)
        self.model.params["protos"] = new_protos
        self.weight_version += 1
        tile = self.model.config.image_size // self.model.config.latent_size
        self.sources = [
            PrototypeSource(a.image, a.row, a.col,
                            (a.col * tile, a.row * tile, tile, tile), a.distance)
            for a in result.assignments
        ]
        self._sources_fresh = True
        self.log.write("projection", epoch=epoch, **result.to_dict())
        self._log_phase_hashes(epoch, "projection", before)

    def run_last_layer(self, epoch: int) -> None:
        self._enter_stage("last_layer")
        before = self.model.group_hashes()
        simvec = self._dataset_simvec(self.images)
        proto_classes = self.model.proto_classes
        for it in range(self.cfg.last_layer_iters):
            logits = self.model.logits_from_simvec(simvec)
            ce, dlogits = L.cross_entropy_grads(logits, self.labels, self.class_weights)
            l1, gl1 = L.l1_offclass_grads(self.model.params["head_w"], proto_classes)
            report = L.build_report({"cross_entropy": ce, "l1_offclass": l1},
                                    self.weights, self.cfg.mode, last_layer=True)
            grads = {"head_w": dlogits.T @ simvec + self.weights.lambda5 * gl1}
            if self.model.config.head_bias:
                grads["head_b"] = dlogits.sum(axis=0)
            self._optim.step(self.model.params, grads)
            self.weight_version += 1
            self.log.write("last_layer_iter", epoch=epoch, iter=it,
                           total=report.total, terms=report.terms)
        self._log_phase_hashes(epoch, "last_layer", before)

    def _dataset_simvec(self, images: np.ndarray) -> np.ndarray:
        latents = self.embed_dataset(images)
        dist = kernels.distance_maps(latents, self.model.params["protos"])
        sims = similarity_from_distance(dist, self.model.config.epsilon)
        vec, _ = batched_topk(sims, self.model.config.top_k)
        return vec

    # -- evaluation and bookkeeping -------------------------------------------

    def validation_ba(self) -> float:
        simvec = self._dataset_simvec(self.val_images)
        pred = self.model.logits_from_simvec(simvec).argmax(axis=1)
        recalls = []
        for cls in range(self.model.config.num_classes):
            sel = self.val_labels == cls
            if not sel.any():
                continue
            recalls.append(float((pred[sel] == cls).mean()))
        return 100.0 * float(np.mean(recalls))

    def valid_mean_distance(self) -> float:
        """Mean L2 distance between prototypes and same-class valid patches."""
        version, latents = self._valid_embed_cache
        if version != self.weight_version:
            latents = self.embed_dataset(self.valid_images)
            self._valid_embed_cache = (self.weight_version, latents)
        protos = self.model.params["protos"]
        proto_classes = self.model.proto_classes
        dists = []
        for ref in self.valid_refs:
            v = latents[ref.img_pos, ref.row, ref.col]
            for j in np.flatnonzero(proto_classes == ref.class_id):
                dists.append(float(np.sqrt(((protos[j] - v) ** 2).sum())))
        return float(np.mean(dists))

    def _abort_divergence(self, epoch: int, report: L.LossReport):
        path = self.run_dir / "last-good.ppt"
        self.log.write("divergence", epoch=epoch, terms=report.terms)
        raise DivergenceError(
            f"non-finite objective at epoch {epoch}; last good checkpoint: {path}",
            checkpoint_path=path)

    def _save(self, name: str, epoch: int) -> Path:
        path = self.run_dir / name
        meta = {"epoch": epoch, "mode": self.cfg.mode, "val_ba": self.best_ba,
                "loss_weights": asdict(self.weights), "train_config": self.cfg.to_dict(),
                "mask_loss_normalized": True,
                "prototypes_match_sources": self._sources_fresh,
                "train_manifest": str(self.train_manifest.source) if self.train_manifest.source else None}
        save_checkpoint(path, self.model, self.sources, meta)
        return path

    # -- the full schedule -----------------------------------------------------

    def run_epoch(self, epoch: int) -> None:
        stage = "warmup" if epoch < self.cfg.warmup_epochs else "joint"
        t0 = time.time()
        if stage == "warmup":
            self.run_warmup_epoch(epoch)
        else:
            self.run_joint_epoch(epoch)
        if epoch in self.cfg.projection_epochs:
            self.run_projection(epoch)
            self.run_last_layer(epoch)
            self._save(f"ckpt-epoch{epoch}.ppt", epoch)
        ba = self.validation_ba()
        fields = {"epoch": epoch, "stage": stage, "val_ba": ba,
                  "seconds": round(time.time() - t0, 3)}
        if self.cfg.mode == "lp+lr":
            fields["valid_mean_dist"] = self.valid_mean_distance()
        self.log.write("epoch", **fields)
        if ba > self.best_ba:
            self.best_ba = ba
            self._save("best.ppt", epoch)
            self.log.write("checkpoint", epoch=epoch, kind="best", val_ba=ba)
        self._save("last-good.ppt", epoch)

    def train(self, start_epoch: int = 0) -> dict:
        if start_epoch == 0:
            self.log.write("run_start", mode=self.cfg.mode, seed=self.cfg.seed,
                           model=self.model.config.to_dict(),
                           train=self.cfg.to_dict(), loss=asdict(self.weights),
                           kappa=self.kappa, backend=kernels.active_backend())
            if self.cfg.mode == "lp+lr":
                self.log.write("valid_metric", epoch=0, when="start",
                               valid_mean_dist=self.valid_mean_distance())
            self._save("last-good.ppt", -1)
        for epoch in range(start_epoch, self.cfg.epochs):
            self.run_epoch(epoch)
        final = self._save("final.ppt", self.cfg.epochs - 1)
        self.log.write("run_end", best_ba=self.best_ba, final=str(final))
        self.log.close()
        return {"best_ba": self.best_ba, "run_dir": str(self.run_dir),
                "final": str(final), "best": str(self.run_dir / "best.ppt")}

    # -- checkpoint/resume of the full training state ---------------------------

    def save_train_state(self, path, next_epoch: int) -> None:
        arrays = {f"param_{k}": v for k, v in self.model.params.items()}
        if self._optim is not None:
            arrays.update(self._optim.state_arrays(self._stage))
        meta = {
            "next_epoch": next_epoch,
            "stage": self._stage,
            "adam_t": self._optim.t if self._optim else 0,
            "step_count": self.step_count,
            "weight_version": self.weight_version,
            "best_ba": self.best_ba,
            "rng_state": self.batch_rng.bit_generator.state,
            "sources": [s.to_dict() if s else None for s in self.sources],
            "model_config": self.model.config.to_dict(),
        }
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    def load_train_state(self, path) -> int:
        with np.load(path) as npz:
            meta = json.loads(bytes(npz["meta"]).decode())
            arrays = {k: npz[k] for k in npz.files if k != "meta"}
        for key in self.model.params:
            self.model.params[key] = arrays[f"param_{key}"].copy()
        self._stage = meta["stage"]
        if self._stage is not None:
            self._optim = Adam(self._stage_lrs(self._stage))
            self._optim.load_state_arrays(self._stage, arrays, meta["adam_t"])
        self.step_count = meta["step_count"]
        self.weight_version = meta["weight_version"]
        self.best_ba = meta["best_ba"]
        self.batch_rng.bit_generator.state = meta["rng_state"]
        self.sources = [PrototypeSource.from_dict(s) for s in meta["sources"]]
        return meta["next_epoch"]


def train(model: ProtoPartNet, train_manifest: Manifest, cfg: TrainConfig,
          weights: L.LossWeights, run_dir, val_manifest=None, valid_set=None) -> dict:
    """Train per the full schedule and return run summary paths."""
    trainer = Trainer(model, train_manifest, cfg, weights, run_dir,
                      val_manifest=val_manifest, valid_set=valid_set)
    return trainer.train()
