"""Core prototypical-part network.

A trunk CNN plus two 1x1 add-on layers embed an image into a (hz, wz, d)
latent map. Each prototype is a d-vector compared against every latent patch
via s = log((dist + 1) / (dist + eps)); top-k average pooling reduces each
activation map to one similarity score, and a bias-free linear head turns
the m scores into class logits.

All forward passes have hand-written backward companions; nothing here
depends on an autodiff framework.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError

TRUNK_REDUCTION = 32  # product of the four block strides (4, 2, 2, 2)

_TRUNK_KERNELS = (7, 3, 3, 3)
_TRUNK_STRIDES = (4, 2, 2, 2)
_TRUNK_PADS = (3, 1, 1, 1)


@dataclass
class ModelConfig:
    num_classes: int = 2
    protos_per_class: int = 9
    depth: int = 64
    top_k: int = 9
    epsilon: float = 1e-4
    backbone_id: str = "desk-cnn"
    image_size: int = 224
    trunk_channels: tuple = (16, 32, 64, 64)
    channel_mean: tuple = (0.0, 0.0, 0.0)
    channel_std: tuple = (1.0, 1.0, 1.0)
    head_bias: bool = False
    proto_init: str = "uniform"  # "uniform" | "patches" (sampled training patches)

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.protos_per_class

    @property
    def latent_size(self) -> int:
        return self.image_size // TRUNK_REDUCTION

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.protos_per_class < 1:
            raise ConfigurationError("protos_per_class must be >= 1")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if self.image_size % TRUNK_REDUCTION:
            raise ConfigurationError(
                f"image_size must be divisible by {TRUNK_REDUCTION}, got {self.image_size}"
            )
        hz = self.latent_size
        if not 1 <= self.top_k <= hz * hz:
            raise ConfigurationError(f"top_k must lie in [1, {hz * hz}], got {self.top_k}")
        if len(self.trunk_channels) != 4:
            raise ConfigurationError("trunk_channels must list the 4 block widths")
        if self.backbone_id not in BACKBONES:
            raise ConfigurationError(f"unknown backbone_id {self.backbone_id!r}")
        if self.proto_init not in ("uniform", "patches"):
            raise ConfigurationError("proto_init must be 'uniform' or 'patches'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        d["channel_mean"] = list(self.channel_mean)
        d["channel_std"] = list(self.channel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("trunk_channels", "channel_mean", "channel_std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PrototypeSource:
    """Where a projected prototype came from in the training set."""

    image: str
    row: int
    col: int
    bbox: tuple  # (x, y, w, h) in input pixels
    distance: float = 0.0

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "row": int(self.row),
            "col": int(self.col),
            "bbox": [int(v) for v in self.bbox],
            "distance": float(self.distance),
        }

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return None
        return cls(d["image"], d["row"], d["col"], tuple(d["bbox"]), d.get("distance", 0.0))


# ---------------------------------------------------------------------------
# desk backbone
# ---------------------------------------------------------------------------


class DeskBackbone:
    """Four strided conv+ReLU blocks: image_size -> image_size/32.

    Small enough to train on a CPU; the adapter surface (param_keys /
    init_params / forward / backward) is what a real pretrained trunk would
    have to provide.
    """

    def __init__(self, config: ModelConfig):
        self.channels = tuple(config.trunk_channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def param_keys(self):
        keys = []
        for i in range(4):
            keys += [f"t{i + 1}_w", f"t{i + 1}_b"]
        return keys

    def init_params(self, rng: np.random.Generator) -> dict:
        params = {}
        cin = 3
        for i, cout in enumerate(self.channels):
            k = _TRUNK_KERNELS[i]
            std = np.sqrt(2.0 / (k * k * cin))
            params[f"t{i + 1}_w"] = rng.normal(0.0, std, (k, k, cin, cout))
            params[f"t{i + 1}_b"] = np.zeros(cout)
            cin = cout
        return params

    def forward(self, params: dict, x: np.ndarray, want_cache: bool = False):
        cache = {"inputs": [], "pre": []} if want_cache else None
        out = x
        for i in range(4):
            if want_cache:
                cache["inputs"].append(out)
            pre = kernels.conv2d(
                out, params[f"t{i + 1}_w"], params[f"t{i + 1}_b"],
                _TRUNK_STRIDES[i], _TRUNK_PADS[i],
            )
            if not np.all(np.isfinite(pre)):
                raise NumericError(f"non-finite activations in trunk block {i + 1}")
            if want_cache:
                cache["pre"].append(pre)
            out = np.maximum(pre, 0.0)
        return (out, cache) if want_cache else out

    def backward(self, params: dict, cache: dict, gy: np.ndarray) -> dict:
        grads = {}
        for i in reversed(range(4)):
            gpre = gy * (cache["pre"][i] > 0.0)
            gw, gb = kernels.conv2d_weight_grad(
                cache["inputs"][i], gpre, params[f"t{i + 1}_w"].shape,
                _TRUNK_STRIDES[i], _TRUNK_PADS[i],
            )
            grads[f"t{i + 1}_w"] = gw
            grads[f"t{i + 1}_b"] = gb
            if i > 0:
                gy = kernels.conv2d_input_grad(
                    gpre, params[f"t{i + 1}_w"], cache["inputs"][i].shape,
                    _TRUNK_STRIDES[i], _TRUNK_PADS[i],
                )
        return grads


BACKBONES = {"desk-cnn": DeskBackbone}


def register_backbone(name: str, factory) -> None:
    BACKBONES[name] = factory


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------


def similarity_from_distance(dist: np.ndarray, epsilon: float) -> np.ndarray:
    return np.log((dist + 1.0) / (dist + epsilon))


def similarity_distance_factor(dist: np.ndarray, epsilon: float) -> np.ndarray:
    """d(similarity)/d(distance); strictly negative for eps < 1."""
    return 1.0 / (dist + 1.0) - 1.0 / (dist + epsilon)


def similarity_map(z: np.ndarray, proto_vec: np.ndarray, epsilon: float,
                   proto_id=None) -> np.ndarray:
    """Similarity of one prototype against every patch of one latent map."""
    z = np.asarray(z, dtype=float)
    proto_vec = np.asarray(proto_vec, dtype=float)
    if z.ndim != 3 or proto_vec.ndim != 1 or z.shape[2] != proto_vec.shape[0]:
        who = f"prototype {proto_id}" if proto_id is not None else "prototype"
        raise ConfigurationError(
            f"dimension mismatch for {who}: latent depth {z.shape[-1] if z.ndim == 3 else z.shape}"
            f" vs vector length {proto_vec.shape}"
        )
    dist = kernels.distance_maps(z[None], proto_vec[None])[0, 0]
    return similarity_from_distance(dist, epsilon)


def topk_pool(a: np.ndarray, k: int) -> float:
    """Mean of the k largest entries of an activation map."""
    a = np.asarray(a, dtype=float)
    if not 1 <= k <= a.size:
        raise ConfigurationError(f"top_k must lie in [1, {a.size}], got {k}")
    flat = a.ravel()
    idx = np.argpartition(-flat, k - 1)[:k]
    return float(flat[idx].mean())


def batched_topk(sims: np.ndarray, k: int):
    """(n, m, hz, wz) -> similarity vector (n, m) and the selected flat indices."""
    n, m, hz, wz = sims.shape
    flat = sims.reshape(n, m, hz * wz)
    if not 1 <= k <= hz * wz:
        raise ConfigurationError(f"top_k must lie in [1, {hz * wz}], got {k}")
    idx = np.argpartition(-flat, k - 1, axis=2)[:, :, :k]
    vals = np.take_along_axis(flat, idx, axis=2)
    return vals.mean(axis=2), idx


def batched_topk_backward(gvec: np.ndarray, idx: np.ndarray, hz: int, wz: int) -> np.ndarray:
    """Scatter d(simvec) onto the selected top-k map entries (1/k each)."""
    n, m, k = idx.shape
    gflat = np.zeros((n, m, hz * wz))
    np.put_along_axis(gflat, idx, (gvec / k)[:, :, None], axis=2)
    return gflat.reshape(n, m, hz, wz)


# ---------------------------------------------------------------------------
# adaptive upscaling (latent map -> input-resolution PAM)
# ---------------------------------------------------------------------------

_BIN_CACHE: dict = {}


def _bin_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix (n_out, n_in); row r covers bins [floor, ceil)."""
    key = (n_in, n_out)
    if key not in _BIN_CACHE:
        mat = np.zeros((n_out, n_in))
        for r in range(n_out):
            start = (r * n_in) // n_out
            end = -((-(r + 1) * n_in) // n_out)
            mat[r, start:end] = 1.0 / (end - start)
        _BIN_CACHE[key] = mat
    return _BIN_CACHE[key]


def scale_up(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Adaptive-average upscaling of activation maps (last two axes)."""
    a = np.asarray(a, dtype=float)
    hz, wz = a.shape[-2], a.shape[-1]
    if out_h < hz or out_w < wz:
        raise ConfigurationError("scale_up target must be at least the latent size")
    rows = _bin_matrix(hz, out_h)
    cols = _bin_matrix(wz, out_w)
    return rows @ a @ cols.T


def scale_up_backward(g: np.ndarray, hz: int, wz: int) -> np.ndarray:
    out_h, out_w = g.shape[-2], g.shape[-1]
    rows = _bin_matrix(hz, out_h)
    cols = _bin_matrix(wz, out_w)
    return rows.T @ g @ cols


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    z: np.ndarray          # (n, hz, wz, d)
    dist: np.ndarray       # (n, m, hz, wz)
    sims: np.ndarray       # (n, m, hz, wz)
    simvec: np.ndarray     # (n, m)
    topk_idx: np.ndarray   # (n, m, k)
    logits: np.ndarray     # (n, K)
    embed_cache: dict | None = None


PARAM_GROUPS = ("trunk", "addon", "prototypes", "head")


class ProtoPartNet:
    def __init__(self, config: ModelConfig, params: dict | None = None,
                 rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self.backbone = BACKBONES[config.backbone_id](config)
        if params is None:
            if rng is None:
                rng = np.random.default_rng(0)
            params = self._init_params(rng)
        self.params = params

    def _init_params(self, rng: np.random.Generator) -> dict:
        cfg = self.config
        params = self.backbone.init_params(rng)
        c_trunk = self.backbone.out_channels
        params["a1_w"] = rng.normal(0.0, np.sqrt(2.0 / c_trunk), (c_trunk, cfg.depth))
        params["a1_b"] = np.zeros(cfg.depth)
        params["a2_w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.depth), (cfg.depth, cfg.depth))
        params["a2_b"] = np.zeros(cfg.depth)
        params["protos"] = rng.uniform(-1.0, 1.0, (cfg.num_prototypes, cfg.depth))
        params["head_w"] = self.default_head()
        if cfg.head_bias:
            params["head_b"] = np.zeros(cfg.num_classes)
        return params

    def default_head(self) -> np.ndarray:
        """+1 for a class's own prototypes, -0.5 for the rest."""
        cfg = self.config
        w = np.full((cfg.num_classes, cfg.num_prototypes), -0.5)
        for j, cls in enumerate(self.proto_classes):
            w[cls, j] = 1.0
        return w

    @property
    def proto_classes(self) -> np.ndarray:
        cfg = self.config
        return np.repeat(np.arange(cfg.num_classes), cfg.protos_per_class)

    def group_keys(self, group: str):
        if group == "trunk":
            return self.backbone.param_keys()
        if group == "addon":
            return ["a1_w", "a1_b", "a2_w", "a2_b"]
        if group == "prototypes":
            return ["protos"]
        if group == "head":
            keys = ["head_w"]
            if self.config.head_bias:
                keys.append("head_b")
            return keys
        raise KeyError(group)

    def group_hashes(self) -> dict:
        out = {}
        for group in PARAM_GROUPS:
            h = hashlib.sha256()
            for key in self.group_keys(group):
                h.update(np.ascontiguousarray(self.params[key]).tobytes())
            out[group] = h.hexdigest()
        return out

    # -- embedding ---------------------------------------------------------

    def standardize(self, images: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.config.channel_mean)
        std = np.asarray(self.config.channel_std)
        return (images - mean) / std

    def embed(self, images: np.ndarray, want_cache: bool = False):
        """(n, H, W, 3) in [0,1] -> latent maps (n, hz, wz, depth)."""
        images = np.asarray(images, dtype=float)
        if images.ndim != 4 or images.shape[3] != 3:
            raise ConfigurationError(f"expected (n, H, W, 3) images, got {images.shape}")
        if images.shape[1] != self.config.image_size or images.shape[2] != self.config.image_size:
            raise ConfigurationError(
                f"expected {self.config.image_size}px inputs, got {images.shape[1]}x{images.shape[2]}"
            )
        x = self.standardize(images)
        p = self.params
        if want_cache:
            t_out, trunk_cache = self.backbone.forward(p, x, want_cache=True)
        else:
            t_out = self.backbone.forward(p, x)
            trunk_cache = None
        h1 = t_out @ p["a1_w"] + p["a1_b"]
        a1 = np.maximum(h1, 0.0)
        h2 = a1 @ p["a2_w"] + p["a2_b"]
        z = np.tanh(h2)
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite activations in add-on layers")
        if want_cache:
            return z, {"trunk": trunk_cache, "t_out": t_out, "h1": h1, "a1": a1, "z": z}
        return z

    def embed_backward(self, cache: dict, gz: np.ndarray, train_trunk: bool = True) -> dict:
        """Gradients of the embedding parameters given d(loss)/dz."""
        p = self.params
        gh2 = gz * (1.0 - cache["z"] ** 2)
        a1 = cache["a1"]
        flat_a1 = a1.reshape(-1, a1.shape[-1])
        flat_gh2 = gh2.reshape(-1, gh2.shape[-1])
        grads = {
            "a2_w": flat_a1.T @ flat_gh2,
            "a2_b": flat_gh2.sum(axis=0),
        }
        ga1 = gh2 @ p["a2_w"].T
        gh1 = ga1 * (cache["h1"] > 0.0)
        t_out = cache["t_out"]
        flat_t = t_out.reshape(-1, t_out.shape[-1])
        flat_gh1 = gh1.reshape(-1, gh1.shape[-1])
        grads["a1_w"] = flat_t.T @ flat_gh1
        grads["a1_b"] = flat_gh1.sum(axis=0)
        if train_trunk:
            gt = gh1 @ p["a1_w"].T
            grads.update(self.backbone.backward(p, cache["trunk"], gt))
        return grads

    # -- full forward --------------------------------------------------------

    def forward(self, images: np.ndarray, want_cache: bool = False) -> ForwardResult:
        if want_cache:
            z, cache = self.embed(images, want_cache=True)
        else:
            z, cache = self.embed(images), None
        return self.forward_from_latent(z, embed_cache=cache)

    def forward_from_latent(self, z: np.ndarray, embed_cache=None) -> ForwardResult:
        cfg = self.config
        dist = kernels.distance_maps(z, self.params["protos"])
        sims = similarity_from_distance(dist, cfg.epsilon)
        simvec, idx = batched_topk(sims, cfg.top_k)
        logits = self.logits_from_simvec(simvec)
        return ForwardResult(z, dist, sims, simvec, idx, logits, embed_cache)

    def logits_from_simvec(self, simvec: np.ndarray) -> np.ndarray:
        logits = simvec @ self.params["head_w"].T
        if self.config.head_bias:
            logits = logits + self.params["head_b"]
        return logits

    def pam(self, sims: np.ndarray) -> np.ndarray:
        """Upscale latent activation maps to input resolution."""
        s = self.config.image_size
        return scale_up(sims, s, s)

    def copy(self) -> "ProtoPartNet":
        return ProtoPartNet(self.config, {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# checkpoint archive ("protopart-v1")
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "protopart-v1"
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, model: ProtoPartNet, sources=None, meta: dict | None = None) -> None:
    """Write a protopart-v1 archive: config, weights, prototype sources, w_h."""
    sources = sources if sources is not None else [None] * model.config.num_prototypes
    payload = io.BytesIO()
    np.savez(payload, **model.params)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "format.json", json.dumps({"format": CHECKPOINT_FORMAT}).encode())
        _write_entry(zf, "config.json", json.dumps(model.config.to_dict(), indent=1).encode())
        _write_entry(zf, "weights.npz", payload.getvalue())
        _write_entry(zf, "sources.json", json.dumps(
            [s.to_dict() if s is not None else None for s in sources]).encode())
        _write_entry(zf, "meta.json", json.dumps(meta or {}, indent=1).encode())


def load_checkpoint(path):
    """Read a protopart-v1 archive -> (model, sources, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            fmt = json.loads(zf.read("format.json"))
            if fmt.get("format") != CHECKPOINT_FORMAT:
                raise ConfigurationError(
                    f"{path}: unsupported checkpoint format {fmt.get('format')!r}"
                )
            config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
            with np.load(io.BytesIO(zf.read("weights.npz"))) as npz:
                params = {k: npz[k] for k in npz.files}
            sources = [PrototypeSource.from_dict(s) for s in json.loads(zf.read("sources.json"))]
            meta = json.loads(zf.read("meta.json"))
    except (KeyError, zipfile.BadZipFile) as exc:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint ({exc})") from exc
    return ProtoPartNet(config, params), sources, meta


def checkpoint_digest(path) -> str:
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]
