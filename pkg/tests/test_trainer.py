"""Training schedule, stage freezing, full-chain gradients, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from protopart import data as D
from protopart import losses as L
from protopart.errors import ConfigurationError, DivergenceError
from protopart.model import ModelConfig, ProtoPartNet
from protopart.trainer import TrainConfig, Trainer, train


def tiny_model_config(**kw):
    base = dict(image_size=64, trunk_channels=(3, 4, 5, 5), depth=4,
                protos_per_class=2, top_k=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def synth64(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    D.generate_synthetic(root, n_per_class=10, seed=4, image_size=64, confound_fraction=0.5)
    return root


def make_trainer(synth_root, run_dir, mode="lp", weights=None, seed=0, valid_set=None,
                 model_kw=None, **cfg_kw):
    cfg_base = dict(epochs=6, warmup_epochs=2, projection_epochs=(3, 5), batch_size=7,
                    seed=seed, mode=mode)
    cfg_base.update(cfg_kw)
    cfg = TrainConfig(**cfg_base)
    model = ProtoPartNet(tiny_model_config(**(model_kw or {})), rng=np.random.default_rng(seed))
    manifest = D.load_manifest(synth_root / "manifest_train.csv")
    return Trainer(model, manifest, cfg, weights or L.LossWeights(), run_dir,
                   valid_set=valid_set)


def read_log(run_dir):
    return [json.loads(line) for line in open(Path(run_dir) / "log.jsonl")]


def make_valid_set(manifest):
    entries = []
    for rec in list(manifest)[:6]:
        bbox = (0, 0, 32, 32) if rec.label == 0 else (32, 32, 32, 32)
        entries.append(D.ValidEntry(rec.label, rec.image_id, bbox))
    return D.ValidPrototypeSet(entries)


# ---------------------------------------------------------------------------
# configuration contracts
# ---------------------------------------------------------------------------


def test_config_rejects_projection_in_warmup():
    with pytest.raises(ConfigurationError):
        TrainConfig(projection_epochs=(2,), warmup_epochs=5, epochs=21).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(projection_epochs=(25,), epochs=21).validate()


def test_paper_defaults():
    cfg = TrainConfig()
    assert cfg.epochs == 21 and cfg.warmup_epochs == 5
    assert tuple(cfg.projection_epochs) == (5, 10, 15, 20)
    assert cfg.last_layer_iters == 10 and cfg.batch_size == 75
    assert (cfg.lr_trunk, cfg.lr_addon, cfg.lr_addon_warmup,
            cfg.lr_prototypes, cfg.lr_last_layer) == (2e-4, 3e-3, 2e-3, 3e-3, 1e-3)
    assert cfg.lr_step_size == 5
    w = L.LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5) == \
        (0.8, 0.08, 0.001, 0.02, 1e-4)


def test_missing_masks_error_names_image(synth64, tmp_path):
    manifest = D.load_manifest(synth64 / "manifest_train.csv")
    manifest.records[2].mask_path = None
    model = ProtoPartNet(tiny_model_config(), rng=np.random.default_rng(0))
    cfg = TrainConfig(epochs=6, warmup_epochs=2, projection_epochs=(3,), mode="lp+lm")
    with pytest.raises(ConfigurationError, match=manifest.records[2].image_id):
        Trainer(model, manifest, cfg, L.LossWeights(), tmp_path / "r")


def test_empty_valid_set_rejected(synth64, tmp_path):
    with pytest.raises(ConfigurationError, match="valid"):
        make_trainer(synth64, tmp_path / "r", mode="lp+lr", valid_set=D.ValidPrototypeSet([]))


# ---------------------------------------------------------------------------
# full-chain gradient checks (objective -> all trainable parameters)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["lp", "lp+lm", "lp+lr"])
def test_objective_gradients_match_fd(synth64, tmp_path, mode, rng):
    manifest = D.load_manifest(synth64 / "manifest_train.csv")
    valid_set = make_valid_set(manifest) if mode == "lp+lr" else None
    tr = make_trainer(synth64, tmp_path / f"g_{mode}", mode=mode, valid_set=valid_set)
    batch = np.arange(4)
    _, grads = tr._objective_grads(batch, "joint")

    def total(params_key=None, idx=None, delta=0.0):
        if params_key is not None:
            tr.model.params[params_key].flat[idx] += delta
        try:
            report, _ = tr._objective_grads(batch, "joint")
            return report.total
        finally:
            if params_key is not None:
                tr.model.params[params_key].flat[idx] -= delta

    h = 1e-5
    for key in ("protos", "a1_w", "a2_w", "t4_w", "t1_w"):
        size = tr.model.params[key].size
        for idx in rng.choice(size, 5, replace=False):
            fd = (total(key, idx, h) - total(key, idx, -h)) / (2 * h)
            got = grads[key].flat[idx]
            assert got == pytest.approx(fd, rel=1e-4, abs=1e-7), (mode, key)


# ---------------------------------------------------------------------------
# schedule and freezing
# ---------------------------------------------------------------------------


def test_schedule_and_freeze_contracts(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "sched")

    trunk_before = {k: tr.model.params[k].tobytes() for k in tr.model.group_keys("trunk")}
    addon_before = tr.model.params["a1_w"].tobytes()
    tr.run_epoch(0)  # warm-up
    assert all(tr.model.params[k].tobytes() == v for k, v in trunk_before.items())
    assert tr.model.params["a1_w"].tobytes() != addon_before

    head_before = tr.model.params["head_w"].tobytes()
    tr.run_epoch(1)
    tr.run_epoch(2)  # joint epoch: head stays fixed
    assert tr.model.params["head_w"].tobytes() == head_before

    tr.run_epoch(3)  # projection epoch: head moves in last-layer, prototypes snap
    log = read_log(tr.run_dir)
    proj = [e for e in log if e["event"] == "projection"]
    assert [e["epoch"] for e in proj] == [3]
    ll = [e for e in log if e["event"] == "last_layer_iter" and e["epoch"] == 3]
    assert len(ll) == tr.cfg.last_layer_iters
    phases = [e for e in log if e["event"] == "stage_hashes"]
    by_phase = {(e["epoch"], e["phase"]): e for e in phases}
    assert by_phase[(0, "warmup")]["changed"] == ["addon", "prototypes"]
    assert by_phase[(2, "joint")]["changed"] == ["addon", "prototypes", "trunk"]
    assert by_phase[(3, "projection")]["changed"] == ["prototypes"]
    assert by_phase[(3, "last_layer")]["changed"] == ["head"]


def test_prototypes_bitwise_frozen_during_last_layer(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "llfreeze")
    for epoch in range(4):
        tr.run_epoch(epoch)
    protos = tr.model.params["protos"].tobytes()
    tr.run_last_layer(3)
    assert tr.model.params["protos"].tobytes() == protos


def test_lr_scale_step_decay(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "lr", epochs=21, warmup_epochs=5,
                      projection_epochs=(5, 10, 15, 20), lr_step_size=5, lr_decay=0.5)
    assert tr.lr_scale(4) == 1.0
    assert tr.lr_scale(5) == 1.0
    assert tr.lr_scale(9) == 1.0
    assert tr.lr_scale(10) == 0.5
    assert tr.lr_scale(15) == 0.25
    assert tr.lr_scale(20) == 0.125


def test_projection_events_at_configured_epochs(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "proj")
    out = tr.train()
    log = read_log(tr.run_dir)
    proj_epochs = [e["epoch"] for e in log if e["event"] == "projection"]
    assert proj_epochs == [3, 5]
    # every projection followed by exactly last_layer_iters iterations
    for pe in proj_epochs:
        iters = [e for e in log if e["event"] == "last_layer_iter" and e["epoch"] == pe]
        assert [e["iter"] for e in iters] == list(range(10))
    assert (Path(out["run_dir"]) / "ckpt-epoch3.ppt").exists()
    assert (Path(out["run_dir"]) / "ckpt-epoch5.ppt").exists()
    assert (Path(out["run_dir"]) / "best.ppt").exists()


def test_last_layer_huge_l1_shrinks_offclass_monotonically(synth64, tmp_path):
    weights = L.LossWeights(lambda5=1e6)
    tr = make_trainer(synth64, tmp_path / "l1big", weights=weights)
    tr.run_epoch(0)
    mags = []
    off = L.offclass_mask(2, tr.model.proto_classes).astype(bool)
    protos_classes = tr.model.proto_classes
    simvec = tr._dataset_simvec(tr.images)

    tr._enter_stage("last_layer")
    for _ in range(10):
        mags.append(np.abs(tr.model.params["head_w"][off]).mean())
        logits = tr.model.logits_from_simvec(simvec)
        ce, dlogits = L.cross_entropy_grads(logits, tr.labels)
        _, gl1 = L.l1_offclass_grads(tr.model.params["head_w"], protos_classes)
        tr._optim.step(tr.model.params, {"head_w": dlogits.T @ simvec + weights.lambda5 * gl1})
    mags.append(np.abs(tr.model.params["head_w"][off]).mean())
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_last_layer_reduces_offclass_l1(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "l1small")
    for epoch in range(4):
        tr.run_epoch(epoch)
    log = read_log(tr.run_dir)
    iters = [e for e in log if e["event"] == "last_layer_iter" and e["epoch"] == 3]
    assert iters[-1]["terms"]["l1_offclass"] < iters[0]["terms"]["l1_offclass"]


def test_cluster_term_decreases_on_separable_data(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "clu", epochs=10, warmup_epochs=2,
                      projection_epochs=(9,), seed=3)
    tr.train()
    steps = [e for e in read_log(tr.run_dir) if e["event"] == "step"]
    first = np.mean([e["terms"]["cluster"] for e in steps[:3]])
    last = np.mean([e["terms"]["cluster"] for e in steps[-3:]])
    assert last < first


# ---------------------------------------------------------------------------
# reproducibility, resume, divergence
# ---------------------------------------------------------------------------


def loss_columns(run_dir):
    cols = []
    for e in read_log(run_dir):
        if e["event"] in ("step", "last_layer_iter"):
            cols.append((e["event"], e.get("step"), e.get("iter"), e["total"],
                         tuple(sorted(e["terms"].items()))))
    return cols


def test_same_seed_identical_loss_columns(synth64, tmp_path):
    a = make_trainer(synth64, tmp_path / "rep_a", seed=5)
    a.train()
    b = make_trainer(synth64, tmp_path / "rep_b", seed=5)
    b.train()
    assert loss_columns(tmp_path / "rep_a") == loss_columns(tmp_path / "rep_b")


def test_resume_reproduces_losses(synth64, tmp_path):
    full = make_trainer(synth64, tmp_path / "res_full", seed=2)
    for epoch in range(4):
        full.run_epoch(epoch)

    part = make_trainer(synth64, tmp_path / "res_part", seed=2)
    for epoch in range(2):
        part.run_epoch(epoch)
    state = tmp_path / "state.npz"
    part.save_train_state(state, next_epoch=2)

    resumed = make_trainer(synth64, tmp_path / "res_resumed", seed=2)
    start = resumed.load_train_state(state)
    assert start == 2
    for epoch in range(start, 4):
        resumed.run_epoch(epoch)

    # the resumed run's columns equal the tail of the uninterrupted run
    ref = loss_columns(tmp_path / "res_full")
    got = loss_columns(tmp_path / "res_resumed")
    assert len(got) > 0
    assert got == ref[-len(got):]


def test_separation_clamp_reports_floor_and_gates_gradient(synth64, tmp_path):
    # a floor above any attainable value forces the clamp on every batch
    weights = L.LossWeights(separation_floor=0.0)
    tr = make_trainer(synth64, tmp_path / "clamp", weights=weights)
    report, grads = tr._objective_grads(np.arange(4), "joint")
    assert report.terms["separation"] == 0.0
    # with the clamp active, separation contributes no gradient: the proto
    # gradient must equal the unclamped run's minus its separation part
    tr2 = make_trainer(synth64, tmp_path / "clamp2", weights=L.LossWeights())
    report2, grads2 = tr2._objective_grads(np.arange(4), "joint")
    assert report2.terms["separation"] < 0.0
    assert not np.allclose(grads["protos"], grads2["protos"])


def test_divergence_aborts_with_last_good(synth64, tmp_path):
    tr = make_trainer(synth64, tmp_path / "div")
    tr.run_epoch(0)
    tr.model.params["protos"][:] = np.nan
    with pytest.raises(DivergenceError) as exc:
        tr.run_epoch(1)
    assert exc.value.checkpoint_path.exists()


# ---------------------------------------------------------------------------
# remembering mode wiring
# ---------------------------------------------------------------------------


def test_lp_lr_logs_valid_metric_and_pulls_prototypes(synth64, tmp_path):
    manifest = D.load_manifest(synth64 / "manifest_train.csv")
    vset = make_valid_set(manifest)
    tr = make_trainer(synth64, tmp_path / "lr", mode="lp+lr", valid_set=vset, seed=1,
                      epochs=8, warmup_epochs=2, projection_epochs=(3, 7))
    tr.train()
    log = read_log(tr.run_dir)
    start = [e for e in log if e["event"] == "valid_metric" and e.get("when") == "start"]
    epochs = [e for e in log if e["event"] == "epoch"]
    assert len(start) == 1
    assert all("valid_mean_dist" in e for e in epochs)
    assert epochs[-1]["valid_mean_dist"] < start[0]["valid_mean_dist"]
    steps = [e for e in log if e["event"] == "step"]
    assert all("remembering" in e["terms"] for e in steps)
