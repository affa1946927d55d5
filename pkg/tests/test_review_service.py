"""Review service API: roster, verdicts, persistence, export round trip."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from protopart import data as D
from protopart import losses as L
from protopart.errors import ConfigurationError
from protopart.model import ModelConfig, ProtoPartNet, save_checkpoint
from protopart.review import ReviewSession, build_app
from protopart.trainer import TrainConfig, Trainer


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """An 18-prototype projected checkpoint over a tiny synthetic set."""
    root = tmp_path_factory.mktemp("review_data")
    D.generate_synthetic(root, n_per_class=16, seed=6, image_size=64, confound_fraction=0.5)
    manifest = D.load_manifest(root / "manifest_train.csv")
    model = ProtoPartNet(
        ModelConfig(image_size=64, trunk_channels=(3, 4, 5, 5), depth=4,
                    protos_per_class=9, top_k=2),
        rng=np.random.default_rng(0))
    cfg = TrainConfig(epochs=2, warmup_epochs=1, projection_epochs=(1,), batch_size=8)
    run_dir = root / "run"
    tr = Trainer(model, manifest, cfg, L.LossWeights(), run_dir)
    tr.train()
    return root, run_dir


def make_client(trained, tmp_path, **kw):
    root, run_dir = trained
    app = build_app(run_dir / "ckpt-epoch1.ppt", tmp_path,
                    manifest_path=root / "manifest_train.csv", **kw)
    return TestClient(app)


def test_roster_has_m_entries_balanced(trained, tmp_path):
    client = make_client(trained, tmp_path)
    roster = client.get("/api/prototypes").json()
    assert len(roster) == 18
    assert sum(1 for r in roster if r["class"] == 1) == 9
    assert sum(1 for r in roster if r["class"] == 0) == 9
    assert all(r["verdict"] == "pending" for r in roster)
    assert all(len(r["bbox"]) == 4 for r in roster)


def test_session_endpoint_counts(trained, tmp_path):
    client = make_client(trained, tmp_path)
    session = client.get("/api/session").json()
    assert session["num_prototypes"] == 18
    assert session["counts"] == {"pending": 18, "valid": 0, "discard": 0}
    assert not session["export_ready"]
    assert "guidance" in session


def test_unknown_prototype_404(trained, tmp_path):
    client = make_client(trained, tmp_path)
    assert client.post("/api/prototypes/99/verdict",
                       json={"verdict": "valid"}).status_code == 404
    assert client.get("/api/prototypes/99/patch.png").status_code == 404


def test_bad_verdict_rejected(trained, tmp_path):
    client = make_client(trained, tmp_path)
    r = client.post("/api/prototypes/0/verdict", json={"verdict": "maybe"})
    assert r.status_code == 400


def test_last_write_wins_with_audit_trail(trained, tmp_path):
    client = make_client(trained, tmp_path)
    client.post("/api/prototypes/3/verdict", json={"verdict": "valid", "note": "first"})
    client.post("/api/prototypes/3/verdict", json={"verdict": "discard", "note": "second"})
    roster = {r["id"]: r for r in client.get("/api/prototypes").json()}
    assert roster[3]["verdict"] == "discard"
    assert [h["verdict"] for h in roster[3]["history"]] == ["valid", "discard"]


def test_thumbnails_are_pure_functions(trained, tmp_path):
    client = make_client(trained, tmp_path)
    a = client.get("/api/prototypes/2/patch.png").content
    b = client.get("/api/prototypes/2/patch.png").content
    assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"
    ctx = client.get("/api/prototypes/2/context.png").content
    assert ctx[:8] == b"\x89PNG\r\n\x1a\n" and ctx != a


def test_export_blocked_while_pending_then_roundtrip(trained, tmp_path):
    root, run_dir = trained
    client = make_client(trained, tmp_path)
    assert client.post("/api/export", json={}).status_code == 409

    roster = client.get("/api/prototypes").json()
    for r in roster:
        verdict = "valid" if r["class"] == 1 else "discard"
        assert client.post(f"/api/prototypes/{r['id']}/verdict",
                           json={"verdict": verdict}).status_code == 200
    out = client.post("/api/export", json={"path": str(tmp_path / "v.json")}).json()
    assert out["per_class_valid"] == {"0": 0, "1": 9}
    assert any("class 0" in w for w in out["warnings"])
    vset = D.load_valid_set(tmp_path / "v.json", image_size=64)
    assert len(vset) == 9
    assert all(e.class_id == 1 for e in vset.entries)
    assert "lp+lr" in out["next_step"]


def test_export_all_discard_warns_everywhere(trained, tmp_path):
    client = make_client(trained, tmp_path, session_path=tmp_path / "s2.jsonl")
    for r in client.get("/api/prototypes").json():
        client.post(f"/api/prototypes/{r['id']}/verdict", json={"verdict": "discard"})
    out = client.post("/api/export", json={"path": str(tmp_path / "empty.json")}).json()
    assert len(out["warnings"]) == 2
    assert len(D.load_valid_set(tmp_path / "empty.json", image_size=64)) == 0


def test_allow_partial_export(trained, tmp_path):
    client = make_client(trained, tmp_path, session_path=tmp_path / "s3.jsonl")
    client.post("/api/prototypes/0/verdict", json={"verdict": "valid"})
    out = client.post("/api/export",
                      json={"path": str(tmp_path / "p.json"), "allow_partial": True})
    assert out.status_code == 200
    assert len(D.load_valid_set(tmp_path / "p.json", image_size=64)) == 1


def test_session_survives_restart(trained, tmp_path):
    session_path = tmp_path / "persist.jsonl"
    client = make_client(trained, tmp_path, session_path=session_path)
    client.post("/api/prototypes/5/verdict", json={"verdict": "valid", "note": "keeper"})
    client.post("/api/prototypes/6/verdict", json={"verdict": "discard"})
    # new app instance over the same session file
    client2 = make_client(trained, tmp_path, session_path=session_path)
    roster = {r["id"]: r for r in client2.get("/api/prototypes").json()}
    assert roster[5]["verdict"] == "valid" and roster[5]["note"] == "keeper"
    assert roster[6]["verdict"] == "discard"
    counts = client2.get("/api/session").json()["counts"]
    assert counts == {"pending": 16, "valid": 1, "discard": 1}


def test_refuses_pre_projection_checkpoint(trained, tmp_path):
    root, run_dir = trained
    model = ProtoPartNet(ModelConfig(image_size=64, trunk_channels=(3, 4, 5, 5),
                                     depth=4, protos_per_class=9, top_k=2),
                         rng=np.random.default_rng(0))
    raw = tmp_path / "raw.ppt"
    save_checkpoint(raw, model)  # no projection -> no source table
    with pytest.raises(ConfigurationError, match="source table"):
        build_app(raw, tmp_path, manifest_path=root / "manifest_train.csv")


def test_session_binds_to_checkpoint(tmp_path):
    s = ReviewSession(tmp_path / "s.jsonl", "abc123", 4)
    s.record(0, "valid")
    with pytest.raises(Exception):
        ReviewSession(tmp_path / "s.jsonl", "different", 4)
