import json
import struct
import zlib

import numpy as np
import pytest

import refprior


def test_feature_file_golden_bytes():
    f = np.array([[1.0, -2.0]], dtype=np.float32)
    payload = struct.pack("<2f", 1.0, -2.0)
    golden = b"MIRF" + struct.pack("<4I", 1, 1, 2, 1) + payload + struct.pack("<I", zlib.crc32(payload))
    assert refprior.encode_features(f) == golden
    assert refprior.crc32(payload) == zlib.crc32(payload)
    np.testing.assert_array_equal(refprior.decode_features(golden), f)


def test_feature_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((196, 1024)).astype(np.float32)
    f[0, 0] = -0.0
    refprior.write_features(tmp_path / "a.mirf", f)
    back = refprior.read_features(tmp_path / "a.mirf")
    assert back.tobytes() == f.tobytes()
    raw = bytearray(refprior.encode_features(f))
    raw[30] ^= 1
    with pytest.raises(refprior.IoError):
        refprior.decode_features(bytes(raw))
    with pytest.raises(OSError):
        refprior.read_features(tmp_path / "missing.mirf")
    with pytest.raises(ValueError):
        refprior.encode_features(np.zeros(3, dtype=np.float32))


def test_manifest_round_trip(tmp_path):
    refprior.write_features(tmp_path / "a.mirf", np.ones((2, 3), dtype=np.float32))
    records = [
        {"image_id": "a", "path": "a.mirf", "label": "fake", "generator": "sd", "corruption": "jpeg90"},
        {"image_id": "a", "path": "a.mirf", "label": "fake", "generator": "sd", "corruption": "clean"},
    ]
    refprior.write_manifest(tmp_path / "m.jsonl", records)
    assert refprior.read_manifest(tmp_path / "m.jsonl") == records
    assert refprior.valid_corruption_tag("resize0.9")
    assert not refprior.valid_corruption_tag("sepia")
    with pytest.raises(refprior.ContractViolation):
        refprior.write_manifest(tmp_path / "bad.jsonl", [{"image_id": "a", "path": "a.mirf", "label": "maybe"}])


def _trial(i, rt, s=1, truth="generated"):
    return {"trial_id": f"t{i}", "image_id": f"g{i}", "ground_truth": truth, "chosen": "real", "S": s,
            "RT": rt, "participant_id": "p", "cohort": "lay", "timestamp": ""}


def test_trial_log_and_curation(tmp_path):
    trials = [_trial(i, rt) for i, rt in enumerate([1000, 1000, 1000, 1000, 6000])]
    with open(tmp_path / "trials.jsonl", "w") as out:
        for t in trials:
            out.write(refprior.trial_line(t) + "\n")
    assert refprior.read_trial_log(tmp_path / "trials.jsonl") == trials
    r = refprior.select_hard(trials)
    assert r["selected"] == ["g4"]
    assert r["mu_rt"] == 2000.0 and r["sigma_rt"] == 2000.0
    assert refprior.select_hard(trials, tau_real=1)["selected"] == [f"g{i}" for i in range(5)]
    assert refprior.cohort_report(trials)["lay"]["accuracy"] == 0.0
    with pytest.raises(ValueError):
        refprior.select_hard([_trial(0, 100, s=9)])


def test_cli_pipeline_and_detector(tmp_path):
    data = tmp_path / "data"
    code, out, err = refprior.run_cli("make-synthetic", "--D", 16, "--K-true", 8, "--sparsity", 2, "--n-real", 24,
                                      "--n-fake", 24, "--patches", 4, "--holdout", 0.25, "--out", data)
    assert code == 0, err
    code, out, err = refprior.run_cli("train-prior", "--features", data / "train.jsonl", "--K", 8, "--topk", 2,
                                      "--lr", 1e-2, "--max-steps", 10, "--out", tmp_path / "p.ckpt",
                                      "--log", tmp_path / "p.log")
    assert code == 0, err
    code, out, err = refprior.run_cli("train-detector", "--prior", tmp_path / "p.ckpt", "--features",
                                      data / "train.jsonl", "--hidden", 8, "--evidence-dim", 4, "--max-steps", 10,
                                      "--out", tmp_path / "d.ckpt", "--log", tmp_path / "d.log")
    assert code == 0, err
    summary = json.loads(out)

    det = refprior.Detector(tmp_path / "d.ckpt")
    assert (det.K, det.D, det.top_k) == (8, 16, 2)
    assert det.fingerprint == summary["fingerprint"]
    assert det.prior_checksum == summary["prior_checksum_after"]
    rec = refprior.read_manifest(data / "test.jsonl")[0]
    f = refprior.read_features(data / rec["path"])
    v = det.score(f, rec["image_id"], heatmap=True)
    assert 0.0 <= v["y_pred"] <= 1.0
    assert len(v["heatmap"]) == 4
    assert det.score(f)["y_pred"] == v["y_pred"]
    with pytest.raises(ValueError):
        det.score(np.zeros((4, 5), dtype=np.float32))
    with pytest.raises(ValueError):
        refprior.Detector(tmp_path / "p.ckpt")
    assert refprior.checkpoint_header(tmp_path / "d.ckpt")["kind"] == "detector"
    assert refprior.run_cli("score", "--nope")[0] == 1
