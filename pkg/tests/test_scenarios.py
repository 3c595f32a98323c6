import json

import numpy as np
import pytest

from mti import config as cfgmod
from mti.dataset import synthetic_volume
from mti.metrics import read_metrics_csv
from mti.scenarios import (
    MANIFEST,
    METHODS,
    ScenarioError,
    ScenarioSpec,
    SessionKey,
    TaskSpec,
    builtin_scenarios,
    enumerate_sessions,
    loso_folds,
    read_manifest,
    run_matrix,
    scenario_by_name,
    split_samples,
)


@pytest.fixture
def cfg():
    return cfgmod.load_config(
        profile="toy",
        overrides=[
            cfgmod.parse_override(o)
            for o in ("net.slice_size=16", "train.max_epochs=2", "augment.variants=[{}]", "data.toy_shape=[3, 20, 20]")
        ],
    )


@pytest.fixture
def volumes():
    return [synthetic_volume(f"s{i}", (3, 20, 20)) for i in range(3)]


def test_builtin_scenarios():
    specs = builtin_scenarios()
    assert [s.name for s in specs] == [f"{i}{x}" for i in range(1, 6) for x in "AB"]
    assert all(len(s.tasks) == 2 for s in specs)
    assert [s.contaminated for s in specs[::2]] == [False, True, False, True, True]
    a, b = scenario_by_name("1a"), scenario_by_name("1B")
    assert a.input_modality == "T2-FLAIR" and a.task_names == ("convert_T1", "convert_T1-IR")
    assert b.input_modality == "T1" and b.task_names == ("convert_T2-FLAIR", "convert_T1-IR")
    assert scenario_by_name("4A").task_names == ("segment", "bias_correct")
    with pytest.raises(ScenarioError):
        scenario_by_name("9A")


def test_scenario_validation():
    with pytest.raises(ValueError):
        TaskSpec("convert")
    with pytest.raises(ValueError):
        TaskSpec("denoise")
    with pytest.raises(ValueError):
        # bias correction needs a contaminated input
        ScenarioSpec(7, "A", "T1", False, (TaskSpec("bias_correct"), TaskSpec("segment")))


def test_loso_folds():
    folds = loso_folds(["a", "b", "c"])
    assert folds == [(["b", "c"], "a"), (["a", "c"], "b"), (["a", "b"], "c")]
    with pytest.raises(ScenarioError):
        loso_folds(["a", "a", "b"])
    with pytest.raises(ScenarioError):
        loso_folds(["a"])


def test_full_matrix_enumeration():
    keys = enumerate_sessions(builtin_scenarios(), 7)
    assert len(keys) == 280 == len(set(keys))
    assert keys == sorted(keys, key=lambda k: (k.scenario_id, k.sub, k.fold, METHODS.index(k.method)))
    assert keys[0].id == "1A/unet_st/fold0" and keys[-1].id == "5B/cgan_mt/fold6"
    assert [k.method for k in keys[:4]] == list(METHODS)
    with pytest.raises(ScenarioError):
        enumerate_sessions([], 7)


def test_session_key_parse():
    key = SessionKey.parse("3b/cgan_mt/fold2")
    assert key == SessionKey(3, "B", 2, "cgan_mt")
    assert key.arch == "cgan" and key.multitask and key.id == "3B/cgan_mt/fold2"
    for bad in ("3B/cgan/fold2", "3B/cgan_mt/2", "3B-cgan_mt-fold2"):
        with pytest.raises(ScenarioError):
            SessionKey.parse(bad)


def test_split_has_no_leakage(cfg, volumes):
    for fold in range(3):
        train, test = split_samples(SessionKey(2, "A", fold, "unet_mt"), volumes, cfg)
        test_ids = {m.subject_id for m in test.metas()}
        assert test_ids == {f"s{fold}"}
        assert not test_ids & {m.subject_id for m in train.metas()}
        assert len(test) == 3 * 8
        assert {m.bias_field_id for m in test.metas()} == set(range(1, 9))
    with pytest.raises(ScenarioError):
        split_samples(SessionKey(1, "A", 3, "unet_st"), volumes, cfg)


def test_st_and_mt_share_targets(cfg, volumes):
    _, mt = split_samples(SessionKey(3, "A", 0, "unet_mt"), volumes, cfg)
    _, st = split_samples(SessionKey(3, "A", 0, "unet_st"), volumes, cfg)
    for i in (0, 2):
        assert np.array_equal(mt[i].stacked_targets(), st[i].stacked_targets())
        assert mt[i].meta == st[i].meta


# module level so worker processes can unpickle it
def fake_session(key, volumes, cfg, out_root):
    if key.fold == 1 and key.method == "cgan_st":
        raise RuntimeError("injected fault")
    run_dir = key.run_dir(out_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.csv").write_text("session,task,subject,slice,bias_field,metric,value\n")
    from mti.scenarios import _write_json_atomic, expected_fingerprint

    manifest = {
        "status": "completed",
        "session": key.id,
        "fingerprint": expected_fingerprint(key, volumes, cfg),
        "subruns": [{"stop_reason": "max_epoch_force"}],
    }
    _write_json_atomic(run_dir / MANIFEST, manifest)
    return manifest


@pytest.mark.parametrize("workers", [1, 2])
def test_matrix_fail_soft_and_resume(cfg, volumes, tmp_path, workers):
    keys = enumerate_sessions([scenario_by_name("1A")], 3, ["unet_st", "cgan_st"])
    summary = run_matrix(keys, volumes, cfg, tmp_path, workers=workers, session_fn=fake_session)
    assert list(summary.failed) == ["1A/cgan_st/fold1"]
    assert "injected fault" in summary.failed["1A/cgan_st/fold1"]
    assert len(summary.completed) == 5 and not summary.ok
    assert summary.stop_reasons["max_epoch_force"] == 5
    failed = read_manifest(tmp_path / "1A/cgan_st/fold1")
    assert failed["status"] == "failed" and "traceback" in failed

    again = run_matrix(keys, volumes, cfg, tmp_path, session_fn=fake_session)
    assert again.completed == [] and len(again.skipped) == 5
    assert list(again.failed) == ["1A/cgan_st/fold1"]


def test_resume_detects_changed_data(cfg, volumes, tmp_path):
    keys = enumerate_sessions([scenario_by_name("1B")], 3, ["unet_mt"])
    run_matrix(keys[:1], volumes, cfg, tmp_path, session_fn=fake_session)
    changed = [synthetic_volume("s0", (3, 20, 20), seed=5), *volumes[1:]]
    summary = run_matrix(keys[:1], changed, cfg, tmp_path, session_fn=fake_session)
    assert "fingerprint" in summary.failed["1B/unet_mt/fold0"]
    fresh = run_matrix(keys[:1], changed, cfg, tmp_path, resume=False, session_fn=fake_session)
    assert fresh.completed == ["1B/unet_mt/fold0"]


def test_real_toy_sessions(cfg, tmp_path):
    vols = [synthetic_volume(f"s{i}", (3, 20, 20)) for i in range(2)]
    keys = [SessionKey(1, "A", 0, m) for m in METHODS]
    summary = run_matrix(keys, vols, cfg, tmp_path)
    assert summary.ok and len(summary.completed) == 4 and len(summary.metric_files) == 4
    # ST sessions train one net per task, MT one net in total
    assert sum(summary.stop_reasons.values()) == 2 + 2 + 1 + 1

    m = read_manifest(tmp_path / "1A/unet_st/fold0")
    assert m["status"] == "completed" and m["n_test"] == 3 and m["n_train"] == 3
    assert [s["name"] for s in m["subruns"]] == ["st_convert_T1", "st_convert_T1-IR"]
    for rel in m["artifacts"]:
        assert (tmp_path / "1A/unet_st/fold0" / rel).exists()
    mt = read_manifest(tmp_path / "1A/cgan_mt/fold0")
    assert mt["subruns"][0]["tasks"] == ["convert_T1", "convert_T1-IR"]
    assert mt["subruns"][0]["stop_epoch"] == 2

    records = read_metrics_csv(tmp_path / "1A/unet_mt/fold0/metrics.csv")
    assert len(records) == 3 * 2
    assert {r.subject_id for r in records} == {"s0"}
    panel = np.load(tmp_path / "1A/unet_mt/fold0/panel.npz")
    assert {"input", "pred_convert_T1", "target_convert_T1-IR"} <= set(panel.files)
    # manifests are plain JSON
    json.loads((tmp_path / "1A/unet_mt/fold0" / MANIFEST).read_text())
