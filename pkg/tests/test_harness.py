import csv
import io
import json

import numpy as np
import pytest

from errpasync.archive import (FormatError, load_model, model_from_dict, model_to_dict,
                               read_session, save_model, write_session)
from errpasync.cli import main
from errpasync.config import Config
from errpasync.report import (REFERENCE_LABEL, build_report, report_csv, report_text,
                              reference_csv)
from errpasync.session import parse_blocks


# --- archive --------------------------------------------------------------------

def test_session_round_trip_is_bit_exact(closed_loop_session, tmp_path):
    s = closed_loop_session
    write_session(s, tmp_path / "s")
    r = read_session(tmp_path / "s")
    assert r.eeg.dtype == np.float32 and np.array_equal(r.eeg, s.eeg)
    assert r.events == json.loads(json.dumps(s.events))
    assert [t.to_dict() for t in r.trials] == [t.to_dict() for t in s.trials]
    assert r.thresholds() == s.thresholds()
    size = (tmp_path / "s" / "eeg.bin").stat().st_size
    assert size == s.n_frames * 61 * 4


def test_eeg_bin_is_frame_interleaved_little_endian(closed_loop_session, tmp_path):
    write_session(closed_loop_session, tmp_path / "s")
    raw = np.fromfile(tmp_path / "s" / "eeg.bin", dtype="<f4", count=122)
    assert np.array_equal(raw[:61], closed_loop_session.eeg[0])
    assert np.array_equal(raw[61:], closed_loop_session.eeg[1])


def test_error_trials_have_marker_and_onset_events(closed_loop_session):
    kinds = {}
    for e in closed_loop_session.events:
        kinds.setdefault(e["kind"], []).append(e)
    for t in closed_loop_session.trials:
        if t.is_error:
            assert any(e["payload"]["trial"] == t.trial_id and e["t"] == t.marker
                       for e in kinds["error_marker"])
            assert any(e["payload"]["trial"] == t.trial_id and e["t"] == t.onset
                       for e in kinds["error_onset"])


def test_truncated_eeg_is_a_format_error(closed_loop_session, tmp_path):
    d = write_session(closed_loop_session, tmp_path / "s")
    raw = (d / "eeg.bin").read_bytes()
    (d / "eeg.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_session(d)


def test_unsorted_events_are_a_format_error(closed_loop_session, tmp_path):
    d = write_session(closed_loop_session, tmp_path / "s")
    lines = (d / "events.jsonl").read_text().splitlines()
    (d / "events.jsonl").write_text("\n".join(lines[::-1]) + "\n")
    with pytest.raises(FormatError):
        read_session(d)


def test_model_round_trip_is_bit_exact(small_model, tmp_path):
    save_model(small_model, tmp_path / "m.json")
    m = load_model(tmp_path / "m.json")
    assert np.array_equal(m.pca.mean, small_model.pca.mean)
    assert np.array_equal(m.pca.components, small_model.pca.components)
    assert np.array_equal(m.lda.weights, small_model.lda.weights)
    assert m.lda.bias == small_model.lda.bias and m.threshold == small_model.threshold
    assert m.filter_spec == small_model.filter_spec
    assert np.array_equal(m.sensor_weights, small_model.sensor_weights)


def test_unknown_model_version_is_rejected(small_model):
    doc = model_to_dict(small_model)
    doc["version"] = 2
    with pytest.raises(FormatError):
        model_from_dict(doc)


def test_parse_blocks():
    assert parse_blocks("4-8", range(1, 9)) == [4, 5, 6, 7, 8]
    assert parse_blocks("1,3", range(1, 9)) == [1, 3]
    with pytest.raises(ValueError):
        parse_blocks("9", range(1, 9))


# --- report ---------------------------------------------------------------------

def result(pid, group, p=None):
    r = {"participant": pid, "group": group, "tau": 0.8, "tpr": 0.9, "tnr": 0.95,
         "edr": 0.92, "far": 0.01, "chance": {"tpr": 0.2, "tnr": 0.5}, "p_values": {}}
    if p is not None:
        r["p_values"] = {"tpr": p, "tnr": p, "product": p}
    return r


def test_csv_has_participant_and_two_group_rows():
    rep = build_report([result("C1", "control", 0.01), result("S1", "sci", 0.02),
                        result("C2", "control")])
    rows = list(csv.reader(io.StringIO(report_csv(rep))))
    assert len(rows) - 1 == 3 + 2
    assert [r[0] for r in rows[-2:]] == ["mean:control", "mean:sci"]


def test_missing_p_values_render_as_na():
    rep = build_report([result("C1", "control")])
    rows = list(csv.DictReader(io.StringIO(report_csv(rep))))
    assert rows[0]["p_tpr"] == "n/a" and rows[0]["p_product"] == "n/a"
    assert "n/a" in report_text(rep)


def test_reference_rows_are_labelled():
    rows = list(csv.DictReader(io.StringIO(reference_csv())))
    sci = [r for r in rows if r["group"] == "sci"][0]
    ctl = [r for r in rows if r["group"] == "control"][0]
    assert (float(sci["tpr"]), float(sci["tnr"])) == (0.469, 0.719)
    assert (float(ctl["tpr"]), float(ctl["tnr"])) == (0.564, 0.779)
    assert all(r["label"] == REFERENCE_LABEL for r in rows)
    assert "not reproducible" in REFERENCE_LABEL


# --- CLI ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    Config(n_training_participants=2).save(d / "cfg.json")
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = str(workdir / "cfg.json")
    assert main(["train-generic", "--seed", "7", "--config", cfg,
                 "--out", str(workdir / "m1.json")]) == 0
    assert main(["train-generic", "--seed", "7", "--config", cfg,
                 "--out", str(workdir / "m2.json")]) == 0
    return workdir / "m1.json"


@pytest.fixture(scope="module")
def recorded(workdir, trained):
    cfg = str(workdir / "cfg.json")
    for name in ("s1", "s2"):
        assert main(["run-online", "--seed", "11", "--config", cfg, "--model", str(trained),
                     "--out", str(workdir / name)]) == 0
    return workdir / "s1"


def test_train_generic_is_deterministic(workdir, trained, capsys):
    assert (workdir / "m1.json").read_bytes() == (workdir / "m2.json").read_bytes()
    info = load_model(trained).info
    assert info["pca_components"] > 0 and info["n_epochs"] == 2 * 240


def test_run_online_is_deterministic(workdir, recorded):
    for f in ("meta.json", "eeg.bin", "events.jsonl"):
        assert (workdir / "s1" / f).read_bytes() == (workdir / "s2" / f).read_bytes()


def test_evaluate_restricted_to_blocks(workdir, trained, recorded):
    outs = []
    for name in ("e1.json", "e2.json"):
        assert main(["evaluate", "--session", str(recorded), "--model", str(trained),
                     "--blocks", "4-8", "--out", str(workdir / name)]) == 0
        outs.append((workdir / name).read_bytes())
    assert outs[0] == outs[1]
    res = json.loads(outs[0])
    assert res["blocks"] == [4, 5, 6, 7, 8]
    assert res["n_error"] == 5 * 9 and res["n_correct"] == 5 * 21


def test_evaluate_at_fixed_tau(workdir, trained, recorded, capsys):
    assert main(["evaluate", "--session", str(recorded), "--model", str(trained),
                 "--blocks", "4-8", "--tau", "1.0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["tpr"] == 0.0 and res["tnr"] == 1.0


def test_adapt_threshold_writes_41_point_curves(workdir, trained, recorded, capsys):
    out = workdir / "curves.csv"
    assert main(["adapt-threshold", "--session", str(recorded), "--model", str(trained),
                 "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out)
    session = read_session(recorded)
    assert res["grid_points"] == 41 and res["tau"] == session.thresholds()[4]
    assert len(out.read_text().splitlines()) == 42


def test_chance_and_report(workdir, trained, recorded, capsys):
    cfg = str(workdir / "cfg.json")
    out = workdir / "chance.json"
    assert main(["chance", "--session", str(recorded), "--model", str(trained), "--config", cfg,
                 "--seed", "5", "--n-perm", "3", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert set(res["p_values"]) >= {"tpr", "tnr", "product"}
    assert all(0.25 <= p <= 1.0 for p in res["p_values"].values())
    assert main(["report", "--out", str(workdir / "rep"), str(out)]) == 0
    rows = (workdir / "rep" / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 + 2
    assert (workdir / "rep" / "reference.csv").is_file()


def test_cross_validate_cli(workdir, recorded, capsys):
    assert main(["cross-validate", "--session", str(recorded), "--reps", "1",
                 "--folds", "5", "--seed", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["n_curves"] == 5


def test_corrupt_archive_exits_3(workdir, trained, recorded, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in ("meta.json", "events.jsonl"):
        (bad / f).write_bytes((recorded / f).read_bytes())
    (bad / "eeg.bin").write_bytes((recorded / "eeg.bin").read_bytes()[:100])
    assert main(["evaluate", "--session", str(bad)]) == 3


def test_corrupt_model_exits_3(recorded, tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    assert main(["evaluate", "--session", str(recorded), "--model",
                 str(tmp_path / "m.json")]) == 3


def test_usage_errors_exit_2(recorded, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert main(["evaluate", "--session", str(tmp_path / "missing")]) == 2
    assert main(["evaluate", "--session", str(recorded), "--blocks", "12"]) == 2
    assert main(["evaluate"]) == 2
    assert main(["report"]) == 2
