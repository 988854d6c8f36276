import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazehmm.errors import GazeHmmError, ParseError, ValidationError
from gazehmm.gaze_io import (GazeSample, ModelRecord, Trial, load_bundled_models, parse_gaze_csv,
                             read_manifest, read_model, record_to_dict, validate_model,
                             write_gaze_csv, write_model)

HEADER = "participant_id,trial_id,condition,t_ms,x_px,y_px\n"


def test_three_rows_one_trial():
    data = HEADER + "p1,t1,lie_familiar,0,1,2\np1,t1,lie_familiar,4,3,4\np1,t1,lie_familiar,8,5,6\n"
    trials = parse_gaze_csv(data.encode())
    assert len(trials) == 1
    assert trials[0].condition == "lie_familiar"
    assert trials[0].samples == (GazeSample(0, 1, 2), GazeSample(4, 3, 4), GazeSample(8, 5, 6))


def test_header_only():
    assert parse_gaze_csv(HEADER.encode()) == []


def test_non_strict_time_names_trial():
    data = HEADER + "p1,t7,truth_familiar,0,1,1\np1,t7,truth_familiar,10,1,1\np1,t7,truth_familiar,10,1,1\n"
    with pytest.raises(ValidationError, match="t7"):
        parse_gaze_csv(data.encode())


@pytest.mark.parametrize("row, line", [
    ("p1,t1,lie_familiar,0,1\n", 2),
    ("p1,t1,lie_familiar,zero,1,2\n", 2),
    ("p1,t1,lie_familiar,0,nan,2\n", 2),
])
def test_malformed_rows_report_line(row, line):
    with pytest.raises(ParseError) as info:
        parse_gaze_csv((HEADER + row).encode())
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_unknown_condition_maps_to_unknown():
    trials = parse_gaze_csv(HEADER + "p,t,sleepy,0,1,1\n")
    assert trials[0].condition == "unknown"


def test_bad_header_and_missing_header():
    with pytest.raises(ParseError):
        parse_gaze_csv(b"a,b,c\n")
    with pytest.raises(ParseError):
        parse_gaze_csv(b"")


def test_non_contiguous_trial():
    data = HEADER + "p,a,unknown,0,1,1\np,b,unknown,0,1,1\np,a,unknown,5,1,1\n"
    with pytest.raises(ParseError, match="contiguous"):
        parse_gaze_csv(data)


def test_invalid_utf8():
    with pytest.raises(ParseError):
        parse_gaze_csv(HEADER.encode() + b"p,\xff,unknown,0,1,1\n")


def test_order_preserving_and_round_trip():
    rng = np.random.default_rng(0)
    trials = []
    for i in range(3):
        t = np.cumsum(rng.uniform(1, 5, size=8))
        xy = rng.uniform(0, 1000, size=(8, 2))
        trials.append(Trial(f"p{i}", "t0", "truth_unfamiliar",
                            tuple(GazeSample(a, b, c) for a, (b, c) in zip(t, xy))))
    back = parse_gaze_csv(write_gaze_csv(trials))
    assert back == trials


def test_comments_and_blank_lines_skipped():
    data = "# meta\n" + HEADER + "\np,t,unknown,0,1,1\n"
    assert len(parse_gaze_csv(data)) == 1


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_parse_is_total_on_bytes(data):
    try:
        parse_gaze_csv(data)
    except GazeHmmError:
        pass


@settings(max_examples=300, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["p", "t", "lie_familiar", "0", "1.5", "-2", "x", "", "1e400",
                                          '"', "10"]), min_size=0, max_size=8), max_size=6))
def test_parse_is_total_on_csv_like_text(rows):
    text = HEADER + "".join(",".join(r) + "\n" for r in rows)
    try:
        parse_gaze_csv(text.encode())
    except GazeHmmError:
        pass


# -- models -----------------------------------------------------------------------

def _record(**kw):
    base = dict(n_states=2, dim=2, prior=[0.5, 0.5], transition=[[1, 0], [0, 1]],
                means=[[0, 0], [1, 1]], covs=[np.eye(2), np.eye(2)])
    base.update(kw)
    return ModelRecord(**base)


def test_identity_uniform_is_valid():
    assert validate_model(_record()) == []


def test_prior_sum_violation():
    obj = record_to_dict(_record())
    obj["prior"] = [0.5, 0.6]
    with pytest.raises(ValidationError, match="prior"):
        read_model(json.dumps(obj).encode())
    v = validate_model(_record(prior=[0.5, 0.6]))
    assert len(v) == 1 and v[0].field.startswith("prior")
    assert v[0].observed == pytest.approx(1.1)


def test_indefinite_covariance():
    v = validate_model(_record(covs=[[[1, 2], [2, 1]], np.eye(2)]))
    assert len(v) == 1
    assert v[0].index == (0,)
    assert v[0].observed == pytest.approx(-1.0)


def test_missing_and_unknown_fields():
    obj = record_to_dict(_record())
    del obj["transition"]
    with pytest.raises(ValidationError, match="transition"):
        read_model(json.dumps(obj))
    obj = record_to_dict(_record())
    obj["colour"] = 1
    with pytest.raises(ValidationError, match="colour"):
        read_model(json.dumps(obj))


def test_dimension_mismatch_is_descriptive():
    obj = record_to_dict(_record())
    obj["prior"] = [1.0]
    with pytest.raises(ValidationError, match="prior"):
        read_model(json.dumps(obj))


def test_malformed_json():
    with pytest.raises(ParseError):
        read_model(b"{")


def test_bundled_round_trip_is_bit_stable(records):
    first = write_model(records["general"])
    assert write_model(read_model(first)) == first


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_round_trip_within_1e9(seed, K):
    rng = np.random.default_rng(seed)
    prior = rng.dirichlet(np.ones(K))
    A = rng.dirichlet(np.ones(K), size=K)
    means = rng.uniform(0, 1400, size=(K, 2))
    L = rng.normal(size=(K, 2, 2)) * 10
    covs = L @ np.swapaxes(L, 1, 2) + np.eye(2)
    rec = ModelRecord(K, 2, prior, A, means, covs)
    back = read_model(write_model(rec))
    for a, b in ((rec.prior, back.prior), (rec.transition, back.transition),
                 (rec.means, back.means), (rec.covs, back.covs)):
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)


# -- bundled fixtures -----------------------------------------------------------

def test_five_models_all_valid(records):
    assert sorted(records) == sorted(["general", "truth_familiar", "truth_unfamiliar",
                                      "lie_familiar", "lie_unfamiliar"])
    for rec in records.values():
        assert validate_model(rec) == []


def test_printed_values(records):
    assert records["general"].prior.tolist() == [0.0, 0.8475, 0.1525]
    assert records["general"].transition[0].tolist() == [0.9704, 0.0086, 0.0210]
    assert records["truth_familiar"].prior.tolist() == [0.8626, 0.0479, 0.0895]
    assert records["truth_familiar"].transition[1].tolist() == [0.0285, 0.9444, 0.0272]
    assert records["lie_unfamiliar"].transition[2].tolist() == [0.2099, 0.2751, 0.5150]
    assert records["truth_familiar"].means.tolist() == [[634.9725, 351.6586], [676.1114, 493.2836],
                                                        [706.2081, 332.5524]]
    assert records["truth_unfamiliar"].means.tolist() == [[672.2400, 430.2586], [616.2596, 321.0105],
                                                          [688.8656, 337.2602]]


def test_general_blue_row_sums_to_0_9999(records):
    assert records["general"].transition[2].sum() == pytest.approx(0.9999, abs=1e-12)


def test_synthetic_flags(records):
    for name, rec in records.items():
        assert rec.meta["synthetic_emission"] is True
        assert rec.meta["synthetic_means"] is (name not in ("truth_familiar", "truth_unfamiliar"))
        np.testing.assert_array_equal(rec.covs, np.stack([196 * np.eye(2)] * 3))


def test_loaded_models_renormalize_but_keep_zero(bundled):
    g = bundled["general"]
    np.testing.assert_allclose(g.transition.sum(axis=1), 1.0, atol=1e-15)
    assert g.prior[0] == 0.0


def test_records_are_immutable(records):
    with pytest.raises(ValueError):
        records["general"].prior[0] = 1.0
    assert load_bundled_models()["general"].prior[0] == 0.0


# -- manifest --------------------------------------------------------------------

def test_manifest_defaults():
    m = read_manifest(b"{}")
    assert m.face_center == (683.0, 384.0)


def test_manifest_fields():
    m = read_manifest(io.BytesIO(json.dumps(
        {"screen": {"width_px": 1920, "height_px": 1080}, "face_center": [960, 540],
         "trials_csv": "g.csv"}).encode()))
    assert m.screen == (1920, 1080) and m.face_center == (960.0, 540.0) and m.trials_csv == "g.csv"


def test_manifest_errors():
    with pytest.raises(ValidationError):
        read_manifest(b"[]")
    with pytest.raises(ValidationError):
        read_manifest(b'{"screen": {"width_px": 0}}')
