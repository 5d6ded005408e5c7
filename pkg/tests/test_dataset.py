import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphfit.dataset import (AffectRecord, ManifestEntry, SchemaError, SubjectMeta, params_from_dict,
                              params_to_dict, read_affect_csv, read_manifest, read_params, read_records,
                              record_to_dict, stratified_split, write_affect_csv, write_manifest, write_params)
from morphfit.model import ParamVector

# stratum sizes of the 41-subject roster
ROSTER = {("White", "M"): 14, ("White", "F"): 9, ("Asian", "F"): 8, ("Black", "F"): 6,
          ("Asian", "M"): 2, ("Black", "M"): 2}


def roster():
    out = []
    for (race, gender), n in ROSTER.items():
        out += [SubjectMeta(f"{race[0]}{gender}{i:02d}", race, gender) for i in range(n)]
    return out


def test_params_roundtrip(tmp_path):
    p = ParamVector(beta=np.arange(3.0), psi_exp=np.arange(4.0) / 7, cam=[1.5, 0.1, -0.2])
    write_params(p, tmp_path / "p.json")
    q = read_params(tmp_path / "p.json")
    for name in ("beta", "psi_exp", "psi_eye", "theta_jaw", "theta_head", "cam"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


@pytest.mark.parametrize("mutate,pointer", [
    (lambda d: d.pop("cam"), "/cam"),
    (lambda d: d.__setitem__("beta", [1.0]), "/beta"),
    (lambda d: d["psi_exp"].__setitem__(1, "x"), "/psi_exp/1"),
    (lambda d: d["cam"].__setitem__(0, -1.0), "/cam/0"),
    (lambda d: d.__setitem__("model_dims", [2]), "/model_dims"),
])
def test_params_schema_errors_carry_pointer(mutate, pointer):
    d = params_to_dict(ParamVector.zeros(2, 3))
    mutate(d)
    with pytest.raises(SchemaError) as exc:
        params_from_dict(d)
    assert exc.value.pointer == pointer


def test_invalid_json_is_schema_error(tmp_path):
    (tmp_path / "p.json").write_text("{nope")
    with pytest.raises(SchemaError):
        read_params(tmp_path / "p.json")


def test_affect_csv_roundtrip_and_validation(tmp_path):
    recs = [AffectRecord("a", 0.5, -0.25, 3), AffectRecord("b", -1.0, 1.0, 0)]
    write_affect_csv(recs, tmp_path / "a.csv")
    back = read_affect_csv(tmp_path / "a.csv")
    assert [(r.sample_id, r.valence, r.arousal, r.label) for r in back] == [("a", 0.5, -0.25, 3), ("b", -1.0, 1.0, 0)]
    with pytest.raises(ValueError):
        AffectRecord("c", 1.5, 0.0, 0)
    with pytest.raises(ValueError):
        AffectRecord("c", 0.0, 0.0, 7)
    (tmp_path / "bad.csv").write_text("id,valence\nx,0.1\n")
    with pytest.raises(SchemaError):
        read_affect_csv(tmp_path / "bad.csv")


def test_records(tmp_path):
    recs = [record_to_dict("s1", ParamVector.zeros(1, 2), (0.1, 0.2), 4), record_to_dict("s2")]
    (tmp_path / "r.json").write_text(json.dumps(recs))
    back = read_records(tmp_path / "r.json")
    assert back[0]["class"] == 4 and back[0]["params"].dims == (1, 2) and back[1] == {"id": "s2"}
    (tmp_path / "r.json").write_text(json.dumps([{"id": "x", "class": 1.5}]))
    with pytest.raises(SchemaError, match="/0/class"):
        read_records(tmp_path / "r.json")


def test_manifest(tmp_path):
    entries = [ManifestEntry("a", "a.ply", "train"), ManifestEntry("b", "b.ply", "test")]
    write_manifest(entries, tmp_path / "m.json")
    assert read_manifest(tmp_path / "m.json") == entries
    (tmp_path / "m.json").write_text(json.dumps({"samples": [{"id": "a", "path": "x", "split": "train"}] * 2}))
    with pytest.raises(SchemaError, match="duplicate"):
        read_manifest(tmp_path / "m.json")
    with pytest.raises(ValueError):
        ManifestEntry("a", "a", "holdout")


def test_split_shape_and_exclusivity():
    subjects = roster()
    split = stratified_split(subjects, seed=0)
    assert (len(split["train"]), len(split["val"]), len(split["test"])) == (29, 6, 6)
    all_ids = split["train"] + split["val"] + split["test"]
    assert sorted(all_ids) == sorted(s.subject_id for s in subjects)
    strata = {s.subject_id: s.stratum for s in subjects}
    for part in ("val", "test"):
        assert sorted(strata[i] for i in split[part]) == sorted({s.stratum for s in subjects})


def test_split_deterministic_and_seed_dependent():
    a = stratified_split(roster(), seed=3)
    assert a == stratified_split(roster(), seed=3)
    assert any(stratified_split(roster(), seed=s) != a for s in range(4, 10))


def test_split_singleton_stratum_stays_in_train(caplog):
    subjects = [s for s in roster() if s.stratum != "Black_M"] + [SubjectMeta("BM", "Black", "M")]
    split = stratified_split(subjects, seed=0)
    assert "BM" in split["train"]
    assert "Black_M" in caplog.text


def test_split_fixed_assignment_and_errors():
    split = stratified_split(roster(), fixed={"val": ["WM00"], "test": ["WF00"]})
    assert split["val"] == ["WM00"] and split["test"] == ["WF00"] and len(split["train"]) == 39
    with pytest.raises(ValueError):
        stratified_split(roster(), fixed={"val": ["nobody"], "test": ["WF00"]})
    with pytest.raises(ValueError):
        stratified_split(roster(), fixed={"val": ["WM00"], "test": ["WM00"]})
    with pytest.raises(ValueError):
        stratified_split([SubjectMeta("a", "White", "M")])
    with pytest.raises(ValueError):
        stratified_split([SubjectMeta("a", "White", "M"), SubjectMeta("a", "White", "M")])
    with pytest.raises(ValueError):
        SubjectMeta("x", "Martian", "M")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.lists(st.integers(2, 6), min_size=1, max_size=6))
def test_split_properties(seed, sizes):
    strata = [(r, g) for r in ("Asian", "White", "Black") for g in ("M", "F")]
    subjects = []
    for (race, gender), n in zip(strata, sizes):
        subjects += [SubjectMeta(f"{race}{gender}{i}", race, gender) for i in range(n)]
    if len(subjects) - 2 * len(sizes) == 0:
        with pytest.raises(ValueError):
            stratified_split(subjects, seed)
        return
    split = stratified_split(subjects, seed)
    parts = [set(split[k]) for k in ("train", "val", "test")]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert len(split["val"]) == len(split["test"]) == len(sizes)


def test_split_one_subject_per_stratum_rejected():
    subjects = [SubjectMeta(f"s{i}", race, gender) for i, (race, gender) in enumerate(ROSTER)]
    with pytest.raises(ValueError, match="roster too small"):
        stratified_split(subjects)
