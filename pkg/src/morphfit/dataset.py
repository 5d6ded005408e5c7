"""Parameter records, affect labels, manifests and the subject-exclusive split."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import ParamVector

log = logging.getLogger(__name__)

RACES = ("Asian", "White", "Black")
GENDERS = ("M", "F")
N_CLASSES = 7
SPLITS = ("train", "val", "test")
PARAM_FIELDS = tuple(f.name for f in fields(ParamVector))


class SchemaError(ValueError):
    """Invalid file content; ``pointer`` is a JSON pointer to the offending value."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# ---------------------------------------------------------------------------
# params.json


def params_to_dict(p: ParamVector) -> dict:
    d = {"model_dims": list(p.dims)}
    for name in PARAM_FIELDS:
        d[name] = getattr(p, name).tolist()
    return d


def _numbers(value, pointer, length=None):
    if not isinstance(value, list):
        raise SchemaError(pointer, "expected an array of numbers")
    for i, x in enumerate(value):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise SchemaError(f"{pointer}/{i}", "expected a finite number")
    if length is not None and len(value) != length:
        raise SchemaError(pointer, f"expected {length} entries, got {len(value)}")
    return np.array(value, dtype=float)


def params_from_dict(d, pointer: str = "") -> ParamVector:
    if not isinstance(d, dict):
        raise SchemaError(pointer, "expected an object")
    for name in ("model_dims",) + PARAM_FIELDS:
        if name not in d:
            raise SchemaError(f"{pointer}/{name}", f"missing field {name!r}")
    dims = d["model_dims"]
    if (not isinstance(dims, list) or len(dims) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in dims)):
        raise SchemaError(f"{pointer}/model_dims", "expected [n_beta, n_expr] positive integers")
    lengths = {"beta": dims[0], "psi_exp": dims[1], "psi_eye": 2, "theta_jaw": 3, "theta_head": 3, "cam": 3}
    vals = {name: _numbers(d[name], f"{pointer}/{name}", lengths[name]) for name in PARAM_FIELDS}
    if not vals["cam"][0] > 0:
        raise SchemaError(f"{pointer}/cam/0", "camera scale must be positive")
    return ParamVector(**vals)


def write_params(p: ParamVector, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(p), indent=2) + "\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def read_params(path) -> ParamVector:
    return params_from_dict(_load_json(path))


# ---------------------------------------------------------------------------
# affect records


@dataclass
class AffectRecord:
    sample_id: str
    valence: float
    arousal: float
    label: int
    params: ParamVector | None = None

    def __post_init__(self):
        for name in ("valence", "arousal"):
            v = float(getattr(self, name))
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{self.sample_id}: {name} {v} outside [-1, 1]")
            setattr(self, name, v)
        self.label = int(self.label)
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"{self.sample_id}: class {self.label} outside [0, {N_CLASSES})")


def write_affect_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "valence", "arousal", "class"])
        for r in records:
            w.writerow([r.sample_id, repr(r.valence), repr(r.arousal), r.label])


def read_affect_csv(path) -> list[AffectRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "valence", "arousal", "class"} - set(reader.fieldnames or ())
        if missing:
            raise SchemaError("", f"{path}: missing column(s) {sorted(missing)}")
        for i, row in enumerate(reader):
            try:
                out.append(AffectRecord(row["id"], float(row["valence"]), float(row["arousal"]), int(row["class"])))
            except ValueError as exc:
                raise SchemaError(f"/{i}", str(exc)) from None
    return out


# ---------------------------------------------------------------------------
# prediction / ground-truth record lists


def record_to_dict(sample_id, params=None, va=None, label=None) -> dict:
    d = {"id": sample_id}
    if params is not None:
        d["params"] = params_to_dict(params)
    if va is not None:
        d["valence"], d["arousal"] = float(va[0]), float(va[1])
    if label is not None:
        d["class"] = int(label)
    return d


def read_records(path) -> list[dict]:
    """List of ``{"id", "params"?, "valence"?, "arousal"?, "class"?}`` objects."""
    data = _load_json(path)
    if not isinstance(data, list):
        raise SchemaError("", "expected an array of records")
    out = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict) or "id" not in rec:
            raise SchemaError(f"/{i}/id", "missing field 'id'")
        item = {"id": str(rec["id"])}
        if "params" in rec:
            item["params"] = params_from_dict(rec["params"], f"/{i}/params")
        for k in ("valence", "arousal"):
            if k in rec:
                item[k] = float(_numbers([rec[k]], f"/{i}/{k}")[0])
        if "class" in rec:
            if not isinstance(rec["class"], int) or isinstance(rec["class"], bool):
                raise SchemaError(f"/{i}/class", "expected an integer")
            item["class"] = rec["class"]
        out.append(item)
    return out


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


def write_manifest(entries, path) -> None:
    data = {"samples": [{"id": e.sample_id, "path": e.path, "split": e.split} for e in entries]}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    data = _load_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise SchemaError("/samples", "missing array 'samples'")
    out, seen = [], set()
    for i, s in enumerate(data["samples"]):
        for key in ("id", "path", "split"):
            if not isinstance(s, dict) or not isinstance(s.get(key), str):
                raise SchemaError(f"/samples/{i}/{key}", f"missing string field {key!r}")
        if s["id"] in seen:
            raise SchemaError(f"/samples/{i}/id", f"duplicate id {s['id']!r}")
        if s["split"] not in SPLITS:
            raise SchemaError(f"/samples/{i}/split", f"expected one of {list(SPLITS)}")
        seen.add(s["id"])
        out.append(ManifestEntry(s["id"], s["path"], s["split"]))
    return out


# ---------------------------------------------------------------------------
# subjects and split


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    race: str
    gender: str
    frames: int = 0

    def __post_init__(self):
        if self.race not in RACES:
            raise ValueError(f"{self.subject_id}: race must be one of {RACES}")
        if self.gender not in GENDERS:
            raise ValueError(f"{self.subject_id}: gender must be one of {GENDERS}")

    @property
    def stratum(self) -> str:
        return f"{self.race}_{self.gender}"


def read_roster(path) -> list[SubjectMeta]:
    """CSV with columns ``id,race,gender[,frames]``."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "race", "gender"} - set(reader.fieldnames or ())
        if missing:
            raise SchemaError("", f"{path}: missing column(s) {sorted(missing)}")
        for i, row in enumerate(reader):
            try:
                out.append(SubjectMeta(row["id"], row["race"], row["gender"], int(row.get("frames") or 0)))
            except ValueError as exc:
                raise SchemaError(f"/{i}", str(exc)) from None
    return out


def stratified_split(subjects, seed: int = 0, fixed: dict | None = None) -> dict[str, list[str]]:
    """Subject-exclusive split with one val and one test subject per stratum.

    Strata with a single subject stay in train.  ``fixed`` (``{"val": [...],
    "test": [...]}``) pins the held-out subjects instead of drawing them.
    """
    subjects = list(subjects)
    if not subjects:
        raise ValueError("empty roster")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    if fixed is not None:
        val, test = list(fixed.get("val", [])), list(fixed.get("test", []))
        unknown = sorted(set(val + test) - set(ids))
        if unknown:
            raise ValueError(f"fixed assignment names unknown subjects: {unknown}")
        if set(val) & set(test):
            raise ValueError("fixed assignment puts a subject in both val and test")
    else:
        rng = np.random.default_rng(seed)
        strata: dict[str, list[str]] = {}
        for s in subjects:
            strata.setdefault(s.stratum, []).append(s.subject_id)
        val, test = [], []
        for name in sorted(strata):
            members = sorted(strata[name])
            if len(members) < 2:
                log.warning("stratum %s has %d subject(s); kept in train only", name, len(members))
                continue
            pick = rng.choice(len(members), size=2, replace=False)
            val.append(members[pick[0]])
            test.append(members[pick[1]])
    held = set(val) | set(test)
    train = sorted(i for i in ids if i not in held)
    if not train or not val or not test:
        raise ValueError(f"roster too small: train={len(train)} val={len(val)} test={len(test)}")
    return {"train": train, "val": sorted(val), "test": sorted(test)}
