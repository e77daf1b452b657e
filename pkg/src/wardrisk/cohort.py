"""Patient data model, cohort file I/O and static-covariate encoding."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

__all__ = [
    "CohortFormatError",
    "InvariantViolation",
    "StreamSpec",
    "DEFAULT_STREAMS",
    "ICD9_CHAPTERS",
    "Vocabulary",
    "StaticProfile",
    "MeasurementEvent",
    "PatientRecord",
    "Cohort",
    "icd9_chapter",
    "parse_cohort",
    "write_cohort",
    "dumps_cohort",
    "export_events_csv",
    "encode_static",
    "StaticEncoder",
    "split_cohort",
    "REAL_ENDPOINT_BOUNDS",
]

COHORT_FORMAT = "wardrisk.cohort"
COHORT_VERSION = 1
REAL_ENDPOINT_BOUNDS = (4.0, 2700.0)
AGE_RANGE = (0.0, 130.0)
CATEGORICAL_FIELDS = (
    "gender",
    "admission_floor",
    "stem_cell_transplant",
    "icd9_group",
    "transfer_status",
)


class CohortFormatError(ValueError):
    """A cohort file does not match the schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class InvariantViolation(ValueError):
    """A record or cohort breaks one of its invariants."""

    def __init__(self, message: str, patient_id: str | None = None, rule: str | None = None):
        self.patient_id = patient_id
        self.rule = rule
        prefix = f"patient {patient_id!r}: " if patient_id is not None else ""
        suffix = f" [{rule}]" if rule else ""
        super().__init__(prefix + message + suffix)


@dataclass(frozen=True)
class StreamSpec:
    """One physiological stream. ``mean``/``sd`` are typical ward values used by the simulator."""

    name: str
    unit: str
    mean: float = 0.0
    sd: float = 1.0


# Vital signs then lab tests, in the order of the study's table.
DEFAULT_STREAMS: tuple[StreamSpec, ...] = (
    StreamSpec("diastolic_bp", "mmHg", 70.0, 12.0),
    StreamSpec("eye_opening", "score", 3.6, 0.6),
    StreamSpec("glasgow_coma_score", "score", 14.0, 1.5),
    StreamSpec("heart_rate", "bpm", 85.0, 15.0),
    StreamSpec("respiratory_rate", "breaths/min", 18.0, 4.0),
    StreamSpec("temperature", "degC", 36.9, 0.6),
    StreamSpec("o2_device_assistance", "level", 1.0, 1.0),
    StreamSpec("o2_saturation", "%", 96.0, 2.5),
    StreamSpec("best_motor_response", "score", 5.7, 0.7),
    StreamSpec("best_verbal_response", "score", 4.6, 0.8),
    StreamSpec("systolic_bp", "mmHg", 125.0, 20.0),
    StreamSpec("glucose", "mg/dL", 130.0, 40.0),
    StreamSpec("urea_nitrogen", "mg/dL", 22.0, 12.0),
    StreamSpec("white_blood_cell", "K/uL", 9.0, 4.0),
    StreamSpec("creatinine", "mg/dL", 1.2, 0.7),
    StreamSpec("hemoglobin", "g/dL", 11.0, 2.0),
    StreamSpec("platelet_count", "K/uL", 220.0, 90.0),
    StreamSpec("potassium", "mmol/L", 4.1, 0.5),
    StreamSpec("sodium", "mmol/L", 138.0, 4.0),
    StreamSpec("total_co2", "mmol/L", 25.0, 3.5),
    StreamSpec("chloride", "mmol/L", 103.0, 4.5),
)

# Seventeen disease chapters plus the V (supplementary) and E (external cause) codes.
ICD9_CHAPTERS: tuple[str, ...] = (
    "001-139",
    "140-239",
    "240-279",
    "280-289",
    "290-319",
    "320-389",
    "390-459",
    "460-519",
    "520-579",
    "580-629",
    "630-679",
    "680-709",
    "710-739",
    "740-759",
    "760-779",
    "780-799",
    "800-999",
    "V01-V91",
    "E000-E999",
)
_CHAPTER_UPPER = (139, 239, 279, 289, 319, 389, 459, 519, 579, 629, 679, 709, 739, 759, 779, 799, 999)


def icd9_chapter(code: str) -> str:
    """Map a raw ICD-9 code such as ``"428.0"``, ``"V45.81"`` or ``"E849"`` to its chapter label."""
    code = code.strip().upper()
    if not code:
        raise ValueError("empty ICD-9 code")
    if code[0] == "V":
        return ICD9_CHAPTERS[17]
    if code[0] == "E":
        return ICD9_CHAPTERS[18]
    try:
        head = int(code.split(".")[0])
    except ValueError:
        raise ValueError(f"unrecognised ICD-9 code {code!r}") from None
    for label, upper in zip(ICD9_CHAPTERS, _CHAPTER_UPPER):
        if 1 <= head <= upper:
            return label
    raise ValueError(f"ICD-9 code out of range: {code!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Admissible values of each categorical static field."""

    gender: tuple[str, ...] = ("F", "M")
    admission_floor: tuple[str, ...] = (
        "cardiac_observation",
        "cardiothoracic",
        "hematology_stem_cell",
        "liver_transplant",
        "general_medicine",
    )
    stem_cell_transplant: tuple[bool, ...] = (False, True)
    icd9_group: tuple[str, ...] = ICD9_CHAPTERS
    transfer_status: tuple[str, ...] = ("emergency_department", "direct_admission", "outside_transfer")

    def __post_init__(self):
        for name in CATEGORICAL_FIELDS:
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ValueError(f"vocabulary field {name!r} is empty")
            if len(set(values)) != len(values):
                raise ValueError(f"vocabulary field {name!r} has duplicate values")
        if self.stem_cell_transplant != (False, True):
            raise ValueError("stem_cell_transplant vocabulary must be (False, True)")

    def cardinalities(self) -> dict[str, int]:
        return {name: len(getattr(self, name)) for name in CATEGORICAL_FIELDS}

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in CATEGORICAL_FIELDS}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocabulary":
        missing = [name for name in CATEGORICAL_FIELDS if name not in data]
        if missing:
            raise ValueError(f"vocabulary lacks fields {missing}")
        return cls(**{name: tuple(data[name]) for name in CATEGORICAL_FIELDS})


@dataclass(frozen=True)
class StaticProfile:
    age: float
    gender: str
    admission_floor: str
    stem_cell_transplant: bool
    icd9_group: str
    transfer_status: str

    def to_dict(self) -> dict:
        return {
            "age": float(self.age),
            "gender": self.gender,
            "admission_floor": self.admission_floor,
            "stem_cell_transplant": bool(self.stem_cell_transplant),
            "icd9_group": self.icd9_group,
            "transfer_status": self.transfer_status,
        }

    def check(self, vocabulary: Vocabulary) -> None:
        if not (math.isfinite(self.age) and AGE_RANGE[0] <= self.age <= AGE_RANGE[1]):
            raise ValueError(f"age {self.age!r} outside {AGE_RANGE}")
        for name in CATEGORICAL_FIELDS:
            value = getattr(self, name)
            if value not in getattr(vocabulary, name):
                raise ValueError(f"{name}={value!r} not in vocabulary")


class MeasurementEvent(NamedTuple):
    stream_id: int
    time: float
    value: float


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One ward stay: static profile, time-sorted measurements, outcome and endpoint.

    Measurements are held column-wise (``streams``, ``times``, ``values``);
    ``events`` gives the row view.
    """

    id: str
    profile: StaticProfile
    streams: np.ndarray
    times: np.ndarray
    values: np.ndarray
    outcome: int
    endpoint_time: float
    admission_time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "streams", _frozen(self.streams, np.int64))
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "endpoint_time", float(self.endpoint_time))
        pid = self.id
        if not (len(self.streams) == len(self.times) == len(self.values)):
            raise InvariantViolation("event columns have different lengths", pid, "events")
        if self.outcome not in (0, 1):
            raise InvariantViolation(f"outcome must be 0 or 1, got {self.outcome!r}", pid, "outcome")
        if not math.isfinite(self.endpoint_time) or self.endpoint_time < 0:
            raise InvariantViolation("endpoint_time must be finite and non-negative", pid, "endpoint_time")
        if len(self.times):
            if not np.all(np.isfinite(self.times)) or self.times.min() < 0:
                raise InvariantViolation("event times must be finite and >= 0", pid, "event.time")
            if not np.all(np.isfinite(self.values)):
                raise InvariantViolation("event values must be finite", pid, "event.value")
            if self.streams.min() < 0:
                raise InvariantViolation("negative stream id", pid, "event.stream_id")
            dt = np.diff(self.times)
            same = dt == 0
            if np.any(dt < 0) or np.any(np.diff(self.streams)[same] < 0):
                raise InvariantViolation("events not sorted by (time, stream_id)", pid, "sorted")
            if self.times[-1] > self.endpoint_time:
                raise InvariantViolation("event after endpoint_time", pid, "endpoint_time")

    @classmethod
    def from_events(cls, id, profile, events: Iterable, outcome, endpoint_time, admission_time=None):
        rows = [tuple(e) for e in events]
        if rows:
            s, t, v = zip(*rows)
        else:
            s, t, v = (), (), ()
        return cls(id, profile, np.asarray(s, dtype=np.int64), t, v, outcome, endpoint_time, admission_time)

    @property
    def events(self) -> list[MeasurementEvent]:
        return [MeasurementEvent(int(s), float(t), float(v)) for s, t, v in zip(self.streams, self.times, self.values)]

    @property
    def n_events(self) -> int:
        return len(self.times)

    def truncated(self, t: float) -> "PatientRecord":
        """Prefix of the stay: events with time <= t."""
        m = int(np.searchsorted(self.times, t, side="right"))
        return PatientRecord(
            self.id, self.profile, self.streams[:m], self.times[:m], self.values[:m],
            self.outcome, max(t, float(self.times[m - 1]) if m else 0.0), self.admission_time,
        )

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.profile == other.profile
            and self.outcome == other.outcome
            and self.endpoint_time == other.endpoint_time
            and self.admission_time == other.admission_time
            and np.array_equal(self.streams, other.streams)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "profile": self.profile.to_dict(),
            "events": [[int(s), float(t), float(v)] for s, t, v in zip(self.streams, self.times, self.values)],
            "outcome": int(self.outcome),
            "endpoint_time": float(self.endpoint_time),
        }
        if self.admission_time is not None:
            out["admission_time"] = float(self.admission_time)
        return out


@dataclass(frozen=True, eq=True)
class Cohort:
    patients: tuple[PatientRecord, ...]
    streams: tuple[StreamSpec, ...] = DEFAULT_STREAMS
    vocabulary: Vocabulary = field(default_factory=Vocabulary)
    endpoint_bounds: tuple[float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "streams", tuple(self.streams))
        D = len(self.streams)
        if D == 0:
            raise InvariantViolation("stream catalog is empty", rule="stream_catalog")
        seen = set()
        for rec in self.patients:
            if rec.id in seen:
                raise InvariantViolation("duplicate patient id", rec.id, "unique_ids")
            seen.add(rec.id)
            if len(rec.streams) and rec.streams.max() >= D:
                raise InvariantViolation(f"stream id >= D={D}", rec.id, "stream_catalog")
            try:
                rec.profile.check(self.vocabulary)
            except ValueError as exc:
                raise InvariantViolation(str(exc), rec.id, "profile") from None
            if self.endpoint_bounds is not None:
                lo, hi = self.endpoint_bounds
                if not lo <= rec.endpoint_time <= hi:
                    raise InvariantViolation(
                        f"endpoint_time {rec.endpoint_time} outside [{lo}, {hi}]", rec.id, "endpoint_bounds"
                    )

    @property
    def D(self) -> int:
        return len(self.streams)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def labels(self) -> np.ndarray:
        return np.array([p.outcome for p in self.patients], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return Cohort(tuple(self.patients[i] for i in indices), self.streams, self.vocabulary)

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.id: p for p in self.patients}

    def header(self) -> dict:
        return {
            "format": COHORT_FORMAT,
            "version": COHORT_VERSION,
            "stream_catalog": [{"name": s.name, "unit": s.unit, "mean": s.mean, "sd": s.sd} for s in self.streams],
            "vocabulary": self.vocabulary.to_dict(),
        }


# ---------------------------------------------------------------------------
# file I/O


def dumps_cohort(cohort: Cohort) -> str:
    lines = [json.dumps(cohort.header(), sort_keys=True)]
    lines.extend(json.dumps(p.to_dict(), sort_keys=True) for p in cohort.patients)
    return "\n".join(lines) + "\n"


def write_cohort(cohort: Cohort, path) -> None:
    Path(path).write_text(dumps_cohort(cohort))


def _require(obj: Mapping, key: str, line: int, kinds):
    if key not in obj:
        raise CohortFormatError("missing", line, key)
    kinds = kinds if isinstance(kinds, tuple) else (kinds,)
    value = obj[key]
    if (isinstance(value, bool) and bool not in kinds) or not isinstance(value, kinds):
        raise CohortFormatError(f"wrong type {type(value).__name__}", line, key)
    return value


def _parse_header(obj, line: int) -> tuple[tuple[StreamSpec, ...], Vocabulary]:
    if obj.get("format") != COHORT_FORMAT:
        raise CohortFormatError(f"expected format {COHORT_FORMAT!r}", line, "format")
    if obj.get("version") != COHORT_VERSION:
        raise CohortFormatError(f"unsupported version {obj.get('version')!r}", line, "version")
    catalog = _require(obj, "stream_catalog", line, list)
    streams = []
    for i, entry in enumerate(catalog):
        if not isinstance(entry, dict) or "name" not in entry or "unit" not in entry:
            raise CohortFormatError("entry needs name and unit", line, f"stream_catalog[{i}]")
        streams.append(
            StreamSpec(str(entry["name"]), str(entry["unit"]), float(entry.get("mean", 0.0)), float(entry.get("sd", 1.0)))
        )
    try:
        vocabulary = Vocabulary.from_dict(_require(obj, "vocabulary", line, dict))
    except (TypeError, ValueError) as exc:
        raise CohortFormatError(str(exc), line, "vocabulary") from None
    return tuple(streams), vocabulary


def _parse_patient(obj, line: int) -> PatientRecord:
    pid = _require(obj, "id", line, str)
    prof = _require(obj, "profile", line, dict)
    try:
        profile = StaticProfile(
            age=float(_require(prof, "age", line, (int, float))),
            gender=_require(prof, "gender", line, str),
            admission_floor=_require(prof, "admission_floor", line, str),
            stem_cell_transplant=_require(prof, "stem_cell_transplant", line, bool),
            icd9_group=_require(prof, "icd9_group", line, str),
            transfer_status=_require(prof, "transfer_status", line, str),
        )
    except CohortFormatError as exc:
        raise CohortFormatError(str(exc).split(": ", 1)[-1], line, f"profile.{exc.field}") from None
    events = _require(obj, "events", line, list)
    for j, ev in enumerate(events):
        if (
            not isinstance(ev, list)
            or len(ev) != 3
            or not isinstance(ev[0], int)
            or isinstance(ev[0], bool)
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in ev[1:])
        ):
            raise CohortFormatError("expected [stream_id, time, value]", line, f"events[{j}]")
    outcome = _require(obj, "outcome", line, int)
    endpoint = float(_require(obj, "endpoint_time", line, (int, float)))
    admission = obj.get("admission_time")
    if admission is not None and not isinstance(admission, (int, float)):
        raise CohortFormatError("wrong type", line, "admission_time")
    return PatientRecord.from_events(
        pid, profile, events, outcome, endpoint, None if admission is None else float(admission)
    )


def parse_cohort(path, endpoint_bounds: tuple[float, float] | None = None) -> Cohort:
    """Read and validate a newline-delimited JSON cohort file.

    Raises ``OSError`` on I/O failure, :class:`CohortFormatError` on schema
    problems and :class:`InvariantViolation` when a record breaks a rule.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise CohortFormatError("missing header line", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"invalid JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict):
        raise CohortFormatError("header must be an object", 1)
    streams, vocabulary = _parse_header(header, 1)
    patients = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise CohortFormatError("patient line must be an object", lineno)
        patients.append(_parse_patient(obj, lineno))
    return Cohort(tuple(patients), streams, vocabulary, endpoint_bounds)


def export_events_csv(cohort: Cohort, path) -> None:
    """Flat ``patient_id,stream,time,value`` export for inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "stream", "time", "value"])
        for rec in cohort.patients:
            for s, t, v in zip(rec.streams, rec.times, rec.values):
                writer.writerow([rec.id, cohort.streams[s].name, repr(float(t)), repr(float(v))])


# ---------------------------------------------------------------------------
# static encoding


def encode_static(profile: StaticProfile, vocabulary: Vocabulary, age_mean: float = 0.0, age_scale: float = 1.0) -> np.ndarray:
    """Encode a profile as ``[1, standardized age, one-hot blocks...]``.

    Blocks follow the order of :data:`CATEGORICAL_FIELDS`. Unknown categorical
    values raise ``ValueError``.
    """
    card = vocabulary.cardinalities()
    out = np.zeros(2 + sum(card.values()))
    out[0] = 1.0
    out[1] = (float(profile.age) - age_mean) / age_scale
    offset = 2
    for name in CATEGORICAL_FIELDS:
        values = getattr(vocabulary, name)
        value = getattr(profile, name)
        try:
            out[offset + values.index(value)] = 1.0
        except ValueError:
            raise ValueError(f"unknown {name} value {value!r}") from None
        offset += len(values)
    return out


class StaticEncoder(TransformerMixin, BaseEstimator):
    """Learns the age standardization on training profiles and one-hot encodes the rest."""

    def __init__(self, vocabulary: Vocabulary | None = None):
        self.vocabulary = vocabulary

    def _vocab(self) -> Vocabulary:
        return self.vocabulary if self.vocabulary is not None else Vocabulary()

    def fit(self, X: Sequence[StaticProfile], y=None):
        ages = np.array([p.age for p in X], dtype=float)
        if len(ages) == 0:
            self.age_mean_, self.age_scale_ = 0.0, 1.0
        else:
            self.age_mean_ = float(ages.mean())
            sd = float(ages.std())
            self.age_scale_ = sd if sd > 0 else 1.0
        self.n_features_out_ = 2 + sum(self._vocab().cardinalities().values())
        return self

    def transform(self, X: Sequence[StaticProfile]) -> np.ndarray:
        if not hasattr(self, "age_mean_"):
            raise NotFittedError("StaticEncoder is not fitted")
        vocab = self._vocab()
        if len(X) == 0:
            return np.zeros((0, self.n_features_out_))
        return np.vstack([encode_static(p, vocab, self.age_mean_, self.age_scale_) for p in X])

    def block_slices(self) -> dict[str, slice]:
        slices = {"intercept": slice(0, 1), "age": slice(1, 2)}
        offset = 2
        for name, n in self._vocab().cardinalities().items():
            slices[name] = slice(offset, offset + n)
            offset += n
        return slices

    def get_feature_names_out(self, input_features=None):
        vocab = self._vocab()
        names = ["intercept", "age"]
        for name in CATEGORICAL_FIELDS:
            names.extend(f"{name}={v}" for v in getattr(vocab, name))
        return np.array(names, dtype=object)

    @classmethod
    def from_stats(cls, vocabulary: Vocabulary, age_mean: float, age_scale: float) -> "StaticEncoder":
        enc = cls(vocabulary)
        enc.age_mean_ = float(age_mean)
        enc.age_scale_ = float(age_scale)
        enc.n_features_out_ = 2 + sum(vocabulary.cardinalities().values())
        return enc


# ---------------------------------------------------------------------------
# splitting


def split_cohort(
    cohort: Cohort,
    *,
    fraction: float | None = None,
    cutoff: float | None = None,
    seed: int = 0,
) -> tuple[Cohort, Cohort]:
    """Partition a cohort into (train, test).

    Give exactly one of ``fraction`` (seeded random share assigned to train)
    or ``cutoff`` (patients admitted before the cutoff train; records without
    ``admission_time`` use their position in the file).
    """
    if (fraction is None) == (cutoff is None):
        raise ValueError("give exactly one of fraction or cutoff")
    n = len(cohort)
    if fraction is not None:
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        order = np.random.default_rng(seed).permutation(n)
        n_train = int(round(fraction * n))
        train_idx = np.sort(order[:n_train])
        test_idx = np.sort(order[n_train:])
    else:
        stamps = np.array(
            [p.admission_time if p.admission_time is not None else float(i) for i, p in enumerate(cohort.patients)],
            dtype=float,
        )
        mask = stamps < cutoff
        train_idx = np.flatnonzero(mask)
        test_idx = np.flatnonzero(~mask)
        if n and (mask.all() or not mask.any()):
            warnings.warn(f"cutoff {cutoff} outside the admission range; one side of the split is empty", stacklevel=2)
    return cohort.subset(train_idx), cohort.subset(test_idx)
