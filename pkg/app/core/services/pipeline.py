from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from app.core.config import get_logger
from app.core.errors import CohortFileError, ConfigError
from app.core.models.cohort_models import Subject

logger = get_logger()

SUBJECTS_FILE = "subjects.csv"
OBSERVATIONS_FILE = "observations.csv"
SIDECAR_FILE = "cohort.json"
INTERVAL_COLUMNS: tuple[str, ...] = ("l_h", "r_h", "l_v", "r_v")
OBSERVATION_COLUMNS: tuple[str, ...] = ("id", "t", "y_raw")
INF_TOKENS = frozenset({"inf", "+inf", "infinity", "+infinity"})


class CohortSidecar(BaseModel):
    model_config = ConfigDict(frozen=True)

    covariate_names: tuple[str, ...] = ()
    outcome_transform: Literal["sqrt", "identity"] = "sqrt"
    T: float = Field(default=2190.0, gt=0)
    date_origin: str | None = None

    def subject_columns(self) -> list[str]:
        return ["id", "z", *self.covariate_names, *INTERVAL_COLUMNS]


def parse_day(value: Any, date_origin: str | None = None, allow_inf: bool = False) -> float:
    """Day offset from a number, the ``inf`` sentinel, or an ISO-8601 date when an origin is given."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    text = str(value).strip()
    if text.lower() in INF_TOKENS:
        if not allow_inf:
            raise ValueError("'inf' is only allowed for r_v")
        return math.inf
    try:
        return float(text)
    except ValueError:
        pass
    if date_origin is None:
        raise ValueError(f"'{text}' is not a day value")
    try:
        moment = pd.Timestamp(text)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"'{text}' is neither a day value nor an ISO-8601 date") from exc
    return float((moment - pd.Timestamp(date_origin)) / pd.Timedelta(days=1))


class SubjectRow(BaseModel):
    id: str = Field(min_length=1)
    z: int = Field(ge=0, le=1)
    x_star: tuple[float, ...] = ()
    l_h: float
    r_h: float
    l_v: float
    r_v: float

    @field_validator("id", mode="before")
    @classmethod
    def _strip(cls, value: Any) -> Any:
        return value.strip() if isinstance(value, str) else value

    @field_validator(*INTERVAL_COLUMNS, mode="before")
    @classmethod
    def _day_value(cls, value: Any, info: ValidationInfo) -> float:
        origin = (info.context or {}).get("date_origin")
        return parse_day(value, origin, allow_inf=info.field_name == "r_v")


class ObservationRow(BaseModel):
    id: str = Field(min_length=1)
    t: float
    y_raw: float

    @field_validator("id", mode="before")
    @classmethod
    def _strip(cls, value: Any) -> Any:
        return value.strip() if isinstance(value, str) else value

    @field_validator("t", mode="before")
    @classmethod
    def _day_value(cls, value: Any, info: ValidationInfo) -> float:
        return parse_day(value, (info.context or {}).get("date_origin"))


@dataclass(frozen=True, slots=True)
class CohortFile:
    """Subjects on the analysis scale plus the raw outcomes they were derived from."""

    subjects: tuple[Subject, ...]
    raw_outcomes: tuple[tuple[float, ...], ...]
    sidecar: CohortSidecar

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.sidecar.covariate_names


def apply_transform(raw: np.ndarray, transform: str) -> np.ndarray:
    values = np.asarray(raw, dtype=float)
    if transform == "sqrt":
        return np.sqrt(values)
    return values.copy()


def _row_error(file: str, row: int, exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        field = ".".join(str(item) for item in error.get("loc", ())) or "row"
        parts.append(f"{field}: {error.get('msg')}")
    return f"{file} row {row}: " + "; ".join(parts)


def _read_table(path: Path, expected: Sequence[str]) -> pd.DataFrame:
    if not path.is_file():
        raise CohortFileError(f"Cohort file '{path}' does not exist.")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise CohortFileError(f"Cannot parse '{path}': {exc}") from exc
    if list(frame.columns) != list(expected):
        raise CohortFileError(f"'{path.name}' must have header {list(expected)}, found {list(frame.columns)}.")
    return frame


def load_sidecar(path: Path) -> CohortSidecar:
    if not path.is_file():
        raise CohortFileError(f"Sidecar '{path}' does not exist.")
    try:
        return CohortSidecar.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise CohortFileError(f"Sidecar '{path}' is not valid JSON: {exc}") from exc
    except ValidationError as exc:
        raise CohortFileError(f"Invalid sidecar '{path}': {exc.errors()}") from exc


def load_cohort(directory: str | Path) -> CohortFile:
    """Read subjects.csv, observations.csv and cohort.json; every problem is reported with its row."""
    root = Path(directory)
    sidecar = load_sidecar(root / SIDECAR_FILE)
    context = {"date_origin": sidecar.date_origin}
    subject_frame = _read_table(root / SUBJECTS_FILE, sidecar.subject_columns())
    observation_frame = _read_table(root / OBSERVATIONS_FILE, OBSERVATION_COLUMNS)

    errors: list[str] = []
    subject_rows: list[SubjectRow] = []
    for position, record in enumerate(subject_frame.to_dict(orient="records")):
        payload = {
            "id": record["id"],
            "z": record["z"],
            "x_star": tuple(record[name] for name in sidecar.covariate_names),
            **{name: record[name] for name in INTERVAL_COLUMNS},
        }
        try:
            subject_rows.append(SubjectRow.model_validate(payload, context=context))
        except ValidationError as exc:
            errors.append(_row_error(SUBJECTS_FILE, position + 2, exc))

    known = {row.id: k for k, row in enumerate(subject_rows)}
    times: list[list[float]] = [[] for _ in subject_rows]
    raw: list[list[float]] = [[] for _ in subject_rows]
    for position, record in enumerate(observation_frame.to_dict(orient="records")):
        try:
            row = ObservationRow.model_validate(record, context=context)
        except ValidationError as exc:
            errors.append(_row_error(OBSERVATIONS_FILE, position + 2, exc))
            continue
        if row.id not in known:
            errors.append(f"{OBSERVATIONS_FILE} row {position + 2}: unknown subject id '{row.id}'.")
            continue
        if sidecar.outcome_transform == "sqrt" and row.y_raw < 0:
            errors.append(f"{OBSERVATIONS_FILE} row {position + 2}: y_raw must be >= 0 for the sqrt transform.")
            continue
        times[known[row.id]].append(row.t)
        raw[known[row.id]].append(row.y_raw)

    if errors:
        raise CohortFileError("; ".join(errors))

    subjects: list[Subject] = []
    for k, row in enumerate(subject_rows):
        outcomes = apply_transform(np.asarray(raw[k]), sidecar.outcome_transform)
        subjects.append(
            Subject(
                id=row.id,
                z=row.z,
                x_star=row.x_star,
                l_h=row.l_h,
                r_h=row.r_h,
                l_v=row.l_v,
                r_v=row.r_v,
                obs_t=tuple(times[k]),
                obs_y=tuple(float(value) for value in outcomes),
            )
        )
    logger.info("Loaded %d subjects and %d observations from %s.", len(subjects), len(observation_frame), root)
    return CohortFile(
        subjects=tuple(subjects),
        raw_outcomes=tuple(tuple(values) for values in raw),
        sidecar=sidecar,
    )


def _day_text(value: float) -> str:
    return "inf" if value == math.inf else repr(float(value))


def write_cohort(cohort: CohortFile, out_dir: str | Path) -> list[Path]:
    """Write the two CSV tables and the sidecar; times are written as day offsets."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    sidecar = cohort.sidecar.model_copy(update={"date_origin": None})

    subject_records = []
    observation_records = []
    for subject, raw in zip(cohort.subjects, cohort.raw_outcomes):
        record = {"id": subject.id, "z": str(subject.z)}
        record.update({name: repr(float(value)) for name, value in zip(sidecar.covariate_names, subject.x_star)})
        record.update({name: _day_text(getattr(subject, name)) for name in INTERVAL_COLUMNS})
        subject_records.append(record)
        for t, y_raw in zip(subject.obs_t, raw):
            observation_records.append({"id": subject.id, "t": repr(float(t)), "y_raw": repr(float(y_raw))})

    paths = [root / SUBJECTS_FILE, root / OBSERVATIONS_FILE, root / SIDECAR_FILE]
    pd.DataFrame(subject_records, columns=sidecar.subject_columns()).to_csv(paths[0], index=False)
    pd.DataFrame(observation_records, columns=list(OBSERVATION_COLUMNS)).to_csv(paths[1], index=False)
    paths[2].write_text(json.dumps(sidecar.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def widen_intervals(subjects: Sequence[Subject], global_left: float | None = None) -> list[Subject]:
    """Replace every l_h by one common left endpoint; defaults to the earliest reported l_h."""
    if not subjects:
        return []
    left = min(subject.l_h for subject in subjects) if global_left is None else float(global_left)
    offending = [subject.id for subject in subjects if not left < subject.r_h]
    if offending:
        raise ConfigError(
            f"global_left={left} is not below r_h for {len(offending)} subject(s), first '{offending[0]}'."
        )
    return [subject.model_copy(update={"l_h": left}) for subject in subjects]
