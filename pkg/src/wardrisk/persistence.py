"""Versioned JSON model files."""
from __future__ import annotations

import json

from .mixture import FitReport, ModelParams

__all__ = ["SCHEMA_VERSION", "ModelFileError", "model_to_json", "save_model", "load_model"]

SCHEMA_VERSION = 1


class ModelFileError(ValueError):
    pass


def model_to_json(params: ModelParams, report: FitReport | None = None, extra: dict | None = None) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "format": "wardrisk-model",
        "params": params.to_dict(),
        "fit_report": None if report is None else report.to_dict(),
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_model(path, params: ModelParams, report: FitReport | None = None, extra: dict | None = None) -> None:
    text = model_to_json(params, report, extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_model(path) -> tuple[ModelParams, FitReport | None]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not a JSON document ({exc})") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ModelFileError(f"{path}: missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ModelFileError(f"{path}: unsupported schema_version {doc['schema_version']!r}")
    try:
        params = ModelParams.from_dict(doc["params"])
        report = None if doc.get("fit_report") is None else FitReport.from_dict(doc["fit_report"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed model ({exc})") from None
    return params, report
