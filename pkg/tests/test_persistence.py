import json

import pytest

from wardrisk.persistence import SCHEMA_VERSION, ModelFileError, load_model, model_to_json, save_model


def test_roundtrip_keeps_every_tensor(tmp_path, small_fit):
    params, report = small_fit
    path = tmp_path / "model.json"
    save_model(path, params, report, {"bic": 1.5})
    back, rep = load_model(path)
    assert back.to_dict() == params.to_dict()
    assert rep.trace == report.trace and rep.seed == report.seed
    assert json.loads(path.read_text())["extra"] == {"bic": 1.5}


def test_serialization_is_stable(small_fit):
    params, report = small_fit
    assert model_to_json(params, report) == model_to_json(params, report)


def test_model_without_report(tmp_path, small_truth):
    path = tmp_path / "truth.json"
    save_model(path, small_truth)
    back, rep = load_model(path)
    assert rep is None
    assert back.to_dict() == small_truth.to_dict()


@pytest.mark.parametrize(
    "text, match",
    [
        ("not json", "JSON"),
        ("[]", "schema_version"),
        (json.dumps({"params": {}}), "schema_version"),
        (json.dumps({"schema_version": SCHEMA_VERSION + 1, "params": {}}), "unsupported"),
        (json.dumps({"schema_version": SCHEMA_VERSION, "params": {"G": 1}}), "malformed"),
    ],
)
def test_bad_files(tmp_path, text, match):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ModelFileError, match=match):
        load_model(path)
