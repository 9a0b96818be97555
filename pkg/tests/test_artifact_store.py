"""
Run directories and structured log records.
"""

import json
import logging

import pytest
import yaml

from csst.core.config.settings import settings
from csst.core.errors import DataError
from csst.schemas.config import RunConfig
from csst.services.artifact_store import MANIFEST_NAME, RESOLVED_CONFIG_NAME, RunDirectory, sha256_file
from csst.utils.logger import JSONFormatter, StandardFormatter, get_logger


def read_manifest(path):
    return json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))


def test_run_directory_records_config_and_files(tmp_path):
    cfg = RunConfig(seed=7, output_dir=str(tmp_path / "run"))
    source = tmp_path / "input.csv"
    source.write_text("id\np1\n", encoding="utf-8")

    with RunDirectory(cfg, "generate") as run:
        run.record_input(source, "pois")
        run.record_input(tmp_path / "missing.csv", "labels")
        output = run.file("out.txt")
        output.write_text("x", encoding="utf-8")
        run.record_output("out", output)
        run.extra["note"] = 1
        get_logger().info("inside run", marker="abc")

    record = read_manifest(run.path)
    assert record["status"] == "ok"
    assert record["seed"] == 7
    assert record["config_hash"] == cfg.config_hash()
    assert record["inputs"] == {"pois": sha256_file(source)}
    assert record["outputs"] == {"out": "out.txt"}
    assert record["note"] == 1
    resolved = yaml.safe_load((run.path / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
    assert resolved["config_hash"] == cfg.config_hash()
    assert "marker=abc" in (run.path / "logs" / "csst.log").read_text(encoding="utf-8")


def test_failed_stage_is_marked(tmp_path):
    cfg = RunConfig(output_dir=str(tmp_path / "run"))
    with pytest.raises(DataError):
        with RunDirectory(cfg, "pretrain"):
            raise DataError("no rows")
    assert read_manifest(tmp_path / "run")["status"] == "failed: DataError"


def test_default_location_uses_command_and_hash(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "output_root", str(tmp_path))
    cfg = RunConfig()
    run = RunDirectory(cfg, "ablate")
    assert run.path.parent == tmp_path
    assert run.path.name.endswith(f"-ablate-{cfg.short_hash()}")


def _record(**extra):
    record = logging.LogRecord("csst", logging.INFO, __file__, 10, "step done", None, None)
    if extra:
        record.extra_data = extra
    return record


def test_json_records_carry_extras():
    payload = json.loads(JSONFormatter().format(_record(step=3, loss=0.25)))
    assert payload["message"] == "step done"
    assert payload["level"] == "INFO"
    assert (payload["step"], payload["loss"]) == (3, 0.25)


def test_standard_records_append_extras():
    line = StandardFormatter().format(_record(loss=0.123456789))
    assert line.endswith("| loss=0.123457")
    assert StandardFormatter().format(_record()).endswith("step done")


def test_logger_counts_levels():
    logger = get_logger()
    before = logger.get_metrics()
    logger.warning("counted", key="value")
    after = logger.get_metrics()
    assert after["warning_count"] == before["warning_count"] + 1
    assert after["total_logs"] == before["total_logs"] + 1
