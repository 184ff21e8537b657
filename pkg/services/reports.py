"""
Report Writer

JSON, JSON-lines and CSV artifacts of a run, plus markdown summaries
rendered from Jinja2 templates.
"""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Type, Union

from jinja2 import Environment, FileSystemLoader, TemplateNotFound
from pydantic import BaseModel

from models.manifest_models import ModelManifest
from models.result_models import (
    AblationRow,
    AttackRecord,
    DatasetManifest,
    ErrorRates,
    ErrorReport,
    HuntFinding,
    MetricsRecord,
    PolytopeBox,
    TightnessReport,
    VerificationRecord,
)

logger = logging.getLogger(__name__)

Record = Union[BaseModel, Dict[str, Any]]

# per-example wall-clock fields; everything else in a report is reproducible
TIMING_FIELDS = ("time_ms", "wall_time")

# record type of every JSON artifact a run can write
ARTIFACT_SCHEMAS: Dict[str, Type[BaseModel]] = {
    "metrics.jsonl": MetricsRecord,
    "attack.jsonl": AttackRecord,
    "verify.jsonl": VerificationRecord,
    "summary.json": ErrorRates,
    "tightness.json": TightnessReport,
    "polytope.jsonl": PolytopeBox,
    "hunt.jsonl": HuntFinding,
    "ablation.jsonl": AblationRow,
    "error.json": ErrorReport,
    "dataset_train.json": DatasetManifest,
    "dataset_eval.json": DatasetManifest,
    "model.json": ModelManifest,
}
SCHEMA_DIR = "schemas"


def _plain(record: Record) -> Dict[str, Any]:
    return record.model_dump(mode="json") if isinstance(record, BaseModel) else dict(record)


class ReportWriter:
    """Writes every artifact of one run below ``out_dir``"""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        templates_dir = Path(__file__).parent.parent / "templates"
        self.env = Environment(
            loader=FileSystemLoader(str(templates_dir)),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )

    def path(self, name: str) -> str:
        return str(self.out_dir / name)

    def write_json(self, name: str, record: Record) -> str:
        path = self.path(name)
        with open(path, "w") as f:
            json.dump(_plain(record), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.debug("Wrote %s", path)
        return path

    def write_jsonl(self, name: str, records: Iterable[Record]) -> str:
        path = self.path(name)
        count = 0
        with open(path, "w") as f:
            for record in records:
                f.write(json.dumps(_plain(record), sort_keys=True) + "\n")
                count += 1
        logger.info("Wrote %d records to %s", count, path)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        path = self.path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        logger.debug("Wrote %s", path)
        return path

    def write_schemas(self) -> List[str]:
        """
        JSON Schema of every record type under ``schemas/``, plus
        ``index.json`` mapping artifact names to their schema file.
        """
        directory = self.out_dir / SCHEMA_DIR
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for model in dict.fromkeys(ARTIFACT_SCHEMAS.values()):
            path = directory / f"{model.__name__}.json"
            with open(path, "w") as f:
                json.dump(model.model_json_schema(), f, indent=2, sort_keys=True)
                f.write("\n")
            paths.append(str(path))
        index = {name: f"{model.__name__}.json" for name, model in ARTIFACT_SCHEMAS.items()}
        self.write_json(os.path.join(SCHEMA_DIR, "index.json"), index)
        return paths

    def render(self, template_name: str, name: str, **context: Any) -> str:
        """Render a markdown template into ``out_dir/name``."""
        try:
            template = self.env.get_template(template_name)
        except TemplateNotFound as e:
            raise ValueError(f"Template file not found: {template_name}") from e
        path = self.path(name)
        with open(path, "w") as f:
            f.write(template.render(**context))
        return path


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def strip_timing(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Records without wall-clock fields, for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]
