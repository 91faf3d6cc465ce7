"""Run reports: canonical JSON with a published schema.

Accuracies are rounded to 4 decimals; timings are informational and the
only non-reproducible field in a report.
"""

from __future__ import annotations

import hashlib
import json

REPORT_SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "schema_version", "seed", "config_hash", "accuracy", "per_class",
        "merge_plan", "distill", "paths", "timings",
    ],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
        "accuracy": {
            "type": "object",
            "required": ["domains", "naive", "merged_buffers", "dmm"],
            "properties": {
                "domains": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "naive": {"type": "number", "minimum": 0, "maximum": 1},
                "merged_buffers": {"type": "number", "minimum": 0, "maximum": 1},
                "dmm": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "per_class": {
            "type": "object",
            "required": ["naive", "dmm"],
            "properties": {
                "naive": {"type": "array", "items": {"type": "number"}},
                "dmm": {"type": "array", "items": {"type": "number"}},
            },
        },
        "merge_plan": {"type": "object"},
        "distill": {"type": "object"},
        "paths": {"type": "object"},
        "timings": {"type": "object"},
    },
}


def round_acc(x):
    return round(float(x), 4)


def config_fingerprint(cfg_text):
    return hashlib.sha256(cfg_text.encode("utf-8")).hexdigest()[:16]


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
