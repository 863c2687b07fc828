"""Scenario documents: JSON schema, loading, canonical form and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .network import AmodNetwork, DemandSet, NetworkValidationError, RoadGraph, build_network

SCHEMA_VERSION = 1
DEFAULT_DELTA = 0.15
DEFAULT_BETA = 3.0
DEFAULT_EPSILON = 0.1

BUNDLED = ("two_station_symmetric", "two_station_asymmetric", "grid5x5")

_num = {"type": "number"}
SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "vertices", "roads", "stations", "demands"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "vertices": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "roads": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["id", "from", "to", "T", "C"],
            "properties": {"id": {"type": "string"}, "from": {"type": "string"}, "to": {"type": "string"},
                           "T": _num, "C": _num},
        }},
        "stations": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False,
            "required": ["id", "vertex"],
            "properties": {"id": {"type": "string"}, "vertex": {"type": "string"}},
        }},
        "demands": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["origin", "destination", "rate"],
            "properties": {"origin": {"type": "string"}, "destination": {"type": "string"}, "rate": _num},
        }},
        "rebalancing_pairs": {"type": "array", "items": {
            "type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2}},
        "bpr": {"type": "object", "additionalProperties": False,
                "properties": {"delta": _num, "beta": _num}},
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
}


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioDocument:
    data: dict
    network: AmodNetwork

    @property
    def name(self) -> str:
        return self.data.get("name", "scenario")

    @property
    def delta(self) -> float:
        return float(self.data.get("bpr", {}).get("delta", DEFAULT_DELTA))

    @property
    def beta(self) -> float:
        return float(self.data.get("bpr", {}).get("beta", DEFAULT_BETA))

    @property
    def epsilon(self) -> float:
        return float(self.data.get("epsilon", DEFAULT_EPSILON))

    def canonical_json(self) -> str:
        return canonical_json(self.data)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def canonicalize(data: dict) -> dict:
    out = dict(data)
    out["vertices"] = sorted(data["vertices"])
    out["roads"] = sorted((dict(r) for r in data["roads"]), key=lambda r: r["id"])
    out["stations"] = sorted((dict(s) for s in data["stations"]), key=lambda s: s["id"])
    out["demands"] = sorted((dict(d) for d in data["demands"]), key=lambda d: (d["origin"], d["destination"]))
    if "rebalancing_pairs" in data:
        out["rebalancing_pairs"] = sorted([list(p) for p in data["rebalancing_pairs"]])
    return out


def canonical_json(data: dict) -> str:
    return json.dumps(canonicalize(data), sort_keys=True, indent=1) + "\n"


def _network_from(data: dict) -> AmodNetwork:
    for d in data["demands"]:
        if not d["rate"] > 0:
            raise NetworkValidationError(
                f"demand ({d['origin']}, {d['destination']}, {d['rate']}) needs a positive rate")
    graph = RoadGraph.from_parts(
        data["vertices"],
        [(r["id"], r["from"], r["to"], r["T"], r["C"]) for r in data["roads"]],
        [(s["id"], s["vertex"]) for s in data["stations"]],
    )
    pairs = data.get("rebalancing_pairs")
    demands = DemandSet(
        tuple((d["origin"], d["destination"], d["rate"]) for d in data["demands"]),
        None if pairs is None else tuple(tuple(p) for p in pairs),
    )
    return build_network(graph, demands)


def parse_scenario(data: dict) -> ScenarioDocument:
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"scenario field {where}: {exc.message}") from None
    data = canonicalize(data)
    return ScenarioDocument(data, _network_from(data))


def load_scenario(path) -> ScenarioDocument:
    """Load a scenario from a path or the name of a bundled scenario."""
    text = _read(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_scenario(data)


def _read(path) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text()
    name = str(path)
    if name in BUNDLED:
        return resources.files("bcmp_amod").joinpath("data").joinpath(f"{name}.json").read_text()
    raise ScenarioError(f"no such scenario file or bundled scenario: {path}")


def bundled_path(name: str):
    return resources.files("bcmp_amod").joinpath("data").joinpath(f"{name}.json")
