"""Reading and writing m2m spaces and test-functional specs as JSON.

An m2m document looks like::

    {"points": ["a", "b"], "distance": [[0, 1], [1, 0]],
     "nu": [{"weight": 0.5, "mu": [[0, 1.0], [1, 2.0]]}]}
"""

from __future__ import annotations

import json
import math

import numpy as np

from .core import AtomicMeasure, M2MSpace, TwoLevelMeasure, validate_space
from .errors import NegativeEntry, ParseError
from .functionals import TestFunctionalSpec


def _load_json(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{what}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None


def _number(v, field: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{field}: expected a number, got {v!r}")
    x = float(v)
    if not math.isfinite(x):
        raise ParseError(f"{field}: expected a finite number, got {v!r}")
    return x


def _weight(v, field: str) -> float:
    x = _number(v, field)
    if x < 0:
        raise NegativeEntry(f"{field}: negative weight {x!r}")
    return x


def parse_m2m(text: str) -> M2MSpace:
    """Parse and validate an m2m JSON document."""
    doc = _load_json(text, "m2m file")
    if not isinstance(doc, dict):
        raise ParseError("m2m file: top level must be an object")
    for key in ("distance", "nu"):
        if key not in doc:
            raise ParseError(f"m2m file: missing field {key!r}")
    dist = doc["distance"]
    if not isinstance(dist, list) or not all(isinstance(row, list) for row in dist):
        raise ParseError("distance: expected a list of rows")
    n = len(dist)
    for i, row in enumerate(dist):
        if len(row) != n:
            raise ParseError(f"distance[{i}]: expected {n} entries, got {len(row)}")
    matrix = np.array([[_number(v, f"distance[{i}][{j}]") for j, v in enumerate(row)]
                       for i, row in enumerate(dist)], dtype=float).reshape(n, n)
    points = doc.get("points")
    if points is not None:
        if not isinstance(points, list) or len(points) != n:
            raise ParseError(f"points: expected a list of {n} labels")
        points = [str(p) for p in points]
    space = validate_space(matrix, labels=points)
    if not isinstance(doc["nu"], list):
        raise ParseError("nu: expected a list of atoms")
    atoms = []
    for k, atom in enumerate(doc["nu"]):
        where = f"nu[{k}]"
        if not isinstance(atom, dict) or "weight" not in atom or "mu" not in atom:
            raise ParseError(f"{where}: expected an object with 'weight' and 'mu'")
        a = _weight(atom["weight"], f"{where}.weight")
        if not isinstance(atom["mu"], list):
            raise ParseError(f"{where}.mu: expected a list of [index, weight] pairs")
        pairs = []
        for t, pair in enumerate(atom["mu"]):
            f = f"{where}.mu[{t}]"
            if not isinstance(pair, list) or len(pair) != 2:
                raise ParseError(f"{f}: expected [index, weight]")
            idx, w = pair
            if isinstance(idx, bool) or not isinstance(idx, int) or not 0 <= idx < n:
                raise ParseError(f"{f}: point index {idx!r} outside 0..{n - 1}")
            pairs.append((idx, _weight(w, f"{f}[1]")))
        atoms.append((a, AtomicMeasure.from_pairs(pairs)))
    return M2MSpace(space, TwoLevelMeasure.from_atoms(atoms))


def load_m2m(path) -> M2MSpace:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ParseError(f"{path}: {e.strerror}") from None
    return parse_m2m(text)


def m2m_to_dict(X: M2MSpace) -> dict:
    space = X.space
    return {
        "points": [str(p) for p in space.labels],
        "distance": space.distance.tolist(),
        "nu": [{"weight": a, "mu": [[i, w] for i, w in zip(mu.support, mu.weights)]}
               for a, mu in X.nu.atoms],
    }


def dump_m2m(X: M2MSpace) -> str:
    # repr of a Python float round-trips exactly, so json output is lossless
    return json.dumps(m2m_to_dict(X), indent=1) + "\n"


def parse_spec(text: str) -> TestFunctionalSpec:
    doc = _load_json(text, "spec file")
    if not isinstance(doc, dict):
        raise ParseError("spec file: top level must be an object")
    return TestFunctionalSpec.from_dict(doc)


def load_spec(path) -> TestFunctionalSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_spec(fh.read())
    except OSError as e:
        raise ParseError(f"{path}: {e.strerror}") from None
