"""Discrete per-cell architectures and their JSON serialization.

A genotype fixes, for each of the four intermediate nodes, exactly two
(predecessor, operation) branches. Node v's valid predecessors are the two
cell inputs (0, 1) and any earlier intermediate (2 .. v-1); the zero
operation never appears.

File format (one file holds every cell of a network):

    {"n_cells": N,
     "cells": [{"kind": "normal" | "reduction",
                "nodes": [[{"op": <canonical name>, "pred": int},
                           {"op": ..., "pred": int}], ...4 entries]} ] }
"""

from __future__ import annotations

import json

from .errors import ParseError, ValidationError
from .ops import OP_INDEX, OP_NAMES

CELL_KINDS = ("normal", "reduction")


class Genotype:
    def __init__(self, kind, nodes):
        self.kind = kind
        self.nodes = [list(map(tuple, n)) for n in nodes]
        self.validate()

    def validate(self):
        if self.kind not in CELL_KINDS:
            raise ValidationError(f"unknown cell kind {self.kind!r}")
        if len(self.nodes) != 4:
            raise ValidationError(f"genotype needs 4 nodes, has {len(self.nodes)}")
        for i, branches in enumerate(self.nodes):
            v = i + 2
            if len(branches) != 2:
                raise ValidationError(f"node {v} needs exactly 2 branches")
            preds = []
            for op, pred in branches:
                if op not in OP_INDEX:
                    raise ValidationError(f"node {v}: unknown op {op!r}")
                if op == "zero":
                    raise ValidationError(f"node {v}: zero op is not allowed")
                if not 0 <= pred < v:
                    raise ValidationError(f"node {v}: invalid predecessor {pred}")
                preds.append(pred)
            if preds[0] == preds[1]:
                raise ValidationError(f"node {v}: duplicated predecessor {preds[0]}")
        return self

    def __eq__(self, other):
        return (isinstance(other, Genotype) and self.kind == other.kind
                and self.nodes == other.nodes)

    def __repr__(self):
        return f"Genotype({self.kind}, {self.nodes})"

    def to_dict(self):
        return {"kind": self.kind,
                "nodes": [[{"op": op, "pred": pred} for op, pred in n]
                          for n in self.nodes]}

    @classmethod
    def from_dict(cls, d, where=""):
        try:
            kind = d["kind"]
            nodes = [[(b["op"], int(b["pred"])) for b in n] for n in d["nodes"]]
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed genotype{where}: missing field {e}") from e
        for n in d["nodes"]:
            for b in n:
                if b["op"] not in OP_NAMES:
                    raise ParseError(f"unknown op name {b['op']!r}{where}")
        return cls(kind, nodes)


def genotypes_to_json(genotypes):
    return json.dumps({"n_cells": len(genotypes),
                       "cells": [g.to_dict() for g in genotypes]}, indent=1)


def genotypes_from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"genotype file is not valid JSON: line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict) or "cells" not in doc:
        raise ParseError("genotype file must be an object with a 'cells' field")
    cells = doc["cells"]
    if doc.get("n_cells") != len(cells):
        raise ParseError(
            f"n_cells field {doc.get('n_cells')} does not match {len(cells)} cells")
    return [Genotype.from_dict(c, where=f" (cell {i})") for i, c in enumerate(cells)]


def save_genotypes(genotypes, path):
    with open(path, "w") as f:
        f.write(genotypes_to_json(genotypes) + "\n")


def load_genotypes(path):
    with open(path) as f:
        return genotypes_from_json(f.read())
