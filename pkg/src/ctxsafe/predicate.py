"""Predicates: a spatial operator applied to a semantic class, e.g. ``AROUND(wet_floor_sign)``."""

from __future__ import annotations

import re
from dataclasses import dataclass

OPERATORS = ("ON", "NEAR", "AROUND", "BETWEEN")

SURFACE_CATEGORIES = ("navigable_surface", "non_navigable_surface")
CATEGORIES = (
    "metric_obstacle",
    "hazard_indicator",
    "social_zone",
    "semantic_barrier",
) + SURFACE_CATEGORIES

_PATTERN = re.compile(r"^\s*([A-Za-z]+)\s*\(\s*([A-Za-z0-9_\-]+)\s*\)\s*$")


@dataclass(frozen=True, order=True)
class Predicate:
    operator: str
    class_label: str

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown spatial operator {self.operator!r}; expected one of {OPERATORS}")
        if not self.class_label or "," in self.class_label:
            # BETWEEN (and every other operator) takes exactly one class
            raise ValueError(f"predicate takes exactly one class, got {self.class_label!r}")

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        match = _PATTERN.match(text)
        if match is None:
            raise ValueError(f"cannot parse predicate {text!r}; expected OPERATOR(class)")
        return cls(match.group(1).upper(), match.group(2))

    def __str__(self) -> str:
        return f"{self.operator}({self.class_label})"


def is_safe_predicate(pred: Predicate, category: str) -> bool:
    """Polarity of a scripted predicate.

    Only ``ON`` over a navigable surface marks space as safe; every other
    operator (and ``ON`` over a non-navigable surface) marks it unsafe.
    """
    return pred.operator == "ON" and category == "navigable_surface"
