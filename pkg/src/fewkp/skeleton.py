"""Skeleton definition (edges, parts, flip permutation) and its JSON file.

File schema (JSON object)::

    {
      "K": 8,                          # keypoint count
      "names": ["head", ...],          # optional, K strings
      "edges": [[0, 1], ...],          # linked keypoint pairs, i != j
      "parts": [[0, 1, 2], ...],       # keypoint subsets for part alignment
      "flip_permutation": [0, 1, 3, 2, ...],  # label of each keypoint after mirroring
      "whole_part_weight": 0.1,        # weight of the implicit all-keypoints part
      "chains": [[...], ...]           # optional ordered lists for the smoothness term
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class SkeletonError(ValueError):
    pass


@dataclass
class Skeleton:
    K: int
    edges: list[tuple[int, int]]
    parts: list[list[int]]
    flip_permutation: list[int]
    whole_part_weight: float = 0.1
    names: list[str] = field(default_factory=list)
    chains: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.edges = [tuple(int(v) for v in e) for e in self.edges]
        self.parts = [[int(v) for v in p] for p in self.parts]
        self.flip_permutation = [int(v) for v in self.flip_permutation]
        self.chains = [[int(v) for v in c] for c in self.chains]
        self.validate()

    def validate(self) -> None:
        k = self.K
        if not isinstance(k, int) or k <= 0:
            raise SkeletonError(f"K must be a positive integer, got {k!r}")
        for n, e in enumerate(self.edges):
            if len(e) != 2:
                raise SkeletonError(f"edges[{n}] must be a pair, got {e!r}")
            i, j = e
            if i == j:
                raise SkeletonError(f"edges[{n}] links keypoint {i} to itself")
            if not (0 <= i < k and 0 <= j < k):
                raise SkeletonError(f"edges[{n}] = {e!r} has index outside [0, {k})")
        for n, p in enumerate(self.parts):
            if not p:
                raise SkeletonError(f"parts[{n}] is empty")
            if any(not 0 <= v < k for v in p):
                raise SkeletonError(f"parts[{n}] has index outside [0, {k})")
            if len(set(p)) != len(p):
                raise SkeletonError(f"parts[{n}] has repeated indices")
        if sorted(self.flip_permutation) != list(range(k)):
            raise SkeletonError("flip_permutation must be a permutation of range(K)")
        if any(self.flip_permutation[self.flip_permutation[i]] != i for i in range(k)):
            raise SkeletonError("flip_permutation must be an involution (mirroring twice is identity)")
        if not self.whole_part_weight >= 0:
            raise SkeletonError("whole_part_weight must be >= 0")
        if self.names and len(self.names) != k:
            raise SkeletonError(f"names has {len(self.names)} entries, expected {k}")
        for n, c in enumerate(self.chains):
            if len(c) < 3:
                raise SkeletonError(f"chains[{n}] needs at least 3 keypoints")
            if any(not 0 <= v < k for v in c):
                raise SkeletonError(f"chains[{n}] has index outside [0, {k})")

    def all_parts(self) -> list[tuple[list[int], float]]:
        """User parts (weight 1) followed by the whole object (whole_part_weight)."""
        return [(p, 1.0) for p in self.parts] + [(list(range(self.K)), self.whole_part_weight)]

    def to_dict(self) -> dict:
        d = {
            "K": self.K,
            "names": list(self.names),
            "edges": [list(e) for e in self.edges],
            "parts": [list(p) for p in self.parts],
            "flip_permutation": list(self.flip_permutation),
            "whole_part_weight": self.whole_part_weight,
        }
        if self.chains:
            d["chains"] = [list(c) for c in self.chains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        if not isinstance(d, dict):
            raise SkeletonError("skeleton document must be a JSON object")
        missing = [k for k in ("K", "edges", "parts", "flip_permutation") if k not in d]
        if missing:
            raise SkeletonError(f"skeleton missing required field(s): {', '.join(missing)}")
        unknown = set(d) - {"K", "names", "edges", "parts", "flip_permutation", "whole_part_weight", "chains"}
        if unknown:
            raise SkeletonError(f"skeleton has unknown field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(
                K=d["K"],
                edges=d["edges"],
                parts=d["parts"],
                flip_permutation=d["flip_permutation"],
                whole_part_weight=float(d.get("whole_part_weight", 0.1)),
                names=list(d.get("names", [])),
                chains=d.get("chains", []),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, SkeletonError):
                raise
            raise SkeletonError(f"malformed skeleton: {e}") from e


def save_skeleton(skel: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=2) + "\n")


def load_skeleton(path) -> Skeleton:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SkeletonError(f"{path}: not valid JSON ({e})") from e
    return Skeleton.from_dict(d)
