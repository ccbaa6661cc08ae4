"""Scene-graph triplets and their deterministic text linearization.

Graphs are small webs of (subject, predicate, object) relations over labeled
regions. Downstream they become one text string fed to the text expert, so
the linearization must be canonical: the same graph always yields the same
string regardless of the order relations arrived in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import RecordParseError, ValidationError


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[str, ...]
    relations: tuple[tuple[int, str, int], ...] = field(default_factory=tuple)
    allow_self_loops: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "relations", tuple(tuple(r) for r in self.relations))
        n = len(self.objects)
        for label in self.objects:
            if not label:
                raise ValidationError("object labels must be non-empty")
        for subj, pred, obj in self.relations:
            if not (0 <= subj < n and 0 <= obj < n):
                raise ValidationError(
                    f"relation ({subj}, {pred!r}, {obj}) references a missing object "
                    f"(graph has {n} objects)"
                )
            if not pred:
                raise ValidationError("predicate must be non-empty")
            if subj == obj and not self.allow_self_loops:
                raise ValidationError(f"self-loop on object {subj} ({self.objects[subj]!r})")


def parse_scene_graph(text: str, line: int | None = None) -> SceneGraph:
    """Parse one serialized graph record: {"objects": [...], "relations": [[s, p, o], ...]}."""
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as e:
        raise RecordParseError(f"bad scene-graph record: {e}", line=line) from e
    if not isinstance(rec, dict) or "objects" not in rec or "relations" not in rec:
        raise RecordParseError("scene-graph record needs 'objects' and 'relations'", line=line)
    try:
        return SceneGraph(
            objects=tuple(str(o) for o in rec["objects"]),
            relations=tuple((int(s), str(p), int(o)) for s, p, o in rec["relations"]),
        )
    except (TypeError, ValueError) as e:
        raise RecordParseError(f"malformed relation list: {e}", line=line) from e


def serialize_scene_graph(graph: SceneGraph) -> str:
    return json.dumps({
        "objects": list(graph.objects),
        "relations": [list(r) for r in graph.relations],
    })


def linearize(graph: SceneGraph) -> str:
    """Render the graph as '. '-joined "subject predicate object" phrases.

    Phrases are sorted lexicographically by (subject label, predicate,
    object label) so linearization is invariant to relation order.
    """
    phrases = sorted(
        (graph.objects[s], p, graph.objects[o]) for s, p, o in graph.relations
    )
    return ". ".join(f"{s} {p} {o}" for s, p, o in phrases)


def read_graph_manifest(fp) -> dict[str, SceneGraph]:
    """Read a line-delimited manifest of {"key": ..., "objects": ..., "relations": ...}."""
    graphs: dict[str, SceneGraph] = {}
    for lineno, raw in enumerate(fp, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
            key = rec["key"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise RecordParseError(f"bad graph manifest record: {e}", line=lineno) from e
        graphs[key] = parse_scene_graph(
            json.dumps({"objects": rec["objects"], "relations": rec["relations"]}),
            line=lineno,
        )
    return graphs
