"""Newline-delimited JSON persistence for problems, expert records, and
evaluation results, with manifest sidecars and streaming readers.

Floats are serialized through Python's repr (shortest round-trip), so
write -> read is bit-exact and files are byte-identical across platforms.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import CorruptRecord, VersionMismatch
from .geometry import Pose
from .scene import Scene
from .scenegen import PlanningProblem
from .trajectory import Trajectory, ValidationReport

FORMAT_VERSION = 1
TOOL_VERSION = "0.1.0"


def _pose_to_dict(pose):
    return {"rotation": pose.rotation.reshape(-1).tolist(),
            "translation": pose.translation.tolist()}


def _pose_from_dict(d):
    return Pose(np.array(d["rotation"], dtype=float).reshape(3, 3),
                np.array(d["translation"], dtype=float), check=False)


@dataclass
class ProblemRecord:
    """One expert demonstration: problem, trajectory, and its validation."""

    problem_id: int
    scene: Scene
    start: np.ndarray
    original_target: Pose
    revised_target: object        # Pose for hybrid records, None for global
    trajectory: Trajectory
    provenance: str
    planning_time: float
    validation: ValidationReport

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        assert self.validation.verdict, "records must hold validated trajectories"
        if self.provenance == "hybrid":
            assert self.revised_target is not None

    @property
    def target(self):
        """The training target: revised when available, else original."""
        return self.revised_target if self.revised_target is not None else self.original_target

    def to_dict(self):
        return {
            "problem_id": int(self.problem_id),
            "scene": self.scene.to_dict(),
            "start": self.start.tolist(),
            "original_target": _pose_to_dict(self.original_target),
            "revised_target": (None if self.revised_target is None
                               else _pose_to_dict(self.revised_target)),
            "trajectory": self.trajectory.to_dict(),
            "provenance": self.provenance,
            "planning_time": float(self.planning_time),
            "validation": self.validation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["problem_id"], Scene.from_dict(d["scene"]),
                   np.array(d["start"], dtype=float),
                   _pose_from_dict(d["original_target"]),
                   None if d["revised_target"] is None else _pose_from_dict(d["revised_target"]),
                   Trajectory.from_dict(d["trajectory"]),
                   d["provenance"], d["planning_time"],
                   ValidationReport.from_dict(d["validation"]))


@dataclass
class DatasetManifest:
    format_version: int
    kind_counts: dict             # env_kind -> record count
    global_seed: int
    tool_version: str
    record_count: int

    def to_dict(self):
        return {"format_version": self.format_version,
                "kind_counts": dict(sorted(self.kind_counts.items())),
                "global_seed": int(self.global_seed),
                "tool_version": self.tool_version,
                "record_count": int(self.record_count)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["format_version"], d["kind_counts"], d["global_seed"],
                   d["tool_version"], d["record_count"])


def manifest_path(path):
    return str(path) + ".manifest.json"


def _kind_of(obj):
    scene = obj.scene if hasattr(obj, "scene") else obj
    return scene.env_kind


def write_jsonl(path, dicts, kinds, global_seed):
    """Write records plus the manifest sidecar; returns the manifest."""
    counts = {}
    n = 0
    with open(path, "w") as f:
        for d, kind in zip(dicts, kinds):
            f.write(json.dumps(d, sort_keys=True))
            f.write("\n")
            counts[kind] = counts.get(kind, 0) + 1
            n += 1
    manifest = DatasetManifest(FORMAT_VERSION, counts, global_seed, TOOL_VERSION, n)
    with open(manifest_path(path), "w") as f:
        json.dump(manifest.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def read_manifest(path):
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise VersionMismatch(f"missing manifest sidecar {mpath}")
    with open(mpath) as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    if manifest.format_version != FORMAT_VERSION:
        raise VersionMismatch(f"dataset format_version {manifest.format_version}")
    return manifest


def stream_jsonl(path, check_manifest=True):
    """Yield parsed dicts line by line in constant memory."""
    manifest = read_manifest(path) if check_manifest else None
    n = 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise CorruptRecord(lineno) from e
            n += 1
    if manifest is not None and n != manifest.record_count:
        raise VersionMismatch(
            f"manifest lists {manifest.record_count} records, file has {n}")


def write_records(path, records, global_seed=0):
    return write_jsonl(path, (r.to_dict() for r in records),
                       [_kind_of(r) for r in records], global_seed)


def read_records(path):
    for d in stream_jsonl(path):
        yield ProblemRecord.from_dict(d)


def write_problems(path, problems, global_seed=0):
    return write_jsonl(path, (p.to_dict() for p in problems),
                       [_kind_of(p) for p in problems], global_seed)


def read_problems(path):
    for d in stream_jsonl(path):
        yield PlanningProblem.from_dict(d)


def records_to_examples(records):
    """Expand expert trajectories into per-step training transitions."""
    from .policy import TrainingExample
    out = []
    for rec in records:
        Q = rec.trajectory.configs
        for t in range(len(Q) - 1):
            out.append(TrainingExample(rec.scene, Q[t], Q[t + 1], rec.target,
                                       f"{rec.problem_id}:{t}"))
    return out
