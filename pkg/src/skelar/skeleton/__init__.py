"""Skeleton parsing, canonical topology, and windowing."""
from .corpus import load_corpus, save_corpus
from .io import (
    HUMANML_JOINT_NAMES,
    NTU_JOINT_NAMES,
    EmptySequenceError,
    SkeletonSequence,
    WindowedSample,
    format_ntu,
    parse_ntu_bodies,
    parse_ntu_skeleton,
    read_json,
    read_ntu,
    repair_missing_frames,
    skeleton_from_json,
    skeleton_to_json,
    write_json,
    write_ntu,
)
from .prep import (
    TARGET_HZ,
    WINDOW,
    prepare_sequence,
    remap_humanml22_to_21,
    remap_ntu25_to_21,
    resample,
    to_canonical,
    window,
)
from .topology import CANONICAL, CANONICAL_FINGERPRINT, ESSENTIAL_JOINTS, JOINT_NAMES, SkeletonTopology

__all__ = [
    "CANONICAL", "CANONICAL_FINGERPRINT", "ESSENTIAL_JOINTS", "EmptySequenceError", "HUMANML_JOINT_NAMES",
    "JOINT_NAMES", "NTU_JOINT_NAMES", "SkeletonSequence", "SkeletonTopology", "TARGET_HZ", "WINDOW",
    "WindowedSample", "format_ntu", "load_corpus", "parse_ntu_bodies", "parse_ntu_skeleton", "prepare_sequence",
    "read_json", "read_ntu", "remap_humanml22_to_21", "remap_ntu25_to_21", "repair_missing_frames", "resample",
    "save_corpus", "skeleton_from_json", "skeleton_to_json", "to_canonical", "window", "write_json", "write_ntu",
]
