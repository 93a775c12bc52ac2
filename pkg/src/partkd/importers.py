"""Field mapping for public skeleton datasets (not implemented).

Only the synthetic generator and the ``.skl`` container are supported. A
converter for a real dataset has to produce one ``SkeletonSequence`` per
clip and pair high/low recordings of the same clip under one instance id.
The mappings below are what such a converter needs.

NTU RGB+D 60 (``.skeleton`` text files, Kinect v2)
    schema_id   kinect25; joint order as stored in the file
    coords      per frame and body: 25 lines of ``x y z depthX depthY colorX colorY
                orientationW..Z trackingState``; keep x, y, z (metres)
    bodies      up to 2 tracked bodies per frame; missing body -> zeros
    label       ``A###`` in the file name, minus 1
    instance_id file stem, e.g. ``S001C001P001R001A001``
    splits      cross-subject: performer ``P###``; cross-view: camera ``C###``

Penn Action (``labels/*.mat``)
    schema_id   penn13
    coords      ``x``, ``y`` (T, 13) pixel coordinates, ``visibility`` as the
                third channel; one body
    label       ``action`` string mapped through a sorted class list
    split       ``train`` flag in the same file

SYSU 3D HOI (per-clip joint text files, Kinect v1)
    schema_id   kinect20
    coords      20 joints x (x, y, z) per frame; one body
    label       action folder index
    splits      setting 1 / setting 2 subject partitions from the release

2D estimates from a pose estimator (COCO keypoints JSON)
    schema_id   coco17
    coords      ``keypoints`` triplets (x, y, score); up to 2 people kept by score
"""
from __future__ import annotations

FIELD_MAPS = {
    "ntu60": {"schema_id": "kinect25", "channels": ("x", "y", "z"), "max_bodies": 2},
    "penn_action": {"schema_id": "penn13", "channels": ("x", "y", "visibility"), "max_bodies": 1},
    "sysu3d": {"schema_id": "kinect20", "channels": ("x", "y", "z"), "max_bodies": 1},
    "coco_keypoints": {"schema_id": "coco17", "channels": ("x", "y", "score"), "max_bodies": 2},
}


def import_dataset(kind: str, root, **options):
    """Placeholder for native-format converters; see the module docstring for the mapping."""
    if kind not in FIELD_MAPS:
        raise KeyError(f"unknown dataset kind {kind!r}; known: {sorted(FIELD_MAPS)}")
    raise NotImplementedError(f"no converter for {kind}: native dataset loading is out of scope")
