"""Part-level knowledge distillation from high- to low-quality skeleton sequences."""
from .errors import *  # noqa: F401,F403
from .skeleton import (  # noqa: F401
    NUM_PARTS,
    PART_NAMES,
    Dataset,
    PartMap,
    SkeletonGraph,
    SkeletonSequence,
    build_graph,
    build_part_map,
    normalized_adjacency,
)

__version__ = "0.1.0"
