"""Super-class guided attribute classification over frozen-VLM fixtures."""

from .fixtures import (
    EmbeddingFixture,
    FixtureDims,
    SynthSpec,
    load_fixture,
    save_fixture,
    synth_fixture,
)
from .hierarchy import (
    AttributeHierarchy,
    centroids_from_reference,
    map_by_similarity,
    mapping_accuracy,
)
from .metrics import average_precision, grouped_report
from .zrse import enhance, retrieval_scores

__version__ = "0.1.0"

__all__ = [
    "EmbeddingFixture",
    "FixtureDims",
    "SynthSpec",
    "load_fixture",
    "save_fixture",
    "synth_fixture",
    "AttributeHierarchy",
    "centroids_from_reference",
    "map_by_similarity",
    "mapping_accuracy",
    "average_precision",
    "grouped_report",
    "enhance",
    "retrieval_scores",
    "__version__",
]
