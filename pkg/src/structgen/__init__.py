"""Hierarchical graph VAE over part-based 3D shapes.

The package is organised as a stack of small modules:

``shapes``
    Shape trees, oriented boxes, typed sibling relations, validation and
    JSON/OBJ serialization.
``autodiff``
    A minimal reverse-mode tape over numpy float64 arrays, plus Adam and
    binary checkpoint I/O.
``geometry``
    Box sampling, weighted chamfer distances, symmetry transforms and
    adjacency detection.  Every kernel accepts raw arrays or tape tensors.
``model``
    The recursive graph encoder / decoder pair with a variational
    bottleneck.
``losses``
    Part matching (Hungarian), reconstruction and structure-consistency
    objectives.
``data``
    Procedural chair/table generators, dataset IO, splits and ingest.
``training``
    Deterministic mini-batch trainer with checkpointing and CSV logs.
``metrics``
    Reconstruction and generation quality metrics.
``latent``
    Sampling, interpolation, retrieval and latent-space editing.
``estimator``
    A scikit-learn style wrapper around the whole pipeline.
"""

__version__ = "0.1.0"

from .shapes import (  # noqa: E402
    BoxParams,
    MAX_CHILDREN,
    Part,
    RelEdge,
    RelType,
    ShapeError,
    ShapeTree,
    Vocabulary,
    deserialize,
    get_vocabulary,
    load_shape,
    normalize_unit_sphere,
    register_vocabulary,
    save_shape,
    serialize,
    to_obj,
    validate,
)
from .model import FreeDecode, FreeNode, ModelConfig, ShapeVAE, to_shape_tree  # noqa: E402
from .losses import DEFAULT_BETA, LossBreakdown, PartMatcher, compute_shape_loss  # noqa: E402
from .data import (  # noqa: E402
    CHAIR_VOCABULARY,
    TABLE_VOCABULARY,
    FamilyConfig,
    chair_config,
    generate_dataset,
    generate_shape,
    ingest_directory,
    split_indices,
    table_config,
)
from .training import TrainConfig, evaluate_loss, load_checkpoint, save_checkpoint, train  # noqa: E402
from .metrics import evaluate_reconstruction, generation_metrics, shape_metrics  # noqa: E402
from .latent import (  # noqa: E402
    edit_optimize,
    interpolate,
    nearest_in_corpus,
    part_interpolate,
    reconstruct,
    sample_decodes,
)
from .estimator import HierarchicalShapeVAE  # noqa: E402

__all__ = [
    "__version__",
    "BoxParams",
    "MAX_CHILDREN",
    "Part",
    "RelEdge",
    "RelType",
    "ShapeError",
    "ShapeTree",
    "Vocabulary",
    "deserialize",
    "get_vocabulary",
    "load_shape",
    "normalize_unit_sphere",
    "register_vocabulary",
    "save_shape",
    "serialize",
    "to_obj",
    "validate",
    "FreeDecode",
    "FreeNode",
    "ModelConfig",
    "ShapeVAE",
    "to_shape_tree",
    "DEFAULT_BETA",
    "LossBreakdown",
    "PartMatcher",
    "compute_shape_loss",
    "CHAIR_VOCABULARY",
    "TABLE_VOCABULARY",
    "FamilyConfig",
    "chair_config",
    "generate_dataset",
    "generate_shape",
    "ingest_directory",
    "split_indices",
    "table_config",
    "TrainConfig",
    "evaluate_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "evaluate_reconstruction",
    "generation_metrics",
    "shape_metrics",
    "edit_optimize",
    "interpolate",
    "nearest_in_corpus",
    "part_interpolate",
    "reconstruct",
    "sample_decodes",
    "HierarchicalShapeVAE",
]
