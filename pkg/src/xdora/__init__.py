"""xdora: retrieval-augmented dual co-attention classification engine.

Operates on precomputed encoder embeddings (XDEM files): trains the
co-attention fusion network, builds an exact flat similarity index over
its fused vectors, ensembles classifier and retrieval distributions, and
drives retrieval-augmented prompting of an external vision-language
service. See the CLI (``xdora --help``) for the end-to-end workflows.
"""

__version__ = "0.1.0"

from .dataset import (  # noqa: F401
    EmbeddingRecord,
    LabelTaxonomy,
    SplitSpec,
    TASK1,
    TASK2,
    class_weights,
    load_embeddings,
    remap_label,
    save_embeddings,
    stratified_split,
    taxonomy_for,
)
from .ensemble import FusionWeight, fuse_predictions, grid_search_alpha  # noqa: F401
from .evaluation import (  # noqa: F401
    MetricReport,
    Prediction,
    bootstrap_ci,
    confusion,
    evaluate,
    macro_prf,
)
from .fusion import (  # noqa: F401
    FusionConfig,
    classify,
    coattend,
    forward,
    fuse_pool,
    init_params,
    load_model,
    loss,
    project_vision,
    save_model,
)
from .numerics import grad_check, l2_normalize, softmax_rows  # noqa: F401
from .prompting import (  # noqa: F401
    Exemplar,
    LvlmClient,
    Prompt,
    build_prompt,
    classify_via_service,
    parse_response,
    select_exemplars,
)
from .retrieval import (  # noqa: F401
    FlatIndex,
    Neighbor,
    aggregate_labels,
    build_index,
    load_index,
    predict_knn,
    save_index,
    top_k,
    top_k_per_class,
)
from .rng import derive_rng, make_rng  # noqa: F401
from .synthetic import make_synthetic_records  # noqa: F401
from .training import TrainSpec, accuracy, train  # noqa: F401
