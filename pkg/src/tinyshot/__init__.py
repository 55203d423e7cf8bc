"""tinyshot: quantized zero-shot classification toolkit for tiny devices.

Pieces: symmetric int8/int4 quantization and binary tensor containers
(tensor), prompt-averaged class-prototype tables with nested-prefix storage
(embedstore), a small conv encoder with float and int8 paths (encoder),
cosine zero-shot classification with quantization-aware margins (zeroshot),
contrastive + alignment + nested-prefix distillation training (train),
low-rank/attention compression kernels (compress), and a static flash/SRAM
memory planner (planner). The CLI (``tinyshot``) fronts all of it.
"""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    Tensor,
    cosine_similarity,
    dequantize,
    l2_normalize,
    quantize_symmetric,
    round_half_away,
)
from .embedstore import (  # noqa: F401
    EmbeddingTable,
    PromptedClass,
    average_templates,
    build_table,
    load_table,
    payload_bytes,
    save_table,
    select_dim,
    truncate_table,
)
from .encoder import (  # noqa: F401
    LayerGraph,
    calibrate,
    desk_graph,
    forward_f32,
    forward_i8,
    i8_error_bound,
    load_graph,
    mobilenet_graph,
    model_size_bytes,
    preprocess,
    save_graph,
)
from .zeroshot import (  # noqa: F401
    Prediction,
    classify,
    decision_margin_threshold,
    run_pipeline,
)
from .train import (  # noqa: F401
    MatryoshkaConfig,
    TrainConfig,
    embedding_distill,
    enhanced_distill,
    infonce,
    matryoshka_loss,
    total_loss,
    train_toy,
)
from .compress import (  # noqa: F401
    ClusteredLowRank,
    decompose,
    fused_attention,
    linear_attention,
    reconstruct,
)
from .planner import (  # noqa: F401
    LayoutReport,
    PlatformSpec,
    load_platform,
    max_classes,
    peak_activation,
    plan,
    plan_sizes,
)
