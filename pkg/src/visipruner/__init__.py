"""Toy multimodal transformer, three-stage visual token pruning, probes and cost model."""
from .costs import CostParams, FlopsReport, dense_flops, kv_memory, pruned_flops, reconcile, visual_attention_reduction
from .engine import (
    KvCache,
    LayerPlan,
    LayerTrace,
    Model,
    ModelConfig,
    PruneHooks,
    TokenStream,
    decode_step,
    init_model,
    prefill,
)
from .fixtures import FIXTURE_KINDS, build_fixture
from .kernels import MacCounter, cosine_and_l2, masked_softmax_row, matmul
from .probes import (
    ProbeReport,
    ProbeSpec,
    knockout_cross_attention,
    logit_lens,
    mask_attended_tokens,
    mask_half,
    sink_stats,
    vo_projection,
)
from .pruner import (
    InfluenceRecord,
    PruneParams,
    PruneSchedule,
    apply_schedule,
    detect_exit_layer,
    detect_filtering_layer,
    evict_vision_kv,
    influence_of_token,
    merge_vision_attention,
    probe_layer_influences,
    select_baseline,
    select_retained,
)

__version__ = "0.1.0"
