"""cirlab: a desk-scale lab for decoupled dual-branch low-rank adaptation,
coefficient merging, gradient-interference probing, and composed retrieval
on a synthetic attribute world."""

from .adapters import (
    AdapterStack, BranchId, LoraLayer, PassId, effective_weight, init_adapters,
    load_checkpoint, save_checkpoint, trainable_mask,
)
from .encoder import EncoderConfig, compose_prompt, compose_source_prompt, encode_text, encode_visual, map_visual
from .errors import (
    CandidateSetInvalid, CirlabError, ConfigInvalid, CorruptTensor, DegenerateBatch,
    DegenerateDelta, DegenerateNorm, DimMismatch, InsufficientDistractors,
    MalformedRecord, MissingArtifact, MissingPseudo, NonFiniteEvaluation,
    NonFiniteLoss, SequenceTooLong, UnsupportedVersion, WorldTooSmall,
)
from .linalg import cosine_sim, finite_diff_grad, l2_normalize, matmul
from .merge import MergeRule, MergeSpec, alpha_sweep, dare, dare_ties, lrdm_merge, merge_stack, task_arithmetic, task_vectors, ties_merge
from .objectives import (
    LossBreakdown, endpoint_loss, joint_loss, pcgrad_combine, source_anchor,
    transition_delta, transition_loss,
)
from .probe import GradGroup, GradProbeReport, collect_grads, interference_scores, probe_report
from .evaluate import (
    GalleryIndex, MetricsReport, build_gallery_index, compose_query, evaluate_benchmark,
    map_at_k, rank, recall_at_k, shortcut_gap, subset_recall,
)
from .rng import Rng
from .synthworld import (
    AttributeSchema, EditTuple, Item, RetrievalBenchmark, Vocab, apply_edit,
    build_benchmark, build_vocab, export_tuples, gen_edit_tuple, gen_edit_tuples,
    gen_items, import_tuples, item_from_caption, load_benchmark, parse_instruction,
    render_caption, save_benchmark, visual_feature,
)
from .trainer import (
    EncodedWorld, OptimizerState, PretrainConfig, TrainConfig, TrainMode,
    adamw_update, build_encoded_world, pretrain_base, run_training,
    train_step_endpoint, train_step_transition,
)

__version__ = "0.1.0"
