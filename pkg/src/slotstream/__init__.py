"""slotstream: zero-recompute KV-cache reuse for simultaneous decoding via
explicit position-slot allocation, with recompute/naive/conversational/
grouped baselines, policy-consistent training, and LAAL/FLOPs metrics."""

from .engine import (CONVERSATIONAL, EXPOST, GROUPED, NAIVE_REUSE, RECOMPUTE,
                     StreamTrace, Strategy, compare_traces, run_stream,
                     uncached_replay)
from .kv_cache import CacheDelta, CacheMark, KvCache, recompute_from
from .layout import (AllocationState, LayoutPlan, PositionOverflowError,
                     layout_conversational, layout_grouped, layout_recompute,
                     new_allocation)
from .masking import build_policy_mask, oracle_mask, visibility_oracle
from .metrics import FlopsModel, cumulative_flops, flops_forward, laal
from .model import (ALIBI, NONE, ROTARY, MacCounter, ModelConfig, Transformer,
                    init_model, parameter_hash)
from .checkpoint import load_checkpoint, save_checkpoint
from .policy import (READ_N, WAIT_K, Action, PolicySpec, delays_from_trace,
                     next_action, waitk_g)
from .tokens import (EOS_ID, EOSEG_ID, FIRST_CONTENT_ID, PAD_ID, ROLE_ASST_ID,
                     ROLE_USER_ID, Tag)
from .trainer import (COPY_MAP, LOCAL_REORDER, ToyCorpusSpec, TrainingSample,
                      avg_sequence_length, build_training_sample,
                      generate_pairs, grad_visibility_report, run_ablation,
                      sample_from_pair, sample_loss, segment_source,
                      streaming_accuracy, train_model)

__version__ = "0.1.0"
