"""Attention-based multi-channel embedding fusion for ad-hoc microphone arrays.

Channel embeddings from an arbitrary, unordered set of microphones are fused
into a single fixed-width speaker embedding by stacked cross-channel residual
self-attention layers (softmax or sparsemax weights) and a global fusion
block, trained with an angular prototypical loss and evaluated by equal
error rate on synthetic array data.
"""

from .attention import (AttentionState, HeadParams, LayerParams,
                        attention_head, global_fusion, inter_channel_layer,
                        multi_head)
from .errors import (CheckpointError, ConfigError, ContractError, DatasetError,
                     DivergenceError, GenerationError, NumericError,
                     OptimizerError, TapeError)
from .evaluation import (Trial, TrialScoreReport, build_trials, compute_eer,
                         evaluate_fusion, evaluate_oracle,
                         expected_trial_counts, oracle_one_best, trial_score)
from .experiment import (ExperimentConfig, TrainConfig,
                         default_experiment_config, load_experiment_config,
                         noise_channel_attention_stats, run_experiment)
from .model import (FusionModel, ModelConfig, expected_parameter_shapes,
                    forward, forward_with_attention, init_model, load_model,
                    save_model)
from .simulator import (SimConfig, SyntheticDataset, SyntheticUtterance,
                        derive_seed, generate, read_dataset, splitmix64,
                        write_dataset)
from .tape import (Tape, Tensor, backward, concat_cols, concat_rows, div, exp,
                   log, matmul, mean_rows, mul, relu, row_normalize,
                   softmax_rows, sparsemax_rows, sqrt, sub, sum_entries,
                   transpose)
from .training import (OptimizerState, SpeakerGroup, TrainBatch, adam_step,
                       angular_prototypical_loss, loss_from_embeddings,
                       sample_epoch, train)

__version__ = "0.1.0"
