"""Optimization driver: Adam, checkpoints, and the two training phases."""

from cdcgen.trainer.checkpoint import (Checkpoint, CheckpointError, checkpoint_id, decode_checkpoint,
                                       encode_checkpoint, load_checkpoint, save_checkpoint)
from cdcgen.trainer.loops import (AlignConfig, AlignModels, CondModels, MetricsLog, TrainingDiverged,
                                  align_optimizers, align_step, cond_step, config_from_dict,
                                  default_cond_models, default_vector_models, read_metrics,
                                  restore_alignment, restore_conditional, train_alignment,
                                  train_conditional, train_mle)
from cdcgen.trainer.optim import Adam, AdamState, adam_step
