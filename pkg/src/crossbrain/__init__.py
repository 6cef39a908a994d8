"""Cross-subject brain-signal decoding on a desk-scale synthetic benchmark.

Variable-size voxel recordings are unified by adaptive max pooling,
embedded into a subject-invariant space by per-subject encoder/decoder
pairs trained with contrastive, reconstruction, and cycle-consistency
losses around a shared translator, and adapted to new subjects by
reset-tuning with pseudo data augmentation.
"""

from .data import Batch, Cohort, CohortSpec, batch_iter, generate_cohort, load_cohort, save_cohort
from .losses import (LossReport, LossWeights, cycle_loss, modality_loss, mse_loss,
                     recon_loss, soft_clip_loss, total_loss)
from .model import (ModelConfig, ModelState, SubjectModules, TranslatorModules, build,
                    embed, init_model, reset_subject, set_translator_frozen, translate,
                    translator_hash)
from .numerics import (Var, adaptive_max_pool, affine, dropout, finite_diff_check, gelu,
                       layer_norm, reverse_pass)
from .precision import active_precision, set_precision, use_precision
from .syntheval import (EvalReport, evaluate, pixcorr, synthesize_fmri, topk_retrieval,
                        two_way_identification)
from .training import (OptimState, TrainConfig, adapt_new_subject, load_checkpoint,
                       optimizer_step, pretrain, pretrain_step, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Batch", "Cohort", "CohortSpec", "batch_iter", "generate_cohort", "load_cohort",
    "save_cohort", "LossReport", "LossWeights", "cycle_loss", "modality_loss", "mse_loss",
    "recon_loss", "soft_clip_loss", "total_loss", "ModelConfig", "ModelState",
    "SubjectModules", "TranslatorModules", "build", "embed", "init_model", "reset_subject",
    "set_translator_frozen", "translate", "translator_hash", "Var", "adaptive_max_pool",
    "affine", "dropout", "finite_diff_check", "gelu", "layer_norm", "reverse_pass",
    "active_precision", "set_precision", "use_precision", "EvalReport", "evaluate",
    "pixcorr", "synthesize_fmri", "topk_retrieval", "two_way_identification", "OptimState",
    "TrainConfig", "adapt_new_subject", "load_checkpoint", "optimizer_step", "pretrain",
    "pretrain_step", "save_checkpoint",
]
