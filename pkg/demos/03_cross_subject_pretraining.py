#!/usr/bin/env python3
"""Cross-subject pretraining: one model, several subjects.

Per step, one subject's batch is embedded to the shared space, translated
to image/text targets (contrastive + MSE), rebuilt in its own voxel space
(reconstruction), and rebuilt through a random partner subject (cycle).
The run writes a per-epoch CSV and checkpoints under demos/output/.
"""

from pathlib import Path

from crossbrain.data import CohortSpec, generate_cohort
from crossbrain.model import ModelConfig, init_model
from crossbrain.syntheval import evaluate
from crossbrain.training import TrainConfig, pretrain

out = Path(__file__).parent / "output" / "pretraining"

spec = CohortSpec(n_subjects=3, latent_dim=16, n_train_per_subject=1000,
                  n_shared_test=64, noise_std=0.1, seed=0)
cohort = generate_cohort(spec)

state = init_model(ModelConfig.desk_scale(), cohort.subjects, seed=0)
cfg = TrainConfig(epochs=20, batch_size=50, lr=1e-4, seed=0, eval_every=5)

print(f"pretraining on {cohort.subjects} for {cfg.epochs} epochs ...")
result = pretrain(state, cohort, cfg, out_dir=out)

print("\nepoch  total-loss      cycle-loss   | test two-way  top1")
for row in result.history:
    if row["split"] == "train" and row["epoch"] % 5 == 4:
        print(f"{row['epoch']:5d}  {row['total']:12.1f}  {row['cyc']:12.4f}")
    elif row["split"] == "test":
        print(f"{row['epoch']:5d}  {'':12}  {'':12}   | {row['two_way']:12.3f}  {row['top1']:.3f}")

report = evaluate(result.state, cohort, trials=50, seed=0)
print("\nfinal shared-test metrics per subject:")
for sid, metrics in report.per_subject.items():
    print(f"  {sid}: two-way {metrics['two_way']:.3f}, top1 {metrics['top1']:.3f}, "
          f"voxel recon corr {metrics['pixcorr']:.3f}")
print(f"\nartifacts: {result.csv_path}, {result.final_path}")
