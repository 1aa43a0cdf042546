# A small open-set adaptation run: dual-space against single-space detection.
# Fewer samples and adaptation epochs than the defaults; about a minute on one core.
import dataclasses

from dsd.config import RunConfig
from dsd.experiment import compare_detection

cfg = RunConfig()
cfg = cfg.replace(
    data=dataclasses.replace(cfg.data, per_class=20),
    train=dataclasses.replace(cfg.train, pretrain_epochs=50, adapt_epochs=5),
)
runs = compare_detection(cfg, seed=0)
print(f"source accuracy after pretraining {runs['pretrain'].source_accuracy:.3f}")
for mode in ("dual", "single"):
    s = runs[mode]
    m = s.metrics
    print(f"{mode:6s} OS* {m.os_star:.3f} UNK {m.unk:.3f} HOS {m.hos:.3f}  "
          f"incon precision {s.incon_precision:.3f}  CV^2(imp) per layer {[round(c, 4) for c in s.importance_cv]}")

print("\nadaptation log (dual):")
for row in runs["dual"].history:
    if row["phase"] == "adapt":
        print(f"  epoch {row['epoch']}: |incon| {row['n_inconsistent']} n_u {row['n_u']} "
              f"precision {row['incon_precision']:.3f} HOS {row['hos']:.3f}")
