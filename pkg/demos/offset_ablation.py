"""Why offsets matter for grouping moving points across time.

Two cars cross paths. After ego alignment their swept point trails overlap,
so density clustering on raw positions fuses them into one blob. Shifting
each point toward its car's target-frame centroid first (the offset vector)
separates them again. A frame-by-frame Kalman tracker is shown for
comparison.
"""
import numpy as np

from rigid_accum.metrics import assoc_metrics
from rigid_accum.pipeline import PipelineConfig, run
from rigid_accum.sim import crossing_scene, generate_scene

sim = generate_scene(crossing_scene())
seq = sim.sequence
gt = [np.where(f.dynamic, f.instance, 0) for f in seq.frames]

for label, cfg in (("offsets", PipelineConfig(oracle_offsets=True)),
                   ("no offsets", PipelineConfig(oracle_offsets=False)),
                   ("kalman", PipelineConfig(association="kalman"))):
    res = run(seq, cfg)
    m = assoc_metrics(res.labeling.labels, gt)
    print(f"{label:10s} clusters {m.n_pred}  WCov {m.wcov:.3f}  recall@0.5 {m.recall[0.5]:.2f}")
