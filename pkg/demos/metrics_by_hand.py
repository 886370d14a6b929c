"""P, FT and F on a small hand-made score table, then the CSV that `report` reads."""
import sys

from rehearsal_diffusion.evaluator import ContinualLog, compute_metrics
from rehearsal_diffusion.persistence import curves_svg, write_continual_log

# rows: checkpoint step, columns: task; task 0 is learned first and partly forgotten
scores = {
    0: [0.0, 0.1, 0.0],
    100: [0.9, 0.3, 0.1],
    200: [0.7, 0.9, 0.2],
    300: [0.6, 0.8, 0.95],
}
log = ContinualLog(3, 100, scores)
r = compute_metrics(log)
print(f"P={r.P:.3f}  FT={r.FT:.3f}  F={r.F:.3f}  P+FT-F={r.combined:.3f}")
for i, (ft, f) in enumerate(zip(r.FT_i, r.F_i)):
    print(f"  task {i}: FT_i={ft:+.3f}  F_i={f:+.3f}")

if len(sys.argv) > 1:
    write_continual_log(log, sys.argv[1])
    with open(sys.argv[1].replace(".csv", ".svg"), "w") as fh:
        fh.write(curves_svg(log))
