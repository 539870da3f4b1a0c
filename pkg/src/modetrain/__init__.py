"""Training acceleration via correlation-mode parameter embedding and sampled moving averages.

The package is organized around a small, fully analytic rate-distortion codec
(`toymodel`) that exercises every role-dependent procedure of the method:

- `paramstore`: flat parameter vector, layer table, trajectory snapshots, disk format
- `trainer`: baseline SGD/Adam loop with plateau scheduling and hook points
- `cmd`: correlation mode decomposition (clustering, references, affine fits,
  recursive coefficient updates, instant-performance mode search)
- `sensitivity`: perturbation-based layer ranking and per-parameter scores
- `stdet`: the embedding scheduler (true/dummy embedding, long-term coefficient change)
- `sma`: sampled moving-average optimizer wrapper
- `nqm`: noisy quadratic laboratory with closed-form steady-state variances
- `pipeline` / `report` / `cli`: experiment harness, artifacts, figures
"""

__version__ = "0.1.0"
