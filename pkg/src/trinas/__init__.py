"""trinas: tri-level architecture search with class-weighted synthetic data.

A desk-scale research engine, numpy end to end. The package splits into:

- ``autodiff``: reverse-mode differentiation with finite-difference
  Hessian-vector products
- ``nn``: parameterized layers built on the autodiff primitives
- ``search_space``: relaxed cell-based architecture space and its
  discretization
- ``data``: labeled image sets, splits and the synthetic pattern benchmark
- ``cig``: class-conditional generator and its adversarial update
- ``reweight``: per-class validation losses and the weighted retraining
  objective
- ``trilevel``: the three-stage optimization loop and the architecture
  hypergradient
- ``oracle``: independent verification (closed-form quadratic instances
  and brute-force unrolling)
- ``config`` / ``harness`` / ``cli``: experiment configuration, artifact
  formats and the command-line driver
"""

__version__ = "0.1.0"
