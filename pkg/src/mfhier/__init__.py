"""Mean-field hierarchy toolkit: exact N-body dynamics on finite state
spaces, marginals and correlation errors, linearized mean-field flows, and
the recursive 1/N expansion, with a study harness that verifies the
predicted convergence rates at desk scale."""

__version__ = "0.1.0"
