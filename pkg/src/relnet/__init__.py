"""relnet: a reliability workbench.

Compiles hybrid models (continuous capacities/loads + discrete logic) into
discrete Bayesian networks by running structural-reliability solves per
discretization cell, then answers evidence-conditioned reliability queries,
decision analyses and value-of-information on the compiled network.
"""

__version__ = "0.1.0"
