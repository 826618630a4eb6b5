"""ethsim: collapse trajectories of an atom coupled to a discrete field chain.

Modules:
    matcore: dense complex matrix helpers and clustered eigendecomposition.
    kraus: Kraus operators of an atom/field interaction unitary.
    evolve: pre-collapse atom chain and its dense tensor oracle.
    collapse: actual events, Born sampling and trajectories.
    models: measurement models, coupling regimes, detector and thermal field.
    histories: history trees and their probability measure.
    harness: scenario files, ensemble runs and outputs (CLI in ``ethsim.cli``).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    EigenSolverError,
    EthsimError,
    InvariantError,
    ResourceCapError,
    ScenarioError,
    ValidationError,
)

__all__ = [
    "__version__",
    "EthsimError",
    "ValidationError",
    "ScenarioError",
    "InvariantError",
    "EigenSolverError",
    "ResourceCapError",
]
