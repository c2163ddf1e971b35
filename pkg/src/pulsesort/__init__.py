"""ToA-only radar pulse deinterleaving.

Classical difference-histogram methods (CDIF, SDIF, PRI transform), an exact
min-cost-flow link decoder, and a trainable attention model whose row-softmax
output relaxes the flow polytope.
"""

from .core import (
    TERMINAL,
    AssignmentMatrix,
    ClusterSet,
    InfeasibleAssignmentError,
    PulseSequence,
    RtoaSequence,
    assignment_to_clusters,
    clusters_to_assignment,
    compute_rtoa,
    labels_to_assignment,
    links_to_assignment,
    normalize_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "TERMINAL",
    "AssignmentMatrix",
    "ClusterSet",
    "InfeasibleAssignmentError",
    "PulseSequence",
    "RtoaSequence",
    "assignment_to_clusters",
    "clusters_to_assignment",
    "compute_rtoa",
    "labels_to_assignment",
    "links_to_assignment",
    "normalize_sequence",
    "__version__",
]
