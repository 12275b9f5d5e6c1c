"""Energy-balanced client selection for federated learning over edge fleets.

Library layout:

- ``devices``: hardware catalog, latency/energy cost models, fleet sampling
- ``allocation``: uplink bandwidth-share optimization over a selected set
- ``selection``: cluster-and-utility balancing heuristic
- ``fl``: desk-scale federated averaging on synthetic or file data
- ``agent``: learned scheduler (scoring network, replay, imitation warm start)
- ``harness``: experiment loop, metrics, CSV/JSON outputs
- ``cli``: ``fedbal run | sweep | compare``
"""

from .allocation import Allocation, AllocationProblem, cost_coefficient, solve_analytic, solve_sqp
from .devices import (
    DEFAULT_PROFILES,
    ChannelEnv,
    Device,
    EnergyReport,
    HardwareProfile,
    comm_energy,
    comm_rate,
    device_report,
    load_profiles,
    relative_energy,
    resample_frequencies,
    sample_fleet,
    training_energy,
    training_latency,
)
from .fl import (
    ClientDataset,
    Model,
    aggregate,
    evaluate,
    init_model,
    load_columnar,
    local_train,
    make_synthetic,
    partition_dirichlet,
    partition_iid,
)
from .harness import (
    RoundMetrics,
    RunConfig,
    RunSummary,
    compute_summary,
    emit_outputs,
    run_experiment,
)
from .selection import (
    ClusterSplit,
    SelectionPolicyState,
    cluster_by_ideal_energy,
    ideal_energy,
    select_clients,
    utility,
)

__version__ = "0.1.0"
