"""fediskit: deterministic federated-distillation simulation framework.

Clients with heterogeneous private data train local models, filter shared
proxy-data predictions through a density-ratio estimator (centroid-distance
or kernel least-squares), and distill server-averaged soft labels.  A
benchmark harness measures the estimators' time/space scaling and the effect
of thresholds and proxy fractions on accuracy.
"""

__version__ = "0.1.0"

from .config import (DatasetSpec, KulsifConfig, LearnerConfig, RunConfig,
                     ThresholdSpec, parse_config)
from .data import (ClientDataset, Dataset, LabeledSample, PartitionSpec,
                   ProxyDataset, extract_proxy, gen_gaussian_mixture,
                   load_digits_dataset, load_idx, partition)
from .dre import (CentroidModel, IdThreshold, KulsifModel, calibrate_threshold,
                  is_id, kmeans_fit, kmeans_score, kulsif_learn, kulsif_score)
from .learner import (MlpModel, SoftTarget, distill, evaluate, forward,
                      model_init, softmax_t, train_supervised)
from .protocol import (AggregatedTargets, ClientState, ExperimentResult,
                       PredictionSet, RoundPlan, client_filter, initialize,
                       run_experiment, run_round, select_round_indices,
                       server_aggregate)

__all__ = [name for name in dir() if not name.startswith("_")]
