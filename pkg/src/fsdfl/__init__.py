"""Decentralized federated-learning simulator with function-space ADMM."""

from .data import (Dataset, Partition, SharedSet, label_kl_from_uniform,
                   make_synthetic, partition_dirichlet, partition_k_class,
                   sample_shared)
from .dynamics import (NoiseSchedule, decompose_update, edgewise_indirect,
                       probe_loss_update, simulate_linear, verify_appendix_chain)
from .engine import ExperimentConfig, run_experiment, sweep
from .fsadmm import (DeviceState, HyperParams, MultiplierStore, cmfd_round,
                     decfedavg_round, decfedprox_round, dfedavgm_round,
                     kd_aggregate, local_sgd, propalg_round, update_multiplier,
                     virtual_target)
from .graph import (GraphOperators, Topology, build_random_connected,
                    build_ring, build_star, operators)
from .nnmodel import (ModelSpec, ModelState, forward, forward_batch,
                      grad_distill_loss, grad_local_loss, init_params,
                      local_loss)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
