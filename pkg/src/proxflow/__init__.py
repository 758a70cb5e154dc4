"""Proximal residual flows: invertible residual networks whose subnetworks
are scaled proximal neural networks, with exact and stochastic
log-determinants and a conditional variant for posterior reconstruction."""

__version__ = "0.1.0"

from .errors import ConvergenceError, NumericalError, ProxflowError
from .linalg import lu_logabsdet, make_rng, orth_defect, polar_project
from .pnn import (Pnn, ProxBlock, StableActivation, StiefelParam,
                  averagedness, pnn_forward, r_forward)
from .flow import (ActNorm, EstimatorConfig, GeometricQ, ProxFlow,
                   ResidualBlock, block_forward, block_invert,
                   flow_forward_logdensity, flow_sample, logdet_estimate,
                   logdet_estimate_grad, logdet_exact, logdet_single_layer)
from .conditional import (CondProxFlow, CondResidualBlock, cond_block_forward,
                          cond_block_invert, cond_logdensity, cond_sample)
from .train import AdamState, TrainConfig, adam_step, nll_loss, train_loop
from .problems import (GaussianMixture, InverseProblemSpec, circle_problem,
                       gmm_logpdf, gmm_sample, mixture_posterior,
                       mixture_problem, relaxed_uniform_logpdf, sample_toy)
from .metrics import GridSpec, empirical_kl, empirical_w2
