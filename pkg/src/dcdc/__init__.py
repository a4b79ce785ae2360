"""Neural contractive-drift solver and Wasserstein convergence bounds for Markov chains."""

from .bounds import (DriftInputs, ExponentialBound, InvalidCertificate, PolynomialBound, bound_report,
                     coupling_distance, drift_inputs, exponential_bound, polynomial_bound)
from .certifier import (CertConfig, Certificate, ComplexityEstimate, certify, discounted_reward, empirical_K,
                        estimate_lipschitz_inputs, recommend_sample_sizes)
from .chains import (ChainModel, DomainBox, DomainError, SampledMap, UFunction, Uniform, build_chain,
                     constant_u, logistic_sgd, quad_sgd_1d, regulated_walk, sample_transition_pair,
                     tandem_fluid)
from .net import AdamState, ConstantFunction, NetSpec, ValueNet, adam_step, load_checkpoint, save_checkpoint
from .trainer import (TrainConfig, TrainingDiverged, batch_loss_grad, loss_grad_estimate, train,
                      train_chain_sequence)

__version__ = "0.1.0"
