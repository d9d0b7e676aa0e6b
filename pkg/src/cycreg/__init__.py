"""Deformable registration with a learned cyclic regularizer, in pure numpy."""

from .evaluation import EvalReport, asd, dice, endpoint_error, evaluate_registration, jacobian_stats, warp_labels
from .losses import MindConfig, field_regularizer, mind_descriptor, mind_loss, nmi
from .net import NetWidths, RegNetParams, count_params, init_params, regnet_forward
from .pipeline import (
    ClassicalOptions,
    TrainConfig,
    TrainingError,
    backward_pretrain_loss,
    classical_register,
    cyclic_loss,
    forward_loss,
    make_pretraining_pairs,
    predict_field,
    sweep,
    train,
    train_forward_cyclic,
)
from .synthdata import DeformSpec, Pair, PhantomSpec, build_dataset, generate_deformation, generate_phantom
from .tensor import NonFiniteError, ShapeError, Tensor, backward, grad_check
from .warp import DisplacementField, Volume, compose_displacements, warp_image

__version__ = "0.1.0"
