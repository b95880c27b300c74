"""
Desk-scale training of adapters on a toy attention model.
"""
from .sgd_trainer import TrainConfig, converged, evaluate, gradient_check, loss_and_grads, train
from .toy_model import Batch, SyntheticTask, ToyModel

__all__ = ['Batch', 'SyntheticTask', 'ToyModel', 'TrainConfig', 'converged', 'evaluate',
           'gradient_check', 'loss_and_grads', 'train']
