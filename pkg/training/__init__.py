# Training package
from .optim import Optimizer, ParamGroup, clip_grad_norm
from .trainer import (
    TrainingHistory, pretrain, continual_update, make_update_pair,
    finetune_peft, evaluate_task, batch_loss, lm_targets
)

__all__ = [
    'Optimizer', 'ParamGroup', 'clip_grad_norm',
    'TrainingHistory', 'pretrain', 'continual_update', 'make_update_pair',
    'finetune_peft', 'evaluate_task', 'batch_loss', 'lm_targets'
]
