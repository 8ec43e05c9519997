from .graph import Graph, Node, stop_gradient
from .gradcheck import GradCheckReport, grad_check
from .params import ParameterStore, adam_step, load_checkpoint, save_checkpoint

__all__ = [
    "Graph", "Node", "stop_gradient", "GradCheckReport", "grad_check",
    "ParameterStore", "adam_step", "load_checkpoint", "save_checkpoint",
]
