"""Moteur de différentiation automatique en mode inverse (define-by-run)"""
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError

ArrayLike = Union[np.ndarray, float, int, Sequence]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


class Tensor:
    """Tableau N-dimensionnel avec gradient optionnel

    Les données sont stockées en float32, sauf si un tableau float64 est
    fourni explicitement (utilisé par les vérifications par différences finies).
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: str = ''
    ):
        if dtype is None:
            is_f64 = isinstance(data, np.ndarray) and data.dtype == np.float64
            dtype = np.float64 if is_f64 else np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional['Node'] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ''
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Poids entraînable avec son état Adam"""

    def __init__(self, value: ArrayLike, name: str = '', dtype: Optional[np.dtype] = None):
        self.name = name
        self.value = Tensor(value, requires_grad=True, dtype=dtype, name=name)
        self.adam_m = np.zeros(self.value.size, dtype=np.float64)
        self.adam_v = np.zeros(self.value.size, dtype=np.float64)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, new_data: np.ndarray):
        self.value.data = np.asarray(new_data, dtype=self.value.dtype).reshape(self.value.shape)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name or 'anonyme'}, shape={self.shape}, steps={self.step_count})"


@dataclass
class Node:
    """Opération enregistrée sur la bande"""
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: GradFn


@dataclass
class ComputationTape:
    """Bande d'enregistrement des opérations, dans l'ordre d'exécution

    Utilisée comme gestionnaire de contexte: seules les opérations exécutées
    à l'intérieur du bloc `with` sont enregistrées.
    """
    nodes: List[Node] = field(default_factory=list)

    def __enter__(self) -> 'ComputationTape':
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def record(self, node: Node):
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> Optional['ComputationTape']:
        stack = _tape_stack()
        return stack[-1] if stack else None


def _tape_stack() -> List[ComputationTape]:
    # une pile par thread: une bande ne quitte jamais son thread d'entraînement
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def as_tensor(value: Union[Tensor, Parameter, ArrayLike]) -> Tensor:
    """Convertit un Parameter, un tableau ou un scalaire en Tensor"""
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Parameter):
        return value.value
    return Tensor(value)


def record_op(name: str, inputs: Sequence[Tensor], output_data: np.ndarray, backward_fn: GradFn) -> Tensor:
    """Crée le tenseur de sortie d'une opération et l'enregistre si besoin

    Args:
        name: Nom de l'opération (diagnostic)
        inputs: Tenseurs d'entrée, dans l'ordre attendu par backward_fn
        output_data: Résultat du calcul avant
        backward_fn: Fonction gradient_sortie -> gradients des entrées

    Returns:
        Tenseur de sortie
    """
    requires_grad = any(t.requires_grad for t in inputs)
    dtype = np.float64 if any(t.dtype == np.float64 for t in inputs) else np.float32
    out = Tensor(output_data, requires_grad=requires_grad, dtype=dtype)
    tape = ComputationTape.current()
    if tape is not None and requires_grad:
        node = Node(name, tuple(inputs), out, backward_fn)
        out._node = node
        tape.record(node)
    return out


def backward(loss: Tensor, tape: ComputationTape):
    """Propage les gradients depuis une perte scalaire

    Les gradients des feuilles (paramètres, entrées) s'accumulent:
    c'est à l'appelant de les remettre à zéro.

    Args:
        loss: Perte scalaire produite sur cette bande
        tape: Bande contenant le graphe de la perte
    """
    if loss.size != 1:
        raise ContractError(f"backward attend une perte scalaire, reçu shape={loss.shape}")
    if loss._node is None or all(node is not loss._node for node in tape.nodes):
        raise ContractError("La perte n'a pas été produite sur cette bande")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        if grad_out is None:
            continue
        input_grads = node.backward_fn(grad_out)
        for inp, grad_in in zip(node.inputs, input_grads):
            if grad_in is None or not inp.requires_grad:
                continue
            grad_in = np.asarray(grad_in, dtype=inp.dtype).reshape(inp.shape)
            if inp.is_leaf:
                inp.grad = grad_in.copy() if inp.grad is None else inp.grad + grad_in
            else:
                key = id(inp)
                grads[key] = grad_in if key not in grads else grads[key] + grad_in


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Ramène un gradient diffusé à la forme de l'entrée"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op('add', (a, b), out, grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op('mul', (a, b), out, grad_fn)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        return (g * factor,)

    return record_op('scale', (x,), x.data * factor, grad_fn)


def sum_all(x) -> Tensor:
    """Somme de tous les éléments (accumulation en float64)"""
    x = as_tensor(x)
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op('sum', (x,), total, grad_fn)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)
