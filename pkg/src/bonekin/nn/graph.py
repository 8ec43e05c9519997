"""A small reverse-mode tape over numpy arrays.

Every kernel appends a :class:`Node` to the graph that owns its inputs.  The
graph is therefore already in topological order and :meth:`Graph.backward`
just walks it in reverse.  ``stop_gradient`` nodes have no backward rule, so
nothing upstream of them receives gradient from downstream losses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Node:
    __slots__ = ("graph", "value", "grad", "parents", "backward_fn", "requires_grad", "kind", "param", "config")

    def __init__(self, graph, value, parents=(), backward_fn=None, kind="const", param=None, config=None):
        self.graph = graph
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.kind = kind
        self.param = param
        self.config = config or {}
        if param is not None:
            self.requires_grad = True
        elif kind == "stop" or backward_fn is None:
            self.requires_grad = False
        else:
            self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"


class Graph:
    """Kernel graph; also the record of gradient-stop edges."""

    def __init__(self, store=None):
        self.store = store
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def _add(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._add(Node(self, np.asarray(value, dtype=np.float64)))

    def param(self, name: str) -> Node:
        """Leaf node bound to a store entry (shared across uses within one graph)."""
        node = self._params.get(name)
        if node is None:
            entry = self.store[name]
            node = self._add(Node(self, entry.values, kind="param", param=name))
            self._params[name] = node
        return node

    def op(self, kind: str, value, parents: Sequence[Node], backward_fn: Callable, **config) -> Node:
        return self._add(Node(self, value, parents, backward_fn, kind=kind, config=config))

    def release(self) -> None:
        """Drop the tape.  Nodes point back at their graph, so a finished graph
        is a reference cycle that otherwise waits for the cyclic collector."""
        self.nodes = []
        self._params = {}

    def stop_edges(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "stop"]

    def reached_params(self) -> set[str]:
        """Parameter names that received gradient during the last backward pass."""
        return {n.param for n in self._params.values() if n.grad is not None}

    def backward(self, loss: Node, seed: float = 1.0, accumulate: bool = True) -> None:
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss node")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.full(loss.value.shape, seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None or not node.requires_grad:
                continue
            needs = [p.requires_grad for p in node.parents]
            grads = node.backward_fn(node.grad, needs)
            for parent, g, need in zip(node.parents, grads, needs):
                if not need or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        if accumulate and self.store is not None:
            for name, node in self._params.items():
                if node.grad is not None:
                    entry = self.store[name]
                    entry.grad += node.grad


def stop_gradient(x: Node) -> Node:
    return x.graph._add(Node(x.graph, x.value, (x,), None, kind="stop"))
