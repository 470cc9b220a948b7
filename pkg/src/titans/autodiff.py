"""Matrix-granularity reverse-mode differentiation.

The tape records named primitives over tensors and hands the reverse sweep
to torch autograd. It exists so gradient checks and the outer training loop
share one entry point (:func:`gradients`) with a small, explicit op set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from titans import mathops
from titans.errors import ContractError, NumericalError, UnsupportedOpError


def _slice(x, start, stop, dim=-2):
    return x.narrow(dim, start, stop - start)


PRIMITIVES: dict[str, Callable[..., torch.Tensor]] = {
    "identity": lambda x: x,
    "matmul": lambda a, b: a @ b,
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "scale": lambda x, c: x * c,
    "transpose": lambda x: x.transpose(-1, -2),
    "silu": mathops.silu,
    "silu_grad": mathops.silu_grad,
    "sigmoid": mathops.sigmoid,
    "softmax_rows": mathops.softmax_rows,
    "l2_normalize_rows": lambda x, eps=1e-12: mathops.l2_normalize_rows(x, eps),
    "conv": lambda x, f: mathops.causal_depthwise_conv1d(x, f),
    "slice": _slice,
    "concat": lambda *xs, dim=-2: torch.cat(xs, dim=dim),
    "outer": lambda a, b: a.unsqueeze(-1) * b.unsqueeze(-2),
    "square": lambda x: x * x,
    "sum": lambda x: x.sum().reshape(1, 1),
}


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    value: torch.Tensor
    name: str | None = None
    kwargs: dict = field(default_factory=dict)


class GradMap(dict):
    """Parameter name -> gradient. Missing names read as zeros via :meth:`grad`."""

    def __init__(self, grads: Mapping[str, torch.Tensor], shapes: Mapping[str, torch.Tensor]):
        super().__init__(grads)
        self._like = dict(shapes)

    def grad(self, name: str) -> torch.Tensor:
        if name in self:
            return self[name]
        return torch.zeros_like(self._like[name])


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`leaf`; every other node comes from
    :meth:`record`, whose inputs must already be on this tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}

    def leaf(self, value: torch.Tensor, name: str | None = None, requires_grad: bool = True) -> Node:
        v = value.detach().clone()
        v.requires_grad_(requires_grad)
        node = Node(len(self.nodes), "leaf", (), v, name)
        self.nodes.append(node)
        if name is not None and requires_grad:
            if name in self._leaves:
                raise ContractError(f"duplicate leaf name {name!r}")
            self._leaves[name] = node
        return node

    def record(self, op: str, *inputs, **kwargs) -> Node:
        if op not in PRIMITIVES:
            raise UnsupportedOpError(op)
        args = []
        for x in inputs:
            if isinstance(x, Node):
                if x.id >= len(self.nodes) or self.nodes[x.id] is not x:
                    raise ContractError(f"input node {x.id} is not on this tape")
                args.append(x.value)
            else:
                args.append(x)
        out = PRIMITIVES[op](*args, **kwargs)
        node = Node(len(self.nodes), op, tuple(inputs), out, kwargs=kwargs)
        self.nodes.append(node)
        return node

    def __call__(self, op: str, *inputs, **kwargs) -> Node:
        return self.record(op, *inputs, **kwargs)

    @property
    def leaves(self) -> dict[str, Node]:
        return dict(self._leaves)

    def replay(self, values: Mapping[str, torch.Tensor]) -> "Tape":
        """Re-execute the recorded program with new leaf values."""
        fresh = Tape()
        mapping: dict[int, Node] = {}
        for node in self.nodes:
            if node.op == "leaf":
                src = values.get(node.name, node.value) if node.name else node.value
                mapping[node.id] = fresh.leaf(src, node.name, node.value.requires_grad)
            else:
                ins = tuple(mapping[x.id] if isinstance(x, Node) else x for x in node.inputs)
                mapping[node.id] = fresh.record(node.op, *ins, **node.kwargs)
        return fresh

    def backward(self, loss: Node, upstream: torch.Tensor | float = 1.0) -> GradMap:
        return backward(self, loss, upstream)


def backward(tape: Tape, loss: Node, upstream: torch.Tensor | float = 1.0) -> GradMap:
    """Reverse sweep from a 1x1 loss node to every named leaf."""
    if loss.value.numel() != 1:
        raise ContractError(f"loss must be scalar (1x1), got shape {tuple(loss.value.shape)}")
    leaves = tape.leaves
    names = list(leaves)
    seed = torch.as_tensor(upstream, dtype=loss.value.dtype).reshape(loss.value.shape)
    if not loss.value.requires_grad:
        return GradMap({}, {n: leaves[n].value for n in names})
    grads = torch.autograd.grad(
        loss.value, [leaves[n].value for n in names], grad_outputs=seed,
        retain_graph=True, allow_unused=True,
    )
    found = {n: g for n, g in zip(names, grads) if g is not None}
    return GradMap(found, {n: leaves[n].value for n in names})


def gradients(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. named parameters (zeros when unused)."""
    if loss.numel() != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n]))
        for n, g in zip(names, grads)
    }


def grad_check(
    f: Callable[[Tape, dict[str, Node]], Node],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, leaves)`` builds the program on ``tape`` from the leaf nodes and
    returns the 1x1 loss node.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")

    def run(values: Mapping[str, torch.Tensor]):
        tape = Tape()
        leaves = {n: tape.leaf(v, n) for n, v in values.items()}
        loss = f(tape, leaves)
        if not torch.isfinite(loss.value).all():
            raise NumericalError(f"non-finite forward value {loss.value.flatten()[0].item()}")
        return tape, loss

    base = {n: v.detach().clone().to(torch.float64) for n, v in params.items()}
    tape, loss = run(base)
    analytic = backward(tape, loss)
    worst = 0.0
    with torch.no_grad():
        for name, value in base.items():
            g = analytic.grad(name)
            for idx in range(value.numel()):
                plus = {k: v.clone() for k, v in base.items()}
                minus = {k: v.clone() for k, v in base.items()}
                plus[name].view(-1)[idx] += h
                minus[name].view(-1)[idx] -= h
                fp = run(plus)[1].value.item()
                fm = run(minus)[1].value.item()
                numeric = (fp - fm) / (2 * h)
                err = abs(g.reshape(-1)[idx].item() - numeric) / (abs(numeric) + 1e-12)
                worst = max(worst, err)
    return worst
