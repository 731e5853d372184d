'''
Reverse-mode automatic differentiation over a scalar expression tape.

Every elementary operation appends one AdNode to an AdTape holding the
node's value and the local partials w.r.t. its parents. A node value is
either a float or a 1-D numpy array; arrays are lanes (one per
observation) of the same scalar operation, so a likelihood over n rows
records the same number of nodes as a likelihood over one row.

The module level functions (exp, log, logsumexp, ...) accept plain numbers
and arrays too, in which case they evaluate numerically without a tape.
That lets the likelihood code in this project be written once and used
both for evaluation and for differentiation.
'''
import math
import time
from collections import namedtuple
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy import special

from errors import AdDomainError

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Primitive(object):
    '''
    A differentiable elementary operation.

    forward(xs, aux) -> y
    partials(xs, y, aux) -> dy/dx_k for every input
    tangents(xs, y, dxs, dy, aux) -> directional derivative of each partial
    '''
    __slots__ = ("name", "forward", "partials", "tangents", "positive_domain")

    def __init__(self, name, forward, partials, tangents, positive_domain=False):
        self.name = name
        self.forward = forward
        self.partials = partials
        self.tangents = tangents
        self.positive_domain = positive_domain


PRIMITIVES = {}


def defprimitive(name, forward, partials, tangents, positive_domain=False):
    PRIMITIVES[name] = Primitive(name, forward, partials, tangents, positive_domain)


def _lse_forward(xs, aux):
    if len(xs) == 1:
        return xs[0]
    stacked = np.stack(np.broadcast_arrays(*xs))
    out = special.logsumexp(stacked, axis=0)
    return float(out) if np.ndim(out) == 0 else out


def _lse_partials(xs, y, aux):
    return tuple(np.exp(x - y) for x in xs)


def _lse_tangents(xs, y, dxs, dy, aux):
    return tuple(np.exp(x - y) * (dx - dy) for x, dx in zip(xs, dxs))


def _ndtr_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


defprimitive("add", lambda xs, aux: xs[0] + xs[1],
             lambda xs, y, aux: (1.0, 1.0),
             lambda xs, y, dxs, dy, aux: (0.0, 0.0))
defprimitive("sub", lambda xs, aux: xs[0] - xs[1],
             lambda xs, y, aux: (1.0, -1.0),
             lambda xs, y, dxs, dy, aux: (0.0, 0.0))
defprimitive("mul", lambda xs, aux: xs[0] * xs[1],
             lambda xs, y, aux: (xs[1], xs[0]),
             lambda xs, y, dxs, dy, aux: (dxs[1], dxs[0]))
defprimitive("div", lambda xs, aux: xs[0] / xs[1],
             lambda xs, y, aux: (1.0 / xs[1], -xs[0] / (xs[1] * xs[1])),
             lambda xs, y, dxs, dy, aux: (-dxs[1] / (xs[1] * xs[1]),
                                          -dxs[0] / (xs[1] * xs[1]) + 2.0 * xs[0] * dxs[1] / (xs[1] * xs[1] * xs[1])))
defprimitive("neg", lambda xs, aux: -xs[0],
             lambda xs, y, aux: (-1.0,),
             lambda xs, y, dxs, dy, aux: (0.0,))
defprimitive("power", lambda xs, aux: xs[0] ** aux,
             lambda xs, y, aux: (aux * xs[0] ** (aux - 1.0),),
             lambda xs, y, dxs, dy, aux: (aux * (aux - 1.0) * xs[0] ** (aux - 2.0) * dxs[0],))
defprimitive("exp", lambda xs, aux: np.exp(xs[0]),
             lambda xs, y, aux: (y,),
             lambda xs, y, dxs, dy, aux: (dy,))
defprimitive("log", lambda xs, aux: np.log(xs[0]),
             lambda xs, y, aux: (1.0 / xs[0],),
             lambda xs, y, dxs, dy, aux: (-dxs[0] / (xs[0] * xs[0]),),
             positive_domain=True)
defprimitive("sqrt", lambda xs, aux: np.sqrt(xs[0]),
             lambda xs, y, aux: (0.5 / y,),
             lambda xs, y, dxs, dy, aux: (-0.5 * dy / (y * y),),
             positive_domain=True)
defprimitive("erf", lambda xs, aux: special.erf(xs[0]),
             lambda xs, y, aux: (_TWO_OVER_SQRT_PI * np.exp(-xs[0] * xs[0]),),
             lambda xs, y, dxs, dy, aux: (-2.0 * xs[0] * _TWO_OVER_SQRT_PI * np.exp(-xs[0] * xs[0]) * dxs[0],))
defprimitive("ndtr", lambda xs, aux: special.ndtr(xs[0]),
             lambda xs, y, aux: (_ndtr_pdf(xs[0]),),
             lambda xs, y, dxs, dy, aux: (-xs[0] * _ndtr_pdf(xs[0]) * dxs[0],))
defprimitive("logsumexp", _lse_forward, _lse_partials, _lse_tangents)
defprimitive("vsum", lambda xs, aux: float(np.sum(xs[0])),
             lambda xs, y, aux: (1.0,),
             lambda xs, y, dxs, dy, aux: (0.0,))


class AdNode(object):
    __slots__ = ("op", "parents", "partials", "value", "adjoint", "aux")

    def __init__(self, op, parents, partials, value, aux=None):
        self.op = op
        self.parents = parents
        self.partials = partials
        self.value = value
        self.adjoint = 0.0
        self.aux = aux


def _accumulate(contrib, node_value, parent_value):
    # An array node feeding a scalar parent sums over lanes; a scalar
    # contribution from an array node stands for identical lanes.
    if np.ndim(parent_value) == 0:
        if np.ndim(contrib) > 0:
            return float(np.sum(contrib))
        if np.ndim(node_value) > 0:
            return contrib * np.size(node_value)
    return contrib


class AdTape(object):
    '''
    Topologically ordered list of AdNodes. Parents always precede children,
    so a single backwards pass over the list is a valid reverse sweep.
    '''

    def __init__(self):
        self.nodes: List[AdNode] = []
        self.input_indices: List[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.input_indices = []

    def variable(self, value) -> "Var":
        self.nodes.append(AdNode(None, (), (), value))
        self.input_indices.append(len(self.nodes) - 1)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> int:
        self.nodes.append(AdNode(None, (), (), value))
        return len(self.nodes) - 1

    def apply(self, name: str, args, aux=None) -> "Var":
        prim = PRIMITIVES[name]
        parents = []
        for arg in args:
            if isinstance(arg, Var):
                parents.append(arg.index)
            else:
                parents.append(self.constant(arg))
        xs = [self.nodes[i].value for i in parents]
        if prim.positive_domain and np.any(np.asarray(xs[0]) <= 0.0):
            raise AdDomainError(name, len(self.nodes), float(np.min(xs[0])))
        value = prim.forward(xs, aux)
        partials = prim.partials(xs, value, aux)
        self.nodes.append(AdNode(prim, tuple(parents), partials, value, aux))
        return Var(self, len(self.nodes) - 1)

    def backward(self, output: "Var") -> List:
        nodes = self.nodes
        adjoints = [0.0] * len(nodes)
        adjoints[output.index] = 1.0
        for i in range(output.index, -1, -1):
            node = nodes[i]
            a = adjoints[i]
            node.adjoint = a
            if not node.parents or (np.ndim(a) == 0 and a == 0.0):
                continue
            for p, d in zip(node.parents, node.partials):
                adjoints[p] = adjoints[p] + _accumulate(a * d, node.value, nodes[p].value)
        return adjoints

    def hessian_vector(self, output: "Var", direction: Sequence[float]) -> np.ndarray:
        '''
        Forward-over-reverse: propagate the tangent of every node along
        `direction`, then run the reverse sweep on (adjoint, adjoint-tangent)
        pairs. The tangent parts of the input adjoints are H @ direction.
        '''
        nodes = self.nodes
        dots = [0.0] * len(nodes)
        for k, idx in enumerate(self.input_indices):
            dots[idx] = float(direction[k])
        for i, node in enumerate(nodes):
            if not node.parents:
                continue
            t = 0.0
            for p, d in zip(node.parents, node.partials):
                t = t + d * dots[p]
            if np.ndim(node.value) == 0 and np.ndim(t) > 0:
                t = float(np.sum(t))
            dots[i] = t

        adjoints = [0.0] * len(nodes)
        adjoint_dots = [0.0] * len(nodes)
        adjoints[output.index] = 1.0
        for i in range(output.index, -1, -1):
            node = nodes[i]
            if not node.parents:
                continue
            a = adjoints[i]
            ad = adjoint_dots[i]
            xs = [nodes[p].value for p in node.parents]
            dxs = [dots[p] for p in node.parents]
            dpartials = node.op.tangents(xs, node.value, dxs, dots[i], node.aux)
            for p, d, dd in zip(node.parents, node.partials, dpartials):
                adjoints[p] = adjoints[p] + _accumulate(a * d, node.value, nodes[p].value)
                adjoint_dots[p] = adjoint_dots[p] + _accumulate(ad * d + a * dd, node.value, nodes[p].value)
        return np.array([float(adjoint_dots[i]) for i in self.input_indices])


class Var(object):
    '''Handle to a node on a tape; arithmetic on it records new nodes.'''
    __slots__ = ("tape", "index")
    # Let Var win over numpy scalars and arrays in mixed arithmetic.
    __array_ufunc__ = None

    def __init__(self, tape: AdTape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    def __repr__(self):
        return "Var(index={}, value={!r})".format(self.index, self.value)

    def __add__(self, other):
        return self.tape.apply("add", (self, other))

    def __radd__(self, other):
        return self.tape.apply("add", (other, self))

    def __sub__(self, other):
        return self.tape.apply("sub", (self, other))

    def __rsub__(self, other):
        return self.tape.apply("sub", (other, self))

    def __mul__(self, other):
        return self.tape.apply("mul", (self, other))

    def __rmul__(self, other):
        return self.tape.apply("mul", (other, self))

    def __truediv__(self, other):
        return self.tape.apply("div", (self, other))

    def __rtruediv__(self, other):
        return self.tape.apply("div", (other, self))

    def __neg__(self):
        return self.tape.apply("neg", (self,))

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            raise TypeError("Only constant exponents are supported")
        return self.tape.apply("power", (self,), aux=float(exponent))


DiffFn = Callable[[Sequence[Var]], Var]


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _check_positive(name, x):
    if np.any(np.asarray(x) <= 0.0):
        raise AdDomainError(name, -1, float(np.min(x)))


#==================================================================#
#  Differentiable primitives usable on Vars and on plain numbers
#==================================================================#
def exp(x):
    if isinstance(x, Var):
        return x.tape.apply("exp", (x,))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return x.tape.apply("log", (x,))
    _check_positive("log", x)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        return x.tape.apply("sqrt", (x,))
    _check_positive("sqrt", x)
    return np.sqrt(x)


def erf(x):
    if isinstance(x, Var):
        return x.tape.apply("erf", (x,))
    return special.erf(x)


def std_normal_cdf(x):
    '''Phi(x) = (1 + erf(x / sqrt 2)) / 2, evaluated without cancellation in the tails.'''
    if isinstance(x, Var):
        return x.tape.apply("ndtr", (x,))
    return special.ndtr(x)


def logsumexp(values):
    '''Overflow-safe log(sum(exp(v))); lane-wise when the entries are arrays.'''
    values = list(values)
    if not values:
        raise ValueError("logsumexp of an empty sequence")
    for v in values:
        if isinstance(v, Var):
            return v.tape.apply("logsumexp", values)
    return _lse_forward([np.asarray(v, dtype=float) if np.ndim(v) else float(v) for v in values], None)


def vsum(x):
    '''Sum the lanes of an array-valued node into a scalar.'''
    if isinstance(x, Var):
        return x.tape.apply("vsum", (x,))
    return float(np.sum(x))


#==================================================================#
#  Drivers
#==================================================================#
def record(f: DiffFn, x) -> Tuple[AdTape, object]:
    tape = AdTape()
    xs = [tape.variable(float(v)) for v in np.asarray(x, dtype=float).ravel()]
    out = f(xs)
    if np.ndim(value_of(out)) != 0:
        raise ValueError("Differentiated function must return a scalar")
    return tape, out


def grad(f: DiffFn, x) -> Tuple[float, np.ndarray]:
    '''Value and gradient of f at x from one forward pass and one reverse sweep.'''
    tape, out = record(f, x)
    if not isinstance(out, Var):
        return float(out), np.zeros(len(tape.input_indices))
    adjoints = tape.backward(out)
    gradient = np.array([float(adjoints[i]) for i in tape.input_indices])
    return float(out.value), gradient


def hvp(f: DiffFn, x, v) -> np.ndarray:
    '''Exact Hessian-vector product H(x) @ v.'''
    v = np.asarray(v, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if v.shape != x.shape:
        raise ValueError("Direction has length {} but x has length {}".format(len(v), len(x)))
    tape, out = record(f, x)
    if not isinstance(out, Var):
        return np.zeros_like(x)
    return tape.hessian_vector(out, v)


def logistic_map(x, n: int):
    '''l_1 = x, l_{k+1} = 4 l_k (1 - l_k); returns l_n.'''
    if n < 1:
        raise ValueError("logistic_map needs n >= 1, got {}".format(n))
    l = x
    for _ in range(n - 1):
        l = 4.0 * l * (1.0 - l)
    return l


LogisticMapRun = namedtuple("LogisticMapRun", ["n", "x", "value", "gradient", "nodes", "elapsed_ms"])


def trace_logistic_map(x: float, n: int) -> LogisticMapRun:
    start = time.perf_counter()
    tape, out = record(lambda v: logistic_map(v[0], n), [x])
    if isinstance(out, Var):
        gradient = float(tape.backward(out)[tape.input_indices[0]])
        value = float(out.value)
    else:
        gradient, value = 1.0, float(out)
    elapsed = (time.perf_counter() - start) * 1000.0
    return LogisticMapRun(n, x, value, gradient, len(tape), elapsed)
