"""
Differenziazione automatica reverse-mode su tensori densi numpy.

Il grafo viene ricostruito a ogni forward (define-by-run): ogni Tensor
prodotto da un'operazione ricorda i genitori e la funzione che propaga
il gradiente. backward() visita il grafo in ordine topologico inverso.

Broadcast ammesso solo sugli assi iniziali: la forma dell'operando piu'
piccolo deve coincidere con la coda della forma dell'altro.
"""

import contextlib
import hashlib

import numpy as np
from scipy.special import logsumexp

from .errors import ShapeError

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disabilita la registrazione del grafo (valutazione, decodifica greedy)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """Array denso con gradiente opzionale."""

    __slots__ = ('data', 'requires_grad', 'grad', '_parents', '_grad_fn', 'op')

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _grad_fn=None, op=''):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != 'f':
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        """Stessi valori, nessun gradiente."""
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, grad_fn, op):
    """Crea il risultato registrando il nodo solo se serve il gradiente."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn, op=op)
    return Tensor(data, op=op)


def _is_suffix(small, big):
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _unbroadcast(grad, shape):
    """Somma il gradiente sugli assi iniziali aggiunti dal broadcast."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_broadcast(op, a, b):
    if a.shape == b.shape or _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return
    raise ShapeError(op, a.shape, b.shape, detail='broadcast solo sugli assi iniziali')


# ============ OPERAZIONI ============

def add(a, b):
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    _check_broadcast('add', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, 'add')


def sub(a, b):
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    _check_broadcast('sub', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, 'sub')


def mul(a, b):
    """Prodotto elemento per elemento."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    _check_broadcast('mul', a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, 'mul')


def scale(a, factor):
    """Moltiplica per una costante scalare."""
    a = as_tensor(a)
    factor = float(factor)

    def grad_fn(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), grad_fn, 'scale')


def matmul(a, b):
    """
    Prodotto matriciale con semantica np.matmul.

    Ammessi: (m,k)@(k,n), (..., m,k)@(k,n) con pesi condivisi,
    (B, m,k)@(B, k,n) batch con le stesse dimensioni di testa.
    """
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError('matmul', a.shape, b.shape, detail='servono operandi almeno 2-D')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape, detail='dimensioni interne diverse')
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError('matmul', a.shape, b.shape, detail='dimensioni batch diverse')

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), grad_fn, 'matmul')


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), grad_fn, 'tanh')


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), grad_fn, 'sigmoid')


def log(a):
    """Logaritmo naturale (input positivo)."""
    a = as_tensor(a)

    def grad_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), grad_fn, 'log')


def softmax(a):
    """Softmax sull'ultimo asse."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError('softmax', a.shape, detail='input vuoto')
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), grad_fn, 'softmax')


def log_softmax(a):
    """log(softmax(a)) sull'ultimo asse, calcolato con log-sum-exp."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError('log_softmax', a.shape, detail='input vuoto')
    out = a.data - logsumexp(a.data, axis=-1, keepdims=True)

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), grad_fn, 'log_softmax')


def concat(tensors, axis=-1):
    """Concatenazione lungo un asse (default: l'ultimo)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError('concat', (), detail='lista vuota')
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError('concat', ref.shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tuple(tensors), grad_fn, 'concat')


def stack(tensors):
    """Impila tensori della stessa forma lungo un nuovo asse iniziale."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def take_rows(table, indices):
    """Gather di righe: table (N, D), indices interi di forma qualsiasi -> (..., D)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError('take_rows', table.shape, detail='tabella 2-D attesa')
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError('take_rows', table.shape, idx.shape, detail='indice fuori intervallo')

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[idx], (table,), grad_fn, 'take_rows')


def index_first(a, i):
    """a[i] lungo il primo asse."""
    a = as_tensor(a)
    if not 0 <= i < a.shape[0]:
        raise ShapeError('index_first', a.shape, detail=f'indice {i} fuori intervallo')

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _result(a.data[i], (a,), grad_fn, 'index_first')


def pick(a, indices):
    """Per ogni riga di a (B, C) seleziona l'elemento indices[b] -> (B,)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError('pick', a.shape, idx.shape)
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _result(a.data[rows, idx], (a,), grad_fn, 'pick')


def take(a, flat_indices):
    """
    Gather su a appiattito; l'indice -1 produce 0 (padding) senza gradiente.

    Usato per im2col e per raggruppare colonne nell'encoder.
    """
    a = as_tensor(a)
    idx = np.asarray(flat_indices, dtype=np.int64)
    ext = np.append(a.data.reshape(-1), np.zeros(1, dtype=a.data.dtype))

    def grad_fn(g):
        gext = np.zeros(a.data.size + 1, dtype=a.data.dtype)
        np.add.at(gext, idx.reshape(-1), g.reshape(-1))
        return (gext[:-1].reshape(a.shape),)

    return _result(ext[idx], (a,), grad_fn, 'take')


def slice_last(a, start, stop):
    """a[..., start:stop]."""
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError('slice_last', a.shape, detail=f'intervallo [{start}, {stop})')

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _result(a.data[..., start:stop], (a,), grad_fn, 'slice_last')


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', a.shape, tuple(shape)) from None

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), grad_fn, 'reshape')


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), grad_fn, 'transpose')


def sum(a, axis=None):
    a = as_tensor(a)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), grad_fn, 'sum')


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def _dtype_of(x):
    return x.data.dtype if isinstance(x, Tensor) else None


# ============ BACKWARD ============

def _topological_order(root):
    """Ordine topologico iterativo (i grafi ricorrenti sono profondi)."""
    order = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss):
    """
    Propaga d loss / d tensore a tutti i tensori foglia con requires_grad.

    I gradienti delle foglie si accumulano finche' non vengono azzerati.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else ()
        raise ShapeError('backward', shape, detail='la loss deve essere uno scalare')
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ============ PARAMETRI ============

class ParamSet:
    """Mappa ordinata nome -> Tensor; iterazione in ordine lessicografico."""

    def __init__(self, entries=None):
        self._entries = {}
        for name, tensor in (entries or {}).items():
            self.add(name, tensor)

    def add(self, name, tensor):
        if name in self._entries:
            raise KeyError(f"parametro duplicato: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries))

    def items(self):
        return [(name, self._entries[name]) for name in self]

    def names(self, prefixes=None):
        """Nomi filtrati per prefisso (es. ('enc.', 'dec.'))."""
        if prefixes is None:
            return list(self)
        return [n for n in self if n.startswith(tuple(prefixes))]

    def remove(self, prefixes):
        for name in self.names(prefixes):
            del self._entries[name]

    def zero_grad(self):
        for tensor in self._entries.values():
            tensor.grad = None

    def numel(self, prefixes=None):
        return int(np.sum([self[n].data.size for n in self.names(prefixes)]))

    def digest(self, prefixes=None):
        """Hash SHA-256 dei valori (controllo dei blocchi congelati)."""
        h = hashlib.sha256()
        for name in self.names(prefixes):
            h.update(name.encode('utf-8'))
            h.update(np.ascontiguousarray(self[name].data).tobytes())
        return h.hexdigest()

    def snapshot(self, prefixes=None):
        """Copia dei valori come dizionario di array."""
        return {n: self[n].data.copy() for n in self.names(prefixes)}


def _checked_entries(data, rows):
    if rows is None:
        return range(data.size)
    stride = data.size // data.shape[0]
    return [r * stride + k for r in sorted(set(int(r) for r in rows)) for k in range(stride)]


def grad_check(f, params, eps=1e-4, names=None, floor=1e-12, rows=None):
    """
    Confronta il gradiente analitico con differenze finite centrali
    (stencil a cinque punti).

    Args:
        f: funzione ParamSet -> Tensor scalare, deterministica
        params: ParamSet
        eps: passo delle differenze finite
        names: sottoinsieme di parametri da controllare (default: tutti)
        floor: minimo del denominatore dell'errore relativo
        rows: dict nome -> indici lungo il primo asse da controllare
              (default: tutto il parametro)

    Returns:
        massimo errore relativo |analitico - fd| / max(|analitico|, |fd|, floor)
    """
    if eps <= 0:
        raise ValueError("eps deve essere positivo")
    names = list(params) if names is None else list(names)
    params.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                    else np.zeros_like(params[n].data)) for n in names}
    params.zero_grad()

    def evaluate():
        with no_grad():
            return float(f(params).data.reshape(-1)[0])

    worst = 0.0
    for name in names:
        data = params[name].data
        flat = data.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in _checked_entries(data, (rows or {}).get(name)):
            orig = flat[i]
            values = []
            for step in (-2, -1, 1, 2):
                flat[i] = orig + step * eps
                values.append(evaluate())
            flat[i] = orig
            fd = (values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * eps)
            denom = max(abs(an[i]), abs(fd), floor)
            worst = max(worst, abs(an[i] - fd) / denom)
    return worst
