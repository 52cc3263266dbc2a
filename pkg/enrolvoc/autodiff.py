"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation is a function that computes its forward value
eagerly and, when any input requires a gradient, records a Node. A Node names
its op kind; the backward rule for that kind lives in BACKWARD_RULES, so that
new primitives (the losses in enrolvoc.metrics, for instance) can register
their own rules without touching this module.

Shapes are never broadcast implicitly. The only exceptions are the bias of
Linear, the per-channel ChannelAffine and the scalar ScalarAffine; everything
else must match exactly or a DimensionError is raised.
"""
import contextlib
import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from enrolvoc import error

_state = {'dtype': np.float32, 'grad': True}
_node_ids = itertools.count()

BACKWARD_RULES = {}


@contextlib.contextmanager
def Precision(dtype):
  """Creates every tensor inside the block with the given float dtype."""
  previous = _state['dtype']
  _state['dtype'] = np.dtype(dtype).type
  try:
    yield
  finally:
    _state['dtype'] = previous


@contextlib.contextmanager
def NoGrad():
  """Disables graph recording inside the block."""
  previous = _state['grad']
  _state['grad'] = False
  try:
    yield
  finally:
    _state['grad'] = previous


def BackwardRule(op):
  """Registers a backward rule for an op kind.

  The rule is called as rule(node, grad) and returns one gradient (or None)
  per node input, in input order.
  """
  def Register(rule):
    BACKWARD_RULES[op] = rule
    return rule
  return Register


class GrlSetting(object):
  """Backward-pass gradient scale shared by gradient reversal nodes."""

  def __init__(self, multiplier=1.0):
    self.multiplier = multiplier

  @property
  def multiplier(self):
    return self._multiplier

  @multiplier.setter
  def multiplier(self, value):
    value = float(value)
    if not math.isfinite(value):
      raise error.ContractError(
          'Gradient reversal multiplier must be finite, got {}.'.format(value))
    self._multiplier = value

  def __repr__(self):
    return 'GrlSetting({})'.format(self._multiplier)


class Node(object):
  """One recorded operation of the graph."""

  def __init__(self, op, inputs, value, ctx):
    self.id = next(_node_ids)
    self.op = op
    self.inputs = tuple(inputs)
    self.value = value
    self.ctx = ctx

  def __repr__(self):
    return 'Node({}#{})'.format(self.op, self.id)


class Tensor(object):
  """An n-dimensional float array that may take part in a graph."""

  def __init__(self, values, requires_grad=False, name=None, node=None):
    self.values = np.asarray(values, dtype=_state['dtype'])
    if any(extent < 1 for extent in self.values.shape):
      raise error.ContractError(
          'Tensor extents must be positive, got {}.'.format(
              self.values.shape))
    self.requires_grad = bool(requires_grad)
    self.grad = None
    self.name = name
    self.node = node

  @property
  def shape(self):
    return self.values.shape

  @property
  def ndim(self):
    return self.values.ndim

  def Item(self):
    return float(self.values)

  def ZeroGrad(self):
    self.grad = None

  def AccumulateGrad(self, grad):
    if not self.requires_grad:
      return
    if self.grad is None:
      self.grad = np.array(grad, dtype=self.values.dtype)
    else:
      self.grad = self.grad + grad

  def __repr__(self):
    label = self.name or (self.node and self.node.op) or 'leaf'
    return 'Tensor({}, shape={})'.format(label, self.shape)


def Parameter(values, name=None):
  return Tensor(values, requires_grad=True, name=name)


def Apply(op, inputs, values, ctx=None):
  """Wraps a forward value, recording a node when gradients are needed."""
  out = Tensor(values)
  if _state['grad'] and any(t.requires_grad for t in inputs):
    out.requires_grad = True
    out.node = Node(op, inputs, out.values, ctx or {})
  return out


# ----------------------------------------------------------
# Dense primitives.


def Linear(x, w, b=None):
  """out[b,o] = sum_i x[b,i] w[i,o] + b[o]."""
  if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
    raise error.DimensionError('linear', x.shape, w.shape)
  if b is not None and b.shape != (w.shape[1],):
    raise error.DimensionError('linear', w.shape, b.shape)
  values = x.values @ w.values
  inputs = (x, w)
  if b is not None:
    values = values + b.values
    inputs = (x, w, b)
  return Apply('linear', inputs, values)


@BackwardRule('linear')
def _LinearBackward(node, grad):
  x, w = node.inputs[0].values, node.inputs[1].values
  grads = [grad @ w.T, x.T @ grad]
  if len(node.inputs) == 3:
    grads.append(grad.sum(axis=0))
  return grads


def Add(a, b):
  if a.shape != b.shape:
    raise error.DimensionError('add', a.shape, b.shape)
  return Apply('add', (a, b), a.values + b.values)


@BackwardRule('add')
def _AddBackward(node, grad):
  return grad, grad


def Mul(a, b):
  if a.shape != b.shape:
    raise error.DimensionError('mul', a.shape, b.shape)
  return Apply('mul', (a, b), a.values * b.values)


@BackwardRule('mul')
def _MulBackward(node, grad):
  a, b = node.inputs
  return grad * b.values, grad * a.values


def ScalarAffine(x, scale=1.0, shift=0.0):
  """scale * x + shift with Python scalars."""
  return Apply('scalar_affine', (x,), x.values * scale + shift,
               {'scale': scale})


@BackwardRule('scalar_affine')
def _ScalarAffineBackward(node, grad):
  return (grad * node.ctx['scale'],)


def Relu(x):
  return Apply('relu', (x,), np.maximum(x.values, 0))


@BackwardRule('relu')
def _ReluBackward(node, grad):
  return (grad * (node.inputs[0].values > 0),)


def Sigmoid(x):
  return Apply('sigmoid', (x,), special.expit(x.values))


@BackwardRule('sigmoid')
def _SigmoidBackward(node, grad):
  y = node.value
  return (grad * y * (1 - y),)


def Softmax(x, axis=-1):
  """Softmax along one axis, computed after subtracting the maximum."""
  if not np.all(np.isfinite(x.values)):
    raise error.NumericError('Softmax input is not finite.', 'softmax')
  shifted = x.values - x.values.max(axis=axis, keepdims=True)
  exps = np.exp(shifted)
  return Apply('softmax', (x,), exps / exps.sum(axis=axis, keepdims=True),
               {'axis': axis})


@BackwardRule('softmax')
def _SoftmaxBackward(node, grad):
  y = node.value
  axis = node.ctx['axis']
  return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


def GradReversal(x, setting):
  """Identity forward; scales the gradient by setting.multiplier backward."""
  return Apply('grad_reversal', (x,), x.values, {'setting': setting})


@BackwardRule('grad_reversal')
def _GradReversalBackward(node, grad):
  return (grad * node.ctx['setting'].multiplier,)


def Sum(x, axis=None):
  return Apply('sum', (x,), x.values.sum(axis=axis), {'axis': axis})


@BackwardRule('sum')
def _SumBackward(node, grad):
  shape = node.inputs[0].shape
  axis = node.ctx['axis']
  if axis is not None:
    grad = np.expand_dims(grad, axis)
  return (np.broadcast_to(grad, shape),)


def Mean(x, axis=None):
  return Apply('mean', (x,), x.values.mean(axis=axis), {'axis': axis})


@BackwardRule('mean')
def _MeanBackward(node, grad):
  shape = node.inputs[0].shape
  axis = node.ctx['axis']
  count = np.prod(shape) if axis is None else shape[axis]
  if axis is not None:
    grad = np.expand_dims(grad, axis)
  return (np.broadcast_to(grad / count, shape),)


def Reshape(x, shape):
  shape = tuple(shape)
  if int(np.prod(shape)) != x.values.size:
    raise error.DimensionError('reshape', x.shape, shape)
  return Apply('reshape', (x,), x.values.reshape(shape))


@BackwardRule('reshape')
def _ReshapeBackward(node, grad):
  return (grad.reshape(node.inputs[0].shape),)


def Flatten(x):
  """Flattens everything but the batch axis."""
  return Reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def Concat(tensors, axis=0):
  """Concatenates along the batch axis (or another axis)."""
  tensors = tuple(tensors)
  if not tensors:
    raise error.ContractError('concat: nothing to concatenate.')
  first = tensors[0].shape
  for t in tensors[1:]:
    rest = t.shape[:axis] + t.shape[axis + 1:]
    if t.ndim != len(first) or rest != first[:axis] + first[axis + 1:]:
      raise error.DimensionError('concat', first, t.shape)
  values = np.concatenate([t.values for t in tensors], axis=axis)
  return Apply('concat', tensors, values,
               {'axis': axis, 'sizes': [t.shape[axis] for t in tensors]})


@BackwardRule('concat')
def _ConcatBackward(node, grad):
  bounds = np.cumsum(node.ctx['sizes'])[:-1]
  return np.split(grad, bounds, axis=node.ctx['axis'])


def RepeatRows(x, count):
  """Tiles a 1xD row into count rows."""
  if x.ndim != 2 or x.shape[0] != 1:
    raise error.DimensionError('repeat_rows', x.shape, (1, -1))
  return Apply('repeat_rows', (x,), np.repeat(x.values, count, axis=0))


@BackwardRule('repeat_rows')
def _RepeatRowsBackward(node, grad):
  return (grad.sum(axis=0, keepdims=True),)


# ----------------------------------------------------------
# Convolutional primitives.


def _Pair(value):
  if isinstance(value, int):
    return (value, value)
  return tuple(value)


def _Windows(xp, kh, kw, stride):
  windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
  return windows[:, :, ::stride[0], ::stride[1]]


def Conv2d(x, k, stride=1, pad=0):
  """Cross-correlation of a BxCxHxW input with FxCxkhxkw kernels."""
  stride, pad = _Pair(stride), _Pair(pad)
  if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
    raise error.DimensionError('conv2d', x.shape, k.shape)
  _, _, kh, kw = k.shape
  if kh > x.shape[2] + 2 * pad[0] or kw > x.shape[3] + 2 * pad[1]:
    raise error.DimensionError('conv2d', x.shape, k.shape)
  xp = np.pad(x.values, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
  windows = _Windows(xp, kh, kw, stride)
  values = np.tensordot(windows, k.values, axes=([1, 4, 5], [1, 2, 3]))
  return Apply('conv2d', (x, k),
               np.ascontiguousarray(values.transpose(0, 3, 1, 2)),
               {'stride': stride, 'pad': pad})


@BackwardRule('conv2d')
def _Conv2dBackward(node, grad):
  x, k = node.inputs
  stride, pad = node.ctx['stride'], node.ctx['pad']
  _, _, kh, kw = k.shape
  xp = np.pad(x.values, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
  grad_k = np.tensordot(grad, _Windows(xp, kh, kw, stride),
                        axes=([0, 2, 3], [0, 2, 3]))
  grad_x = None
  if x.requires_grad:
    out_h, out_w = grad.shape[2:]
    grad_xp = np.zeros_like(xp)
    for i in range(kh):
      for j in range(kw):
        contribution = np.tensordot(grad, k.values[:, :, i, j], axes=([1], [0]))
        grad_xp[:, :,
                i:i + stride[0] * (out_h - 1) + 1:stride[0],
                j:j + stride[1] * (out_w - 1) + 1:stride[1]] += (
                    contribution.transpose(0, 3, 1, 2))
    grad_x = grad_xp[:, :, pad[0]:pad[0] + x.shape[2],
                     pad[1]:pad[1] + x.shape[3]]
  return grad_x, grad_k


def ChannelAffine(x, scale, shift):
  """Per-channel scale and shift of a BxCxHxW map."""
  channels = x.shape[1] if x.ndim == 4 else None
  if channels is None or scale.shape != (channels,) or (
      shift.shape != (channels,)):
    raise error.DimensionError('channel_affine', x.shape, scale.shape)
  values = (x.values * scale.values[None, :, None, None]
            + shift.values[None, :, None, None])
  return Apply('channel_affine', (x, scale, shift), values)


@BackwardRule('channel_affine')
def _ChannelAffineBackward(node, grad):
  x, scale, _ = node.inputs
  return (grad * scale.values[None, :, None, None],
          (grad * x.values).sum(axis=(0, 2, 3)),
          grad.sum(axis=(0, 2, 3)))


def AvgPool2d(x, size=2):
  """Non-overlapping average pooling; trailing rows/columns are dropped."""
  ph, pw = _Pair(size)
  if x.ndim != 4 or x.shape[2] < ph or x.shape[3] < pw:
    raise error.DimensionError('avg_pool2d', x.shape, (ph, pw))
  b, c, h, w = x.shape
  oh, ow = h // ph, w // pw
  cropped = x.values[:, :, :oh * ph, :ow * pw]
  values = cropped.reshape(b, c, oh, ph, ow, pw).mean(axis=(3, 5))
  return Apply('avg_pool2d', (x,), values, {'size': (ph, pw)})


@BackwardRule('avg_pool2d')
def _AvgPool2dBackward(node, grad):
  ph, pw = node.ctx['size']
  shape = node.inputs[0].shape
  oh, ow = grad.shape[2:]
  grad_x = np.zeros(shape, dtype=grad.dtype)
  spread = np.repeat(np.repeat(grad, ph, axis=2), pw, axis=3) / (ph * pw)
  grad_x[:, :, :oh * ph, :ow * pw] = spread
  return (grad_x,)


def GlobalAvgPool(x):
  """Collapses the spatial extents of a BxCxHxW map to 1x1 by averaging."""
  if x.ndim != 4:
    raise error.DimensionError('global_avg_pool', x.shape, ('B', 'C', 'H', 'W'))
  return Apply('global_avg_pool', (x,),
               x.values.mean(axis=(2, 3), keepdims=True))


@BackwardRule('global_avg_pool')
def _GlobalAvgPoolBackward(node, grad):
  shape = node.inputs[0].shape
  return (np.broadcast_to(grad / (shape[2] * shape[3]), shape),)


def GlobalMaxPool(x):
  """Collapses the spatial extents of a BxCxHxW map to 1x1 by maximum."""
  if x.ndim != 4:
    raise error.DimensionError('global_max_pool', x.shape, ('B', 'C', 'H', 'W'))
  b, c, h, w = x.shape
  flat = x.values.reshape(b, c, h * w)
  argmax = flat.argmax(axis=2)
  values = np.take_along_axis(flat, argmax[:, :, None], axis=2)
  return Apply('global_max_pool', (x,), values.reshape(b, c, 1, 1),
               {'argmax': argmax})


@BackwardRule('global_max_pool')
def _GlobalMaxPoolBackward(node, grad):
  b, c, h, w = node.inputs[0].shape
  grad_x = np.zeros((b, c, h * w), dtype=grad.dtype)
  np.put_along_axis(grad_x, node.ctx['argmax'][:, :, None],
                    grad.reshape(b, c, 1), axis=2)
  return (grad_x.reshape(b, c, h, w),)


# ----------------------------------------------------------
# Graph traversal.


def GraphNodes(tensor):
  """Returns the nodes reachable from tensor, keyed by node id."""
  nodes = {}
  stack = [tensor.node] if tensor.node is not None else []
  while stack:
    node = stack.pop()
    if node.id in nodes:
      continue
    nodes[node.id] = node
    for t in node.inputs:
      if t.node is not None and t.node.id not in nodes:
        stack.append(t.node)
  return nodes


def CheckGraphFinite(tensor):
  """Raises NonFiniteValue naming the first node holding a non-finite value."""
  for node_id, node in sorted(GraphNodes(tensor).items()):
    if not np.all(np.isfinite(node.value)):
      raise error.NonFiniteValue(node.op, node_id)


def Backward(loss):
  """Accumulates d(loss)/d(t) into t.grad for every reachable tensor t.

  Nodes are visited in decreasing id order. Inputs are always created before
  the nodes that consume them, so this is a reverse topological order, and it
  is the same order on every run.
  """
  if loss.shape != ():
    raise error.ContractError(
        'backward: loss must be a scalar, got shape {}.'.format(loss.shape))
  seed = np.ones((), dtype=loss.values.dtype)
  loss.AccumulateGrad(seed)
  if loss.node is None:
    return
  nodes = GraphNodes(loss)
  pending = {loss.node.id: seed}
  for node_id in sorted(nodes, reverse=True):
    grad = pending.pop(node_id, None)
    if grad is None:
      continue
    node = nodes[node_id]
    input_grads = BACKWARD_RULES[node.op](node, grad)
    for t, t_grad in zip(node.inputs, input_grads):
      if t_grad is None or not t.requires_grad:
        continue
      t_grad = np.asarray(t_grad, dtype=t.values.dtype)
      if t_grad.shape != t.shape:
        raise error.DimensionError(node.op + ' backward', t.shape, t_grad.shape)
      t.AccumulateGrad(t_grad)
      if t.node is not None:
        if t.node.id in pending:
          pending[t.node.id] = pending[t.node.id] + t_grad
        else:
          pending[t.node.id] = t_grad


# ----------------------------------------------------------
# Gradient verification.


class GradCheckResult(object):
  """Outcome of GradCheck."""

  def __init__(self, max_error, worst, checked, skipped):
    self.max_error = max_error
    self.worst = worst
    self.checked = checked
    self.skipped = skipped

  def __float__(self):
    return float(self.max_error)

  def __repr__(self):
    return 'GradCheckResult(max_error={:.3g}, worst={}, checked={}, ' \
        'skipped={})'.format(self.max_error, self.worst, self.checked,
                             self.skipped)


def GradCheck(build, params, eps=1e-3, max_elements=None, seed=0, atol=1e-6,
              kink_tol=0.1, scale=1.0):
  """Compares backward gradients with central differences.

  The analytic gradients come from Backward at the current precision (32-bit
  by default). The central differences are evaluated at 64-bit.

  Elements whose left and right one-sided differences disagree by more than
  kink_tol (relative) sit within eps of a non-differentiable point (a ReLU or
  max-pool switch); they are skipped and counted. Elements whose absolute
  difference is at most atol count as exact.

  Args:
    build: callable taking no arguments and returning a scalar loss Tensor
        computed from params.
    params: the Tensors to differentiate with respect to.
    eps: finite-difference step.
    max_elements: if set, at most this many randomly chosen elements of each
        parameter are checked.
    seed: seed for the element subsample.
    scale: factor applied to the central differences before comparison. A
        graph whose params all sit upstream of a reversal node with
        multiplier m is checked with scale m, since differences only see the
        forward pass.
  Returns:
    A GradCheckResult; max_error is the maximum over checked elements of
    |analytic - scale * cd| / max(|analytic|, |scale * cd|, 1e-8).
  """
  if eps <= 0:
    raise error.ContractError('grad_check: eps must be positive.')
  params = list(params)
  for p in params:
    p.ZeroGrad()
  loss = build()
  CheckGraphFinite(loss)
  Backward(loss)
  analytic = [np.zeros(p.shape) if p.grad is None
              else p.grad.astype(np.float64) for p in params]

  rng = np.random.default_rng(seed)
  originals = [p.values for p in params]
  max_error, worst, checked, skipped = 0.0, None, 0, 0

  def Evaluate():
    with NoGrad():
      value = build()
    if not np.all(np.isfinite(value.values)):
      # Rebuilt with recording on so the first non-finite node is named.
      CheckGraphFinite(build())
      raise error.NonFiniteValue('grad_check')
    return float(value.values)

  try:
    with Precision(np.float64):
      for p in params:
        p.values = p.values.astype(np.float64)
      base = Evaluate()
      for index, p in enumerate(params):
        flat = p.values.reshape(-1)
        elements = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
          elements = np.sort(rng.choice(flat.size, max_elements, replace=False))
        for element in elements:
          original = flat[element]
          flat[element] = original + eps
          plus = Evaluate()
          flat[element] = original - eps
          minus = Evaluate()
          flat[element] = original
          right, left = (plus - base) / eps, (base - minus) / eps
          if abs(right - left) > max(
              atol, kink_tol * max(abs(right), abs(left))):
            skipped += 1
            continue
          central = scale * (plus - minus) / (2 * eps)
          value = analytic[index].reshape(-1)[element]
          difference = abs(value - central)
          checked += 1
          if difference <= atol:
            continue
          relative = difference / max(abs(value), abs(central), 1e-8)
          if relative > max_error:
            max_error = relative
            worst = '{}[{}]'.format(p.name or 'param{}'.format(index), element)
  finally:
    for p, original in zip(params, originals):
      p.values = original
  return GradCheckResult(max_error, worst, checked, skipped)
