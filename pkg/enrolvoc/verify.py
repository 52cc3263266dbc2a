"""Self-checks of the differentiation engine and the conditioning path.

RunSuite runs, in order:
  * a finite-difference check of every primitive over several seeds,
  * the same check on the full variant-7 graph at desk size,
  * a chain through a reversal node at multiplier -1, against -1 times the
    central differences,
  * gradient reversal negation on variants 2 and 5, comparing encoder
    gradients at multipliers +1 and -1 for the adversarial head alone,
  * attention invariants of variant 3: uniform attention at P = 0, rows
    summing to 1, and enrolment order invariance.
"""
import logging

import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import data
from enrolvoc import metrics
from enrolvoc import model as model_lib
from enrolvoc import trainer

logger = logging.getLogger(__name__)

TOLERANCE = 1e-2
GRL_TOLERANCE = 1e-6
SOFTMAX_TOLERANCE = 1e-6


class Check(object):
  """Result of one named check."""

  def __init__(self, name, max_error, tolerance, detail=None):
    self.name = name
    self.max_error = float(max_error)
    self.tolerance = tolerance
    self.detail = detail

  @property
  def passed(self):
    return np.isfinite(self.max_error) and self.max_error < self.tolerance

  def ToDict(self):
    return {
        'name': self.name,
        'max_error': self.max_error,
        'tolerance': self.tolerance,
        'passed': bool(self.passed),
        'detail': self.detail,
    }

  def __repr__(self):
    return 'Check({}, {:.2e}, {})'.format(
        self.name, self.max_error, 'ok' if self.passed else 'FAIL')


def _Input(rng, shape, name):
  return autodiff.Parameter(rng.normal(0.0, 1.0, shape), name)


def _PrimitiveCases(rng):
  """(op name, params, forward) triples; forward maps params to a tensor."""
  x = _Input(rng, (3, 4), 'x')
  w = _Input(rng, (4, 5), 'w')
  b = _Input(rng, (5,), 'b')
  y = _Input(rng, (3, 4), 'y')
  img = _Input(rng, (2, 3, 6, 5), 'img')
  kernel = _Input(rng, (4, 3, 3, 3), 'kernel')
  scale = _Input(rng, (3,), 'scale')
  shift = _Input(rng, (3,), 'shift')
  row = _Input(rng, (1, 4), 'row')
  pred = _Input(rng, (6, 3), 'pred')
  target = _Input(rng, (6, 3), 'target')
  logits = _Input(rng, (5, 4), 'logits')
  labels = rng.integers(0, 4, 5)
  identity = autodiff.GrlSetting(1.0)
  return [
      ('linear', [x, w, b], lambda: autodiff.Linear(x, w, b)),
      ('add', [x, y], lambda: autodiff.Add(x, y)),
      ('mul', [x, y], lambda: autodiff.Mul(x, y)),
      ('scalar_affine', [x], lambda: autodiff.ScalarAffine(x, -1.5, 0.25)),
      ('relu', [x], lambda: autodiff.Relu(x)),
      ('sigmoid', [x], lambda: autodiff.Sigmoid(x)),
      ('softmax', [x], lambda: autodiff.Softmax(x)),
      ('grad_reversal', [x], lambda: autodiff.GradReversal(x, identity)),
      ('sum', [img], lambda: autodiff.Sum(img, axis=2)),
      ('mean', [img], lambda: autodiff.Mean(img, axis=1)),
      ('reshape', [x], lambda: autodiff.Reshape(x, (2, 6))),
      ('flatten', [img], lambda: autodiff.Flatten(img)),
      ('concat', [x, y], lambda: autodiff.Concat([x, y], axis=1)),
      ('repeat_rows', [row], lambda: autodiff.RepeatRows(row, 3)),
      ('conv2d', [img, kernel],
       lambda: autodiff.Conv2d(img, kernel, stride=1, pad=1)),
      ('conv2d_strided', [img, kernel],
       lambda: autodiff.Conv2d(img, kernel, stride=2, pad=0)),
      ('channel_affine', [img, scale, shift],
       lambda: autodiff.ChannelAffine(img, scale, shift)),
      ('avg_pool2d', [img], lambda: autodiff.AvgPool2d(img, 2)),
      ('global_avg_pool', [img], lambda: autodiff.GlobalAvgPool(img)),
      ('global_max_pool', [img], lambda: autodiff.GlobalMaxPool(img)),
      ('ccc_columns', [pred, target],
       lambda: metrics.ConcordanceColumns(pred, target)),
      ('cross_entropy', [logits],
       lambda: metrics.CrossEntropy(logits, labels)),
  ]


def PrimitiveChecks(seeds=10):
  """Finite-difference checks of every primitive; worst case over seeds."""
  errors = {}
  worst = {}
  for seed in range(seeds):
    rng = np.random.default_rng([seed, 0])
    for name, params, forward in _PrimitiveCases(rng):
      projection_rng = np.random.default_rng([seed, 1])
      # Fixed random weights reduce the output to a scalar.
      shape = forward().shape
      weights = autodiff.Tensor(
          projection_rng.normal(0.0, 1.0, shape))
      result = autodiff.GradCheck(
          lambda: autodiff.Sum(autodiff.Mul(forward(), weights)), params,
          seed=seed)
      if result.max_error >= errors.get(name, -1.0):
        errors[name] = result.max_error
        worst[name] = 'seed {}: {}'.format(seed, result.worst)
  return [Check(name, errors[name], TOLERANCE, worst[name]) for name in errors]


def _DeskModel(number, n_speakers=3, seed=0):
  spec = model_lib.VariantSpec.FromNumber(number)
  return model_lib.BuildVariant(spec, model_lib.EncoderConfig.Desk(),
                                n_speakers, seed)


def _FakeBatch(rng, size, n_speakers, frames=8, mels=8):
  """Random encoder inputs and labels for a batch of size pairs."""
  targets = autodiff.Tensor(rng.normal(0.0, 1.0, (size, 1, frames, mels)))
  enrolments = autodiff.Tensor(
      rng.normal(0.0, 1.0, (2 * size, 1, frames, mels)))
  batch = data.Batch(
      list(range(size)), None,
      rng.uniform(0.0, 1.0, (size, enrolvoc.N_EMOTIONS)),
      rng.integers(0, n_speakers, size),
      enrolments=None,
      enrolment_labels=rng.uniform(0.0, 1.0, (size, enrolvoc.N_EMOTIONS)))
  return targets, enrolments, batch


def ComposedCheck(seeds=10, max_elements=4):
  """Finite-difference check of the whole variant-7 loss."""
  max_error, detail = 0.0, None
  for seed in range(seeds):
    model = _DeskModel(7, seed=seed)
    rng = np.random.default_rng([seed, 2])
    # The reversal nodes must pass gradients unchanged for differences to
    # agree with them.
    model.grl.multiplier = 1.0
    # A non-zero projection so the attention path carries gradient.
    model.projection.weight.values = rng.normal(
        0.0, 0.1, model.projection.weight.shape).astype(np.float32)
    targets, enrolments, batch = _FakeBatch(rng, 4, model.n_speakers)

    def Loss():
      outputs = model.Forward(targets, enrolments)
      return metrics.CombineLosses(trainer.LossTerms(outputs, batch))

    result = autodiff.GradCheck(Loss, model.Parameters().values(),
                                max_elements=max_elements, seed=seed)
    if result.max_error >= max_error:
      max_error = result.max_error
      detail = 'seed {}: {}'.format(seed, result.worst)
  return Check('variant 7 graph', max_error, TOLERANCE, detail)


def GrlChainCheck(seeds=10):
  """Finite-difference check through a reversal node at multiplier -1.

  Every parameter sits upstream of the reversal, so backward gradients must
  equal -1 times the central differences of the forward pass.
  """
  max_error, detail = 0.0, None
  setting = autodiff.GrlSetting(-1.0)
  for seed in range(seeds):
    rng = np.random.default_rng([seed, 5])
    x = _Input(rng, (3, 4), 'x')
    w = _Input(rng, (4, 5), 'w')
    b = _Input(rng, (5,), 'b')
    weights = autodiff.Tensor(rng.normal(0.0, 1.0, (3, 5)))

    def Loss():
      hidden = autodiff.GradReversal(autodiff.Linear(x, w, b), setting)
      return autodiff.Sum(autodiff.Mul(autodiff.Sigmoid(hidden), weights))

    result = autodiff.GradCheck(Loss, [x, w, b], seed=seed,
                                scale=setting.multiplier)
    if result.max_error >= max_error:
      max_error = result.max_error
      detail = 'seed {}: {}'.format(seed, result.worst)
  return Check('grl -1 inside chain', max_error, TOLERANCE, detail)


def _HeadLoss(number, outputs, batch):
  if number == 2:
    return metrics.CrossEntropy(outputs.speaker, batch.speakers)
  return metrics.CccLoss(outputs.enrolment_emotions, batch.enrolment_labels)


def GrlNegationCheck(number, seed=0):
  """Encoder gradients at multiplier -1 must negate those at +1 exactly.

  Only the adversarial head's loss is differentiated (h for variant 2, f~
  for variant 5); forward values must not depend on the multiplier.
  """
  model = _DeskModel(number, seed=seed)
  encoder = model.g if number == 2 else model.g_tilde
  rng = np.random.default_rng([seed, 3])
  targets, enrolments, batch = _FakeBatch(rng, 4, model.n_speakers)
  grads, forwards = [], []
  for multiplier in (1.0, -1.0):
    model.grl.multiplier = multiplier
    model.ZeroGrad()
    outputs = model.Forward(targets, enrolments)
    loss = _HeadLoss(number, outputs, batch)
    autodiff.Backward(loss)
    forwards.append(loss.values.copy())
    grads.append([p.grad.copy() for p in encoder.Parameters()])
  max_error = 0.0
  for plus, minus in zip(*grads):
    max_error = max(max_error, float(np.max(np.abs(plus + minus))))
  if not np.array_equal(forwards[0], forwards[1]):
    return Check('grl negation, variant {}'.format(number), np.inf,
                 GRL_TOLERANCE, 'forward value depends on the multiplier')
  return Check('grl negation, variant {}'.format(number), max_error,
               GRL_TOLERANCE)


def AttentionChecks(seed=0):
  """Uniform attention at P = 0, normalised rows, order invariance."""
  model = _DeskModel(3, seed=seed)
  rng = np.random.default_rng([seed, 4])
  targets = autodiff.Tensor(rng.normal(0.0, 1.0, (3, 1, 8, 8)))
  first = rng.normal(0.0, 1.0, (8, 8))
  second = rng.normal(0.0, 1.0, (8, 8))
  checks = []
  with autodiff.NoGrad():
    z = model.EncodeEmotion(targets)
    e = model.Condition(z, model.EncodeEnrolment((first, second)))
    expected = z.values * np.float32(1 + 1.0 / z.shape[1])
    checks.append(Check('uniform attention at P = 0',
                        np.max(np.abs(e.values - expected)), 1e-12))

    model.projection.weight.values = rng.normal(
        0.0, 1.0, model.projection.weight.shape).astype(np.float32)
    z_tilde = model.EncodeEnrolment((first, second))
    alpha = autodiff.Softmax(autodiff.Linear(z_tilde,
                                             model.projection.weight))
    checks.append(Check('attention rows sum to 1',
                        np.max(np.abs(alpha.values.sum(axis=-1) - 1)),
                        SOFTMAX_TOLERANCE))

    forward = model.Predict(targets, (first, second)).values
    backward = model.Predict(targets, (second, first)).values
    checks.append(Check('enrolment order invariance',
                        np.max(np.abs(forward - backward)), 1e-12))
  return checks


def RunSuite(seeds=10):
  checks = PrimitiveChecks(seeds)
  checks.append(ComposedCheck(seeds))
  checks.append(GrlChainCheck(seeds))
  checks.extend(GrlNegationCheck(number) for number in (2, 5))
  checks.extend(AttentionChecks())
  for check in checks:
    logger.debug('%r', check)
  return checks


def Passed(checks):
  return all(check.passed for check in checks)
