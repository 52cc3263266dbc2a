"""Concordance metric and loss, speaker loss, bootstrap intervals, reports.

CCC is Lin's concordance correlation coefficient with population (1/N)
moments:

  ccc(p, t) = 2 cov(p, t) / (var(p) + var(t) + (mean(p) - mean(t))^2)

When both columns are constant and equal the denominator vanishes; the
coefficient is then defined as 1 and a DegenerateConcordance warning is
issued.
"""
import decimal
import io
import json
import warnings

import numpy as np
from scipy import special

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import error


def _ColumnMeans(values):
  # Constant columns keep their exact value so that their deviations are 0.
  means = values.mean(axis=0)
  constant = np.all(values == values[:1], axis=0)
  return np.where(constant, values[0], means)


def _Concordance(pred, target):
  """Column-wise CCC of two NxK float64 arrays, plus the moments used."""
  mean_p, mean_t = _ColumnMeans(pred), _ColumnMeans(target)
  dev_p, dev_t = pred - mean_p, target - mean_t
  cov = (dev_p * dev_t).mean(axis=0)
  var_p = (dev_p * dev_p).mean(axis=0)
  var_t = (dev_t * dev_t).mean(axis=0)
  gap = mean_p - mean_t
  denominator = var_p + var_t + gap * gap
  degenerate = denominator == 0
  if np.any(degenerate):
    warnings.warn(
        'Concordance of two identical constant columns is defined as 1.',
        error.DegenerateConcordance)
  safe = np.where(degenerate, 1.0, denominator)
  ccc = np.where(degenerate, 1.0, 2 * cov / safe)
  return ccc, (mean_p, mean_t, cov, safe, degenerate)


def Ccc(pred, target):
  """Concordance correlation coefficient of two equal-length vectors."""
  pred = np.asarray(pred, dtype=np.float64).reshape(-1)
  target = np.asarray(target, dtype=np.float64).reshape(-1)
  if pred.shape != target.shape:
    raise error.DimensionError('ccc', pred.shape, target.shape)
  if pred.size < 2:
    raise error.ContractError('ccc needs at least 2 values.')
  ccc, _ = _Concordance(pred[:, None], target[:, None])
  return float(ccc[0])


def ConcordanceColumns(pred, target):
  """Differentiable column-wise CCC of two BxK tensors, as a K vector."""
  if pred.shape != target.shape or pred.ndim != 2:
    raise error.DimensionError('ccc_columns', pred.shape, target.shape)
  if pred.shape[0] < 2:
    raise error.ContractError(
        'CCC is undefined on a batch of {}.'.format(pred.shape[0]))
  ccc, _ = _Concordance(pred.values.astype(np.float64),
                        target.values.astype(np.float64))
  return autodiff.Apply('ccc_columns', (pred, target), ccc)


@autodiff.BackwardRule('ccc_columns')
def _ConcordanceColumnsBackward(node, grad):
  pred = node.inputs[0].values.astype(np.float64)
  target = node.inputs[1].values.astype(np.float64)
  mean_p, mean_t, cov, denominator, degenerate = _Concordance(pred, target)[1]
  n = pred.shape[0]
  scale = np.where(degenerate, 0.0, grad.astype(np.float64))
  # d(denominator)/dp_i = 2 (p_i - mean_t) / n, and symmetrically for t.
  grad_p = (2 / n) * ((target - mean_t) / denominator
                      - 2 * cov * (pred - mean_t) / denominator ** 2)
  grad_t = (2 / n) * ((pred - mean_p) / denominator
                      - 2 * cov * (target - mean_p) / denominator ** 2)
  return grad_p * scale, grad_t * scale


def CccLoss(pred, target):
  """1 - mean over emotions of the batch CCC; pred is a BxK tensor."""
  if not isinstance(target, autodiff.Tensor):
    target = autodiff.Tensor(target)
  per_column = ConcordanceColumns(pred, target)
  return autodiff.ScalarAffine(autodiff.Mean(per_column), -1.0, 1.0)


def CrossEntropy(logits, labels):
  """Mean over the batch of -log softmax(logits)[label]."""
  labels = np.asarray(labels, dtype=np.int64).reshape(-1)
  if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
    raise error.DimensionError('cross_entropy', logits.shape, labels.shape)
  n_classes = logits.shape[1]
  for label in labels:
    if not 0 <= label < n_classes:
      raise error.LabelOutOfRange(int(label), n_classes)
  values = logits.values.astype(np.float64)
  rows = np.arange(labels.shape[0])
  losses = special.logsumexp(values, axis=1) - values[rows, labels]
  return autodiff.Apply('cross_entropy', (logits,), losses.mean(),
                        {'labels': labels})


@autodiff.BackwardRule('cross_entropy')
def _CrossEntropyBackward(node, grad):
  logits = node.inputs[0].values.astype(np.float64)
  labels = node.ctx['labels']
  probabilities = special.softmax(logits, axis=1)
  probabilities[np.arange(labels.shape[0]), labels] -= 1
  return (probabilities * (grad / labels.shape[0]),)


def CombineLosses(parts):
  """Arithmetic mean of scalar losses."""
  parts = list(parts)
  if not parts:
    raise error.ContractError('combine_losses needs at least one loss.')
  total = parts[0]
  for part in parts[1:]:
    total = autodiff.Add(total, part)
  return autodiff.ScalarAffine(total, 1.0 / len(parts))


def Score(preds, targets):
  """Per-emotion CCCs and their mean, the holistic score."""
  preds = np.asarray(preds, dtype=np.float64)
  targets = np.asarray(targets, dtype=np.float64)
  if preds.shape != targets.shape or preds.ndim != 2:
    raise error.DimensionError('score', preds.shape, targets.shape)
  if preds.shape[0] < 2:
    raise error.ContractError('Scoring needs at least 2 utterances.')
  ccc, _ = _Concordance(preds, targets)
  return ccc, float(ccc.mean())


def BootstrapCi(preds, targets, n=1000, level=0.95, seed=0):
  """Percentile confidence interval of the holistic score.

  Utterances are resampled with replacement. Resample i draws its indices
  from numpy's default generator seeded with [seed, i], so resamples are
  independent of evaluation order.
  """
  preds = np.asarray(preds, dtype=np.float64)
  targets = np.asarray(targets, dtype=np.float64)
  if preds.shape[0] < 2:
    raise error.ContractError('Bootstrapping needs at least 2 utterances.')
  if n < 1:
    raise error.ContractError('Bootstrapping needs at least 1 resample.')
  size = preds.shape[0]
  scores = np.empty(n)
  for i in range(n):
    indices = np.random.default_rng([seed, i]).integers(0, size, size)
    scores[i] = Score(preds[indices], targets[indices])[1]
  tail = 100 * (1 - level) / 2
  low, high = np.percentile(scores, [tail, 100 - tail])
  return float(low), float(high)


def RelativeGain(score, baseline):
  """Percentage gain of score over baseline, to one decimal.

  The percentage is rounded to hundredths and then to tenths, both
  half-to-even; this is how the published ablation gains were rounded.
  """
  if baseline == 0:
    raise error.ContractError('Relative gain against a zero baseline.')
  percent = decimal.Decimal(repr(100 * (score - baseline) / baseline))
  percent = percent.quantize(decimal.Decimal('0.01'), decimal.ROUND_HALF_EVEN)
  percent = percent.quantize(decimal.Decimal('0.1'), decimal.ROUND_HALF_EVEN)
  # Adding zero folds a negative zero into +0.0.
  return float(percent) + 0.0


def FormatGain(gain):
  if gain is None:
    return 'N/A'
  return '{:+.1f}'.format(round(gain, 1) + 0.0)


class EvalReport(object):
  """Evaluation record of one model on one split.

  Serialised keys: variant, split, emotions, ccc, score, ci_low, ci_high,
  level, n_bootstrap, baseline, relative_gain.
  """

  KEYS = ('variant', 'split', 'emotions', 'ccc', 'score', 'ci_low', 'ci_high',
          'level', 'n_bootstrap', 'baseline', 'relative_gain')

  def __init__(self, ccc, ci_low, ci_high, n_bootstrap, level=0.95,
               split=None, variant=None):
    self.ccc = [float(c) for c in ccc]
    if len(self.ccc) != enrolvoc.N_EMOTIONS:
      raise error.ContractError(
          'Expected {} CCCs, got {}.'.format(
              enrolvoc.N_EMOTIONS, len(self.ccc)))
    self.score = float(np.mean(self.ccc))
    # The observed score always lies inside its own interval.
    self.ci_low = min(float(ci_low), self.score)
    self.ci_high = max(float(ci_high), self.score)
    self.n_bootstrap = int(n_bootstrap)
    self.level = float(level)
    self.split = split
    self.variant = variant
    self.baseline = None
    self.relative_gain = None

  def SetBaseline(self, baseline):
    self.baseline = float(baseline)
    self.relative_gain = RelativeGain(self.score, self.baseline)

  def ToDict(self):
    return {
        'variant': self.variant,
        'split': self.split,
        'emotions': list(enrolvoc.EMOTIONS),
        'ccc': self.ccc,
        'score': self.score,
        'ci_low': self.ci_low,
        'ci_high': self.ci_high,
        'level': self.level,
        'n_bootstrap': self.n_bootstrap,
        'baseline': self.baseline,
        'relative_gain': self.relative_gain,
    }

  @classmethod
  def FromDict(cls, record):
    missing = set(cls.KEYS).difference(record)
    if missing:
      raise error.ContractError(
          'Report record lacks keys {}.'.format(sorted(missing)))
    report = cls(record['ccc'], record['ci_low'], record['ci_high'],
                 record['n_bootstrap'], record['level'], record['split'],
                 record['variant'])
    if record['baseline'] is not None:
      report.SetBaseline(record['baseline'])
    return report

  def Write(self, path):
    with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
      f.write(json.dumps(self.ToDict(), indent=2, sort_keys=True) + '\n')

  @classmethod
  def Read(cls, path):
    with io.open(path, encoding='utf-8') as f:
      return cls.FromDict(json.load(f))

  def __eq__(self, other):
    return isinstance(other, EvalReport) and self.ToDict() == other.ToDict()

  def __repr__(self):
    return 'EvalReport({} {}: {:.3f} [{:.3f}-{:.3f}])'.format(
        self.variant, self.split, self.score, self.ci_low, self.ci_high)
