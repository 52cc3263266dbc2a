import io
import json
import os
import tempfile
import unittest
import warnings

from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st
import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import error
from enrolvoc import metrics


def _Oracle(p, t):
  p = np.asarray(p, dtype=np.float64)
  t = np.asarray(t, dtype=np.float64)
  cov = np.mean((p - p.mean()) * (t - t.mean()))
  return 2 * cov / (p.var() + t.var() + (p.mean() - t.mean()) ** 2)


def _Scalar(value):
  return autodiff.Parameter(np.float64(value), 'loss')


class TestCcc(unittest.TestCase):

  def test_hand_case(self):
    self.assertAlmostEqual(4 / 7, metrics.Ccc([2, 3, 4], [1, 2, 3]), places=9)

  def test_perfect_concordance(self):
    y = np.random.default_rng(0).normal(size=20)
    self.assertEqual(1.0, metrics.Ccc(y, y))

  def test_constant_prediction(self):
    y = np.random.default_rng(1).normal(size=20)
    self.assertEqual(0.0, metrics.Ccc(np.full(20, 0.37), y))

  def test_identical_constants_warn(self):
    with warnings.catch_warnings(record=True) as caught:
      warnings.simplefilter('always')
      self.assertEqual(1.0, metrics.Ccc([0.5, 0.5], [0.5, 0.5]))
    self.assertTrue(any(issubclass(w.category, error.DegenerateConcordance)
                        for w in caught))

  def test_matches_direct_formula(self):
    rng = np.random.default_rng(2)
    for _ in range(100):
      n = rng.integers(2, 65)
      p, t = rng.normal(size=n), rng.normal(size=n)
      self.assertAlmostEqual(_Oracle(p, t), metrics.Ccc(p, t), delta=1e-6)

  def test_single_value_rejected(self):
    with self.assertRaises(error.ContractError):
      metrics.Ccc([1.0], [2.0])

  def test_length_mismatch(self):
    with self.assertRaises(error.DimensionError):
      metrics.Ccc([1.0, 2.0], [1.0, 2.0, 3.0])

  @settings(deadline=None, max_examples=50)
  @given(st.lists(st.floats(-10, 10), min_size=3, max_size=30),
         st.integers(0, 2 ** 16))
  def test_symmetric(self, values, seed):
    a = np.array(values)
    b = a + np.random.default_rng(seed).normal(size=a.size)
    self.assertAlmostEqual(metrics.Ccc(a, b), metrics.Ccc(b, a), delta=1e-9)

  def test_bounded_by_pearson(self):
    rng = np.random.default_rng(3)
    for _ in range(50):
      a, b = rng.normal(size=30), rng.normal(size=30)
      pearson = np.corrcoef(a, b)[0, 1]
      self.assertLessEqual(abs(metrics.Ccc(a, b)), abs(pearson) + 1e-12)

  def test_scale_and_shift_sensitive(self):
    a = np.random.default_rng(4).normal(size=30)
    self.assertLess(metrics.Ccc(a, 2 * a), 1.0)
    self.assertLess(metrics.Ccc(a, a + 0.5), 1.0)


class TestCccLoss(unittest.TestCase):

  def test_perfect_prediction(self):
    y = np.random.default_rng(5).uniform(size=(8, 10))
    loss = metrics.CccLoss(autodiff.Parameter(y), y)
    self.assertEqual(0.0, loss.Item())

  def test_one_constant_column(self):
    y = np.random.default_rng(6).uniform(size=(8, 10))
    pred = y.copy()
    pred[:, 0] = 0.5
    loss = metrics.CccLoss(autodiff.Parameter(pred), y)
    self.assertAlmostEqual(0.1, loss.Item(), places=6)

  def test_gradient(self):
    rng = np.random.default_rng(7)
    pred = autodiff.Parameter(rng.uniform(size=(4, 10)), 'pred')
    target = rng.uniform(size=(4, 10))
    result = autodiff.GradCheck(lambda: metrics.CccLoss(pred, target), [pred])
    self.assertLess(result.max_error, 1e-2)

  def test_batch_of_one(self):
    with self.assertRaises(error.ContractError):
      metrics.CccLoss(autodiff.Parameter(np.zeros((1, 10))), np.zeros((1, 10)))


class TestCrossEntropy(unittest.TestCase):

  def test_uniform_logits(self):
    loss = metrics.CrossEntropy(autodiff.Parameter(np.zeros((3, 4))), [0, 1, 3])
    self.assertAlmostEqual(np.log(4), loss.Item(), places=6)

  def test_saturated(self):
    loss = metrics.CrossEntropy(autodiff.Parameter([[20.0, 0.0, 0.0]]), [0])
    self.assertAlmostEqual(0.0, loss.Item(), places=6)

  def test_matches_direct_formula(self):
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 5))
    labels = np.array([4, 0, 2])
    expected = np.mean([np.log(np.exp(row).sum()) - row[label]
                        for row, label in zip(logits, labels)])
    loss = metrics.CrossEntropy(autodiff.Parameter(logits), labels)
    self.assertAlmostEqual(expected, loss.Item(), delta=1e-5)

  def test_gradient(self):
    rng = np.random.default_rng(9)
    logits = autodiff.Parameter(rng.normal(size=(5, 3)), 'logits')
    labels = rng.integers(0, 3, 5)
    result = autodiff.GradCheck(lambda: metrics.CrossEntropy(logits, labels),
                                [logits])
    self.assertLess(result.max_error, 1e-2)

  def test_label_out_of_range(self):
    with self.assertRaises(error.LabelOutOfRange) as cm:
      metrics.CrossEntropy(autodiff.Parameter(np.zeros((2, 3))), [0, 3])
    self.assertEqual(('Label 3 is outside [0, 3).',), cm.exception.args)


class TestCombineLosses(unittest.TestCase):

  def test_single(self):
    self.assertEqual(2.5, metrics.CombineLosses([_Scalar(2.5)]).Item())

  def test_mean(self):
    combined = metrics.CombineLosses([_Scalar(2), _Scalar(4)])
    self.assertEqual(3.0, combined.Item())

  def test_empty(self):
    with self.assertRaises(error.ContractError):
      metrics.CombineLosses([])

  def test_permutation_invariant(self):
    parts = [_Scalar(v) for v in (0.25, 1.5, 0.75, 2.0)]
    forward = metrics.CombineLosses(parts).Item()
    backward = metrics.CombineLosses(parts[::-1]).Item()
    self.assertAlmostEqual(forward, backward, places=12)

  def test_gradient_scaled_by_count(self):
    x = autodiff.Parameter([1.0, 2.0], 'x')
    single = autodiff.Sum(autodiff.Mul(x, x))
    autodiff.Backward(single)
    alone = x.grad.copy()
    x.ZeroGrad()
    combined = metrics.CombineLosses(
        [autodiff.Sum(autodiff.Mul(x, x)), _Scalar(1.0), _Scalar(3.0)])
    autodiff.Backward(combined)
    np.testing.assert_allclose(alone / 3, x.grad, rtol=1e-6)


class TestBootstrap(unittest.TestCase):

  def _Data(self, seed, n):
    rng = np.random.default_rng(seed)
    targets = rng.uniform(size=(n, enrolvoc.N_EMOTIONS))
    preds = targets + rng.normal(0, 0.2, size=targets.shape)
    return preds, targets

  def test_perfect_predictions(self):
    _, targets = self._Data(0, 30)
    self.assertEqual((1.0, 1.0),
                     metrics.BootstrapCi(targets, targets, n=100, seed=1))

  def test_single_resample(self):
    preds, targets = self._Data(1, 20)
    low, high = metrics.BootstrapCi(preds, targets, n=1, seed=7)
    indices = np.random.default_rng([7, 0]).integers(0, 20, 20)
    expected = metrics.Score(preds[indices], targets[indices])[1]
    self.assertEqual(low, high)
    self.assertAlmostEqual(expected, low, places=12)

  def test_matches_independent_resampler(self):
    preds, targets = self._Data(2, 50)
    scores = []
    for i in range(200):
      indices = np.random.default_rng([3, i]).integers(0, 50, 50)
      scores.append(np.mean([_Oracle(preds[indices, k], targets[indices, k])
                             for k in range(enrolvoc.N_EMOTIONS)]))
    expected = np.percentile(scores, [2.5, 97.5])
    low, high = metrics.BootstrapCi(preds, targets, n=200, seed=3)
    self.assertAlmostEqual(expected[0], low, places=10)
    self.assertAlmostEqual(expected[1], high, places=10)

  def test_deterministic(self):
    preds, targets = self._Data(3, 40)
    self.assertEqual(metrics.BootstrapCi(preds, targets, n=50, seed=5),
                     metrics.BootstrapCi(preds, targets, n=50, seed=5))

  def test_width_shrinks_with_more_utterances(self):
    widths = {50: [], 200: []}
    for seed in range(20):
      for n in widths:
        preds, targets = self._Data(100 + seed, n)
        low, high = metrics.BootstrapCi(preds, targets, n=100, seed=seed)
        widths[n].append(high - low)
    self.assertLess(np.mean(widths[200]), np.mean(widths[50]))


class TestRelativeGain(unittest.TestCase):

  # (score, baseline, printed gain) for every row with a gain.
  PUBLISHED = (
      (.608, .645, '-5.7'),
      (.656, .645, '+1.7'),
      (.655, .645, '+1.6'),
      (.658, .645, '+2.0'),
      (.652, .645, '+1.1'),
      (.636, .645, '-1.4'),
      (.650, .634, '+2.5'),
      (.639, .634, '+0.8'),
      (.647, .634, '+2.0'),
      (.642, .634, '+1.3'),
  )

  def test_published_gains(self):
    for score, baseline, printed in self.PUBLISHED:
      self.assertEqual(
          printed, metrics.FormatGain(metrics.RelativeGain(score, baseline)),
          msg='{} vs {}'.format(score, baseline))

  def test_equal_scores(self):
    self.assertEqual(0.0, metrics.RelativeGain(0.61, 0.61))

  def test_zero_baseline(self):
    with self.assertRaises(error.ContractError):
      metrics.RelativeGain(0.5, 0.0)

  def test_missing_gain(self):
    self.assertEqual('N/A', metrics.FormatGain(None))

  def test_tiny_loss_prints_unsigned_zero(self):
    gain = metrics.RelativeGain(0.61, 0.61001)
    self.assertEqual('+0.0', metrics.FormatGain(gain))
    self.assertEqual('+0.0', metrics.FormatGain(-0.0))
    self.assertEqual('+0.0', metrics.FormatGain(-0.04))
    self.assertEqual('-0.1', metrics.FormatGain(-0.06))


class TestEvalReport(unittest.TestCase):

  def _Report(self):
    ccc = np.linspace(0.4, 0.7, enrolvoc.N_EMOTIONS)
    return metrics.EvalReport(ccc, 0.5, 0.6, 1000, split='dev', variant=3)

  def test_score_is_mean_of_ccc(self):
    report = self._Report()
    self.assertEqual(float(np.mean(report.ccc)), report.score)

  def test_interval_contains_score(self):
    report = metrics.EvalReport(np.full(enrolvoc.N_EMOTIONS, 0.8), 0.5, 0.6,
                                10)
    self.assertEqual(report.score, report.ci_high)
    self.assertEqual(0.5, report.ci_low)

  def test_keys(self):
    self.assertEqual(set(metrics.EvalReport.KEYS),
                     set(self._Report().ToDict()))

  def test_write_and_read(self):
    report = self._Report()
    report.SetBaseline(0.5)
    with tempfile.TemporaryDirectory() as tmp:
      path = os.path.join(tmp, 'report.json')
      report.Write(path)
      with io.open(path, encoding='utf-8') as f:
        self.assertEqual(list(enrolvoc.EMOTIONS), json.load(f)['emotions'])
      self.assertEqual(report, metrics.EvalReport.Read(path))

  def test_wrong_length(self):
    with self.assertRaises(error.ContractError):
      metrics.EvalReport([0.5] * 3, 0.4, 0.6, 10)


if __name__ == '__main__':
  unittest.main()
