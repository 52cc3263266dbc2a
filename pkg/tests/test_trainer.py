import json
import os
import tempfile
import unittest
from unittest import mock
import warnings

import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import data
from enrolvoc import dsp
from enrolvoc import error
from enrolvoc import model
from enrolvoc import trainer

TINY_ENCODER = model.EncoderConfig(emotion_blocks=[2, 4],
                                   enrolment_blocks=[2, 4],
                                   emotion_hidden=4, enrolment_hidden=4)


def _TinyConfig(**kwargs):
  values = dict(epochs=2, batch_size=2, bootstrap_n=20, seed=1)
  values.update(kwargs)
  return trainer.TrainConfig(**values)


class TestGrlSchedule(unittest.TestCase):

  def test_knots(self):
    self.assertEqual(-1.0, trainer.GrlLambda(0))
    self.assertEqual(-1.0, trainer.GrlLambda(9))
    self.assertEqual(0.0, trainer.GrlLambda(35))
    self.assertEqual(1.0, trainer.GrlLambda(60))
    self.assertEqual(1.0, trainer.GrlLambda(119))

  def test_linear_between_knots(self):
    self.assertAlmostEqual(-0.6, trainer.GrlLambda(20), places=12)

  def test_negative_epoch(self):
    with self.assertRaises(error.ContractError):
      trainer.GrlLambda(-1)

  def test_desk_knots(self):
    self.assertEqual((3, 20), trainer.TrainConfig.Desk().GrlKnots())
    self.assertEqual((10, 60), trainer.TrainConfig.Full().GrlKnots())

  def test_explicit_knots(self):
    config = trainer.TrainConfig(grl_start=0, grl_end=5)
    self.assertEqual((0, 5), config.GrlKnots())

  def test_multiplier(self):
    self.assertEqual(1.0, trainer.GrlMultiplier(-1.0))
    self.assertEqual(-1.0, trainer.GrlMultiplier(1.0))
    self.assertEqual(0.0, trainer.GrlMultiplier(0.0))
    self.assertEqual(-1.0, trainer.GrlMultiplier(-1.0, raw=True))


class TestOptimiser(unittest.TestCase):

  def test_single_step(self):
    p, v = trainer.NesterovStep(1.0, 0.5, 0.0, 0.1, 0.9)
    self.assertAlmostEqual(0.5, v)
    self.assertAlmostEqual(1.0 - 0.1 * (0.5 + 0.9 * 0.5), p)

  def test_without_momentum(self):
    p, _ = trainer.NesterovStep(1.0, 2.0, 0.0, 0.1, 0.0)
    self.assertAlmostEqual(0.8, p)

  def test_recurrence(self):
    p, v = 1.0, 0.0
    expected_p, expected_v = 1.0, 0.0
    for g in (0.5, -0.25, 1.0):
      p, v = trainer.NesterovStep(p, g, v, 0.01, 0.9)
      expected_v = 0.9 * expected_v + g
      expected_p = expected_p - 0.01 * (g + 0.9 * expected_v)
    self.assertAlmostEqual(expected_p, p, places=12)
    self.assertAlmostEqual(expected_v, v, places=12)

  def test_shape_mismatch(self):
    with self.assertRaises(error.DimensionError):
      trainer.NesterovStep(np.zeros(3), np.zeros(2), np.zeros(3), 0.1)

  def test_optimiser_updates_parameters(self):
    x = autodiff.Parameter([1.0, 2.0], 'x')
    y = autodiff.Parameter([3.0], 'y')
    optimiser = trainer.SgdNesterov([x, y], lr=0.1, momentum=0.0)
    autodiff.Backward(autodiff.Sum(autodiff.Mul(x, x)))
    optimiser.Step()
    np.testing.assert_allclose([0.8, 1.6], x.values, rtol=1e-6)
    np.testing.assert_array_equal([3.0], y.values)


class TestPlateauSchedule(unittest.TestCase):

  def test_reduces_after_patience(self):
    schedule = trainer.PlateauSchedule(1.0, factor=0.1, patience=2)
    self.assertEqual(1.0, schedule.Step(0.5))
    self.assertEqual(1.0, schedule.Step(0.5))
    self.assertAlmostEqual(0.1, schedule.Step(0.4))
    self.assertAlmostEqual(0.1, schedule.Step(0.6))
    self.assertAlmostEqual(0.1, schedule.Step(0.6))
    self.assertAlmostEqual(0.01, schedule.Step(0.6))

  def test_increasing_scores_keep_rate(self):
    schedule = trainer.PlateauSchedule(0.001)
    for epoch in range(12):
      self.assertEqual(0.001, schedule.Step(0.1 + 0.01 * epoch))

  def test_default_flat_walk(self):
    schedule = trainer.PlateauSchedule(0.001)
    rates = [schedule.Step(0.5) for _ in range(6)]
    self.assertEqual([0.001] * 5, rates[:5])
    self.assertAlmostEqual(1e-4, rates[5], places=15)

  def test_two_plateaus(self):
    schedule = trainer.PlateauSchedule(0.001)
    rates = [schedule.Step(0.5) for _ in range(11)]
    self.assertAlmostEqual(1e-4, rates[5], places=15)
    for rate in rates[6:10]:
      self.assertAlmostEqual(1e-4, rate, places=15)
    self.assertAlmostEqual(1e-5, rates[10], places=15)

  def test_threshold(self):
    schedule = trainer.PlateauSchedule(1.0, patience=1, threshold=0.01)
    schedule.Step(0.5)
    self.assertAlmostEqual(0.1, schedule.Step(0.505))

  def test_nan_is_not_an_improvement(self):
    schedule = trainer.PlateauSchedule(1.0, patience=1)
    self.assertAlmostEqual(0.1, schedule.Step(float('nan')))


class TestTrainConfig(unittest.TestCase):

  def test_defaults_are_valid(self):
    trainer.TrainConfig.Full().Validate()
    trainer.TrainConfig.Desk().Validate()

  def test_bad_momentum(self):
    with self.assertRaises(error.InvalidValue):
      trainer.TrainConfig(momentum=1.0).Validate()

  def test_reversed_knots(self):
    with self.assertRaises(error.InvalidValue):
      trainer.TrainConfig(grl_start=30, grl_end=10).Validate()

  def test_batch_of_one(self):
    with self.assertRaises(error.InvalidValue) as cm:
      trainer.TrainConfig(batch_size=1).Validate()
    self.assertEqual(2, cm.exception.exit_code)


class TestLossTerms(unittest.TestCase):

  def test_one_term_per_head(self):
    rng = np.random.default_rng(0)
    emotions = autodiff.Parameter(rng.uniform(size=(4, enrolvoc.N_EMOTIONS)))
    speaker = autodiff.Parameter(rng.normal(size=(4, 3)))
    batch = data.Batch(['a', 'b', 'c', 'd'], None,
                       rng.uniform(size=(4, enrolvoc.N_EMOTIONS)),
                       np.array([0, 1, 2, 0]))
    outputs = model.Outputs(None, None, emotions, speaker=speaker)
    self.assertEqual(2, len(trainer.LossTerms(outputs, batch)))
    outputs.enrolment_speaker = speaker
    outputs.enrolment_emotions = emotions
    batch.enrolment_labels = batch.labels
    self.assertEqual(4, len(trainer.LossTerms(outputs, batch)))


class TestTraining(unittest.TestCase):

  @classmethod
  def setUpClass(cls):
    cls.tmp = tempfile.TemporaryDirectory()
    config = data.SyntheticConfig(train_speakers=2, dev_speakers=2,
                                  test_speakers=1, utterances_per_speaker=3,
                                  mean_duration=0.5, duration_jitter=0.1,
                                  seed=5)
    corpus_dir = os.path.join(cls.tmp.name, 'corpus')
    data.GenerateCorpus(config, corpus_dir)
    cls.corpus = data.LoadCorpus(corpus_dir)
    cls.dsp_config = dsp.DspConfig.Desk()

  @classmethod
  def tearDownClass(cls):
    cls.tmp.cleanup()

  def setUp(self):
    catcher = warnings.catch_warnings()
    catcher.__enter__()
    self.addCleanup(catcher.__exit__)
    warnings.simplefilter('ignore', error.DeviationWarning)
    warnings.simplefilter('ignore', error.DegenerateConcordance)

  def _Train(self, number, out_dir=None, **kwargs):
    return trainer.Train(model.VariantSpec.FromNumber(number), self.corpus,
                         _TinyConfig(**kwargs), TINY_ENCODER, self.dsp_config,
                         out_dir)

  def _OutDir(self, name):
    return os.path.join(self.tmp.name, name)

  def test_traces_and_files(self):
    out_dir = self._OutDir('run7')
    record = self._Train(7, out_dir, grl_start=5, grl_end=10)
    self.assertEqual(2, len(record.loss))
    self.assertEqual(2, len(record.dev_score))
    self.assertEqual([-1.0, -1.0], record.grl_lambda)
    self.assertEqual(int(np.argmax(record.dev_score)), record.best_epoch)
    for name in (trainer.CONFIG_ECHO, trainer.RUN_MANIFEST,
                 trainer.BEST_CHECKPOINT, trainer.FINAL_CHECKPOINT):
      self.assertTrue(os.path.isfile(os.path.join(out_dir, name)), msg=name)
    with open(os.path.join(out_dir, trainer.RUN_MANIFEST)) as f:
      manifest = json.load(f)
    self.assertEqual(7, manifest['variant'])
    self.assertEqual([1.0, 1.0], manifest['grl_multiplier'])

  def test_same_seed_same_run(self):
    first = self._Train(3)
    second = self._Train(3)
    self.assertEqual(first.loss, second.loss)
    self.assertEqual(first.dev_score, second.dev_score)
    self.assertEqual(first.best_epoch, second.best_epoch)
    final_first = first.model.Parameters()
    final_second = second.model.Parameters()
    self.assertEqual(list(final_first), list(final_second))
    for name, p in final_first.items():
      np.testing.assert_array_equal(p.values, final_second[name].values,
                                    err_msg=name)
      np.testing.assert_array_equal(first.best_state[name],
                                    second.best_state[name], err_msg=name)

  def test_loss_ignores_grl_schedule_without_adversaries(self):
    for number in (1, 3):
      ramped = self._Train(number)
      flat = self._Train(number, grl_start=5, grl_end=10, raw_grl=True)
      self.assertNotEqual(ramped.grl_lambda, flat.grl_lambda)
      self.assertEqual(ramped.loss, flat.loss, msg='variant {}'.format(number))
      self.assertEqual(ramped.dev_score, flat.dev_score)

  def test_manifest_records_context(self):
    out_dir = self._OutDir('context')
    self._Train(1, out_dir)
    with open(os.path.join(out_dir, trainer.RUN_MANIFEST)) as f:
      manifest = json.load(f)
    self.assertEqual('train', manifest['command'])
    self.assertEqual(self.corpus.root, manifest['corpus'])
    self.assertIsNone(manifest['profile'])
    self.assertEqual(trainer.KernelThreads(),
                     manifest['environment']['kernel_threads'])

  def test_kernel_threads_from_environment(self):
    with mock.patch.dict(os.environ, {'OMP_NUM_THREADS': '3'}):
      self.assertEqual(3, trainer.KernelThreads())
      self.assertEqual('3', trainer.Environment()['thread_variables'][
          'OMP_NUM_THREADS'])
    cleared = {name: '' for name in trainer.THREAD_VARIABLES}
    with mock.patch.dict(os.environ, cleared):
      self.assertEqual(os.cpu_count() or 1, trainer.KernelThreads())

  def test_best_checkpoint_matches_record(self):
    out_dir = self._OutDir('run1')
    record = self._Train(1, out_dir)
    saved = trainer.Evaluate(record.best_checkpoint, self.corpus,
                             bootstrap_n=20)
    in_memory = trainer.Evaluate(record.Checkpoint(), self.corpus,
                                 bootstrap_n=20)
    self.assertEqual(saved, in_memory)
    self.assertAlmostEqual(record.best_dev_score, saved.score, places=6)

  def test_evaluation_is_repeatable(self):
    checkpoint = self._Train(5).Checkpoint()
    first = trainer.Evaluate(checkpoint, self.corpus, enrolvoc.TEST,
                             bootstrap_n=20, seed=4)
    second = trainer.Evaluate(checkpoint, self.corpus, enrolvoc.TEST,
                              bootstrap_n=20, seed=4)
    self.assertEqual(first, second)
    self.assertEqual(enrolvoc.TEST, first.split)
    self.assertEqual(5, first.variant)

  def test_missing_dev_split(self):
    corpus = data.Corpus(self.corpus.Split(enrolvoc.TRAIN))
    with self.assertRaises(error.MissingSplit):
      trainer.Train(model.VariantSpec.FromNumber(1), corpus, _TinyConfig(),
                    TINY_ENCODER, self.dsp_config)

  def test_single_utterance_speaker_with_enrolment(self):
    utterances = [u for u in self.corpus.utterances
                  if u.id != 'dev_spk001_01' and u.id != 'dev_spk001_02']
    corpus = data.Corpus(utterances)
    with self.assertRaises(error.TooFewUtterances):
      trainer.Train(model.VariantSpec.FromNumber(3), corpus, _TinyConfig(),
                    TINY_ENCODER, self.dsp_config)

  def test_ablation(self):
    out_dir = self._OutDir('ablate')
    rows = trainer.Ablate(self.corpus, _TinyConfig(epochs=1), TINY_ENCODER,
                          self.dsp_config, out_dir,
                          [model.VariantSpec.FromNumber(n) for n in (1, 3)])
    self.assertEqual([1, 3], [row.spec.number for row in rows])
    self.assertFalse(any(row.failed for row in rows))
    self.assertEqual(0.0, rows[0].dev.relative_gain)
    self.assertIsNotNone(rows[1].test)
    with open(os.path.join(out_dir, 'ablation.json')) as f:
      self.assertEqual(2, len(json.load(f)))

  def test_ablation_records_failures(self):
    utterances = [u for u in self.corpus.utterances
                  if u.id not in ('train_spk001_01', 'train_spk001_02')]
    rows = trainer.Ablate(data.Corpus(utterances), _TinyConfig(epochs=1),
                          TINY_ENCODER, self.dsp_config, None,
                          [model.VariantSpec.FromNumber(n) for n in (1, 3)])
    self.assertFalse(rows[0].failed)
    self.assertTrue(rows[1].failed)
    self.assertEqual(4, rows[1].exit_code)


if __name__ == '__main__':
  unittest.main()
