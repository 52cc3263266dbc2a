import os
import tempfile
import unittest
import warnings

import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import dsp
from enrolvoc import error
from enrolvoc import metrics
from enrolvoc import model


def _Build(number, encoder_config=None, n_speakers=5, seed=0):
  with warnings.catch_warnings():
    warnings.simplefilter('ignore', error.DeviationWarning)
    return model.BuildVariant(model.VariantSpec.FromNumber(number),
                              encoder_config or model.EncoderConfig.Desk(),
                              n_speakers, seed)


def _Inputs(rng, batch, frames=8, mels=8):
  return rng.normal(size=(batch, 1, frames, mels))


class TestVariantSpec(unittest.TestCase):

  EXPECTED_COMPONENTS = {
      1: ['g', 'f'],
      2: ['g', 'f', 'h'],
      3: ['g', 'f', 'g_tilde', 'P'],
      4: ['g', 'f', 'g_tilde', 'P', 'h_tilde'],
      5: ['g', 'f', 'g_tilde', 'P', 'f_tilde'],
      6: ['g', 'f', 'g_tilde', 'P', 'h_tilde', 'f_tilde'],
      7: ['g', 'f', 'h', 'g_tilde', 'P', 'h_tilde', 'f_tilde'],
  }

  def test_components_per_variant(self):
    for number, expected in self.EXPECTED_COMPONENTS.items():
      self.assertEqual(expected, list(_Build(number).components),
                       msg='variant {}'.format(number))

  def test_numbers_round_trip(self):
    self.assertEqual(list(range(1, 8)), [s.number for s in model.Variants()])

  def test_parse_number(self):
    self.assertEqual(4, model.VariantSpec.Parse(' 4 ').number)

  def test_parse_composition(self):
    spec = model.VariantSpec.Parse('g o f o g~ o h~ o (-f~)')
    self.assertEqual(6, spec.number)
    self.assertEqual('g o f o g~ o h~ o (-f~)', spec.Name())

  def test_parse_ring_operator(self):
    self.assertEqual(3, model.VariantSpec.Parse('g ∘ f ∘ g~').number)

  def test_illegal_combination(self):
    with self.assertRaises(error.SpecError) as cm:
      model.VariantSpec(head_h_tilde=True)
    self.assertEqual(2, cm.exception.exit_code)
    with self.assertRaises(error.SpecError):
      model.VariantSpec.Parse('g o f o (-f~)')

  def test_unknown_tokens(self):
    with self.assertRaises(error.InvalidValue):
      model.VariantSpec.Parse('g o f o x')
    with self.assertRaises(error.InvalidValue):
      model.VariantSpec.Parse('f o g~')

  def test_number_out_of_range(self):
    with self.assertRaises(error.InvalidValue):
      model.VariantSpec.Parse('8')

  def test_dict_round_trip(self):
    spec = model.VariantSpec.FromNumber(7)
    self.assertEqual(spec, model.VariantSpec.FromDict(spec.ToDict()))


class TestForward(unittest.TestCase):

  def test_output_shapes(self):
    rng = np.random.default_rng(0)
    m = _Build(7, n_speakers=5)
    out = m.Forward(_Inputs(rng, 3), _Inputs(rng, 6))
    self.assertEqual((3, enrolvoc.N_EMOTIONS), out.emotions.shape)
    self.assertEqual((3, 5), out.speaker.shape)
    self.assertEqual((3, 5), out.enrolment_speaker.shape)
    self.assertEqual((3, enrolvoc.N_EMOTIONS), out.enrolment_emotions.shape)
    self.assertEqual((3, m.g.dim), out.embedding.shape)

  def test_absent_heads(self):
    out = _Build(1).Forward(_Inputs(np.random.default_rng(1), 2))
    self.assertIsNone(out.speaker)
    self.assertIsNone(out.enrolment_speaker)
    self.assertIsNone(out.enrolment_emotions)
    self.assertIs(out.embedding, out.conditioned)

  def test_predictions_in_unit_interval(self):
    rng = np.random.default_rng(2)
    predictions = _Build(3).Predict(_Inputs(rng, 4), _Inputs(rng, 8)).values
    self.assertTrue(np.all((predictions > 0) & (predictions < 1)))

  def test_enrolment_required(self):
    with self.assertRaises(error.ContractError):
      _Build(3).Forward(_Inputs(np.random.default_rng(3), 2))

  def test_odd_enrolment_batch(self):
    rng = np.random.default_rng(4)
    with self.assertRaises(error.ContractError):
      _Build(3).Forward(_Inputs(rng, 2), _Inputs(rng, 3))

  def test_zero_classifier_predicts_half(self):
    m = _Build(1)
    for p in m.f.Parameters():
      p.values = np.zeros_like(p.values)
    predictions = m.Predict(_Inputs(np.random.default_rng(5), 2)).values
    np.testing.assert_array_equal(np.full((2, enrolvoc.N_EMOTIONS), 0.5),
                                  predictions)

  def test_wrong_input_rank(self):
    with self.assertRaises(error.DimensionError):
      _Build(1).EncodeEmotion(np.zeros((2, 8, 8)))


class TestVariantInvariants(unittest.TestCase):

  def _Touched(self, params):
    return [p.name for p in params
            if p.grad is not None and np.any(p.grad != 0)]

  def test_adversary_leaves_emotion_path_unchanged(self):
    rng = np.random.default_rng(6)
    targets = _Inputs(rng, 4)
    plain, adversarial = _Build(1), _Build(2)
    for name, p in plain.Parameters().items():
      np.testing.assert_array_equal(
          p.values, adversarial.Parameters()[name].values, err_msg=name)
    np.testing.assert_array_equal(
        plain.Forward(targets).emotions.values,
        adversarial.Forward(targets).emotions.values)

  def test_enrolment_emotion_loss_skips_emotion_encoder(self):
    rng = np.random.default_rng(7)
    m = _Build(5)
    out = m.Forward(_Inputs(rng, 4), _Inputs(rng, 8))
    labels = rng.uniform(size=(4, enrolvoc.N_EMOTIONS))
    autodiff.Backward(metrics.CccLoss(out.enrolment_emotions, labels))
    self.assertEqual([], self._Touched(m.g.Parameters()))
    self.assertNotEqual([], self._Touched(m.g_tilde.Parameters()))

  def test_speaker_loss_skips_enrolment_encoder(self):
    rng = np.random.default_rng(8)
    m = _Build(7)
    out = m.Forward(_Inputs(rng, 4), _Inputs(rng, 8))
    autodiff.Backward(metrics.CrossEntropy(out.speaker,
                                           np.array([0, 1, 2, 3])))
    self.assertEqual(
        [], self._Touched(m.g_tilde.Parameters() +
                            m.projection.Parameters()))
    self.assertNotEqual([], self._Touched(m.g.Parameters()))

  def test_heads_add_parameters(self):
    counts = {number: _Build(number).ParameterCount()
              for number in range(1, 8)}
    for smaller, larger in ((1, 2), (1, 3), (3, 4), (3, 5), (4, 6), (5, 6),
                            (6, 7), (2, 7)):
      self.assertLess(counts[smaller], counts[larger],
                      msg='{} vs {}'.format(smaller, larger))


class TestConditioning(unittest.TestCase):

  def _Model(self):
    return _Build(3, model.EncoderConfig(emotion_blocks=[3],
                                         enrolment_blocks=[1],
                                         emotion_hidden=4,
                                         enrolment_hidden=4))

  def test_worked_example(self):
    m = self._Model()
    m.projection.weight.values = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    e = m.Condition(autodiff.Tensor([[1.0, 2.0, 3.0]]),
                    autodiff.Tensor([[1.0]]))
    np.testing.assert_allclose([[1.09003, 2.48946, 4.99573]], e.values,
                               atol=1e-4)

  def test_zero_embedding(self):
    m = self._Model()
    m.projection.weight.values = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    e = m.Condition(autodiff.Tensor(np.zeros((2, 3))),
                    autodiff.Tensor([[0.3]]))
    np.testing.assert_array_equal(np.zeros((2, 3)), e.values)

  def test_uniform_attention_at_initialisation(self):
    m = _Build(3)
    z = autodiff.Tensor(np.random.default_rng(6).normal(size=(2, m.g.dim)))
    z_tilde = autodiff.Tensor(np.ones((2, m.g_tilde.dim)))
    e = m.Condition(z, z_tilde)
    np.testing.assert_allclose(z.values * (1 + 1.0 / m.g.dim), e.values,
                               rtol=1e-6)

  def test_projection_width_mismatch(self):
    m = self._Model()
    with self.assertRaises(error.ConfigError):
      m.Condition(autodiff.Tensor([[1.0, 2.0, 3.0]]),
                  autodiff.Tensor([[1.0, 2.0]]))


class TestEnrolment(unittest.TestCase):

  def setUp(self):
    self.model = _Build(3)
    rng = np.random.default_rng(7)
    self.a = rng.normal(size=(8, 8))
    self.b = rng.normal(size=(8, 8))

  def test_order_does_not_matter(self):
    forward = self.model.EncodeEnrolment([self.a, self.b]).values
    backward = self.model.EncodeEnrolment([self.b, self.a]).values
    np.testing.assert_array_equal(forward, backward)

  def test_is_mean_of_embeddings(self):
    pair = self.model.EncodeEnrolment([self.a, self.b]).values
    first = self.model.g_tilde(self.a[None, None]).values
    second = self.model.g_tilde(self.b[None, None]).values
    np.testing.assert_allclose((first + second) / 2, pair, rtol=1e-5,
                               atol=1e-6)

  def test_needs_exactly_two(self):
    with self.assertRaises(error.ContractError):
      self.model.EncodeEnrolment([self.a])
    with self.assertRaises(error.ContractError):
      self.model.EncodeEnrolment([self.a, self.b, self.a])

  def test_batch_matches_pairs(self):
    batch = np.stack([self.a, self.b])[:, None]
    together = self.model.EncodeEnrolmentBatch(batch).values
    apart = self.model.EncodeEnrolment([self.a, self.b]).values
    np.testing.assert_allclose(apart, together, rtol=1e-5, atol=1e-6)


class TestCheckpoint(unittest.TestCase):

  def setUp(self):
    self.tmp = tempfile.TemporaryDirectory()
    self.addCleanup(self.tmp.cleanup)
    self.normaliser = dsp.Normaliser(np.arange(8.0), np.full(8, 2.0))
    self.dsp_config = dsp.DspConfig.Desk()

  def _Save(self, m, name):
    path = os.path.join(self.tmp.name, name)
    model.SaveCheckpoint(path, m, self.normaliser, self.dsp_config,
                         {'epoch': 3})
    return path

  def test_round_trip(self):
    m = _Build(7, seed=4)
    with warnings.catch_warnings():
      warnings.simplefilter('ignore', error.DeviationWarning)
      loaded = model.LoadCheckpoint(self._Save(m, 'a.ckpt'))
    self.assertEqual(m.spec, loaded.model.spec)
    self.assertEqual(3, loaded.meta['epoch'])
    self.assertEqual(self.dsp_config, loaded.dsp_config)
    for name, p in m.Parameters().items():
      np.testing.assert_array_equal(p.values,
                                    loaded.model.Parameters()[name].values)
    np.testing.assert_array_equal(self.normaliser.std, loaded.normaliser.std)
    rng = np.random.default_rng(8)
    targets, enrolments = _Inputs(rng, 2), _Inputs(rng, 4)
    np.testing.assert_array_equal(m.Predict(targets, enrolments).values,
                                  loaded.model.Predict(targets,
                                                       enrolments).values)

  def test_resave_is_byte_identical(self):
    first = self._Save(_Build(5, seed=2), 'first.ckpt')
    with warnings.catch_warnings():
      warnings.simplefilter('ignore', error.DeviationWarning)
      loaded = model.LoadCheckpoint(first)
    second = self._Save(loaded.model, 'second.ckpt')
    with open(first, 'rb') as f, open(second, 'rb') as g:
      self.assertEqual(f.read(), g.read())

  def test_not_a_checkpoint(self):
    path = os.path.join(self.tmp.name, 'junk.ckpt')
    with open(path, 'wb') as f:
      f.write(b'not a checkpoint')
    with self.assertRaises(error.CheckpointError):
      model.LoadCheckpoint(path)


if __name__ == '__main__':
  unittest.main()
