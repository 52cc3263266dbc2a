"""Optimisation loop, schedules, evaluation and the ablation driver."""
from collections import OrderedDict
import dataclasses
import io
import json
import logging
import math
import os
import typing

import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import data
from enrolvoc import dsp
from enrolvoc import error
from enrolvoc import metrics
from enrolvoc import model as model_lib

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = 'best.ckpt'
FINAL_CHECKPOINT = 'final.ckpt'
RUN_MANIFEST = 'manifest.json'
CONFIG_ECHO = 'config.json'


@dataclasses.dataclass
class TrainConfig(object):
  """Optimiser, schedule and run settings.

  grl_start and grl_end are the epochs between which the reversal lambda
  ramps from -1 to +1. When unset they scale with epochs: 10 and 60 at 120
  epochs, 3 and 20 at 40. With raw_grl the reversal node's multiplier is
  lambda itself instead of -lambda.
  """
  epochs: int = 120
  batch_size: int = 8
  lr: float = 0.001
  momentum: float = 0.9
  plateau_factor: float = 0.1
  plateau_patience: int = 5
  plateau_threshold: float = 1e-6
  grl_start: typing.Optional[int] = None
  grl_end: typing.Optional[int] = None
  raw_grl: bool = False
  bootstrap_n: int = 1000
  seed: int = 0

  @classmethod
  def Full(cls):
    return cls()

  @classmethod
  def Desk(cls):
    return cls(epochs=40)

  def GrlKnots(self):
    start = self.grl_start
    end = self.grl_end
    if start is None:
      start = int(round(10 * self.epochs / 120))
    if end is None:
      end = int(round(60 * self.epochs / 120))
    return start, end

  def Validate(self):
    for field, minimum in (('epochs', 1), ('batch_size', 2),
                           ('plateau_patience', 1), ('bootstrap_n', 1)):
      value = getattr(self, field)
      if not isinstance(value, int) or value < minimum:
        raise error.InvalidValue('train.' + field, value,
                                 'an integer >= {}'.format(minimum))
    if not self.lr > 0:
      raise error.InvalidValue('train.lr', self.lr, 'a positive number')
    if not 0 <= self.momentum < 1:
      raise error.InvalidValue('train.momentum', self.momentum, 'in [0, 1)')
    if not 0 < self.plateau_factor < 1:
      raise error.InvalidValue('train.plateau_factor', self.plateau_factor,
                               'in (0, 1)')
    if not self.plateau_threshold >= 0:
      raise error.InvalidValue('train.plateau_threshold',
                               self.plateau_threshold, 'a number >= 0')
    start, end = self.GrlKnots()
    if not 0 <= start <= end:
      raise error.InvalidValue('train.grl_end', end,
                               'an epoch >= grl_start ({})'.format(start))
    return self


# ----------------------------------------------------------
# Schedules and the optimiser.


def GrlLambda(epoch, start=10, end=60):
  """-1 before start, linear to +1 at end, +1 afterwards."""
  if epoch < 0:
    raise error.ContractError('Epoch must be >= 0, got {}.'.format(epoch))
  if epoch < start:
    return -1.0
  if epoch >= end:
    return 1.0
  return -1.0 + 2.0 * (epoch - start) / (end - start)


def GrlMultiplier(lam, raw=False):
  """Backward multiplier of the reversal nodes for a given lambda."""
  return float(lam) if raw else 0.0 - lam


def NesterovStep(param, grad, velocity, lr, momentum=0.9):
  """v <- mu v + g; p <- p - lr (g + mu v). Returns (p, v)."""
  if not np.shape(param) == np.shape(grad) == np.shape(velocity):
    raise error.DimensionError('sgd_nesterov', np.shape(param),
                               np.shape(grad), np.shape(velocity))
  velocity = momentum * velocity + grad
  return param - lr * (grad + momentum * velocity), velocity


class SgdNesterov(object):
  """SGD with Nesterov momentum; velocities start at zero."""

  def __init__(self, params, lr, momentum=0.9):
    self.params = list(params)
    self.lr = lr
    self.momentum = momentum
    self.velocities = [np.zeros_like(p.values) for p in self.params]

  def Step(self):
    for i, p in enumerate(self.params):
      grad = np.zeros_like(p.values) if p.grad is None else p.grad
      values, velocity = NesterovStep(p.values, grad, self.velocities[i],
                                      self.lr, self.momentum)
      p.values = values.astype(p.values.dtype, copy=False)
      self.velocities[i] = velocity.astype(p.values.dtype, copy=False)


class PlateauSchedule(object):
  """Divides the learning rate when the monitored score stops improving.

  A score improves when it beats the best so far by more than threshold.
  After patience consecutive epochs without improvement the rate is
  multiplied by factor and the count starts again.
  """

  def __init__(self, lr, factor=0.1, patience=5, threshold=1e-6):
    self.lr = lr
    self.factor = factor
    self.patience = patience
    self.threshold = threshold
    self.best = None
    self.stale = 0

  def Step(self, score):
    if math.isfinite(score) and (self.best is None or
                                 score > self.best + self.threshold):
      self.best = score
      self.stale = 0
      return self.lr
    self.stale += 1
    if self.stale >= self.patience:
      self.lr *= self.factor
      self.stale = 0
      logger.info('Dev score flat for %d epochs, lr now %g.', self.patience,
                  self.lr)
    return self.lr


# ----------------------------------------------------------
# Training.


def LossTerms(outputs, batch):
  """The per-head losses of one batch, in a fixed order."""
  terms = [metrics.CccLoss(outputs.emotions, batch.labels)]
  if outputs.speaker is not None:
    terms.append(metrics.CrossEntropy(outputs.speaker, batch.speakers))
  if outputs.enrolment_speaker is not None:
    terms.append(metrics.CrossEntropy(outputs.enrolment_speaker,
                                      batch.speakers))
  if outputs.enrolment_emotions is not None:
    terms.append(metrics.CccLoss(outputs.enrolment_emotions,
                                 batch.enrolment_labels))
  return terms


def BatchInputs(extractor, batch):
  """Encoder inputs of a batch: targets, and enrolment pairs row by row."""
  targets = autodiff.Tensor(extractor.Batch(batch.targets))
  if batch.enrolments is None:
    return targets, None
  rows = [w for pair in batch.enrolments for w in pair]
  return targets, autodiff.Tensor(extractor.Batch(rows))


def FitNormaliser(corpus, dsp_config):
  utterances = corpus.Split(enrolvoc.TRAIN)
  if not utterances:
    raise error.EmptySplit(enrolvoc.TRAIN)
  return dsp.Normaliser.Fit(
      [dsp.ExtractLogMel(u.waveform, dsp_config) for u in utterances])


def Predict(model, extractor, corpus, split):
  """Predictions for every utterance of a split, in manifest order.

  Targets are fed whole one at a time; each speaker is enrolled with its
  first two utterances of the split, padded to equal length.
  """
  utterances = corpus.Split(split)
  if not utterances:
    raise error.EmptySplit(split)
  enrolments = {}
  preds = []
  with autodiff.NoGrad():
    for u in utterances:
      pair = None
      if model.spec.use_enrolment:
        if u.speaker_id not in enrolments:
          padded = data.EvalPadPair(
              data.DevEnrolment(corpus, u.speaker_id, split))
          enrolments[u.speaker_id] = tuple(extractor(w) for w in padded)
        pair = enrolments[u.speaker_id]
      x = autodiff.Tensor(extractor(u.waveform)[None, None])
      preds.append(model.Predict(x, pair).values[0])
  targets = np.stack([u.scores for u in utterances])
  return np.stack(preds), targets


class RunRecord(object):
  """Traces of one training run.

  model holds the final parameters; Checkpoint() restores the best ones.
  """

  def __init__(self, spec, config, settings, context=None):
    self.spec = spec
    self.config = config
    self.settings = settings
    self.context = OrderedDict(context or {})
    self.loss = []
    self.dev_score = []
    self.lr = []
    self.grl_lambda = []
    self.best_epoch = None
    self.best_checkpoint = None
    self.best_state = None
    self.model = None
    self.normaliser = None
    self.dsp_config = None

  @property
  def best_dev_score(self):
    if self.best_epoch is None:
      return None
    return self.dev_score[self.best_epoch]

  def Checkpoint(self):
    """The best model as a Checkpoint, loaded with the best parameters."""
    best = model_lib.BuildVariant(self.spec, self.model.encoder_config,
                                  self.model.n_speakers, self.model.seed)
    for name, p in best.Parameters().items():
      p.values = self.best_state[name].copy()
    return model_lib.Checkpoint(best, self.normaliser, self.dsp_config,
                                {'epoch': self.best_epoch})

  def ToDict(self):
    context = OrderedDict(self.context)
    command = context.pop('command', 'train')
    return Manifest(
        command, self.settings,
        variant=self.spec.number,
        architecture=self.spec.Name(),
        seed=self.config.seed,
        loss=self.loss,
        dev_score=self.dev_score,
        lr=self.lr,
        grl_lambda=self.grl_lambda,
        grl_multiplier=[GrlMultiplier(l, self.config.raw_grl)
                        for l in self.grl_lambda],
        best_epoch=self.best_epoch,
        best_dev_score=self.best_dev_score,
        best_checkpoint=self.best_checkpoint,
        **context)

  def Write(self, path):
    _WriteJson(path, self.ToDict())


def _WriteJson(path, value):
  with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
    f.write(json.dumps(value, indent=2, sort_keys=True) + '\n')


# Variables read by the BLAS and OpenMP kernels numpy calls into.
THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS',
                    'MKL_NUM_THREADS')


def KernelThreads():
  """Thread count of the array kernels.

  The first of THREAD_VARIABLES holding a positive integer, else the CPU count
  the kernels start that many threads for.
  """
  for name in THREAD_VARIABLES:
    value = os.environ.get(name, '').strip()
    if value.isdigit() and int(value) > 0:
      return int(value)
  return os.cpu_count() or 1


def Environment():
  return OrderedDict((
      ('enrolvoc', enrolvoc.__version__),
      ('numpy', np.__version__),
      ('kernel_threads', KernelThreads()),
      ('thread_variables', OrderedDict(
          (name, os.environ.get(name)) for name in THREAD_VARIABLES)),
  ))


def Manifest(command, config=None, **fields):
  """The record a command leaves next to its results.

  Holds the command name, its inputs (corpus, checkpoint, profile, ...), the
  effective configuration and the environment.
  """
  record = OrderedDict((('command', command),))
  record.update(fields)
  record['config'] = config
  record['environment'] = Environment()
  return record


def WriteManifest(path, command, config=None, **fields):
  _WriteJson(path, Manifest(command, config, **fields))


def _CheckCorpus(spec, corpus):
  if not corpus.HasSplit(enrolvoc.DEV):
    raise error.MissingSplit(enrolvoc.DEV)
  if not corpus.Split(enrolvoc.TRAIN):
    raise error.EmptySplit(enrolvoc.TRAIN)
  if spec.use_enrolment:
    for split in (enrolvoc.TRAIN, enrolvoc.DEV):
      for speaker in corpus.Speakers(split):
        count = len(corpus.SpeakerUtterances(split, speaker))
        if count < 2:
          raise error.TooFewUtterances(speaker, split, count)


def Train(spec, corpus, config, encoder_config=None, dsp_config=None,
          out_dir=None, context=None):
  """Trains one variant and keeps the parameters with the best dev score.

  Args:
    spec: a model.VariantSpec.
    corpus: a data.Corpus with train and dev splits.
    config: a TrainConfig.
    encoder_config: a model.EncoderConfig; the full-size one by default.
    dsp_config: a dsp.DspConfig; the full-size one by default.
    out_dir: if set, the run directory receiving config.json, manifest.json,
        best.ckpt and final.ckpt.
    context: extra manifest fields such as command and profile. The corpus
        root is recorded unless given.
  Returns:
    A RunRecord.
  """
  config.Validate()
  encoder_config = (encoder_config or model_lib.EncoderConfig()).Validate()
  dsp_config = (dsp_config or dsp.DspConfig()).Validate()
  _CheckCorpus(spec, corpus)
  settings = OrderedDict((
      ('dsp', dataclasses.asdict(dsp_config)),
      ('encoder', dataclasses.asdict(encoder_config)),
      ('train', dataclasses.asdict(config)),
  ))
  if out_dir is not None:
    os.makedirs(out_dir, exist_ok=True)
    _WriteJson(os.path.join(out_dir, CONFIG_ECHO), settings)

  normaliser = FitNormaliser(corpus, dsp_config)
  extractor = dsp.FeatureExtractor(dsp_config, normaliser)
  n_speakers = len(corpus.SpeakerIndex())
  model = model_lib.BuildVariant(spec, encoder_config, n_speakers, config.seed)
  optimiser = SgdNesterov(model.Parameters().values(), config.lr,
                          config.momentum)
  schedule = PlateauSchedule(config.lr, config.plateau_factor,
                             config.plateau_patience, config.plateau_threshold)
  rng = np.random.default_rng([config.seed, 1])
  start, end = config.GrlKnots()
  context = OrderedDict(context or {})
  context.setdefault('corpus', corpus.root)
  context.setdefault('profile', None)
  record = RunRecord(spec, config, settings, context)
  record.model, record.normaliser, record.dsp_config = (
      model, normaliser, dsp_config)
  logger.info('Training variant %d (%s), %d parameters, %d speakers.',
              spec.number, spec.Name(), model.ParameterCount(), n_speakers)

  for epoch in range(config.epochs):
    lam = GrlLambda(epoch, start, end)
    model.grl.multiplier = GrlMultiplier(lam, config.raw_grl)
    record.grl_lambda.append(lam)
    record.lr.append(optimiser.lr)
    losses = []
    batches = data.MakeBatches(corpus, enrolvoc.TRAIN, config.batch_size, rng,
                               use_enrolment=spec.use_enrolment)
    for step, batch in enumerate(batches):
      model.ZeroGrad()
      targets, enrolments = BatchInputs(extractor, batch)
      loss = metrics.CombineLosses(
          LossTerms(model.Forward(targets, enrolments), batch))
      value = loss.Item()
      if not math.isfinite(value):
        raise error.NumericAbort(epoch, step, value)
      autodiff.Backward(loss)
      optimiser.Step()
      losses.append(value)
    record.loss.append(float(np.mean(losses)))

    preds, targets = Predict(model, extractor, corpus, enrolvoc.DEV)
    score = metrics.Score(preds, targets)[1]
    record.dev_score.append(score)
    optimiser.lr = schedule.Step(score)
    logger.info('epoch %d/%d loss %.4f dev %.4f lr %g lambda %+.3f',
                epoch + 1, config.epochs, record.loss[-1], score,
                record.lr[-1], lam)
    if record.best_epoch is None or score > record.best_dev_score:
      record.best_epoch = epoch
      record.best_state = OrderedDict(
          (name, p.values.copy()) for name, p in model.Parameters().items())
      if out_dir is not None:
        record.best_checkpoint = os.path.join(out_dir, BEST_CHECKPOINT)
        model_lib.SaveCheckpoint(record.best_checkpoint, model, normaliser,
                                 dsp_config, {'epoch': epoch})
        logger.debug('Saved %s (dev %.4f).', record.best_checkpoint, score)

  if out_dir is not None:
    model_lib.SaveCheckpoint(os.path.join(out_dir, FINAL_CHECKPOINT), model,
                             normaliser, dsp_config,
                             {'epoch': config.epochs - 1})
    record.Write(os.path.join(out_dir, RUN_MANIFEST))
  logger.info('Best dev score %.4f at epoch %d.', record.best_dev_score,
              record.best_epoch + 1)
  return record


def Evaluate(checkpoint, corpus, split=enrolvoc.DEV, bootstrap_n=1000, seed=0,
             level=0.95):
  """Scores a checkpoint (a path or a model.Checkpoint) on one split."""
  if not isinstance(checkpoint, model_lib.Checkpoint):
    checkpoint = model_lib.LoadCheckpoint(checkpoint)
  preds, targets = Predict(checkpoint.model, checkpoint.FeatureExtractor(),
                           corpus, split)
  ccc, _ = metrics.Score(preds, targets)
  low, high = metrics.BootstrapCi(preds, targets, bootstrap_n, level, seed)
  return metrics.EvalReport(ccc, low, high, bootstrap_n, level, split,
                            checkpoint.model.spec.number)


# ----------------------------------------------------------
# Ablation.


class AblationRow(object):
  """Outcome of one variant: its reports, or the error that stopped it."""

  def __init__(self, spec, dev=None, test=None, failure=None, exit_code=0):
    self.spec = spec
    self.dev = dev
    self.test = test
    self.failure = failure
    self.exit_code = exit_code

  @property
  def failed(self):
    return self.failure is not None

  def ToDict(self):
    return {
        'variant': self.spec.number,
        'architecture': self.spec.Name(),
        'dev': self.dev and self.dev.ToDict(),
        'test': self.test and self.test.ToDict(),
        'failure': self.failure,
    }


def Ablate(corpus, config, encoder_config=None, dsp_config=None, out_dir=None,
           variants=None, context=None):
  """Trains every variant with the same seed and scores dev and test.

  Gains are relative to variant 1 on the same split. Each run manifest
  records context with the command set to ablate.
  """
  context = OrderedDict(context or {})
  context['command'] = 'ablate'
  rows = []
  for spec in variants or model_lib.Variants():
    run_dir = None
    if out_dir is not None:
      run_dir = os.path.join(out_dir, 'variant{}'.format(spec.number))
    try:
      record = Train(spec, corpus, config, encoder_config, dsp_config, run_dir,
                     context)
      checkpoint = record.Checkpoint()
      row = AblationRow(spec, Evaluate(checkpoint, corpus, enrolvoc.DEV,
                                       config.bootstrap_n, config.seed))
      if corpus.HasSplit(enrolvoc.TEST):
        row.test = Evaluate(checkpoint, corpus, enrolvoc.TEST,
                            config.bootstrap_n, config.seed)
    except (error.NumericError, error.DataError) as e:
      logger.error('Variant %d failed: %s', spec.number, e)
      row = AblationRow(spec, failure=str(e), exit_code=e.exit_code)
    rows.append(row)
  baseline = rows[0] if rows and rows[0].spec.number == 1 else None
  if baseline is not None and not baseline.failed:
    for row in rows:
      if row.failed:
        continue
      if baseline.dev.score != 0:
        row.dev.SetBaseline(baseline.dev.score)
      if (row.test is not None and baseline.test is not None and
          baseline.test.score != 0):
        row.test.SetBaseline(baseline.test.score)
  if out_dir is not None:
    _WriteJson(os.path.join(out_dir, 'ablation.json'),
               [row.ToDict() for row in rows])
  return rows
