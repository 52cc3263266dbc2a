"""The seven architecture variants and their checkpoints.

Components:
  g        emotion encoder (six conv blocks under the full profile)
  g_tilde  enrolment encoder (four conv blocks under the full profile)
  P        projection from the enrolment embedding to attention logits
  f        emotion classifier
  h        adversarial speaker classifier on z, behind gradient reversal
  h_tilde  speaker classifier on the enrolment embedding
  f_tilde  adversarial emotion classifier on the enrolment embedding
"""
from collections import OrderedDict
import dataclasses
import io
import json
import struct
import typing
import warnings

import numpy as np

import enrolvoc
from enrolvoc import autodiff
from enrolvoc import dsp
from enrolvoc import error

CHECKPOINT_MAGIC = b'ENROLVOC-CKPT 1\n'


@dataclasses.dataclass
class EncoderConfig(object):
  """Encoder topologies and head widths.

  Every block is two 3x3 convolutions (each followed by a per-channel affine
  and a ReLU) and a 2x2 average pool. The embedding dimension is the channel
  count of the last block.
  """
  emotion_blocks: typing.List[int] = dataclasses.field(
      default_factory=lambda: [64, 128, 256, 512, 1024, 2048])
  enrolment_blocks: typing.List[int] = dataclasses.field(
      default_factory=lambda: [64, 128, 256, 512])
  emotion_hidden: int = 2048
  enrolment_hidden: int = 512

  @classmethod
  def Full(cls):
    return cls()

  @classmethod
  def Desk(cls):
    return cls(emotion_blocks=[8, 16], enrolment_blocks=[4, 8],
               emotion_hidden=32, enrolment_hidden=16)

  @property
  def emotion_dim(self):
    return self.emotion_blocks[-1]

  @property
  def enrolment_dim(self):
    return self.enrolment_blocks[-1]

  @property
  def min_frames(self):
    return 2 ** max(len(self.emotion_blocks), len(self.enrolment_blocks))

  def Validate(self):
    for field in ('emotion_blocks', 'enrolment_blocks'):
      blocks = getattr(self, field)
      if not blocks or any(not isinstance(c, int) or c < 1 for c in blocks):
        raise error.InvalidValue(
            'encoder.' + field, blocks, 'a non-empty list of positive ints')
    for field in ('emotion_hidden', 'enrolment_hidden'):
      value = getattr(self, field)
      if not isinstance(value, int) or value < 1:
        raise error.InvalidValue('encoder.' + field, value,
                                 'a positive integer')
    return self


@dataclasses.dataclass(frozen=True)
class VariantSpec(object):
  """Which optional components are wired around g and f."""
  use_enrolment: bool = False
  head_h: bool = False
  head_h_tilde: bool = False
  head_f_tilde: bool = False

  def __post_init__(self):
    if self.Key() not in LEGAL_VARIANTS:
      raise error.SpecError(self.Name())

  def Key(self):
    return (self.use_enrolment, self.head_h, self.head_h_tilde,
            self.head_f_tilde)

  @property
  def number(self):
    return LEGAL_VARIANTS.index(self.Key()) + 1

  def Name(self):
    parts = ['g', 'f']
    if self.use_enrolment:
      parts.append('g~')
    if self.head_h:
      parts.append('(-h)')
    if self.head_h_tilde:
      parts.append('h~')
    if self.head_f_tilde:
      parts.append('(-f~)')
    return ' o '.join(parts)

  def ToDict(self):
    return dataclasses.asdict(self)

  @classmethod
  def FromDict(cls, record):
    return cls(**record)

  @classmethod
  def FromNumber(cls, number):
    if not 1 <= number <= len(LEGAL_VARIANTS):
      raise error.InvalidValue('variant', number, 'a number from 1 to 7')
    return cls(*LEGAL_VARIANTS[number - 1])

  @classmethod
  def Parse(cls, text):
    """Parses '3' or a composition such as 'g o f o g~ o (-f~)'."""
    text = text.strip()
    if text.isdigit():
      return cls.FromNumber(int(text))
    tokens = set(t.strip() for t in text.replace('∘', ' o ').split(' o '))
    tokens.discard('')
    known = {'g', 'f', 'g~', '(-h)', 'h~', '(-f~)'}
    unknown = tokens.difference(known)
    if unknown or not {'g', 'f'}.issubset(tokens):
      raise error.InvalidValue('variant', text, 'a composition of ' +
                               ', '.join(sorted(known)) + ' with g and f')
    return cls('g~' in tokens, '(-h)' in tokens, 'h~' in tokens,
               '(-f~)' in tokens)


# The seven architectures, in the order the ablation reports them.
LEGAL_VARIANTS = (
    (False, False, False, False),  # g o f
    (False, True, False, False),   # g o f o (-h)
    (True, False, False, False),   # g o f o g~
    (True, False, True, False),    # g o f o g~ o h~
    (True, False, False, True),    # g o f o g~ o (-f~)
    (True, False, True, True),     # g o f o g~ o h~ o (-f~)
    (True, True, True, True),      # g o f o g~ o (-h) o h~ o (-f~)
)


def Variants():
  return [VariantSpec.FromNumber(i + 1) for i in range(len(LEGAL_VARIANTS))]


class _Dense(object):
  def __init__(self, rng, prefix, n_in, n_out, gain=2.0):
    std = np.sqrt(gain / n_in)
    self.weight = autodiff.Parameter(
        rng.normal(0.0, std, (n_in, n_out)), prefix + '.weight')
    self.bias = autodiff.Parameter(np.zeros(n_out), prefix + '.bias')

  def Parameters(self):
    return [self.weight, self.bias]

  def __call__(self, x):
    return autodiff.Linear(x, self.weight, self.bias)


class _Projection(object):
  def __init__(self, n_in, n_out):
    # Zero logits make the attention uniform at initialisation.
    self.weight = autodiff.Parameter(np.zeros((n_in, n_out)), 'P')

  def Parameters(self):
    return [self.weight]


class Head(object):
  """Two-layer feed-forward classifier."""

  def __init__(self, rng, prefix, n_in, hidden, n_out):
    self.hidden = _Dense(rng, prefix + '.fc0', n_in, hidden)
    self.output = _Dense(rng, prefix + '.fc1', hidden, n_out, gain=1.0)

  def Parameters(self):
    return self.hidden.Parameters() + self.output.Parameters()

  def __call__(self, x):
    return self.output(autodiff.Relu(self.hidden(x)))


class _ConvBlock(object):
  def __init__(self, rng, prefix, n_in, n_out):
    self.layers = []
    for i in range(2):
      fan_in = (n_in if i == 0 else n_out) * 9
      kernel = autodiff.Parameter(
          rng.normal(0.0, np.sqrt(2.0 / fan_in),
                     (n_out, n_in if i == 0 else n_out, 3, 3)),
          '{}.conv{}.weight'.format(prefix, i))
      scale = autodiff.Parameter(np.ones(n_out),
                                 '{}.affine{}.scale'.format(prefix, i))
      shift = autodiff.Parameter(np.zeros(n_out),
                                 '{}.affine{}.shift'.format(prefix, i))
      self.layers.append((kernel, scale, shift))

  def Parameters(self):
    return [p for layer in self.layers for p in layer]

  def __call__(self, x):
    for kernel, scale, shift in self.layers:
      x = autodiff.Conv2d(x, kernel, stride=1, pad=1)
      x = autodiff.Relu(autodiff.ChannelAffine(x, scale, shift))
    return autodiff.AvgPool2d(x, 2)


class Encoder(object):
  """Convolutional encoder from Bx1xTxM log-Mel input to a BxD embedding."""

  def __init__(self, rng, prefix, blocks):
    self.blocks = []
    n_in = 1
    for i, n_out in enumerate(blocks):
      self.blocks.append(
          _ConvBlock(rng, '{}.block{}'.format(prefix, i), n_in, n_out))
      n_in = n_out
    self.dim = n_in

  def Parameters(self):
    return [p for block in self.blocks for p in block.Parameters()]

  def __call__(self, x):
    if not isinstance(x, autodiff.Tensor):
      x = autodiff.Tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
      raise error.DimensionError('encoder', x.shape, ('B', 1, 'T', 'M'))
    for block in self.blocks:
      x = block(x)
    pooled = autodiff.Add(autodiff.GlobalAvgPool(x), autodiff.GlobalMaxPool(x))
    return autodiff.Flatten(pooled)


class Outputs(object):
  """What one forward pass produced; absent heads leave None."""

  def __init__(self, embedding, conditioned, emotions, speaker=None,
               enrolment_speaker=None, enrolment_emotions=None):
    self.embedding = embedding
    self.conditioned = conditioned
    self.emotions = emotions
    self.speaker = speaker
    self.enrolment_speaker = enrolment_speaker
    self.enrolment_emotions = enrolment_emotions


class Model(object):
  """Parameters of one variant plus its forward computation."""

  def __init__(self, spec, encoder_config, n_speakers, seed=0):
    warnings.warn(
        'Batch normalisation is replaced by a per-channel affine, labels are '
        'scaled to [0, 1] and emotion outputs are sigmoid-squashed.',
        error.DeviationWarning)
    if (spec.head_h or spec.head_h_tilde) and n_speakers < 1:
      raise error.InvalidValue('n_speakers', n_speakers,
                               'at least 1 with a speaker head')
    self.spec = spec
    self.encoder_config = encoder_config
    self.n_speakers = n_speakers
    self.seed = seed
    self.grl = autodiff.GrlSetting(1.0)
    rng = np.random.default_rng(seed)
    config = encoder_config
    self.components = OrderedDict()
    self.components['g'] = self.g = Encoder(rng, 'g', config.emotion_blocks)
    self.components['f'] = self.f = Head(
        rng, 'f', self.g.dim, config.emotion_hidden, enrolvoc.N_EMOTIONS)
    self.h = self.g_tilde = self.projection = None
    self.h_tilde = self.f_tilde = None
    if spec.head_h:
      self.components['h'] = self.h = Head(
          rng, 'h', self.g.dim, config.emotion_hidden, n_speakers)
    if spec.use_enrolment:
      self.components['g_tilde'] = self.g_tilde = Encoder(
          rng, 'g_tilde', config.enrolment_blocks)
      self.components['P'] = self.projection = _Projection(
          self.g_tilde.dim, self.g.dim)
    if spec.head_h_tilde:
      self.components['h_tilde'] = self.h_tilde = Head(
          rng, 'h_tilde', self.g_tilde.dim, config.enrolment_hidden,
          n_speakers)
    if spec.head_f_tilde:
      self.components['f_tilde'] = self.f_tilde = Head(
          rng, 'f_tilde', self.g_tilde.dim, config.enrolment_hidden,
          enrolvoc.N_EMOTIONS)

  def Parameters(self):
    """Name -> Tensor for every live component, in construction order."""
    params = OrderedDict()
    for component in self.components.values():
      for p in component.Parameters():
        params[p.name] = p
    return params

  def ParameterCount(self):
    return sum(p.values.size for p in self.Parameters().values())

  def ZeroGrad(self):
    for p in self.Parameters().values():
      p.ZeroGrad()

  def EncodeEmotion(self, x):
    return self.g(x)

  def EncodeEnrolment(self, pair):
    """Mean of the g_tilde embeddings of exactly two utterances.

    Each utterance is encoded on its own, so the result does not depend on the
    order of the pair.
    """
    pair = list(pair)
    if len(pair) != 2:
      raise error.ContractError(
          'Enrolment needs exactly 2 utterances, got {}.'.format(len(pair)))
    first, second = (self.g_tilde(_AsBatch(x)) for x in pair)
    return autodiff.ScalarAffine(autodiff.Add(first, second), 0.5)

  def EncodeEnrolmentBatch(self, x):
    """Encodes a (2B)x1xTxM batch holding B pairs in consecutive rows."""
    if not isinstance(x, autodiff.Tensor):
      x = autodiff.Tensor(x)
    if x.shape[0] % 2:
      raise error.ContractError(
          'Enrolment batch must hold whole pairs, got {} rows.'.format(
              x.shape[0]))
    embeddings = self.g_tilde(x)
    pairs = autodiff.Reshape(
        embeddings, (x.shape[0] // 2, 2, embeddings.shape[1]))
    return autodiff.Mean(pairs, axis=1)

  def Condition(self, z, z_tilde):
    """e = z + z * softmax(z_tilde P), one attention row per pair."""
    weight = self.projection.weight
    if z_tilde.ndim != 2 or z_tilde.shape[1] != weight.shape[0]:
      raise error.ConfigError(
          'Projection expects {} inputs, enrolment embedding has shape {}.'
          .format(weight.shape[0], z_tilde.shape), 'P')
    alpha = autodiff.Softmax(autodiff.Linear(z_tilde, weight))
    if alpha.shape[0] == 1 and z.shape[0] != 1:
      alpha = autodiff.RepeatRows(alpha, z.shape[0])
    return autodiff.Add(z, autodiff.Mul(z, alpha))

  def PredictEmotions(self, e):
    return autodiff.Sigmoid(self.f(e))

  def PredictSpeaker(self, v, head='h'):
    if head == 'h':
      return self.h(autodiff.GradReversal(v, self.grl))
    if head == 'h_tilde':
      return self.h_tilde(v)
    raise error.ContractError('Unknown speaker head {}.'.format(head))

  def PredictEnrolmentEmotion(self, z_tilde):
    return autodiff.Sigmoid(
        self.f_tilde(autodiff.GradReversal(z_tilde, self.grl)))

  def Forward(self, targets, enrolments=None):
    """Runs every live component.

    Args:
      targets: Bx1xTxM encoder input.
      enrolments: for enrolment variants, either a (2B)x1xT'xM array with
          each target's pair in consecutive rows, or a pair of 1x1xT'xM
          arrays shared by the whole batch. Ignored otherwise.
    Returns:
      An Outputs.
    """
    z, z_tilde, e = self._Embed(targets, enrolments)
    outputs = Outputs(z, e, self.PredictEmotions(e))
    if self.h is not None:
      outputs.speaker = self.PredictSpeaker(z, 'h')
    if self.h_tilde is not None:
      outputs.enrolment_speaker = self.PredictSpeaker(z_tilde, 'h_tilde')
    if self.f_tilde is not None:
      outputs.enrolment_emotions = self.PredictEnrolmentEmotion(z_tilde)
    return outputs

  def Predict(self, targets, enrolments=None):
    """Emotion predictions only; the auxiliary heads are not run."""
    return self.PredictEmotions(self._Embed(targets, enrolments)[2])

  def _Embed(self, targets, enrolments):
    z = self.EncodeEmotion(targets)
    if not self.spec.use_enrolment:
      return z, None, z
    if enrolments is None:
      raise error.ContractError('This variant needs enrolment input.')
    if isinstance(enrolments, (list, tuple)):
      z_tilde = self.EncodeEnrolment(enrolments)
    else:
      z_tilde = self.EncodeEnrolmentBatch(enrolments)
    return z, z_tilde, self.Condition(z, z_tilde)


def _AsBatch(x):
  if isinstance(x, autodiff.Tensor):
    return x
  x = np.asarray(x)
  if x.ndim == 2:
    x = x[None, None]
  return autodiff.Tensor(x)


def BuildVariant(spec, encoder_config, n_speakers, seed=0):
  """Wires the model for one of the seven variants."""
  if not isinstance(spec, VariantSpec):
    spec = VariantSpec(*spec)
  return Model(spec, encoder_config.Validate(), n_speakers, seed)


# ----------------------------------------------------------
# Checkpoints.
#
# Layout: the magic line, an unsigned little-endian 64-bit header length, a
# UTF-8 JSON header, then the payload. The header holds 'meta' and 'arrays',
# a list of {name, shape, offset} entries; offsets count bytes from the start
# of the payload, which is the concatenation of the arrays as little-endian
# 32-bit floats in row-major order.


def SaveCheckpoint(path, model, normaliser, dsp_config, extra=None):
  arrays = OrderedDict(
      (name, p.values) for name, p in model.Parameters().items())
  arrays['normaliser.mean'] = normaliser.mean
  arrays['normaliser.std'] = normaliser.std
  entries, chunks, offset = [], [], 0
  for name, values in arrays.items():
    data = np.ascontiguousarray(values, dtype='<f4').tobytes()
    entries.append({'name': name, 'shape': list(values.shape),
                    'offset': offset})
    chunks.append(data)
    offset += len(data)
  meta = {
      'variant': model.spec.ToDict(),
      'encoder': dataclasses.asdict(model.encoder_config),
      'dsp': dataclasses.asdict(dsp_config),
      'n_speakers': model.n_speakers,
      'seed': model.seed,
  }
  meta.update(extra or {})
  header = json.dumps({'meta': meta, 'arrays': entries},
                      sort_keys=True).encode('utf-8')
  with io.open(path, 'wb') as f:
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack('<Q', len(header)))
    f.write(header)
    for chunk in chunks:
      f.write(chunk)


class Checkpoint(object):
  """A loaded checkpoint: model, normaliser, front-end config and metadata."""

  def __init__(self, model, normaliser, dsp_config, meta):
    self.model = model
    self.normaliser = normaliser
    self.dsp_config = dsp_config
    self.meta = meta

  def FeatureExtractor(self):
    return dsp.FeatureExtractor(self.dsp_config, self.normaliser)


def LoadCheckpoint(path):
  with io.open(path, 'rb') as f:
    blob = f.read()
  if not blob.startswith(CHECKPOINT_MAGIC):
    raise error.CheckpointError(
        '{} is not an enrolvoc checkpoint.'.format(path))
  start = len(CHECKPOINT_MAGIC)
  (length,) = struct.unpack('<Q', blob[start:start + 8])
  header = json.loads(blob[start + 8:start + 8 + length].decode('utf-8'))
  payload = blob[start + 8 + length:]
  arrays = OrderedDict()
  for entry in header['arrays']:
    count = int(np.prod(entry['shape']))
    arrays[entry['name']] = np.frombuffer(
        payload, dtype='<f4', count=count,
        offset=entry['offset']).reshape(entry['shape']).astype(np.float32)
  meta = header['meta']
  spec = VariantSpec.FromDict(meta['variant'])
  model = BuildVariant(spec, EncoderConfig(**meta['encoder']),
                       meta['n_speakers'], meta['seed'])
  for name, p in model.Parameters().items():
    if name not in arrays or arrays[name].shape != p.shape:
      raise error.CheckpointError(
          '{}: parameter {} missing or misshapen.'.format(path, name))
    p.values = arrays[name]
  normaliser = dsp.Normaliser(arrays['normaliser.mean'],
                              arrays['normaliser.std'])
  return Checkpoint(model, normaliser, dsp.DspConfig(**meta['dsp']), meta)
