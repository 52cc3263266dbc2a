"""Corpora of emotional vocal bursts.

A corpus directory holds a manifest and a wav/ subdirectory. The manifest is
UTF-8, tab separated, one utterance per line, in this field order:

  id  path  speaker_id  split  Amusement ... Triumph

where path is relative to the corpus directory and the ten scores are raw
intensities in [1, 100]. Lines starting with '#' are comments. Manifest order
is significant: it decides which utterances enrol a speaker at evaluation.
"""
import csv
import dataclasses
import io
import logging
import os

import numpy as np
from scipy import special

import enrolvoc
from enrolvoc import dsp
from enrolvoc import error

logger = logging.getLogger(__name__)

CROP_SECONDS = 2.5


def RawToUnit(raw):
  return (np.asarray(raw, dtype=np.float64) - 1) / 99


def UnitToRaw(unit):
  return 1 + 99 * np.asarray(unit, dtype=np.float64)


@dataclasses.dataclass
class SyntheticConfig(object):
  """Parameters of the synthetic burst generator.

  idiosyncrasy (kappa) scales every speaker-specific term of the mapping
  from emotion intensities to acoustic parameters; at 0 all speakers share
  one mapping.
  """
  train_speakers: int = 8
  dev_speakers: int = 4
  test_speakers: int = 4
  utterances_per_speaker: int = 6
  mean_duration: float = 2.23
  duration_jitter: float = 0.5
  style_dim: int = 4
  idiosyncrasy: float = 0.5
  sample_rate: int = 16000
  seed: int = 0

  @classmethod
  def Desk(cls):
    return cls()

  @classmethod
  def Full(cls):
    return cls(train_speakers=64, dev_speakers=32, test_speakers=32,
               utterances_per_speaker=8)

  def Speakers(self, split):
    return getattr(self, split + '_speakers')

  def Validate(self):
    for split in enrolvoc.SPLITS:
      if self.Speakers(split) < 1:
        raise error.InvalidValue('synthetic.{}_speakers'.format(split),
                                 self.Speakers(split), 'at least 1')
    if self.utterances_per_speaker < 2:
      raise error.InvalidValue('synthetic.utterances_per_speaker',
                               self.utterances_per_speaker, 'at least 2')
    if not 0 <= self.duration_jitter < self.mean_duration - 0.1:
      raise error.InvalidValue('synthetic.duration_jitter',
                               self.duration_jitter,
                               'in [0, mean_duration - 0.1)')
    if not 0 <= self.idiosyncrasy <= 1:
      raise error.InvalidValue('synthetic.idiosyncrasy', self.idiosyncrasy,
                               'in [0, 1]')
    if self.style_dim < 1:
      raise error.InvalidValue('synthetic.style_dim', self.style_dim,
                               'at least 1')
    return self


class Utterance(object):
  """One labelled burst; scores are normalised to [0, 1]."""

  def __init__(self, id, speaker_id, split, waveform, scores, path=None,
               position=0):
    self.id = id
    self.speaker_id = speaker_id
    self.split = split
    self.waveform = waveform
    self.scores = np.asarray(scores, dtype=np.float32)
    self.path = path
    self.position = position
    if self.scores.shape != (enrolvoc.N_EMOTIONS,):
      raise error.DataError(
          'Utterance {} has {} scores.'.format(id, self.scores.size))
    if np.any(self.scores < 0) or np.any(self.scores > 1):
      raise error.DataError(
          'Utterance {} has scores outside [0, 1].'.format(id))

  def __repr__(self):
    return 'Utterance({})'.format(self.id)


class EnrolmentPair(object):
  """Two distinct utterances of one speaker."""

  def __init__(self, first, second):
    if first.speaker_id != second.speaker_id:
      raise error.DataError('Enrolment pair mixes speakers {} and {}.'.format(
          first.speaker_id, second.speaker_id))
    if first.id == second.id:
      raise error.DataError(
          'Enrolment pair repeats utterance {}.'.format(first.id))
    self.first = first
    self.second = second

  @property
  def speaker_id(self):
    return self.first.speaker_id

  def __iter__(self):
    return iter((self.first, self.second))

  def Ids(self):
    return (self.first.id, self.second.id)

  def __repr__(self):
    return 'EnrolmentPair({}, {})'.format(*self.Ids())


class Corpus(object):
  """Utterances kept in manifest order, whatever order they arrive in."""

  def __init__(self, utterances, root=None, sample_rate=16000):
    self.utterances = sorted(utterances, key=lambda u: u.position)
    self.root = root
    self.sample_rate = sample_rate
    seen = set()
    for u in self.utterances:
      if u.id in seen:
        raise error.DataError('Duplicate utterance id {}.'.format(u.id))
      seen.add(u.id)

  def Split(self, split):
    return [u for u in self.utterances if u.split == split]

  def HasSplit(self, split):
    return any(u.split == split for u in self.utterances)

  def Speakers(self, split):
    """Speaker ids of a split in order of first appearance."""
    speakers = []
    for u in self.Split(split):
      if u.speaker_id not in speakers:
        speakers.append(u.speaker_id)
    return speakers

  def SpeakerUtterances(self, split, speaker):
    return [u for u in self.Split(split) if u.speaker_id == speaker]

  def SpeakerIndex(self):
    """Class index of every training speaker, by sorted speaker id."""
    return {s: i for i, s in enumerate(sorted(self.Speakers(enrolvoc.TRAIN)))}

  def __len__(self):
    return len(self.utterances)


# ----------------------------------------------------------
# Synthesis.


_HARMONICS = 12
# log pitch, glide, attack, decay, noise mix, level, then harmonic weights.
_N_PARAMS = 6 + _HARMONICS


class Synthesiser(object):
  """Maps emotion intensities and speaker style to harmonic-plus-noise bursts.

  Acoustic parameters are affine in the intensities v:
    raw = (b + k sum_j u_j o_j) + (W + k sum_j u_j W_j) v
  and are then squashed into physical ranges.
  """

  def __init__(self, config):
    self.config = config
    rng = np.random.default_rng([config.seed, 0])
    self.base = rng.normal(0.0, 0.3, _N_PARAMS)
    self.weights = rng.normal(0.0, 1.0, (_N_PARAMS, enrolvoc.N_EMOTIONS))
    self.style_offsets = rng.normal(0.0, 0.5, (config.style_dim, _N_PARAMS))
    self.style_weights = rng.normal(
        0.0, 1.0, (config.style_dim, _N_PARAMS, enrolvoc.N_EMOTIONS))

  def Style(self, split_index, speaker_index):
    rng = np.random.default_rng(
        [self.config.seed, 1, split_index, speaker_index])
    return rng.normal(0.0, 1.0, self.config.style_dim)

  def Parameters(self, intensities, style):
    kappa = self.config.idiosyncrasy
    offset = self.base + kappa * style @ self.style_offsets
    mixing = self.weights + kappa * np.tensordot(style, self.style_weights, 1)
    return offset + mixing @ intensities

  def Render(self, params, n_samples, noise_rng):
    sr = self.config.sample_rate
    t = np.arange(n_samples) / sr
    duration = n_samples / sr
    f0 = 220.0 * np.exp(0.4 * np.tanh(params[0]))
    glide = 0.3 * np.tanh(params[1])
    attack = 0.01 + 0.15 * special.expit(params[2])
    decay = 0.2 + 1.5 * special.expit(params[3])
    noise_mix = 0.5 * special.expit(params[4])
    level = 0.2 + 0.6 * special.expit(params[5])
    amplitudes = np.exp(0.8 * np.tanh(params[6:])) / np.arange(
        1, _HARMONICS + 1)

    pitch = f0 * (1 + glide * t / duration)
    phase = 2 * np.pi * np.cumsum(pitch) / sr
    tonal = np.zeros(n_samples)
    for k, amplitude in enumerate(amplitudes, start=1):
      audible = k * pitch < 0.45 * sr
      tonal += np.where(audible, amplitude * np.sin(k * phase), 0.0)
    tonal /= max(np.max(np.abs(tonal)), 1e-9)
    noise = noise_rng.normal(0.0, 1.0 / 3, n_samples)
    envelope = (1 - np.exp(-t / attack)) * np.exp(-t / decay)
    burst = envelope * ((1 - noise_mix) * tonal + noise_mix * noise)
    burst *= level / max(np.max(np.abs(burst)), 1e-9)
    return np.clip(burst, -1, 1)

  def Utterance(self, split, speaker_index, utterance_index):
    """Synthesises one utterance; every draw comes from its own substream."""
    split_index = enrolvoc.SPLITS.index(split)
    key = [self.config.seed, split_index, speaker_index, utterance_index]
    rng = np.random.default_rng([2] + key)
    intensities = rng.beta(0.8, 1.6, enrolvoc.N_EMOTIONS)
    jitter = self.config.duration_jitter
    duration = rng.uniform(self.config.mean_duration - jitter,
                           self.config.mean_duration + jitter)
    n_samples = int(round(duration * self.config.sample_rate))
    params = self.Parameters(intensities,
                             self.Style(split_index, speaker_index))
    samples = self.Render(params, n_samples, np.random.default_rng([3] + key))
    return samples, intensities


def _SpeakerId(split, index):
  return '{}_spk{:03d}'.format(split, index)


def GenerateCorpus(config, directory):
  """Writes a synthetic corpus; the result depends only on config."""
  config.Validate()
  synthesiser = Synthesiser(config)
  wavdir = os.path.join(directory, enrolvoc.WAV_DIR)
  os.makedirs(wavdir, exist_ok=True)
  rows = []
  durations = []
  for split in enrolvoc.SPLITS:
    for s in range(config.Speakers(split)):
      for u in range(config.utterances_per_speaker):
        utterance_id = '{}_{:02d}'.format(_SpeakerId(split, s), u)
        samples, intensities = synthesiser.Utterance(split, s, u)
        relative = os.path.join(enrolvoc.WAV_DIR, utterance_id + '.wav')
        dsp.WriteWav(os.path.join(directory, relative),
                     dsp.Waveform(samples, config.sample_rate))
        durations.append(samples.size / config.sample_rate)
        raw = UnitToRaw(intensities)
        rows.append([utterance_id, relative, _SpeakerId(split, s), split] +
                    ['{:.4f}'.format(x) for x in raw])
  with io.open(os.path.join(directory, enrolvoc.MANIFEST), 'w',
               encoding='utf-8', newline='') as f:
    f.write('# ' + '\t'.join(
        ('id', 'path', 'speaker_id', 'split') + enrolvoc.EMOTIONS) + '\n')
    writer = csv.writer(f, delimiter='\t', lineterminator='\n')
    writer.writerows(rows)
  logger.info('Wrote %d utterances (mean duration %.3fs) to %s.',
              len(rows), float(np.mean(durations)), directory)
  return directory


def LoadCorpus(directory, sample_rate=16000):
  """Reads a corpus directory written by GenerateCorpus (or by hand)."""
  path = os.path.join(directory, enrolvoc.MANIFEST)
  if not os.path.isfile(path):
    raise error.ManifestError('No manifest found.', path)
  utterances = []
  with io.open(path, encoding='utf-8', newline='') as f:
    for lineno, fields in enumerate(csv.reader(f, delimiter='\t'), start=1):
      if not fields or fields[0].startswith('#'):
        continue
      if len(fields) != 4 + enrolvoc.N_EMOTIONS:
        raise error.ManifestError(
            'Expected {} fields, got {}.'.format(
                4 + enrolvoc.N_EMOTIONS, len(fields)), path, lineno)
      utterance_id, relative, speaker, split = fields[:4]
      if split not in enrolvoc.SPLITS:
        raise error.ManifestError('Unknown split {}.'.format(split),
                                  path, lineno)
      try:
        raw = np.array([float(x) for x in fields[4:]])
      except ValueError as e:
        raise error.ManifestError(str(e), path, lineno)
      if np.any(raw < 1) or np.any(raw > 100):
        raise error.ManifestError('Scores must lie in [1, 100].',
                                  path, lineno)
      waveform = dsp.ReadWav(os.path.join(directory, relative), sample_rate)
      utterances.append(Utterance(utterance_id, speaker, split, waveform,
                                  RawToUnit(raw), relative, lineno))
  return Corpus(utterances, directory, sample_rate)


# ----------------------------------------------------------
# Enrolment and cropping.


def SampleEnrolmentTrain(utterances, rng, target=None):
  """Draws a uniform random pair from one speaker's training utterances.

  The target is left out when the speaker has at least 3 utterances.
  """
  utterances = list(utterances)
  if len(utterances) < 2:
    speaker = utterances[0].speaker_id if utterances else '?'
    raise error.TooFewUtterances(speaker, enrolvoc.TRAIN, len(utterances))
  if target is not None and len(utterances) >= 3:
    utterances = [u for u in utterances if u.id != target.id]
  first, second = rng.choice(len(utterances), 2, replace=False)
  return EnrolmentPair(utterances[first], utterances[second])


def DevEnrolment(corpus, speaker, split=enrolvoc.DEV):
  """The first two utterances of a speaker in manifest order."""
  utterances = corpus.SpeakerUtterances(split, speaker)
  if len(utterances) < 2:
    raise error.TooFewUtterances(speaker, split, len(utterances))
  return EnrolmentPair(utterances[0], utterances[1])


def CropOrPad(waveform, rng, seconds=CROP_SECONDS):
  """Random crop of longer input; random leading/trailing silence otherwise."""
  if len(waveform) == 0:
    raise error.EmptyWaveform()
  target = int(round(seconds * waveform.sample_rate))
  samples = waveform.samples
  if samples.size > target:
    start = rng.integers(0, samples.size - target + 1)
    return dsp.Waveform(samples[start:start + target], waveform.sample_rate)
  if samples.size < target:
    deficit = target - samples.size
    lead = rng.integers(0, deficit + 1)
    padded = np.zeros(target, dtype=samples.dtype)
    padded[lead:lead + samples.size] = samples
    return dsp.Waveform(padded, waveform.sample_rate)
  return waveform


def EvalPadPair(pair):
  """Zero-pads the shorter enrolment waveform to the longer one's length."""
  first, second = (u.waveform if isinstance(u, Utterance) else u for u in pair)
  length = max(len(first), len(second))

  def Pad(w):
    if len(w) == length:
      return w
    return dsp.Waveform(np.pad(w.samples, (0, length - len(w))), w.sample_rate)

  return Pad(first), Pad(second)


class Batch(object):
  """Training inputs for one optimisation step."""

  def __init__(self, ids, targets, labels, speakers, enrolments=None,
               enrolment_labels=None):
    self.ids = ids
    self.targets = targets
    self.labels = labels
    self.speakers = speakers
    self.enrolments = enrolments
    self.enrolment_labels = enrolment_labels

  def __len__(self):
    return len(self.ids)


def BatchSizes(n, batch_size, drop_last=False):
  """Sizes of the batches of one epoch; a trailing singleton is merged."""
  sizes = [batch_size] * (n // batch_size)
  remainder = n % batch_size
  if remainder and not drop_last:
    if remainder == 1 and sizes:
      sizes[-1] += 1
    else:
      sizes.append(remainder)
  return sizes


def MakeBatches(corpus, split, batch_size, rng, use_enrolment=True,
                crop=True, drop_last=False):
  """Yields one epoch of shuffled batches with fresh enrolment pairs."""
  utterances = corpus.Split(split)
  if not utterances:
    raise error.EmptySplit(split)
  speaker_index = corpus.SpeakerIndex()
  by_speaker = {}
  for u in utterances:
    by_speaker.setdefault(u.speaker_id, []).append(u)
  order = rng.permutation(len(utterances))
  start = 0
  for size in BatchSizes(len(utterances), batch_size, drop_last):
    members = [utterances[i] for i in order[start:start + size]]
    start += size
    targets, enrolments, enrolment_labels, speakers = [], [], [], []
    for u in members:
      if u.speaker_id not in speaker_index:
        raise error.UnknownSpeaker(u.speaker_id)
      speakers.append(speaker_index[u.speaker_id])
      pair = None
      if use_enrolment:
        pair = SampleEnrolmentTrain(by_speaker[u.speaker_id], rng, target=u)
      waveform = CropOrPad(u.waveform, rng) if crop else u.waveform
      targets.append(waveform)
      if pair is not None:
        enrolments.append(tuple(
            CropOrPad(p.waveform, rng) if crop else p.waveform for p in pair))
        enrolment_labels.append((pair.first.scores + pair.second.scores) / 2)
    yield Batch(
        [u.id for u in members], targets,
        np.stack([u.scores for u in members]), np.array(speakers),
        enrolments if use_enrolment else None,
        np.stack(enrolment_labels) if use_enrolment else None)
