"""Waveforms, WAV files and log-Mel spectrograms."""
import dataclasses
import functools

import librosa
import numpy as np
import soundfile

from enrolvoc import error


@dataclasses.dataclass
class DspConfig(object):
  """Front-end parameters shared by both encoders."""
  sample_rate: int = 16000
  n_fft: int = 1024
  hop: int = 320
  n_mels: int = 64
  fmin: float = 50.0
  fmax: float = 8000.0
  floor: float = 1e-10

  @classmethod
  def Full(cls):
    return cls()

  @classmethod
  def Desk(cls):
    return cls(n_mels=32, hop=512)

  def Validate(self):
    for field in ('sample_rate', 'n_fft', 'hop', 'n_mels'):
      value = getattr(self, field)
      if not isinstance(value, int) or value < 1:
        raise error.InvalidValue('dsp.' + field, value, 'a positive integer')
    if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
      raise error.InvalidBandEdges(self.fmin, self.fmax, self.sample_rate)
    if not self.floor > 0:
      raise error.InvalidValue('dsp.floor', self.floor, 'a positive number')
    return self


class Waveform(object):
  """Mono samples in [-1, 1] at a fixed sample rate."""

  def __init__(self, samples, sample_rate):
    self.samples = np.asarray(samples, dtype=np.float32).reshape(-1)
    if self.samples.size == 0:
      raise error.EmptyWaveform()
    self.sample_rate = int(sample_rate)

  def __len__(self):
    return self.samples.size

  @property
  def duration(self):
    return self.samples.size / self.sample_rate

  def __repr__(self):
    return 'Waveform({:.3f}s @ {}Hz)'.format(self.duration, self.sample_rate)


class LogMel(object):
  """A T x M matrix of natural-log mel energies."""

  def __init__(self, values):
    self.values = np.asarray(values, dtype=np.float32)

  @property
  def frames(self):
    return self.values.shape[0]

  @property
  def mel_bins(self):
    return self.values.shape[1]


def HzToMel(frequency):
  """mel(f) = 2595 log10(1 + f / 700)."""
  return librosa.hz_to_mel(frequency, htk=True)


def Stft(waveform, n_fft, hop):
  """One-sided Hann-windowed STFT without centring, as T x (n_fft/2 + 1)."""
  if len(waveform) < n_fft:
    raise error.InputTooShort(len(waveform), n_fft)
  spectrum = librosa.stft(waveform.samples, n_fft=n_fft, hop_length=hop,
                          window='hann', center=False)
  return spectrum.T


def MelFilterbank(sample_rate, n_fft, n_mels, fmin, fmax):
  """Triangular filters with centres uniform on the mel scale."""
  if not 0 <= fmin < fmax <= sample_rate / 2:
    raise error.InvalidBandEdges(fmin, fmax, sample_rate)
  return _CachedFilterbank(sample_rate, n_fft, n_mels, float(fmin),
                           float(fmax)).copy()


@functools.lru_cache(maxsize=8)
def _CachedFilterbank(sample_rate, n_fft, n_mels, fmin, fmax):
  return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels,
                             fmin=fmin, fmax=fmax, htk=True, norm=None,
                             dtype=np.float64)


def MelCenters(n_mels, fmin, fmax):
  """Centre frequency in Hz of each filter of MelFilterbank."""
  return librosa.mel_frequencies(n_mels + 2, fmin=fmin, fmax=fmax,
                                 htk=True)[1:-1]


def PowerToLogMel(power, config):
  """log(max(filterbank . power, floor)) for T x (n_fft/2 + 1) power."""
  filterbank = _CachedFilterbank(config.sample_rate, config.n_fft,
                                 config.n_mels, float(config.fmin),
                                 float(config.fmax))
  energies = power.astype(np.float64) @ filterbank.T
  return LogMel(np.log(np.maximum(energies, config.floor)))


def ExtractLogMel(waveform, config):
  """log(max(filterbank . |STFT|^2, floor)) as a LogMel."""
  power = np.abs(Stft(waveform, config.n_fft, config.hop)) ** 2
  return PowerToLogMel(power, config)


class Normaliser(object):
  """Per-mel-bin standardisation fitted on training frames only."""

  MIN_STD = 1e-5

  def __init__(self, mean, std):
    self.mean = np.asarray(mean, dtype=np.float32)
    self.std = np.asarray(std, dtype=np.float32)

  @classmethod
  def Fit(cls, logmels):
    frames = np.concatenate([l.values for l in logmels], axis=0)
    frames = frames.astype(np.float64)
    std = np.maximum(frames.std(axis=0), cls.MIN_STD)
    return cls(frames.mean(axis=0), std)

  @classmethod
  def Identity(cls, n_mels):
    return cls(np.zeros(n_mels), np.ones(n_mels))

  def Apply(self, logmel):
    return (logmel.values - self.mean) / self.std


class FeatureExtractor(object):
  """Turns waveforms into normalised encoder inputs."""

  def __init__(self, config, normaliser):
    self.config = config
    self.normaliser = normaliser

  def __call__(self, waveform):
    return self.normaliser.Apply(ExtractLogMel(waveform, self.config))

  def Batch(self, waveforms):
    """Stacks equal-length waveforms into a B x 1 x T x M array."""
    features = [self(w) for w in waveforms]
    shapes = set(f.shape for f in features)
    if len(shapes) != 1:
      raise error.DimensionError('batch', *sorted(shapes))
    return np.stack(features)[:, None, :, :]


def ReadWav(path, sample_rate):
  """Reads a mono 16-bit PCM WAV file recorded at sample_rate."""
  try:
    info = soundfile.info(path)
  except RuntimeError as e:
    raise error.FormatError(path, 'container', str(e), 'a readable WAV file')
  if info.format != 'WAV':
    raise error.FormatError(path, 'format', info.format, 'WAV')
  if info.subtype != 'PCM_16':
    raise error.FormatError(path, 'subtype', info.subtype, 'PCM_16')
  if info.channels != 1:
    raise error.FormatError(path, 'channels', info.channels, 1)
  if info.samplerate != sample_rate:
    raise error.FormatError(path, 'samplerate', info.samplerate, sample_rate)
  samples, _ = soundfile.read(path, dtype='float32')
  return Waveform(samples, sample_rate)


def WriteWav(path, waveform):
  soundfile.write(path, np.clip(waveform.samples, -1, 1),
                  waveform.sample_rate, subtype='PCM_16', format='WAV')
