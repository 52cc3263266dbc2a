"""Enrolvoc error classes."""


class Error(Exception):
  exit_code = 1


class DegenerateConcordance(Warning):
  pass


class DeviationWarning(Warning):
  pass


class InvalidConfigFile(Warning):
  pass


class ConfigError(Error):
  exit_code = 2

  def __init__(self, message, field=None):
    self.field = field
    super(ConfigError, self).__init__(message)

  def __str__(self):
    parent = super(ConfigError, self).__str__()
    if self.field is None:
      return parent
    return '{}: {}'.format(self.field, parent)


class UnknownField(ConfigError):
  def __init__(self, field):
    super(UnknownField, self).__init__('Unknown configuration field.', field)


class InvalidValue(ConfigError):
  def __init__(self, field, value, expected):
    super(InvalidValue, self).__init__(
        'Invalid value {!r}, expected {}.'.format(value, expected), field)


class InvalidBandEdges(ConfigError):
  def __init__(self, fmin, fmax, sample_rate):
    super(InvalidBandEdges, self).__init__(
        'Band edges must satisfy 0 <= fmin < fmax <= sr/2 '
        '(fmin={}, fmax={}, sr={}).'.format(fmin, fmax, sample_rate),
        'dsp.fmin')


class MissingSplit(ConfigError):
  def __init__(self, split):
    super(MissingSplit, self).__init__(
        'Corpus has no {} split.'.format(split), 'corpus')


class SpecError(ConfigError):
  def __init__(self, spec):
    super(SpecError, self).__init__(
        'Variant {} is not one of the seven supported architectures.'
        .format(spec), 'variant')


class ContractError(Error):
  pass


class DimensionError(ContractError):
  def __init__(self, op, *shapes):
    super(DimensionError, self).__init__(
        '{}: incompatible shapes {}.'.format(
            op, ' and '.join(str(tuple(s)) for s in shapes)))


class NumericError(Error):
  exit_code = 3

  def __init__(self, message, op=None, node_id=None):
    self.op = op
    self.node_id = node_id
    super(NumericError, self).__init__(message)

  def __str__(self):
    parent = super(NumericError, self).__str__()
    if self.op is None:
      return parent
    return '{}#{}: {}'.format(self.op, self.node_id, parent)


class NonFiniteValue(NumericError):
  def __init__(self, op, node_id=None):
    super(NonFiniteValue, self).__init__(
        'Non-finite value produced.', op, node_id)


class NumericAbort(NumericError):
  def __init__(self, epoch, step, value):
    self.epoch = epoch
    self.step = step
    super(NumericAbort, self).__init__(
        'Loss became {} at epoch {}, step {}.'.format(value, epoch, step))


class DataError(Error):
  exit_code = 4


class TooFewUtterances(DataError):
  def __init__(self, speaker, split, count):
    super(TooFewUtterances, self).__init__(
        'Speaker {} has {} utterance(s) in the {} split; at least 2 are '
        'needed for enrolment.'.format(speaker, count, split))


class EmptySplit(DataError):
  def __init__(self, split):
    super(EmptySplit, self).__init__('Split {} is empty.'.format(split))


class LabelError(DataError):
  pass


class UnknownSpeaker(LabelError):
  def __init__(self, speaker):
    super(UnknownSpeaker, self).__init__(
        'Speaker {} is not a training speaker.'.format(speaker))


class LabelOutOfRange(LabelError):
  def __init__(self, label, n_classes):
    super(LabelOutOfRange, self).__init__(
        'Label {} is outside [0, {}).'.format(label, n_classes))


class FormatError(DataError):
  def __init__(self, path, field, value, expected):
    self.field = field
    super(FormatError, self).__init__(
        '{}: unsupported {} {!r} (expected {}).'.format(
            path, field, value, expected))


class ManifestError(DataError):
  def __init__(self, message, path=None, lineno=None):
    self.path = path
    self.lineno = lineno
    super(ManifestError, self).__init__(message)

  def __str__(self):
    parent = super(ManifestError, self).__str__()
    if self.lineno is not None or self.path is not None:
      lineno = '???' if self.lineno is None else ('%03d' % self.lineno)
      path = '???' if self.path is None else self.path
      return '{}.{}: {}'.format(path, lineno, parent)
    return parent


class InputTooShort(DataError):
  def __init__(self, length, needed):
    super(InputTooShort, self).__init__(
        'Waveform has {} samples; at least {} are needed.'.format(
            length, needed))


class CheckpointError(DataError):
  pass


class EmptyWaveform(DataError):
  def __init__(self):
    super(EmptyWaveform, self).__init__('Waveform has no samples.')
