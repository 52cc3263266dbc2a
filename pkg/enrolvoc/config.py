"""Profiles and JSON configuration files.

A configuration file is a JSON object whose keys are section names (dsp,
synthetic, encoder, train) and, optionally, "profile". Each section maps field
names to values, for example:

  {"profile": "desk", "train": {"epochs": 20, "seed": 3}}

Values are layered: profile defaults, then the file, then command-line flags.
"""
from collections import OrderedDict
import dataclasses
import io
import json
import typing
import warnings

from enrolvoc import data
from enrolvoc import dsp
from enrolvoc import error
from enrolvoc import model
from enrolvoc import trainer

PROFILES = ('desk', 'paper')
ALIASES = {'full': 'paper'}

SECTIONS = OrderedDict((
    ('dsp', dsp.DspConfig),
    ('synthetic', data.SyntheticConfig),
    ('encoder', model.EncoderConfig),
    ('train', trainer.TrainConfig),
))


@dataclasses.dataclass
class Settings(object):
  """One value per section."""
  dsp: dsp.DspConfig
  synthetic: data.SyntheticConfig
  encoder: model.EncoderConfig
  train: trainer.TrainConfig
  profile: str = 'desk'

  @classmethod
  def Profile(cls, name):
    name = ALIASES.get(name, name)
    if name not in PROFILES:
      raise error.InvalidValue('profile', name, 'one of ' + ', '.join(PROFILES))
    constructor = 'Desk' if name == 'desk' else 'Full'
    sections = {key: getattr(section, constructor)()
                for key, section in SECTIONS.items()}
    return cls(profile=name, **sections)

  def Validate(self):
    for key in SECTIONS:
      getattr(self, key).Validate()
    if self.synthetic.sample_rate != self.dsp.sample_rate:
      raise error.InvalidValue(
          'synthetic.sample_rate', self.synthetic.sample_rate,
          'dsp.sample_rate ({})'.format(self.dsp.sample_rate))
    return self

  def ToDict(self):
    record = OrderedDict([('profile', self.profile)])
    for key in SECTIONS:
      record[key] = dataclasses.asdict(getattr(self, key))
    return record


def _Coerce(name, value, kind):
  if kind is bool:
    if isinstance(value, bool):
      return value
    raise error.InvalidValue(name, value, 'true or false')
  if kind is int:
    if isinstance(value, int) and not isinstance(value, bool):
      return value
    raise error.InvalidValue(name, value, 'an integer')
  if kind is float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
      return float(value)
    raise error.InvalidValue(name, value, 'a number')
  if kind == typing.Optional[int]:
    return None if value is None else _Coerce(name, value, int)
  if kind == typing.List[int]:
    if isinstance(value, list):
      return [_Coerce(name, v, int) for v in value]
    raise error.InvalidValue(name, value, 'a list of integers')
  raise error.ConfigError('Unsupported field type {}.'.format(kind), name)


def Set(settings, dotted, value):
  """Sets one field by its 'section.field' name."""
  section, _, field = dotted.partition('.')
  if section not in SECTIONS:
    raise error.UnknownField(dotted)
  target = getattr(settings, section)
  kinds = {f.name: f.type for f in dataclasses.fields(target)}
  if field not in kinds:
    raise error.UnknownField(dotted)
  setattr(target, field, _Coerce(dotted, value, kinds[field]))


def ReadFile(path):
  try:
    with io.open(path, 'r', encoding='utf-8') as f:
      document = json.loads(f.read())
  except (IOError, ValueError) as e:
    raise error.ConfigError(
        'Failed to read config file {}. Error was: {}'.format(path, e),
        'config')
  if not isinstance(document, dict):
    raise error.ConfigError('Config file must hold a JSON object.', 'config')
  return document


def LoadSettings(profile=None, path=None, overrides=None):
  """Builds validated Settings.

  Args:
    profile: 'desk' or 'paper' ('full' is an alias of 'paper'); beats a
        profile named in the file. Defaults to the file's profile, or 'desk'.
    path: optional JSON config file.
    overrides: optional mapping of 'section.field' to value, applied last.
  Returns:
    Settings.
  """
  document = ReadFile(path) if path is not None else {}
  file_profile = document.pop('profile', None)
  file_profile = ALIASES.get(file_profile, file_profile)
  profile = ALIASES.get(profile, profile)
  if profile is not None and file_profile not in (None, profile):
    warnings.warn(
        'Config file {} asks for profile {}; using {}.'.format(
            path, file_profile, profile),
        error.InvalidConfigFile)
  settings = Settings.Profile(profile or file_profile or 'desk')
  for section, values in document.items():
    if section not in SECTIONS:
      raise error.UnknownField(section)
    if not isinstance(values, dict):
      raise error.InvalidValue(section, values, 'an object')
    for field, value in values.items():
      Set(settings, '{}.{}'.format(section, field), value)
  for dotted, value in (overrides or {}).items():
    Set(settings, dotted, value)
  return settings.Validate()
