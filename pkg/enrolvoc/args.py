import argparse
import os

import enrolvoc

try:
  import shtab
except ImportError:
  from . import _shtab as shtab


def Corpus(path):
  if not os.path.isdir(path):
    raise argparse.ArgumentTypeError('{} not found'.format(path))
  if not os.path.isfile(os.path.join(path, enrolvoc.MANIFEST)):
    raise argparse.ArgumentTypeError(
        '{} has no {}'.format(path, enrolvoc.MANIFEST))
  return path


def ConfigFile(path):
  if not os.path.isfile(path):
    raise argparse.ArgumentTypeError('{} not found'.format(path))
  if not os.access(path, os.R_OK):
    raise argparse.ArgumentTypeError('Cannot access {}'.format(path))
  return path


def Positive(text):
  try:
    value = int(text)
  except ValueError:
    raise argparse.ArgumentTypeError('{} is not an integer'.format(text))
  if value < 1:
    raise argparse.ArgumentTypeError('{} is not positive'.format(text))
  return value


def _Common(subparser):
  subparser.add_argument(
      '--config', type=ConfigFile, metavar='FILE',
      help='JSON file with dsp, synthetic, encoder and train sections'
  ).complete = shtab.FILE
  subparser.add_argument(
      '--profile', choices=('desk', 'paper', 'full'),
      help='size profile for defaults, full being an alias of paper '
      '(default: desk)')
  subparser.add_argument('--seed', type=int, help='random seed')
  subparser.add_argument(
      '--verbose', '-v', action='store_true', help='log every epoch detail')


def _CorpusFlag(subparser):
  subparser.add_argument(
      '--corpus', type=Corpus, required=True, metavar='DIR',
      help='corpus directory holding a manifest and wav/').complete = shtab.DIR


def _OutFlag(subparser, required=True, help='output directory'):
  subparser.add_argument(
      '--out', required=required, metavar='DIR', help=help
  ).complete = shtab.DIR


def _BootstrapFlag(subparser):
  subparser.add_argument(
      '--bootstrap-n', type=Positive, metavar='N',
      help='bootstrap resamples for the confidence interval')


parser = argparse.ArgumentParser(
    'enrolvoc',
    formatter_class=argparse.RawTextHelpFormatter,
    description='''\
Few-shot personalised recognition of emotion in vocal bursts

Basic usage:
  %(prog)s generate --out corpus/
  %(prog)s train --corpus corpus/ --variant 3 --out runs/v3
  %(prog)s evaluate --corpus corpus/ --checkpoint runs/v3/best.ckpt
  %(prog)s ablate --corpus corpus/ --out runs/ablation
  %(prog)s gradcheck''')
shtab.add_argument_to(parser)
parser.add_argument('--version', action='version',
    version='%(prog)s ' + enrolvoc.__version__)
commands = parser.add_subparsers(dest='command', metavar='COMMAND')
commands.required = True

generate = commands.add_parser('generate', help='write a synthetic corpus')
_Common(generate)
_OutFlag(generate, help='corpus directory to write')

train = commands.add_parser('train', help='train one variant')
_Common(train)
_CorpusFlag(train)
train.add_argument(
    '--variant', required=True, metavar='VARIANT',
    help="1 to 7, or a composition such as 'g o f o g~ o h~'")
_OutFlag(train, help='run directory')
_BootstrapFlag(train)

evaluate = commands.add_parser('evaluate', help='score a checkpoint')
_Common(evaluate)
_CorpusFlag(evaluate)
evaluate.add_argument(
    '--checkpoint', required=True, type=ConfigFile, metavar='FILE',
    help='checkpoint written by train').complete = shtab.FILE
evaluate.add_argument(
    '--split', choices=enrolvoc.SPLITS, default=enrolvoc.DEV,
    help='split to score (default: dev)')
_OutFlag(evaluate, required=False, help='directory for report.json')
_BootstrapFlag(evaluate)

ablate = commands.add_parser('ablate', help='train and score all variants')
_Common(ablate)
_CorpusFlag(ablate)
_OutFlag(ablate, help='directory for the runs and ablation.json')
_BootstrapFlag(ablate)

gradcheck = commands.add_parser(
    'gradcheck', help='verify gradients and conditioning invariants')
gradcheck.add_argument(
    '--seeds', type=Positive, default=10, metavar='N',
    help='seeds per primitive (default: 10)')
gradcheck.add_argument(
    '--verbose', '-v', action='store_true', help='log every check')
_OutFlag(gradcheck, required=False,
         help='directory for a manifest.json holding every check')
