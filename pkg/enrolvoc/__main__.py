import io
import json
import logging
import os
import sys

import enrolvoc
import enrolvoc.args
from enrolvoc import config
from enrolvoc import data
from enrolvoc import error
from enrolvoc import model
from enrolvoc import output
from enrolvoc import trainer
from enrolvoc import verify

logger = logging.getLogger('enrolvoc')


def _Settings(args):
  overrides = {}
  if args.seed is not None:
    overrides['train.seed'] = args.seed
    overrides['synthetic.seed'] = args.seed
  if getattr(args, 'bootstrap_n', None) is not None:
    overrides['train.bootstrap_n'] = args.bootstrap_n
  return config.LoadSettings(args.profile, args.config, overrides)


def _WriteJson(path, value):
  with io.open(path, 'w', encoding='utf-8', newline='\n') as f:
    f.write(json.dumps(value, indent=2, sort_keys=True) + '\n')


def Generate(args):
  settings = _Settings(args)
  os.makedirs(args.out, exist_ok=True)
  data.GenerateCorpus(settings.synthetic, args.out)
  _WriteJson(os.path.join(args.out, 'config.json'), settings.ToDict())
  trainer.WriteManifest(
      os.path.join(args.out, trainer.RUN_MANIFEST), 'generate',
      settings.ToDict(), out=args.out, profile=settings.profile)
  corpus = data.LoadCorpus(args.out, settings.dsp.sample_rate)
  output.Report().WriteCorpusSummary(corpus)
  return 0


def Train(args):
  settings = _Settings(args)
  spec = model.VariantSpec.Parse(args.variant)
  corpus = data.LoadCorpus(args.corpus, settings.dsp.sample_rate)
  context = {'command': 'train', 'corpus': args.corpus,
             'profile': settings.profile}
  record = trainer.Train(spec, corpus, settings.train, settings.encoder,
                         settings.dsp, args.out, context)
  report = trainer.Evaluate(record.best_checkpoint, corpus, enrolvoc.DEV,
                            settings.train.bootstrap_n, settings.train.seed)
  report.Write(os.path.join(args.out, 'report.json'))
  output.Report().WriteEvalReport(report)
  return 0


def Evaluate(args):
  settings = _Settings(args)
  checkpoint = model.LoadCheckpoint(args.checkpoint)
  corpus = data.LoadCorpus(args.corpus, checkpoint.dsp_config.sample_rate)
  report = trainer.Evaluate(checkpoint, corpus, args.split,
                            settings.train.bootstrap_n, settings.train.seed)
  if args.out is not None:
    os.makedirs(args.out, exist_ok=True)
    report.Write(os.path.join(args.out, 'report.json'))
    trainer.WriteManifest(
        os.path.join(args.out, trainer.RUN_MANIFEST), 'evaluate',
        settings.ToDict(), corpus=args.corpus, checkpoint=args.checkpoint,
        split=args.split, profile=settings.profile,
        bootstrap_n=settings.train.bootstrap_n, seed=settings.train.seed,
        variant=report.variant, score=report.score)
  output.Report().WriteEvalReport(report)
  return 0


def Ablate(args):
  settings = _Settings(args)
  corpus = data.LoadCorpus(args.corpus, settings.dsp.sample_rate)
  os.makedirs(args.out, exist_ok=True)
  _WriteJson(os.path.join(args.out, 'config.json'), settings.ToDict())
  rows = trainer.Ablate(corpus, settings.train, settings.encoder,
                        settings.dsp, args.out,
                        context={'corpus': args.corpus,
                                 'profile': settings.profile})
  trainer.WriteManifest(
      os.path.join(args.out, trainer.RUN_MANIFEST), 'ablate',
      settings.ToDict(), corpus=args.corpus, profile=settings.profile,
      variants=[row.spec.number for row in rows],
      failed=[row.spec.number for row in rows if row.failed])
  output.Report().WriteAblation(rows, settings.profile)
  return max([row.exit_code for row in rows if row.failed] or [0])


def GradCheck(args):
  checks = verify.RunSuite(args.seeds)
  if args.out is not None:
    os.makedirs(args.out, exist_ok=True)
    trainer.WriteManifest(
        os.path.join(args.out, trainer.RUN_MANIFEST), 'gradcheck',
        seeds=args.seeds, passed=bool(verify.Passed(checks)),
        checks=[check.ToDict() for check in checks])
  output.Report().WriteGradCheck(checks)
  return 0 if verify.Passed(checks) else 1


COMMANDS = {
    'generate': Generate,
    'train': Train,
    'evaluate': Evaluate,
    'ablate': Ablate,
    'gradcheck': GradCheck,
}


def main(argv=None):
  if argv is None:
    argv = sys.argv
  args = enrolvoc.args.parser.parse_args(argv[1:])
  logging.basicConfig(
      level=logging.DEBUG if args.verbose else logging.INFO,
      format='%(levelname)s %(name)s: %(message)s')
  try:
    return COMMANDS[args.command](args)
  except error.Error as e:
    logger.error('%s', e)
    return e.exit_code

if __name__ == '__main__':
  sys.exit(main())
