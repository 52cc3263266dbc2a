"""Plain-text reports."""
import sys
import textwrap

import enrolvoc
from enrolvoc import metrics


def _Score(value):
  return '{:.3f}'.format(value)


def _Interval(report):
  return '{} [{}-{}]'.format(_Score(report.score), _Score(report.ci_low),
                             _Score(report.ci_high))


class Report(object):
  """Writes fixed-width text reports to a stream."""

  WIDTH = 78
  TAB = '  '

  def __init__(self, stream=None):
    self.file = stream if stream is not None else sys.stdout

  def Print(self, line, end='\n', wide=False):
    """Outputs a line to the stream."""
    if not wide:
      assert len(line) <= self.WIDTH
    self.file.write(line + end)

  def WriteRow(self, char='='):
    """Writes a horizontal divider row."""
    self.Print(char * self.WIDTH)

  def WriteLine(self, text='', right='', indent=0, fill=' '):
    """Writes one line of output, breaking it up as needed."""
    wrapper = textwrap.TextWrapper(
        width=self.WIDTH,
        initial_indent=indent * self.TAB,
        subsequent_indent=(indent + 1) * self.TAB,
        break_on_hyphens=False)
    # wrap returns empty list for ''. See http://bugs.python.org/issue15510.
    lines = wrapper.wrap(text) or ['']
    lastlen = len(lines[-1])
    rightlen = len(right)
    assert rightlen <= self.WIDTH
    if right and lastlen + rightlen + 1 > self.WIDTH:
      lines.append('')
      lastlen = 0
    if right:
      lines[-1] += (fill * (self.WIDTH - lastlen - rightlen)) + right
    for line in lines:
      self.Print(line)

  def WriteColumns(self, label, cells, widths):
    """Writes a label followed by right-aligned cells of the given widths."""
    right = ''.join(cell.rjust(width) for cell, width in zip(cells, widths))
    self.WriteLine(label, right=right)

  def WriteEvalReport(self, report):
    self.WriteRow()
    title = 'EVALUATION'
    if report.variant is not None:
      title = '{} variant {}'.format(title, report.variant)
    self.WriteLine(title, right=report.split or '')
    self.WriteRow('-')
    for name, ccc in zip(enrolvoc.EMOTIONS, report.ccc):
      self.WriteLine(name + ' ', right=' ' + _Score(ccc), indent=1, fill='.')
    self.WriteLine()
    self.WriteLine(
        'Mean CCC, {:.0%} bootstrap CI over {} resamples'.format(
            report.level, report.n_bootstrap),
        right=_Interval(report))
    if report.relative_gain is not None:
      self.WriteLine('Gain over baseline {}'.format(_Score(report.baseline)),
                     right=metrics.FormatGain(report.relative_gain) + '%')

  ABLATION_WIDTHS = (22, 7, 7, 7)

  def WriteAblation(self, rows, profile=None):
    """One row per variant: dev score [CI], dev gain, test score, test gain."""
    self.WriteRow()
    self.WriteLine('ABLATION', right='profile ' + profile if profile else '')
    self.WriteColumns('Model', ('Dev CCC [CI]', 'Gain', 'Test', 'Gain'),
                      self.ABLATION_WIDTHS)
    self.WriteRow('-')
    for row in rows:
      label = '{}) {}'.format(row.spec.number, row.spec.Name())
      if row.failed:
        self.WriteLine(label, right='failed')
        self.WriteLine(row.failure, indent=2)
        continue
      test, test_gain = '-', 'N/A'
      if row.test is not None:
        test = _Score(row.test.score)
        test_gain = metrics.FormatGain(row.test.relative_gain)
      self.WriteColumns(
          label,
          (_Interval(row.dev), metrics.FormatGain(row.dev.relative_gain),
           test, test_gain),
          self.ABLATION_WIDTHS)
    self.WriteRow()

  def WriteGradCheck(self, checks):
    """One line per check: its name, max relative error and verdict."""
    self.WriteRow()
    self.WriteLine('GRADIENT CHECKS', right='max rel. error')
    self.WriteRow('-')
    for check in checks:
      verdict = 'ok' if check.passed else 'FAIL'
      detail = '{:.2e} {:>4}'.format(check.max_error, verdict)
      self.WriteLine(check.name + ' ', right=' ' + detail, fill='.')
      if not check.passed and check.detail:
        self.WriteLine(check.detail, indent=2)
    self.WriteRow()

  def WriteCorpusSummary(self, corpus):
    self.WriteRow()
    self.WriteLine('CORPUS', right=(corpus.root or '')[-60:])
    self.WriteRow('-')
    for split in enrolvoc.SPLITS:
      utterances = corpus.Split(split)
      if not utterances:
        continue
      duration = sum(u.waveform.duration for u in utterances) / len(utterances)
      self.WriteColumns(
          split,
          ('{} speakers'.format(len(corpus.Speakers(split))),
           '{} utterances'.format(len(utterances)),
           'mean {:.2f}s'.format(duration)),
          (14, 16, 14))
    self.WriteRow()
