"""Stand-in for shtab when the completion extra is not installed."""
FILE = DIR = None


def add_argument_to(parser, *args, **kwargs):
  """Lets arguments take a .complete attribute without shtab."""
  import argparse
  argparse.Action.complete = None  # type: ignore
  return parser
