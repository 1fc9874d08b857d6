"""INI-style configuration for the command line.

Each section is named after a subcommand (``[pipeline]``, ``[train-dge]``)
and every key is the long name of one of its flags, with dashes or
underscores. Values from the file become argparse defaults, so flags given
on the command line still win. Example::

    [train-dge]
    synthetic-count = 4
    epochs = 20
    lr = 0.004
    out = dge.ckpt
"""

from __future__ import annotations

import argparse
import configparser
import shlex

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_file(fh)
    return parser


def _boolean(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        flag = _boolean(raw)
        return flag if isinstance(action, argparse._StoreTrueAction) else not flag
    conv = action.type or str
    if action.nargs in ("+", "*") or isinstance(action, argparse._AppendAction):
        return [conv(v) for v in shlex.split(raw)]
    return conv(raw)


def apply_section(subparser: argparse.ArgumentParser, section) -> dict:
    """Install ``section``'s keys as defaults on ``subparser``; returns them.

    A boolean key names the flag itself: ``no-dge = true`` sets the
    ``--no-dge`` switch. Unknown keys raise ``ValueError``.
    """
    by_flag = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:].replace("_", "-")] = action
    defaults = {}
    for key, raw in section.items():
        action = by_flag.get(key.replace("_", "-"))
        if action is None or action.dest == "help":
            raise ValueError(f"unknown option {key!r} in [{section.name}]")
        defaults[action.dest] = _convert(action, raw)
        action.required = False
    subparser.set_defaults(**defaults)
    return defaults
