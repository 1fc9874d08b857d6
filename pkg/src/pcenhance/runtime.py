"""Deterministic-execution switch.

Geometry inference runs deterministic by default because encoder and decoder
must select the same voxels. ``PCENHANCE_DETERMINISTIC`` overrides the default
for every stage: ``1`` forces single-threaded BLAS everywhere, ``0`` disables it.
"""

from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_VAR = "PCENHANCE_DETERMINISTIC"


def deterministic_enabled(default: bool) -> bool:
    value = os.environ.get(ENV_VAR)
    if value is None or value == "":
        return default
    return value.strip().lower() not in ("0", "false", "no", "off")


@contextlib.contextmanager
def deterministic(default: bool = True):
    if deterministic_enabled(default):
        with threadpool_limits(limits=1):
            yield True
    else:
        yield False
