"""Kernel backend selection.

The compiled extension is used when importable; set ``ACFILTER_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

import os

if os.environ.get("ACFILTER_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
    from acfilter import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from acfilter import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        from acfilter import _pykernels as _impl

        BACKEND = "python"

train_events = _impl.train_events
predict_events = _impl.predict_events
event_gradient = _impl.event_gradient
xent_sum = _impl.xent_sum

__all__ = ["BACKEND", "train_events", "predict_events", "event_gradient", "xent_sum"]
