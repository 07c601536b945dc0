"""Input checks shared by the estimator and the CLI."""

from collections.abc import Mapping

import numpy as np
from sklearn.exceptions import NotFittedError

from .instance import VrpInstance


def check_instance(x, capacity=None):
    """Coerce ``x`` to a :class:`VrpInstance`.

    Accepts an instance, a mapping with ``coords``/``demands``/``capacity``, or
    an ``(n+1, 3)`` array of ``(x, y, demand)`` rows together with ``capacity``.
    """
    if isinstance(x, VrpInstance):
        return x
    if isinstance(x, Mapping):
        return VrpInstance(x["coords"], x["demands"], x.get("capacity", capacity))
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n+1, 3) array of (x, y, demand), got shape {arr.shape}")
    if capacity is None:
        raise ValueError("capacity is required when passing raw arrays")
    demands = arr[:, 2]
    if not np.array_equal(demands, np.round(demands)):
        raise ValueError("demands must be integers")
    return VrpInstance(arr[:, :2], demands.astype(np.int64), capacity)


def check_instances(X, capacity=None):
    """Coerce one instance or a collection of them to a list of :class:`VrpInstance`."""
    if isinstance(X, (VrpInstance, Mapping)):
        return [check_instance(X, capacity)]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_instance(X, capacity)]
    out = [check_instance(x, capacity) for x in X]
    if not out:
        raise ValueError("no instances given")
    return out


def check_fitted(estimator, attr="params_"):
    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call 'fit' or load parameters first"
        )
