"""
Reference predictors that a trained model is expected to beat.
"""

import logging
from typing import Optional

import numpy as np

from backend.core.errors import DataError
from backend.models import JointLimits

logger = logging.getLogger(__name__)


class MidpointBaseline:
    """
    Predicts one constant pose: the midpoint of each component's range over
    the training targets, or of the joint limits when fitted on nothing.
    """

    name = "constant midpoint"

    def __init__(self, limits: JointLimits = JointLimits(), l_out: int = 10):
        self.pose = np.asarray(limits.midpoints())
        self.l_out = l_out

    def fit(self, x: np.ndarray, y: np.ndarray) -> "MidpointBaseline":
        y = np.asarray(y, dtype=np.float64)
        if y.size:
            self.l_out = y.shape[1]
            flat = y.reshape(-1, 9)
            self.pose = 0.5 * (flat.min(axis=0) + flat.max(axis=0))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        batch = np.asarray(x).shape[0]
        return np.broadcast_to(self.pose, (batch, self.l_out, 9)).copy()


class LastFrameLinearBaseline:
    """
    Least-squares map from the 8 features of the last input frame (plus an
    intercept) to every output step.
    """

    name = "last-frame linear"

    def __init__(self):
        self.coef: Optional[np.ndarray] = None
        self.l_out = 0

    @staticmethod
    def _design(x: np.ndarray) -> np.ndarray:
        last = np.asarray(x, dtype=np.float64)[:, -1, :]
        return np.hstack([last, np.ones((last.shape[0], 1))])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LastFrameLinearBaseline":
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] == 0:
            raise DataError("Cannot fit the linear baseline on an empty set")
        self.l_out = y.shape[1]
        self.coef, *_ = np.linalg.lstsq(self._design(x), y.reshape(y.shape[0], -1), rcond=None)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise DataError("Linear baseline used before fit")
        flat = self._design(x) @ self.coef
        return flat.reshape(-1, self.l_out, 9)
