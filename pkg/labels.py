"""The four activity-intensity labels and helpers for label arrays.

Label arrays everywhere in the pipeline are small-integer numpy arrays holding the
canonical index of each label, with MISSING (-1) for windows or samples that carry no
annotation.
"""
from enum import IntEnum

import numpy as np

from errors import LabelParseError

MISSING = -1
N_CLASSES = 4


class IntensityLabel(IntEnum):
    SLEEP = 0
    SEDENTARY = 1
    LIGHT = 2
    MVPA = 3

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "IntensityLabel":
        """Parses a label name such as ``"sleep"`` or ``" MVPA "``."""
        key = str(name).strip().lower()
        for label in cls:
            if label.label_name == key:
                return label
        raise LabelParseError(
            f"Unknown intensity label '{name}'; expected one of {', '.join(LABEL_NAMES)}"
        )


LABEL_NAMES = [label.label_name for label in IntensityLabel]


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lower canonical index (np.argmax keeps the first)."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
        raise ValueError(f"Expected an (n, {N_CLASSES}) probability matrix, got {probs.shape}")
    return np.argmax(probs, axis=1).astype(np.int64)


def label_to_name(value: int) -> str:
    """Name of a label index, empty string for MISSING."""
    if value == MISSING:
        return ""
    return IntensityLabel(int(value)).label_name


def names_to_labels(names) -> np.ndarray:
    """Parses a column of label names; empty or NaN cells become MISSING."""
    out = np.full(len(names), MISSING, dtype=np.int64)
    for i, name in enumerate(names):
        if name is None or (isinstance(name, float) and np.isnan(name)) or str(name).strip() == "":
            continue
        out[i] = int(IntensityLabel.parse(name))
    return out
