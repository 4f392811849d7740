"""Shared hypothesis strategies."""
import numpy as np
from hypothesis import strategies as st

_coord = st.floats(-1.0, 1.0, allow_nan=False)


@st.composite
def unit_quats(draw):
    v = np.array([draw(_coord) for _ in range(4)])
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    return v / np.linalg.norm(v)


@st.composite
def unit_vectors(draw):
    v = np.array([draw(_coord) for _ in range(3)])
    if np.linalg.norm(v) < 1e-3:
        v = np.array([0.0, 0.0, 1.0])
    return v / np.linalg.norm(v)


@st.composite
def positive_scales(draw):
    return np.array([draw(st.floats(0.01, 3.0)) for _ in range(3)])
