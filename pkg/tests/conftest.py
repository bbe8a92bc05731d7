import numpy as np
import pytest
from hypothesis import strategies as st

from symq import expr

LEAVES = [a for a in range(expr.N_ACTIONS) if expr.OPS[a].arity == 0]


@st.composite
def complete_actions(draw, max_len=20):
    """Action sequences that replay to a complete tree of length <= max_len."""
    actions = []
    open_slots = 1
    while open_slots:
        room = max_len - len(actions) - open_slots
        if room >= 1:
            a = draw(st.integers(0, expr.N_ACTIONS - 1))
            if expr.OPS[a].arity - 1 > room - 1:
                a = draw(st.sampled_from(LEAVES))
        else:
            a = draw(st.sampled_from(LEAVES))
        actions.append(a)
        open_slots += expr.OPS[a].arity - 1
    return actions


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
