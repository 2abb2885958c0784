import pytest

from mono3d import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    T.clear_faults()
    yield
    T.reset_tape()
    T.clear_faults()
