import numpy as np
import pytest

from srbm_rare import model


@pytest.fixture(scope="session")
def model_2d():
    """Two-dimensional benchmark model (positive drift component, M reflection)."""
    return model.validate(
        [-2.0, 1.0],
        np.eye(2),
        [[1.0, 0.0], [-1.0, 1.0]],
        m_matrix_required=False,
    )


@pytest.fixture(scope="session")
def model_3d():
    """Three-dimensional benchmark model (M-matrix regime)."""
    return model.validate(
        [-2.0, -1.0, -1.0],
        [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 3.0]],
        [[3.0, -1.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, -1.0, 2.0]],
        m_matrix_required=True,
    )


@pytest.fixture(scope="session")
def model_1d():
    return model.validate([-1.0], [[1.0]], [[1.0]])


def scenario_for(n: int, anchor, epsilon: float = 0.15) -> model.Scenario:
    """Scale-n scenario started at anchor / n (the benchmark convention)."""
    return model.Scenario(n=n, epsilon=epsilon, start=np.asarray(anchor, dtype=float) / n)
