import numpy as np
import pytest

import koopman_ddpc as kd


@pytest.fixture(scope="session")
def quartic():
    return kd.quartic_manifold()


@pytest.fixture(scope="session")
def quartic_weights():
    return kd.CostWeights(Q_z=np.diag([0.0, 1.0]), R=[[1.0]])


@pytest.fixture(scope="session")
def sine_ref():
    return kd.sine_reference(200, magnitude=1.0, period=60)


@pytest.fixture(scope="session")
def quartic_z1():
    return np.array([0.8, 0.0])


def make_scalar_linear(a=0.5, b=1.0):
    """Scalar linear plant wrapped as a trivially lifted system (psi = id)."""
    def dynamics(z, u):
        return np.array([a * z[0] + b * u[0]])

    def lifting(z):
        return np.array([z[0]])

    lifted = kd.LiftedLinearSystem(A=[[a]], B=[[b]], C=[[1.0]])
    return kd.KoopmanSystem(name="scalar_linear", n_z=1, n_u=1,
                            dynamics=dynamics, lifting=lifting, lifted=lifted)


@pytest.fixture(scope="session")
def scalar_linear():
    return make_scalar_linear()
