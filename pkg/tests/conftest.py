import numpy as np
import pytest

from gvpolab import kernels
from gvpolab.policy import flat_policy, init_uniform
from gvpolab.taskenv import default_instance, make_bandit

# reference values computed once with mpmath at 30 digits
LOG_Z_TOY = 0.45283242526394139766  # log((e + 2) / 3)
PI_STAR_TOY = (0.57611688476582910986, 0.21194155761708544507)  # e/(e+2), 1/(e+2)
KL_STAR_UNIFORM_TOY = 0.12328445950188771220  # KL(pi*, uniform) for R = [1, 0, 0], beta = 1
PI_STAR_TOY_HALF_BETA = 0.78698604216159849898  # e^2 / (e^2 + 2)
LOG_PI_Y0 = -0.55144471393205108906  # 1 - log(e + 2)
SIGMOID_MINUS_HALF = 0.37754066879814543536


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_task():
    """One prompt, three responses, R = [1, 0, 0]."""
    return make_bandit(1, 3, {"type": "explicit", "table": [[1.0, 0.0, 0.0]]})


@pytest.fixture
def toy_uniform(toy_task):
    return init_uniform(toy_task)


@pytest.fixture(scope="session")
def default_task():
    return default_instance(0)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    return kernels.backends()[request.param]


def flat(logits):
    return flat_policy(logits)
