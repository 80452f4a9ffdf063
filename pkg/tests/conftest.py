import numpy as np
import pytest
from hypothesis import settings

from ovdkt.embedding import CategorySpace, build_teacher_space, build_text_bank

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_space():
    cs = CategorySpace.make(4, 2)
    teacher = build_teacher_space(cs, D=8, min_angular_separation=45.0, seed=3)
    bank = build_text_bank(teacher, cs, seed=3)
    return cs, teacher, bank
