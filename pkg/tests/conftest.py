import random

import numpy as np
import pytest

from genplan import domains, generators, pddl


@pytest.fixture(scope="session")
def blocksworld_domain():
    return domains.load_domain("blocksworld")


@pytest.fixture(scope="session")
def gripper_domain():
    return domains.load_domain("gripper")


@pytest.fixture(scope="session")
def gripper3_task():
    problem = generators.generate(generators.SizeSpec.of("gripper", balls=3), seed=11)
    return pddl.ground_task(domains.load_domain("gripper"), problem)


@pytest.fixture(scope="session")
def blocks3_task():
    problem = generators.generate(generators.SizeSpec.of("blocksworld", blocks=3), seed=11)
    return pddl.ground_task(domains.load_domain("blocksworld"), problem)


def random_walk_states(task, steps, seed):
    """States visited by a random applicable-action walk from the init."""
    rng = random.Random(seed)
    state = task.init
    states = [state]
    for _ in range(steps):
        apps = pddl.applicable_actions(task, state)
        if not apps:
            break
        state = pddl.apply(state, rng.choice(apps))
        states.append(state)
    return states
