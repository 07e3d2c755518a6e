import numpy as np
import pytest

from hybridsod.config import RunConfig
from hybridsod.data import partition
from hybridsod.synthetic import eval_samples, make_corpus, training_samples

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**changes) -> RunConfig:
    base = RunConfig(num_groups=4, num_real=10, rnet_size=16, snet_size=16,
                     rnet_channels=(4, 8, 8, 8, 8), snet_channels=(4, 8, 8, 8, 8))
    return base.replace(optimizer={"epochs": 1, "lr": 3e-3, "batch_size": 4, "warmup_steps": 2},
                        **changes)


def tiny_data(n=40, num_real=10, num_groups=4, size=16, seed=0, n_val=6):
    items = make_corpus(n, size, seed)
    samples = training_samples(items, num_real)
    part = partition(samples, num_groups, num_real, seed)
    val = eval_samples(make_corpus(n_val, size, seed + 500, prefix="v"))
    return samples, part, val


class ScriptedNet:
    """Cheap stand-in honoring both trainer interfaces.

    Its prediction is ``level * mean(image)``. Each training round (one
    ``reset_optimizer`` call) sets ``level`` to the next scripted value, so
    validation MAE can be steered from outside.
    """

    def __init__(self, script=(0.5,), input_size=16, with_coarse=False):
        self.script = list(script)
        self.round = 0
        self.level = np.array([0.0])
        self.input_size = input_size
        self.with_coarse = with_coarse
        self.steps = 0
        self.batch_shapes = []

    def reset_optimizer(self, weight_decay=0.0, beta1=0.9):
        self.level = np.array([self.script[min(self.round, len(self.script) - 1)]])
        self.round += 1

    def train_step(self, *batch, lr):
        self.steps += 1
        self.batch_shapes.append(tuple(b.shape for b in batch))
        return 0.1

    def predict(self, images, *rest):
        images = np.asarray(images)
        return np.clip(self.level[0] * images.mean(axis=-1), 0, 1)

    def get_state(self):
        return {"level": self.level.copy()}

    def set_state(self, state):
        self.level = np.array(state["level"], dtype=np.float64)

    def save(self, path):
        from hybridsod.checkpoint import save_checkpoint
        return save_checkpoint(path, self.get_state(), {}, kind="stub")

    def load(self, path):
        from hybridsod.checkpoint import load_checkpoint
        self.set_state(load_checkpoint(path)[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
