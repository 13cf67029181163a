import pytest
import torch

import seedshift as ss
from seedshift.backends import train_toy_backend
from seedshift.losses import build_domain_spec
from seedshift.toydata import generate_toy_dataset

torch.set_num_threads(4)

TRAIN_EPOCHS = 60
TRAIN_SEED = 0
N_FIXTURES = 8


class ToyWorld:
    """Shared trained backend, domain specs, and pinned fixtures."""

    def __init__(self):
        self.day = generate_toy_dataset(24, "day", 0)
        self.night = generate_toy_dataset(24, "night", 0)
        # first 8 pairs are held out as the pinned fixture suite
        self.train_scenes = self.day[N_FIXTURES:] + self.night[N_FIXTURES:]
        self.backend = train_toy_backend(self.train_scenes, epochs=TRAIN_EPOCHS, rng_seed=TRAIN_SEED)
        self.night_spec = build_domain_spec(
            "night", self.backend.condition_for("night"),
            [s.image for s in self.night[N_FIXTURES:N_FIXTURES + 5]], self.backend.codec,
            [s.image for s in self.day[N_FIXTURES:N_FIXTURES + 5]],
        )
        self.day_spec = build_domain_spec(
            "day", self.backend.condition_for("day"),
            [s.image for s in self.day[N_FIXTURES:N_FIXTURES + 5]], self.backend.codec,
            [s.image for s in self.night[N_FIXTURES:N_FIXTURES + 5]],
        )
        self.fixtures = self.day[:N_FIXTURES]
        self.fixture_twins = self.night[:N_FIXTURES]


@pytest.fixture(scope="session")
def toy_world():
    return ToyWorld()


class TranslationRun:
    """ST and ST+TO results for one pinned fixture."""

    def __init__(self, world: ToyWorld, index: int, config: ss.TranslationConfig):
        scene = world.fixtures[index]
        self.source_image = torch.from_numpy(scene.image)
        backend = world.backend
        z0 = backend.codec.encode(self.source_image)
        self.seed, self.t_inv = ss.invert(z0, backend, world.day_spec.condition, config)
        self.st = ss.seed_translate(self.seed, self.source_image, world.night_spec, backend, config)
        self.st_image = backend.codec.decode(
            self.st.generation_trajectory.at(0).values
        ).clamp(0.0, 1.0)
        self.to = ss.trajectory_optimize(
            self.t_inv, self.st.generation_trajectory, self.st.translated_seed,
            world.night_spec, backend, config,
        )
        self.to_image = self.to.output_image.clamp(0.0, 1.0)


@pytest.fixture(scope="session")
def fixture_runs(toy_world):
    config = ss.TranslationConfig()
    return [TranslationRun(toy_world, k, config) for k in range(N_FIXTURES)]


@pytest.fixture(scope="session")
def analytic_setup():
    schedule = ss.DiffusionSchedule.linear_beta()
    gen = torch.Generator().manual_seed(0)
    mu = torch.randn((4, 4, 3), generator=gen, dtype=torch.float64)
    backend = ss.analytic_gaussian_backend(mu, 0.5, schedule)
    z0 = ss.Latent(mu + 0.5 * torch.randn((4, 4, 3), generator=gen, dtype=torch.float64), 0)
    return backend, z0


def make_untrained_backend(world: ToyWorld) -> ss.ToyBackend:
    return train_toy_backend(world.train_scenes, epochs=0, rng_seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def untrained_backend(toy_world):
    return make_untrained_backend(toy_world)
