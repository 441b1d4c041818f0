""" Desk-scale toy data: 2-D point clouds and tiny single-channel images.
Everything is drawn from a numpy Generator seeded by the caller, then
standardised per dimension.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.datasets import make_swiss_roll

from earlyexit_lab.errors import ConfigError
from earlyexit_lab.utils import normalise_string

logger = logging.getLogger(__name__)

KINDS = ('gaussian-mixture', 'swiss-roll', 'checkerboard', 'tiny-image')

ALIASES = {
    'gmm': 'gaussian-mixture',
    'swissroll': 'swiss-roll',
    'tinyimage': 'tiny-image',
}


@dataclass
class ToyDataset:
    kind: str
    data: torch.Tensor
    labels: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor

    def __len__(self):
        return self.data.shape[0]

    @property
    def input_shape(self):
        return tuple(self.data.shape[1:])

    def restore(self, samples):
        """ Maps standardised samples back to the raw data scale.
        """
        return samples * self.std + self.mean


def resolve_kind(kind):
    name = normalise_string(kind)
    name = ALIASES.get(name.replace('-', ''), name)
    if name not in KINDS:
        raise ConfigError(
            "unknown dataset kind %r, expected one of %s" % (
                kind, ", ".join(KINDS + tuple(ALIASES))))
    return name


def gaussian_mixture(n, rng, modes=8, radius=4.0, scale=0.5):
    labels = rng.integers(0, modes, size=n)
    angles = 2 * np.pi * labels / modes
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centres + scale * rng.standard_normal((n, 2)), labels


def swiss_roll(n, rng, noise=0.5):
    points, _ = make_swiss_roll(
        n_samples=n, noise=noise,
        random_state=int(rng.integers(0, 2 ** 31 - 1)))
    return points[:, [0, 2]], np.zeros(n, dtype=np.int64)


def checkerboard(n, rng, cells=4):
    """ Points uniform on the dark squares of a cells x cells board.
    """
    x = rng.uniform(0, cells, size=n)
    row = rng.integers(0, cells // 2, size=n) * 2
    y = row + rng.uniform(0, 1, size=n) + np.floor(x) % 2
    points = np.stack([x, y], axis=1) - cells / 2.0
    labels = (np.floor(x) + np.floor(y) * cells).astype(np.int64)
    return points, labels


def tiny_images(n, rng, size=8):
    """ Dark images holding one bright square, horizontal bar or vertical
    bar at a random position. The label is the shape.
    """
    images = np.full((n, 1, size, size), -1.0)
    labels = rng.integers(0, 3, size=n)
    span = max(size // 2, 1)
    for index, shape in enumerate(labels):
        top, left = rng.integers(0, size - span + 1, size=2)
        if shape == 0:
            images[index, 0, top:top + span, left:left + span] = 1.0
        elif shape == 1:
            images[index, 0, top, :] = 1.0
        else:
            images[index, 0, :, left] = 1.0
    images += 0.05 * rng.standard_normal(images.shape)
    return images, labels


def make_toy_dataset(kind, n, seed, image_size=8):
    """ Builds a standardised toy dataset; the same (kind, n, seed) always
    gives the same tensor.
    """
    kind = resolve_kind(kind)
    if n < 1:
        raise ConfigError("dataset size must be >= 1, got %s" % n)
    rng = np.random.default_rng(int(seed))
    if kind == 'gaussian-mixture':
        raw, labels = gaussian_mixture(n, rng)
    elif kind == 'swiss-roll':
        raw, labels = swiss_roll(n, rng)
    elif kind == 'checkerboard':
        raw, labels = checkerboard(n, rng)
    else:
        raw, labels = tiny_images(n, rng, size=image_size)

    mean = raw.mean(axis=0)
    std = raw.std(axis=0) if n > 1 else np.ones_like(mean)
    std = np.where(std > 1e-8, std, 1.0)
    data = (raw - mean) / std
    logger.info("Built %s dataset: n=%s seed=%s", kind, n, seed)
    return ToyDataset(
        kind=kind,
        data=torch.from_numpy(data).float(),
        labels=torch.from_numpy(np.asarray(labels, dtype=np.int64)),
        mean=torch.from_numpy(mean).float(),
        std=torch.from_numpy(std).float(),
    )


def sample_timesteps(batch_size, T, generator=None):
    """ i.i.d. uniform timesteps on [1, T].
    """
    if T < 1:
        raise ConfigError("T must be >= 1, got %s" % T)
    return torch.randint(1, T + 1, (batch_size,), generator=generator)


def dataset_from_config(run_config, reference=False):
    """ The training set, or with reference set the held-out draw that
    quality metrics compare against.
    """
    data = run_config['data']
    if reference:
        n = run_config['eval']['n_reference']
        seed = run_config['eval']['reference_seed']
    else:
        n, seed = data['n'], data['seed']
    return make_toy_dataset(
        data['kind'], n, seed, image_size=data['image_size'])
