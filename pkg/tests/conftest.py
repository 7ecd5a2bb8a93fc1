import numpy as np
import pytest

from atoken.fmcore import FeatureMap, TokenSet, pixel_positions


def random_partition(rng, width, height, n):
    """Random surjective pixel -> token labeling over the W x H grid."""
    total = width * height
    labels = rng.integers(0, n, size=total)
    # Guarantee every token at least one pixel.
    forced = rng.permutation(total)[:n]
    labels[forced] = np.arange(n)
    return labels


def token_set_from_labels(labels, width, height, features):
    n = features.shape[0]
    grid = pixel_positions(width, height)
    regions = [np.flatnonzero(labels == i) for i in range(n)]
    positions = np.stack([grid[r].mean(axis=0) for r in regions])
    return TokenSet(
        width=width,
        height=height,
        features=features,
        regions=regions,
        positions=positions,
    )


def random_token_set(rng, width=8, height=8, n=16, channels=4):
    labels = random_partition(rng, width, height, n)
    features = rng.normal(size=(n, channels))
    return token_set_from_labels(labels, width, height, features)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_feature_map(rng, width=8, height=8, channels=4):
    return FeatureMap(
        width=width,
        height=height,
        channels=channels,
        data=rng.normal(size=(height, width, channels)),
    )
