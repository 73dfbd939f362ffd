import numpy as np
import pytest

from fewshot.data import SyntheticShapesConfig, generate_synthetic
from fewshot.model import EncoderConfig, FlatModel


TINY_ENCODER = EncoderConfig(
    input_channels=3, input_size=8, stages=((8, 3, 1), (8, 3, 1)), feature_dim=8
)


def tiny_model(n_base=4, n_novel=None, seed=0):
    return FlatModel(TINY_ENCODER, n_base=n_base, n_novel=n_novel, seed=seed)


@pytest.fixture(scope="session")
def small_dataset():
    # 4 base + 2 novel classes, 16x16: enough structure, fast to train on
    cfg = SyntheticShapesConfig(
        n_base_classes=4, n_novel_classes=2, examples_per_class=12,
        image_size=16, seed=7,
    )
    return generate_synthetic(cfg)


def finite_difference(loss_fn, arrays, coords, h=1e-3):
    """Central-difference gradient oracle.

    `arrays` maps names to float64 ndarrays mutated in place; `coords` is a
    list of (name, flat_index). Independent of the autodiff engine: only
    calls loss_fn() twice per coordinate.
    """
    grads = []
    for name, flat in coords:
        arr = arrays[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        up = loss_fn()
        arr.flat[flat] = orig - h
        down = loss_fn()
        arr.flat[flat] = orig
        grads.append((up - down) / (2.0 * h))
    return np.asarray(grads)


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
