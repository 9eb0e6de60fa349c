import numpy as np
import pytest

from decoseg.bridging import BridgeParams
from decoseg.classnet import ClassNetArch, ClassNetParams
from decoseg.segnet import SegNetArch, SegNetParams
from decoseg.synth import DatasetConfig, gen_dataset

TINY_ARCH = ClassNetArch(num_classes=3, in_channels=3, input_size=(16, 16), widths=(4, 6), hidden=(8,))


def random_biases(params, rng, scale=0.1):
    """Nonzero biases keep relu inputs off exact zeros in unpooled holes."""
    for name, t in params.tensors.items():
        if name.endswith("bias"):
            t.data[...] = scale * rng.standard_normal(t.shape)
    return params


def tiny_models(seed=0, arch=TINY_ARCH):
    rng = np.random.default_rng(seed)
    cls = random_biases(ClassNetParams.init(arch, rng), rng)
    bridge = random_biases(BridgeParams.init(arch.feature_shape[0], rng), rng)
    seg = random_biases(SegNetParams.init(SegNetArch.mirror(arch), rng), rng)
    return cls, bridge, seg


SMALL_DATA = DatasetConfig(num_classes=3, image_size=(16, 16), n_weak=12, n_strong=9, n_test=6,
                           radius_range=(3.0, 6.0), seed=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    gen_dataset(SMALL_DATA, root)
    return root


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (
            f"  ({detail})" if detail else "")
        print(ACCEPTANCE_LINES[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
