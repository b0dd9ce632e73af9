import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cafd.backbone import CamClassifier  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def randomize_bn(model: torch.nn.Module, seed: int = 0) -> torch.nn.Module:
    """Give batch-norm layers non-trivial running statistics and affine params."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            n = m.num_features
            m.running_mean.copy_(torch.randn(n, generator=g) * 0.1)
            m.running_var.copy_(torch.rand(n, generator=g) + 0.5)
            m.weight.data.copy_(torch.rand(n, generator=g) + 0.5)
            m.bias.data.copy_(torch.randn(n, generator=g) * 0.1)
    return model.eval()


def make_tiny(seed: int = 0, dtype=torch.float32, widths=(4, 8), image_size=8, num_classes=3, channels=3):
    torch.manual_seed(seed)
    m = CamClassifier(channels, num_classes, widths, image_size)
    randomize_bn(m, seed)
    return m.to(dtype).eval()


@pytest.fixture
def tiny():
    return make_tiny()


@pytest.fixture
def tiny64():
    return make_tiny(dtype=torch.float64)


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(123)
    return torch.rand(6, 3, 8, 8, generator=g)


@pytest.fixture(scope="session")
def toy_trained():
    """A quickly trained small classifier and a held-out batch (model, x, y)."""
    from cafd.backbone import TrainHyper, train_classifier
    from cafd.datasets import ShapeGenConfig, generate_synthetic, split

    ds = generate_synthetic(ShapeGenConfig(num_classes=4, samples_per_class=100, seed=5))
    train, test = split(ds, (0.8, 0.2), seed=0)
    ckpt = train_classifier(train, TrainHyper(epochs=12, lr=0.05, widths=(16, 32, 64, 64), batch_size=32))
    x, y = test.tensors()
    return ckpt.model, x, y


ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow, trains models)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
