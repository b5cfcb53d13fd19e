import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from perturbforge.attacks import UniversalConfig, fit_universal  # noqa: E402
from perturbforge.corpus import SyntheticSpec, generate_synthetic_corpus  # noqa: E402
from perturbforge.imaging import CannyConcat  # noqa: E402
from perturbforge.models import TrainConfig, build_classifier, build_surrogate, train  # noqa: E402
from perturbforge.pipeline import PipelineConfig, build_adversarial_corpus  # noqa: E402

# desk scale: 200 spam + 200 ham rendered at 400x400
DESK_SPEC = SyntheticSpec(spam_count=200, ham_count=200, image_size=400, seed=0)
BASE_EPOCHS = 20
SURROGATE_EPOCHS = 3


@dataclass
class Desk:
    root: Path
    manifest: object
    base: object
    surrogate: object
    inverted: object
    seconds: dict = field(default_factory=dict)

    def images(self, split=None, label=None):
        sub = self.manifest.select(split=split, label=label)
        return sub.load_images(), sub.labels()


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    seconds = {}
    t0 = time.perf_counter()
    manifest = generate_synthetic_corpus(DESK_SPEC, root / "corpus")
    seconds["corpus"] = time.perf_counter() - t0
    trn, tst = manifest.select(split="train"), manifest.select(split="test")
    X, y = trn.load_images(), trn.labels()
    Xt, yt = tst.load_images(), tst.labels()

    t0 = time.perf_counter()
    pre = CannyConcat()
    base = train(build_classifier("cnn"), pre.transform(X), y, TrainConfig(epochs=BASE_EPOCHS), pre.transform(Xt), yt)
    surrogate = train(build_surrogate("cnn"), X, y, TrainConfig(epochs=SURROGATE_EPOCHS), Xt, yt)
    inverted = train(build_surrogate("cnn", labels_inverted=True), X, y, TrainConfig(epochs=SURROGATE_EPOCHS), Xt, yt)
    seconds["training"] = time.perf_counter() - t0
    return Desk(root, manifest, base, surrogate, inverted, seconds)


@pytest.fixture(scope="session")
def desk_pipeline(desk):
    t0 = time.perf_counter()
    cfg = PipelineConfig(
        manifest=desk.manifest,
        cam_model=desk.base,
        surrogate=desk.surrogate,
        inverted_model=desk.inverted,
        out_dir=desk.root / "pipeline",
        universal=UniversalConfig(seed=0),
        seed=0,
    )
    result = build_adversarial_corpus(cfg)
    desk.seconds["pipeline"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def desk_universal(desk):
    """Universal perturbation fit on clean train spam: (result, fit seconds, fit count)."""
    X, _ = desk.images(split="train", label="spam")
    result, seconds = fit_universal(desk.surrogate, X, UniversalConfig())
    return result, seconds, len(X)


def spam_accuracy(network, X):
    """Fraction of spam images a normally trained network labels spam."""
    return float(np.mean(network.logits(X, batch_size=16).argmax(axis=1) == 1))


# ------------------------------------------------- acceptance summary lines

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {title}")
