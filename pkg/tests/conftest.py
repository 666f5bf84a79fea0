import numpy as np
import pytest

from scenekit.dataset import AudioClip, LabeledDataset, write_manifest, write_wav


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def balanced_dataset(num_classes=10, per_class=10, length=64, seed=0):
    """Tiny labelled dataset of noise clips, `per_class` clips for each class."""
    r = np.random.default_rng(seed)
    clips, labels = [], []
    for c in range(num_classes):
        for i in range(per_class):
            clips.append(AudioClip(0.1 * r.standard_normal(length), 8000, f"c{c:02d}/clip{i:02d}.wav"))
            labels.append(f"class{c:02d}")
    return LabeledDataset(clips, labels)


def write_wav_manifest(directory, dataset):
    for clip in dataset.clips:
        path = directory / clip.id
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(path, clip.samples, clip.sample_rate)
    manifest = directory / "manifest.csv"
    write_manifest(manifest, [(c.id, lab) for c, lab in zip(dataset.clips, dataset.labels)])
    return manifest


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
