import pytest

from algcd import synth


@pytest.fixture(scope="session")
def small_ds():
    cfg = synth.SynthConfig(num_classes=10, num_known=5, dim=16, samples_per_class=20,
                            labeled_fraction=0.5, fine_grained_groups=3, rng_seed=7)
    return synth.generate(cfg)


@pytest.fixture(scope="session")
def default_ds():
    return synth.generate(synth.SynthConfig())


# acceptance verdict lines, printed at the end of the run whatever the capture mode
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
