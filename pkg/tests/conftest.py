import numpy as np
import pytest

from ctcscst.alphabet import Alphabet

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def ab():
    """Alphabet {a, b}: blank = 0, a = 1, b = 2."""
    return Alphabet(("a", "b"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def alphabet_of_size(K: int) -> Alphabet:
    return Alphabet(tuple("abcdefgh"[: K - 1]))


TINY_SYNTH = dict(num_symbols=3, label_len=(2, 4), n_features=4, sigma=0.3, n_train=48, n_val=16, n_test=16, seed=3)
TINY_TRAIN = dict(batch_size=8, max_epochs=4, conv_blocks=[[4, 3, 3, 1, 1]], rnn_hidden=8, plateau_patience=1)


@pytest.fixture(scope="session")
def tiny_corpus():
    from ctcscst.synthdata import SynthSpec, generate_corpus, make_alphabet

    spec = SynthSpec(**TINY_SYNTH)
    splits, _ = generate_corpus(spec)
    return splits, make_alphabet(spec)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    from ctcscst.synthdata import SynthSpec, generate

    return generate(SynthSpec(**TINY_SYNTH), tmp_path_factory.mktemp("corpus"))
