from __future__ import annotations

import pytest

from taxokit.embedding import CachedEmbedder, HashEmbedder
from taxokit.taxonomy import parse_taxonomy

DISEASES = """\
ROOT\tcardiovascular disease
ROOT\trespiratory disease
cardiovascular disease\theart disease
cardiovascular disease\tvascular disease
cardiovascular disease\tcardiomyopathy
heart disease\tcoronary heart disease
heart disease\theart valve disease
vascular disease\tvasculitis
vascular disease\tarterial occlusive disease
respiratory disease\tasthma
respiratory disease\tpneumonia
respiratory disease\tbronchitis
"""


@pytest.fixture
def diseases():
    return parse_taxonomy(DISEASES, name="diseases")


@pytest.fixture(scope="session")
def embedder():
    return CachedEmbedder(HashEmbedder())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
