from pathlib import Path

import pytest

from alloyforge.pipeline import CorpusStore, ingest_corpus
from alloyforge.records import group_by_doc, load_ground_truth

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def truth_records():
    return load_ground_truth(FIXTURES / "ground_truth.csv")


@pytest.fixture(scope="session")
def truth_by_doc(truth_records):
    return group_by_doc(truth_records)


@pytest.fixture()
def corpus7():
    return CorpusStore(ingest_corpus(FIXTURES / "manifest.csv"))


@pytest.fixture()
def corpus8():
    return CorpusStore(ingest_corpus(FIXTURES / "manifest8.csv"))
