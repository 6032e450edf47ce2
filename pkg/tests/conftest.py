import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from linknbed import store as st
from linknbed.pipeline import read_config_file

THOROUGH = settings(max_examples=1000, deadline=None, derandomize=True)

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "synth200"
DESK_CFG = DATA / "desk.cfg"


def write_tsv(path: Path, rows) -> Path:
    path.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
    return path


def fixture_overrides(**extra) -> dict:
    base = {"triples": str(FIXTURE / "triples.tsv"), "attributes": str(FIXTURE / "attributes.tsv"),
            "types": str(FIXTURE / "types.tsv"), "labels": str(FIXTURE / "labels.tsv")}
    base.update(extra)
    return base


def desk_values() -> dict:
    return read_config_file(DESK_CFG)


@pytest.fixture
def tiny_files(tmp_path):
    """Two small graphs: X has a, b, c, d; Y has a', b', c'."""
    t = write_tsv(tmp_path / "triples.tsv", [
        ("X", "a", "acted_in", "f1"), ("X", "b", "acted_in", "f1"), ("X", "a", "knows", "b"),
        ("X", "c", "acted_in", "f2"),
        ("Y", "a'", "acted_in", "g1"), ("Y", "b'", "acted_in", "g1"), ("Y", "a'", "knows", "b'"),
    ])
    a = write_tsv(tmp_path / "attributes.tsv", [
        ("a", "name", "Ann Lee"), ("a", "born", "1970"), ("a'", "name", "ann lee"),
        ("b", "name", "Bob"), ("f1", "title", "Film One"), ("g1", "title", "film one"),
    ])
    ty = write_tsv(tmp_path / "types.tsv", [
        ("a", "person"), ("b", "person"), ("c", "person"), ("f1", "film"), ("f2", "film"),
        ("a'", "person"), ("b'", "person"), ("g1", "film"),
    ])
    lab = write_tsv(tmp_path / "labels.tsv", [("a", "a'", "1"), ("b", "b'", "1"), ("a", "b'", "0"),
                                               ("f1", "g1", "1"), ("c", "a'", "0")])
    return {"triples": t, "attributes": a, "types": ty, "labels": lab}


@pytest.fixture
def tiny(tiny_files):
    return st.load_graphs(tiny_files["triples"], tiny_files["attributes"], tiny_files["types"],
                          tiny_files["labels"])


@pytest.fixture
def fixture_copy(tmp_path):
    dst = tmp_path / "synth200"
    shutil.copytree(FIXTURE, dst)
    return dst


def make_store(n_x: int, n_y: int, triples, types=None):
    """Store over entities x0.. and y0.. from (graph-local) integer triples
    ``(g, s, r, o)``."""
    vocab = st.Vocab()
    vocab.graphs.add("X")
    vocab.graphs.add("Y")
    for i in range(n_x):
        vocab.entities.add(f"x{i}")
        vocab.entity_graph.append(0)
    for i in range(n_y):
        vocab.entities.add(f"y{i}")
        vocab.entity_graph.append(1)
    rows = []
    for g, s, r, o in triples:
        off = 0 if g == "X" else n_x
        rows.append((s + off, vocab.relations.add(f"r{r}"), o + off))
    ent_types = {}
    for e, t in (types or {}).items():
        ent_types[e] = [vocab.types.add(f"t{t}")]
    return st.MultiGraphStore(vocab, np.asarray(rows, dtype=np.int64).reshape(-1, 3), [], ent_types)


# acceptance reporting: one pass/fail line per criterion in the terminal summary

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` records the outcome of acceptance criterion n."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> None:
        results[n] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
