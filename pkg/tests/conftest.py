import random
from pathlib import Path

import numpy as np
import pytest

from codeseed import training
from codeseed.models import BaseLM, BaseLMConfig
from codeseed.vocab import build_vocabulary

DATA = Path(__file__).parent / "data"

_NAMES = ["count", "total", "index", "value", "size", "item", "name", "buffer"]


def java_class(i: int, rnd: random.Random) -> str:
    lines = [f"package demo.p{i % 3};", "", f"/** Class {i}. */", f"public class C{i} {{"]
    for m in range(rnd.randint(3, 6)):
        v = rnd.choice(_NAMES)
        lines += [
            f"    // method {m}",
            f"    public int m{m}(int {v}) {{",
            f"        int x = {v} + {rnd.randint(0, 99)};",
            '        if (x > 10) { System.out.println("big " + x); }',
            f"        for (int i = 0; i < {v}; i++) {{ x += i * 2.5f > 1 ? 1 : 0; }}",
            "        return x;",
            "    }",
        ]
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_project(root: Path, n: int, seed: int = 0, start: int = 0) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    rnd = random.Random(seed)
    for i in range(start, start + n):
        (root / f"C{i}.java").write_text(java_class(i, rnd), encoding="utf-8")
    return root


def tiny_config(**kw) -> training.TrainConfig:
    base = dict(lr=1e-2, batch_size=32, max_epochs=2, patience=3, dropout_rate=0.2, seed=0)
    base.update(kw)
    return training.TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return write_project(root / "corpus", 24, seed=1), write_project(root / "project", 10, seed=2, start=100)


@pytest.fixture(scope="session")
def base_bundles(toy_dirs, tmp_path_factory):
    corpus_dir, _ = toy_dirs
    out = tmp_path_factory.mktemp("bundles")
    paths = {}
    for unit in ("rnn", "gru"):
        model, hist = training.pretrain(corpus_dir, unit, tiny_config(), context=6, embed_dim=8, hidden_dim=8)
        paths[unit] = training.save_bundle(model, out / unit, history=hist)
    return paths


@pytest.fixture(scope="session")
def transfer_bundle(base_bundles, toy_dirs, tmp_path_factory):
    _, project = toy_dirs
    model, hist = training.finetune(base_bundles["rnn"], base_bundles["gru"], project, tiny_config(max_epochs=3))
    path = training.save_bundle(model, tmp_path_factory.mktemp("tm") / "tm", history=hist)
    return path, hist


def small_base(unit="gru", V=12, E=6, H=5, tau=4, seed=0, dropout=0.0) -> BaseLM:
    vocab = build_vocabulary([[f"t{i}" for i in range(V - 2)]], min_count=1)
    return BaseLM(BaseLMConfig(unit, V, E, H, tau, dropout), vocab, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# Acceptance criteria report: test_acceptance.py appends (number, title, ok, detail).
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {title}  [{detail}]")
