"""Smoke test for the pygns extension.

Uses an installed ``pygns`` if importable, otherwise the library built by
``cargo build -p pygns`` (debug or release), copied next to a temp module path.
"""

import importlib
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
FAST = '{"inference": {"steps": 30, "refit_steps": 20, "top_k": 2, "walks": {"n_walks": 30}}}'


def load_pygns():
    try:
        return importlib.import_module("pygns")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpygns.so"
        if lib.exists():
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "pygns.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("pygns")
    raise SystemExit("pygns not found: run `cargo build -p pygns` or `maturin develop` in crates/py")


def main():
    pygns = load_pygns()
    drawings = pygns.synthesize_toy(4, 2, seed=3)
    assert len(drawings) == 8
    img = drawings[0]["image"]
    assert len(img) == 105 and len(img[0]) == 105
    assert sum(map(sum, img)) > 0

    model = pygns.Model.init(seed=1)
    assert model.canvas == (105, 105)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        model = pygns.Model.load(path)

    concepts = model.sample_concepts(3, temperature=0.5, seed=2)
    assert len(concepts) == 3
    assert concepts == model.sample_concepts(3, temperature=0.5, seed=2)

    parse = model.parse(img, seed=0, config=FAST)
    assert abs(sum(parse["weights"]) - 1.0) < 1e-9
    assert parse["map_strokes"]

    ll, per_dim = model.log_likelihood(img, seed=0, config=FAST)
    assert ll < 0 and per_dim == ll / (105 * 105)

    train = [drawings[0]["image"], drawings[2]["image"]]
    assert model.classify(train, [train[1], train[0]], seed=0, config=FAST) == [1, 0]

    try:
        model.parse([[0] * 105 for _ in range(105)])
    except ValueError as e:
        assert "empty image" in str(e)
    else:
        raise AssertionError("blank image accepted")
    print("pygns smoke test: ok")


def test_smoke():
    main()


if __name__ == "__main__":
    main()
