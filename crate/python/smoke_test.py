"""Smoke test for the diffsmc Python extension.

Build and install first, for example:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/diffsmc-*.whl
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import diffsmc

CONFIG = """
[train]
batch_size = 4
particles = 12
hidden = 16
stages = [{ lr = 1e-3, epochs = 0.5 }, { lr = 1e-3, epochs = 0.5 }, { lr = 1e-4, epochs = 0.5 }]
[eval]
particles = 12
"""


def check_resample():
    w = [0.1, 0.2, 0.3, 0.4]
    idx = diffsmc.resample(w, 8, "stratified", seed=1)
    assert len(idx) == 8 and all(0 <= i < 4 for i in idx)
    counts = [idx.count(i) for i in range(4)]
    assert all(abs(c - 8 * wi) < 2 for c, wi in zip(counts, w)), counts
    try:
        diffsmc.resample(w, 8, "systematic")
    except diffsmc.DiffsmcError:
        pass
    else:
        raise AssertionError("unknown scheme accepted")


def check_mixture():
    m = diffsmc.Mixture([[0.0, 0.0, 0.0]], [0.0], 1.0, 1.0, 1e-3)
    assert len(m) == 1
    # nearly flat heading kernel: density at the center is 1 / (2π · 2π)
    (lp,) = m.logpdf([[0.0, 0.0, 0.0]])
    assert abs(lp + 2 * math.log(2 * math.pi)) < 1e-3, lp
    draws = m.sample(200, seed=3)
    mx = sum(d[0] for d in draws) / len(draws)
    assert abs(mx) < 0.3, mx


def check_pipeline():
    traj = diffsmc.simulate(seed=4, length=10)
    assert len(traj["states"]) == 10 and len(traj["observations"]) == 10

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        h1 = diffsmc.make_dataset(str(data), seed=2, train=8, val=2, eval=3, length=10)
        h2 = diffsmc.make_dataset(str(Path(tmp) / "again"), seed=2, train=8, val=2, eval=3, length=10)
        assert h1 == h2

        model = diffsmc.Model.train(str(data), "mdps", seed=0, config=CONFIG)
        assert model.method == "mdps"
        report = model.evaluate(str(data))
        assert len(report["nll"]) == 3 and math.isfinite(report["median_nll"])

        ckpt = Path(tmp) / "mdps.json"
        model.save(str(ckpt))
        again = diffsmc.Model.load("mdps", str(ckpt), config=CONFIG).evaluate(str(data))
        assert again["nll"] == report["nll"]

        means = model.posterior_means(str(data), 0)
        assert len(means) == 10 and all(len(m) == 3 for m in means)


if __name__ == "__main__":
    check_resample()
    check_mixture()
    check_pipeline()
    print("smoke test passed")
