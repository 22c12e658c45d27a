"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import math
import pathlib
import tempfile

import bullettrain_py as bt

ROOT = pathlib.Path(__file__).resolve().parent.parent


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert f"{bt.theoretical_speedup(10, 0, 0, 10, 0.26, 0.55, 0.18):.2f}" == "3.06"
    assert f"{bt.theoretical_speedup(10, 0, 2, 10, 0.28, 0.54, 0.18):.2f}" == "2.25"
    assert f"{bt.jsd_cost_speedup(0.35):.2f}" == "1.76"

    assert close(bt.signed_variance([0.0] * 10, 3), 0.0)
    assert close(bt.signed_variance([100.0] + [0.0] * 9, 0), 0.09, 1e-9)
    assert close(bt.signed_variance([100.0] + [0.0] * 9, 1), -0.09, 1e-9)
    assert bt.classify_batch([-0.1, 0.01, 0.05, 0.08], 0.25) == ["outlier", "boundary", "robust", "robust"]
    assert bt.percentile([-0.1, 0.01, 0.05, 0.08], 0.75) == 0.05

    logits = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]
    assert close(bt.at_loss([[0.0, 0.0, 0.0]], [1]), math.log(3))
    assert close(bt.trades_loss(logits, logits, [0, 2]), bt.at_loss(logits, [0, 2]))
    assert close(bt.jsd_loss(logits, logits, logits), 0.0)

    x, y = bt.make_synthetic("blobs", 40, 0.2, 7)
    assert len(x) == 40 and len(x[0]) == 2 and set(y) == {0, 1}
    assert bt.make_synthetic("blobs", 40, 0.2, 7) == (x, y)

    config = (ROOT / "configs" / "blobs_at.toml").read_text()
    sets = ["epochs=2", "dataset.n=300", "dataset.test_n=100"]
    cfg = bt.load_config(config, sets)
    assert cfg["epochs"] == 2 and cfg["budget"]["n_b"] == 10

    try:
        bt.load_config(config, ["no_such_key=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as out:
        summary = bt.run_experiment(config, out, sets)
        assert 0.0 <= summary["robust_acc"] <= summary["clean_acc"] <= 1.0
        assert (pathlib.Path(out) / "metrics.csv").exists()
        model = bt.Model.load(str(pathlib.Path(out) / "checkpoint.json"))
        xt, yt = bt.make_synthetic("blobs", 100, 0.25, cfg["seed"] ^ 0x7E577E57)
        assert close(model.clean_accuracy(xt, yt), summary["clean_acc"])
        adv = model.pgd(xt[:5], yt[:5], 0.15, 0.0375, 10, low=-3.0, high=3.0)
        assert all(abs(a - b) <= 0.15 + 1e-12 for ra, rb in zip(adv, xt) for a, b in zip(ra, rb))

        cmp = bt.compare(config, str(pathlib.Path(out) / "cmp"), 5, sets)
        base, mined = cmp["baseline"]["cost_units"], cmp["bullettrain"]["cost_units"]
        assert close(cmp["measured_speedup"], base / mined)

    print(json.dumps({"smoke_test": "ok", "measured_speedup": round(cmp["measured_speedup"], 3)}))


if __name__ == "__main__":
    main()
