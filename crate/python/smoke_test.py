"""Smoke test for the caser_py extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import caser_py as cp


def main():
    grads = cp.gradient_check(seed=3)
    assert max(grads.values()) < 1e-4, grads
    print("gradient check ok:", f"{max(grads.values()):.2e}")

    assert abs(cp.average_precision([7, 3, 8, 4], {7, 8}) - 5 / 6) < 1e-12
    assert cp.precision_recall_at([1, 2, 3], {2, 9}, 2) == (0.5, 0.5)

    rules = cp.mine_rules([[1, 2, 3]] * 10)
    assert ([1, 2], 3, 0, 10, 1.0) in rules
    assert cp.sequential_intensity([[1, 2, 3]] * 10) == len(rules) / 10

    data = cp.Dataset.planted(users=150, items=200, sequence_len=20, seed=2)
    assert data.user_count == 150 and data.item_count == 200
    train, val, test = data.user_split(0)
    assert train + val + test == data.sequences()[0]

    hp = cp.HyperParams(dim=8, markov_order=3, targets=2, filters_per_height=2, vertical_filters=2)
    model, log = cp.Model.train(data, hp, epochs=3, seed=7)
    assert len(log) >= 1 and all(math.isfinite(e["train_loss"]) for e in log)
    report = model.evaluate(data)
    assert 0.0 <= report["map"] <= 1.0 and report["users"] == 150
    print("test MAP", f"{report['map']:.4f}", "Prec@1", f"{report['prec@1']:.4f}")

    recs = model.recommend(0, train + val + test, n=5)
    assert len(recs) == 5 and all(item not in train + val + test for item, _ in recs)
    scores = model.scores(0, train)
    assert scores[0] == -math.inf and len(scores) == 201

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.casr")
        model.save(path)
        again = cp.Model.load(path)
        assert again.vertical_filters() == model.vertical_filters()
        assert again.evaluate(data) == report

    again, _ = cp.Model.train(data, hp, epochs=3, seed=7)
    assert again.evaluate(data) == report

    try:
        cp.Model.load(__file__)
    except ValueError as e:
        assert "magic" in str(e)
    else:
        raise AssertionError("loading a non-checkpoint should fail")
    print("smoke test passed")


if __name__ == "__main__":
    main()
