"""Smoke test of the scalevar Python extension.

Build and install first:  pip install --no-build-isolation -e crates/python
Then run:                 python python/smoke_test.py
"""

import os
import tempfile

import scalevar


def check_depth_and_cost_model():
    assert scalevar.select_layers(30, 4) == [0, 9, 19, 29]
    flagged = [(a, b, w) for a, b, nested, w in scalevar.nesting_report(30, [2, 4, 8, 16]) if not nested]
    assert flagged == [(4, 8, 9), (8, 16, 4)], flagged

    large = scalevar.Schedule.large()
    assert large.total_tokens == 680
    for d, pct in [(16, 40.4), (8, 63.5), (2, 80.8)]:
        r = scalevar.perf_report(scalevar.Policy(30, d, 6, 10), large, 1920)
        assert round(r["kv_reduction_pct"], 1) == pct, r
    csv = scalevar.sweep_csv(30, [2, 4, 8, 16, 30], [6, 7, 8, 9, 10], large, 1920)
    assert len(csv.strip().splitlines()) == 26


def check_model_round_trip():
    sched = scalevar.Schedule([1, 2, 3, 4, 6], 64)
    train = scalevar.Dataset.synthesize(sched, 4, 32, 0)
    val = scalevar.Dataset.synthesize(sched, 4, 8, 1)
    label, maps = train.pyramid(0)
    assert [len(m) for m in maps] == [1, 2, 3, 4, 6]

    model = scalevar.Model(4, 16, 2, 4, sched, seed=0)
    policy = scalevar.Policy(4, 2, 2, 5)
    history = model.train(train, val, policy, 1, 2, 3, batch_size=8)
    assert [h["phase"] for h in history] == [1, 2, 3]
    last = history[-1]
    for layer in policy.full_only_layers():
        assert last["per_layer_flexible_norms"][layer] == 0.0
        assert last["per_layer_bridge_norms"][layer] > 0.0

    full = scalevar.Policy(4, 4, 2, 5)
    a = model.generate(1, full, seed=3)
    b = model.generate(1, policy, seed=3)
    assert a[:2] == b[:2]
    assert model.generation_kv_entries(policy) == scalevar.kv_entries(policy, sched)

    sub_logits = model.extract_subnet(policy.selected).logits(val, 0, scalevar.Policy(2, 2, 5, 5))
    sup_logits = model.logits(val, 0, scalevar.Policy(4, 2, 0, 5))
    assert sub_logits == sup_logits

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.svck")
        model.save(path)
        again = scalevar.Model.load(path)
        assert again.logits(val, 1, policy) == model.logits(val, 1, policy)
        try:
            scalevar.Model.load(os.path.join(tmp, "missing.svck"))
        except OSError as e:
            assert "missing.svck" in str(e)
        else:
            raise AssertionError("expected OSError")

    try:
        scalevar.Policy(4, 5, 2, 5)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def check_verify():
    results = scalevar.run_verify()
    assert all(ok for _, ok, _, _, _ in results), results
    broken = {name: ok for name, ok, _, _, _ in scalevar.run_verify(corrupt_mask=True)}
    assert not broken["block_causality"]


if __name__ == "__main__":
    check_depth_and_cost_model()
    check_model_round_trip()
    check_verify()
    print("python smoke test passed")
