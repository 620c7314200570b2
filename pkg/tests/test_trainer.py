import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dstlab.autograd import Linear, Network, ReLU
from dstlab.config import ExperimentConfig
from dstlab.criteria import GrowthCriterion, PruneCriterion
from dstlab.data import Dataset
from dstlab.topology import Mask, global_density
from dstlab.trainer import (
    DivergenceError,
    OptimizerState,
    RECORD_COLUMNS,
    Trainer,
    dst_update,
    evaluate,
    predict,
    run_experiment,
    sgd_step,
    write_run,
)

SMALL = dict(data_samples=1500, epochs=3, batch_size=64, lr=0.05, update_period=5)


def small_config(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def assert_mask_consistent(tr: Trainer):
    for name, bits in tr.mask.layers.items():
        assert not np.any(tr.net.params[name][~bits])
        assert not np.any(tr.opt.buffers[name][~bits])


# -- sgd ----------------------------------------------------------------------------


def test_vanilla_sgd_step():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.5, 0.5, -1.0])}
    opt = OptimizerState(momentum=0.0, weight_decay=0.0, buffers={"w": np.zeros(3)})
    sgd_step(p, g, None, opt, 0.1)
    np.testing.assert_allclose(p["w"], [0.95, -2.05, 0.6])


def test_nesterov_step_matches_hand_computation():
    p = {"w": np.array([1.0, 2.0])}
    opt = OptimizerState(momentum=0.9, weight_decay=0.1, nesterov=True, buffers={"w": np.zeros(2)})
    g = {"w": np.array([0.5, -1.0])}
    sgd_step(p, g, None, opt, 0.1)
    # d = g + wd*p = [0.6, -0.8]; buf = d; step = d + 0.9*buf = 1.9*d
    np.testing.assert_allclose(opt.buffers["w"], [0.6, -0.8])
    np.testing.assert_allclose(p["w"], [1.0 - 0.1 * 1.14, 2.0 + 0.1 * 1.52])
    sgd_step(p, g, None, opt, 0.1)
    d2 = np.array([0.5, -1.0]) + 0.1 * np.array([0.886, 2.152])
    buf2 = 0.9 * np.array([0.6, -0.8]) + d2
    np.testing.assert_allclose(opt.buffers["w"], buf2)


def test_classic_momentum_step():
    p = {"w": np.array([1.0])}
    opt = OptimizerState(momentum=0.5, weight_decay=0.0, nesterov=False, buffers={"w": np.zeros(1)})
    sgd_step(p, {"w": np.array([1.0])}, None, opt, 1.0)
    sgd_step(p, {"w": np.array([1.0])}, None, opt, 1.0)
    assert p["w"][0] == pytest.approx(1.0 - 1.0 - 1.5)
    assert opt.buffers["w"][0] == 1.5  # the step does not alias the buffer


def test_masked_weight_stays_zero():
    p = {"w": np.array([0.0, 1.0])}
    mask = Mask({"w": np.array([False, True])})
    opt = OptimizerState(buffers={"w": np.zeros(2)})
    for _ in range(5):
        sgd_step(p, {"w": np.array([123.0, 0.1])}, mask, opt, 0.1)
    assert p["w"][0] == 0.0 and opt.buffers["w"][0] == 0.0


def test_non_finite_gradient_diverges():
    opt = OptimizerState(buffers={"w": np.zeros(1)})
    with pytest.raises(DivergenceError):
        sgd_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, None, opt, 0.1)


# -- dst_update -----------------------------------------------------------------------


def _hand_net():
    net = Network([Linear(4, 2)], (4,))
    w = net.params["0.weight"].reshape(-1)
    w[:] = [0.4, 0.0, -0.1, 0.0, 0.0, 0.05, 0.0, -0.9]
    bits = np.array([1, 0, 1, 0, 0, 1, 0, 1], bool).reshape(2, 4)
    grads = {"0.weight": np.array([0.0, 0.3, 0.0, -0.7, 0.3, 0.0, 0.1, 0.0]).reshape(2, 4),
             "0.bias": np.zeros(2)}
    opt = OptimizerState.for_network(net)
    for b in opt.buffers.values():
        b[...] = 0.25
    opt.buffers["0.weight"].reshape(-1)[~bits.reshape(-1)] = 0.0
    return net, Mask({"0.weight": bits}), opt, grads


def test_dst_update_hand_example():
    # active {0, 2, 5, 7} with |w| 0.4, 0.1, 0.05, 0.9; k = floor(0.5 * 4) = 2
    # magnitude prunes {5, 2}; inactive-before {1, 3, 4, 6} with |g| .3 .7 .3 .1
    # gradient growth takes 3 then 1 (tie with 4 goes to the lower index)
    net, mask, opt, grads = _hand_net()
    new, stats = dst_update(net, mask, opt, grads, PruneCriterion("magnitude"), GrowthCriterion("gradient"),
                            0.5, "local", np.random.default_rng(0))
    assert stats.pruned["0.weight"].tolist() == [2, 5]
    assert stats.grown["0.weight"].tolist() == [1, 3]
    assert np.flatnonzero(new["0.weight"]).tolist() == [0, 1, 3, 7]
    np.testing.assert_array_equal(net.params["0.weight"].reshape(-1), [0.4, 0, 0, 0, 0, 0, 0, -0.9])
    buf = opt.buffers["0.weight"].reshape(-1)
    np.testing.assert_array_equal(buf, [0.25, 0, 0, 0, 0, 0, 0, 0.25])
    assert np.all(opt.buffers["0.bias"] == 0.25)
    assert mask.active_count() == 4  # input mask untouched


def test_dst_update_zero_fraction_is_identity():
    net, mask, opt, grads = _hand_net()
    before = net.params["0.weight"].copy()
    new, stats = dst_update(net, mask, opt, grads, PruneCriterion("snip"), GrowthCriterion("random"),
                            0.0, "local", np.random.default_rng(0))
    assert new == mask and stats.n_pruned == 0
    np.testing.assert_array_equal(net.params["0.weight"], before)


def _random_state(seed, density=0.3):
    rng = np.random.default_rng(seed)
    net = Network([Linear(6, 8), ReLU(), Linear(8, 3)], (6,))
    for p in net.params.values():
        p[...] = rng.normal(size=p.shape)
    mask = Mask({n: rng.random(net.params[n].shape) < density for n in net.maskable})
    for n in net.maskable:
        mask[n].reshape(-1)[0] = True
    mask.apply(net)
    grads = {k: rng.normal(size=v.shape) for k, v in net.params.items()}
    return net, mask, OptimizerState.for_network(net), grads


@given(
    seed=st.integers(0, 10_000),
    rho=st.floats(0, 1),
    crit=st.sampled_from(["magnitude", "set", "mest", "sensitivity", "rsensitivity", "snip", "random_prune"]),
    growth=st.sampled_from(["random", "gradient"]),
    scope=st.sampled_from(["local", "global"]),
)
def test_dst_update_invariants(seed, rho, crit, growth, scope):
    net, mask, opt, grads = _random_state(seed)
    new, stats = dst_update(net, mask, opt, grads, PruneCriterion(crit), GrowthCriterion(growth), rho, scope,
                            np.random.default_rng(seed))
    if scope == "local":
        for n in mask.names():
            assert new.active_count(n) == mask.active_count(n)
    else:
        assert new.active_count() == mask.active_count()
        assert all(new.active_count(n) >= 1 for n in new.names())
    for n in mask.names():
        p, g = set(stats.pruned[n].tolist()), set(stats.grown[n].tolist())
        assert not p & g
        assert all(mask[n].reshape(-1)[i] for i in p)
        assert not any(mask[n].reshape(-1)[i] for i in g)
        assert not np.any(net.params[n][~new[n]])
        flat = net.params[n].reshape(-1)
        assert all(flat[i] == 0 for i in g)


def test_mest_lambda_zero_update_matches_magnitude():
    for seed in range(5):
        a = _random_state(seed)
        b = _random_state(seed)
        ma, _ = dst_update(*a, PruneCriterion("mest", mest_lambda=0.0), GrowthCriterion("random"), 0.5, "local",
                           np.random.default_rng(1))
        mb, _ = dst_update(*b, PruneCriterion("magnitude"), GrowthCriterion("random"), 0.5, "local",
                           np.random.default_rng(1))
        assert ma == mb


def test_dense_layer_is_left_alone_locally():
    net, mask, opt, grads = _random_state(0)
    mask.layers["2.weight"][:] = True
    new, stats = dst_update(net, mask, opt, grads, PruneCriterion("magnitude"), GrowthCriterion("random"),
                            0.5, "local", np.random.default_rng(0))
    assert stats.pruned["2.weight"].size == 0
    assert new["2.weight"].all()


def test_unknown_scope():
    with pytest.raises(ValueError, match="scope"):
        dst_update(*_random_state(0), PruneCriterion("magnitude"), GrowthCriterion("random"), 0.5, "layerwise",
                   np.random.default_rng(0))


# -- evaluation -------------------------------------------------------------------------


def test_predict_ties_go_to_class_zero():
    assert predict(np.zeros((4, 1))).tolist() == [0, 0, 0, 0]
    assert predict(np.zeros((3, 2))).tolist() == [0, 0, 0]
    assert predict(np.array([[1.0, 3.0, 3.0]])).tolist() == [1]


def test_evaluate_hand_fixture():
    # identity head: logits equal the inputs
    net = Network([Linear(3, 3)], (3,))
    net.params["0.weight"][...] = np.eye(3)
    net.params["0.bias"][...] = 0.0
    x = np.array([
        [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0],
        [0.5, 2.0, 0.0], [0.0, 0.0, -1.0], [4.0, 0.0, 1.0], [0.0, 3.0, 3.0], [1.0, 2.0, 3.0],
    ])
    y = np.array([0, 1, 2, 1, 2, 1, 0, 2, 2, 2])
    before = {k: v.copy() for k, v in net.params.items()}
    loss, acc = evaluate(net, Dataset(x, y, 3), batch_size=4)
    # predictions 0 1 2 0 0 1 0 0 1 2 -> correct at 0 1 2 5 6 9
    assert acc == 0.6
    expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(x, y)])
    assert loss == pytest.approx(expected, rel=1e-12)
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_evaluate_uniform_binary_logits():
    net = Network([Linear(2, 1)], (2,))
    net.params["0.weight"][...] = 0.0
    net.params["0.bias"][...] = 0.0
    _, acc = evaluate(net, Dataset(np.ones((6, 2)), [0, 1, 0, 1, 0, 1], 2))
    assert acc == 0.5
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, Dataset(np.ones((0, 2)), np.zeros(0, int), 2))


# -- full runs ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dst_run():
    tr = Trainer(small_config(criterion="set", growth="random"))
    checks = []
    tr_counts = {n: tr.mask.active_count(n) for n in tr.mask.names()}

    def on_epoch(t, row):
        assert_mask_consistent(t)
        checks.append({n: t.mask.active_count(n) for n in t.mask.names()})

    return tr, tr.run(on_epoch), checks, tr_counts


def test_run_record_shape(dst_run):
    tr, res, _, _ = dst_run
    rec = res.record
    assert rec.status == "ok"
    assert len(rec.rows) == tr.config.epochs
    assert rec.to_csv().splitlines()[0] == ",".join(RECORD_COLUMNS)
    assert 0.0 <= rec.test_acc <= 1.0
    assert [s.meta["kind"] for s in res.snapshots][0] == "init"
    assert res.snapshots[-1].meta["kind"] == "final"
    assert len(res.updates) == tr.total_steps // tr.config.update_period
    assert [u.step for u in res.updates] == list(range(5, tr.total_steps + 1, 5))


def test_run_preserves_layer_densities(dst_run):
    tr, res, checks, init_counts = dst_run
    assert all(c == init_counts for c in checks)
    for snap in res.snapshots:
        assert {n: snap.mask.active_count(n) for n in snap.mask.names()} == init_counts
    assert all(r["density"] == global_density(res.snapshots[0].mask) for r in res.record.rows)


def test_run_itop_monotone(dst_run):
    _, res, _, _ = dst_run
    ratios = [r for _, r in res.record.itop]
    assert ratios[0] == pytest.approx(global_density(res.snapshots[0].mask))
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] > ratios[0]


def test_run_is_reproducible(tmp_path):
    cfg = small_config(criterion="snip", growth="gradient", epochs=2)
    a = write_run(run_experiment(cfg), tmp_path / "a")
    b = write_run(run_experiment(cfg), tmp_path / "b")
    for rel in ["record.csv", "summary.json", "config.txt", "itop.csv"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    snaps = sorted(p.name for p in (a / "snapshots").iterdir())
    assert snaps == sorted(p.name for p in (b / "snapshots").iterdir())
    for name in snaps:
        assert (a / "snapshots" / name).read_bytes() == (b / "snapshots" / name).read_bytes()


def test_static_equivalence_and_prefix():
    static = Trainer(small_config(update_period=None, epochs=2))
    never = Trainer(small_config(update_period=10**9, epochs=2))
    dst = Trainer(small_config(update_period=20, epochs=2))
    batches = list(static._batches())
    for tr in (never, dst):
        assert [np.array_equal(a[0], b[0]) for a, b in zip(batches, tr._batches())] == [True] * len(batches)
    for t, (x, y) in enumerate(batches, start=1):
        for tr in (static, never, dst):
            tr.train_step(x, y, 0.05)
        for k in static.net.params:
            np.testing.assert_array_equal(static.net.params[k], never.net.params[k])
        same = all(np.array_equal(static.net.params[k], dst.net.params[k]) for k in static.net.params)
        if t < 20:
            assert same
        if t == 20:
            assert not same
            assert static.mask != dst.mask


def test_full_density_static_is_dense():
    tr = Trainer(small_config(density=1.0, update_period=None, epochs=1))
    assert all(tr.mask[n].all() for n in tr.mask.names())
    res = tr.run()
    assert res.updates == []
    assert all(r["density"] == 1.0 for r in res.record.rows)


def test_global_scope_preserves_global_density():
    tr = Trainer(small_config(pruning_scope="global", criterion="magnitude", epochs=1))
    total = tr.mask.active_count()
    res = tr.run()
    assert res.updates
    assert all(s.mask.active_count() == total for s in res.snapshots)


def test_larger_update_batch_option():
    cfg = small_config(dst_update_batch_size=512, epochs=1, growth="gradient")
    a, b = Trainer(cfg), Trainer(cfg.with_updates(dst_update_batch_size=None))
    ra, rb = a.run(), b.run()
    assert ra.record.status == rb.record.status == "ok"
    assert [s.mask for s in ra.snapshots][1] != [s.mask for s in rb.snapshots][1]
    again = Trainer(cfg).run()
    assert all(x.mask == y.mask for x, y in zip(ra.snapshots, again.snapshots))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_divergence_is_recorded():
    tr = Trainer(small_config(epochs=2))
    w = tr.net.params["0.weight"]
    w[tr.mask["0.weight"]] = 1e300  # logits overflow to inf on the first forward pass
    res = tr.run()
    assert res.record.status.startswith("diverged")
    assert res.snapshots[-1].meta["kind"] == "final"


def test_first_update_state_matches_training_prefix():
    cfg = small_config(update_period=7)
    net, mask, grads, rho = Trainer(cfg).first_update_state()
    tr = Trainer(cfg)
    batches = list(tr._batches())
    for x, y in batches[:7]:
        tr.t += 1
        tr._sgd_and_grads(x, y, 0.05, False)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], tr.net.params[k])
    assert mask == tr.mask
    assert 0 < rho <= 0.5
    with pytest.raises(ValueError):
        Trainer(small_config(update_period=None)).first_update_state()
