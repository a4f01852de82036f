import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b2opt import ad
from b2opt import model as M
from b2opt import objectives as O
from b2opt.ad import Parameter
from b2opt.training import batch_loss
from oracles import naive_fm, naive_normalize, naive_rssm, naive_sac, naive_select, scalar_objective


def _random_block(n, d, rng, dk=3, h=None):
    cfg = M.ModelConfig(n=n, d=d, t=1, d_k=dk, hidden=h)
    blk = M.init_model(cfg, rng).blocks[0]
    # move well away from identity so every term matters
    for p in blk.parameters():
        p.value = rng.normal(size=p.shape)
    return blk


def _sorted_pop(inst, n, rng, batch=()):
    X = O.init_population(inst.bounds, n, rng, batch)
    return M.evaluate_population(X, inst, None)


def test_sort_population_is_stable():
    pop = M.Population(np.array([[1.0], [2.0], [3.0]]), np.array([3.0, 1.0, 2.0]))
    out, perm = M.sort_population(pop)
    assert np.array_equal(out.fitness, [1, 2, 3]) and np.array_equal(out.X[:, 0], [2, 3, 1])
    tie = M.Population(np.array([[1.0], [2.0]]), np.array([5.0, 5.0]))
    out, perm = M.sort_population(tie)
    assert np.array_equal(perm, [0, 1])


def test_sort_rejects_nan_with_row():
    pop = M.Population(np.zeros((3, 2)), np.array([1.0, np.nan, 0.0]))
    with pytest.raises(M.PopulationError, match="row"):
        M.sort_population(pop)


def test_normalize_examples():
    assert np.array_equal(M.normalize_fitness(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
    assert np.array_equal(M.normalize_fitness(np.array([3.0, 3.0, 3.0])), [0, 0, 0])
    with pytest.raises(M.PopulationError):
        M.normalize_fitness(np.array([1.0]))


def test_sm_select_examples():
    X = np.array([[0.0], [1.0]])
    Xp = np.array([[5.0], [6.0]])
    out, mask = M.sm_select(X, np.array([1.0, 3.0]), Xp, np.array([2.0, 3.0]))
    assert np.array_equal(out, [[0.0], [6.0]])  # tie takes the candidate
    assert np.array_equal(mask, [1, 0])
    with pytest.raises(ad.DimensionError):
        M.sm_select(X, np.zeros(2), np.zeros((3, 1)), np.zeros(3))


def test_sac_requires_sorted_population():
    blk = _random_block(4, 2, np.random.default_rng(0))
    with pytest.raises(M.PopulationError):
        M.sac_forward(M.Population(np.zeros((4, 2)), np.arange(4.0)), blk.sac)


def test_oracles_agree_on_random_instances():
    rng = np.random.default_rng(21)
    for trial in range(100):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        fid = O.ALL_FUNCTIONS[trial % 9]
        inst = O.sample_instance(fid, d, rng)
        blk = _random_block(n, d, rng, dk=int(rng.integers(1, 4)), h=int(rng.integers(1, 5)))
        pop = _sorted_pop(inst, n, rng)
        X, fit = pop.values()
        s, f, r = blk.sac, blk.fm, blk.rssm

        Xc = M.sac_forward(pop, s)
        want = naive_sac(X.tolist(), fit.tolist(), s.A.value.tolist(), s.WQ.value.tolist(), s.WK.value.tolist(),
                         s.W1c.value.tolist(), s.W2c.value.tolist())
        assert np.allclose(Xc, want, rtol=0, atol=1e-12)

        Xm = M.fm_forward(Xc, f)
        want = naive_fm(Xc.tolist(), f.W1F.value.tolist(), f.b1.value.tolist(), f.W2F.value.tolist(), f.b2.value.tolist())
        assert np.allclose(Xm, want, rtol=0, atol=1e-12)

        out = M.rssm_forward(pop, Xc, Xm, r, inst, None)
        obj = lambda x: scalar_objective(fid, x, inst.shift, inst.weights)
        rows, fits = naive_rssm(X.tolist(), fit.tolist(), Xc.tolist(), Xm.tolist(), r.W1s.value.tolist(),
                                r.W2s.value.tolist(), r.W3s.value.tolist(), inst.bounds.lower, inst.bounds.upper, obj)
        assert np.allclose(out.X, rows, rtol=0, atol=1e-12)
        assert np.allclose(out.fitness, fits, rtol=0, atol=1e-12)

        Y = rng.normal(size=(n, d))
        fy = rng.normal(size=n)
        got, mask = M.sm_select(X, fit, Y, fy)
        rows, nmask = naive_select(X.tolist(), fit.tolist(), Y.tolist(), fy.tolist())
        assert np.array_equal(got, rows) and np.array_equal(mask, nmask)
        assert np.array_equal(M.normalize_fitness(fit), naive_normalize(fit.tolist()))


def test_identity_block_is_bit_identical():
    rng = np.random.default_rng(3)
    for fid in O.TEST_FUNCTIONS:
        inst = O.sample_test_instance(fid, 6, rng)
        pop = _sorted_pop(inst, 9, rng)
        out = M.ob_forward(pop, M.identity_block(9, 6), inst, None)
        assert np.array_equal(out.X, pop.X) and np.array_equal(out.fitness, pop.fitness)


def test_elitism_and_budget():
    rng = np.random.default_rng(4)
    for trial in range(200):
        fid = O.ALL_FUNCTIONS[trial % 9]
        inst = O.sample_instance(fid, 4, rng)
        cfg = M.ModelConfig(n=6, d=4, t=2, weight_sharing=bool(trial % 2), d_k=2)
        mdl = M.init_model(cfg, rng)
        for p in mdl.parameters():
            p.value = p.value + rng.normal(size=p.shape)
        c = O.EvalCounter()
        pop = M.evaluate_population(O.init_population(inst.bounds, 6, rng), inst, c)
        rec, out = M.b2opt_run(mdl, pop, inst, c)
        assert all(b <= a for a, b in zip(rec.best, rec.best[1:]))
        assert c.count == (cfg.t + 1) * cfg.n
        assert np.all((out.X >= inst.bounds.lower) & (out.X <= inst.bounds.upper))


def test_ablation_variants():
    assert M.Ablation.variant("full").active() == []
    assert M.Ablation.variant("not_fm").active() == ["disable_fm"]
    with pytest.raises(M.ConfigError):
        M.Ablation.variant("not_everything")
    rng = np.random.default_rng(5)
    inst = O.sample_test_instance("F4", 3, rng)
    pop = _sorted_pop(inst, 5, rng)
    blk = _random_block(5, 3, rng)
    for name in ("not_sac", "not_fm", "not_rc", "not_rssm"):
        c = O.EvalCounter()
        out = M.ob_forward(pop, blk, inst, c, M.Ablation.variant(name))
        assert c.count == 5 and out.sorted
    # without the residual term the identity block proposes the zero population
    out = M.ob_forward(pop, M.identity_block(5, 3), inst, None, M.Ablation.variant("not_rc"))
    zeros_f = O.evaluate(inst, np.zeros((1, 3)))[0]
    assert np.array_equal(out.fitness, np.sort(np.minimum(pop.fitness, zeros_f)))


def test_block_equivariant_under_population_relabel():
    rng = np.random.default_rng(6)
    inst = O.sample_test_instance("F7", 3, rng)
    X = O.init_population(inst.bounds, 6, rng)
    blk = _random_block(6, 3, rng)
    a = M.ob_forward(M.evaluate_population(X, inst, None), blk, inst, None)
    b = M.ob_forward(M.evaluate_population(X[rng.permutation(6)], inst, None), blk, inst, None)
    assert np.array_equal(a.X, b.X)


def test_batched_matches_unbatched():
    rng = np.random.default_rng(7)
    insts = [O.sample_training_instance("F2", 3, rng) for _ in range(4)]
    X = O.init_population(insts[0].bounds, 5, rng, (4,))
    mdl = M.init_model(M.ModelConfig(n=5, d=3, t=2), rng)
    batch = M.run_blocks(mdl, M.evaluate_population(X, O.stack_instances(insts), None), O.stack_instances(insts), None)
    for k in range(4):
        one = M.run_blocks(mdl, M.evaluate_population(X[k], insts[k], None), insts[k], None)
        assert np.allclose(batch.X[k], one.X, rtol=0, atol=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    inst = O.sample_training_instance("F1", 3, rng)
    mdl = M.init_model(M.ModelConfig(n=4, d=3, t=1, d_k=2), rng)
    for p in mdl.parameters():
        p.value = p.value + 0.1 * rng.normal(size=p.shape)
    X0 = O.init_population(inst.bounds, 4, rng)
    def build(tape):
        return batch_loss(mdl, X0[None], O.stack_instances([inst]), None, tape)[0]

    assert ad.grad_check(build, mdl.parameters(), 1e-6) <= 1e-4


def test_effective_attention_reproduces_crossover():
    rng = np.random.default_rng(9)
    inst = O.sample_test_instance("F8", 4, rng)
    pop = _sorted_pop(inst, 7, rng)
    blk = _random_block(7, 4, rng)
    M_ = M.effective_attention(pop, blk.sac)
    assert M_.shape == (7, 7)
    assert np.allclose(M_ @ pop.X, M.sac_forward(pop, blk.sac), rtol=0, atol=1e-12)


def test_run_rejects_incompatible_shapes():
    rng = np.random.default_rng(10)
    mdl = M.init_model(M.ModelConfig(n=5, d=3), rng)
    inst = O.sample_test_instance("F4", 4, rng)
    pop = _sorted_pop(inst, 5, rng)
    with pytest.raises(M.ConfigError, match="d=3.*d=4"):
        M.b2opt_run(mdl, pop, inst, O.EvalCounter())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    mdl = M.init_model(M.ModelConfig(n=5, d=3, t=3, weight_sharing=False, ablation=M.Ablation(disable_fm=True)), rng)
    path = tmp_path / "m.ckpt"
    M.save_model(mdl, path)
    back = M.load_model(path)
    assert back.ablation == mdl.ablation and back.t == 3 and not back.weight_sharing
    for a, b in zip(mdl.parameters(), back.parameters()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    M.save_model(back, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert path.read_bytes().startswith(M.MAGIC)


def test_checkpoint_errors(tmp_path):
    rng = np.random.default_rng(12)
    mdl = M.init_model(M.ModelConfig(n=5, d=3), rng)
    path = tmp_path / "m.ckpt"
    M.save_model(mdl, path)
    blob = path.read_bytes()
    (tmp_path / "short").write_bytes(blob[:-9])
    with pytest.raises(M.CheckpointError, match="bytes"):
        M.load_model(tmp_path / "short")
    flipped = bytearray(blob)
    flipped[-20] ^= 1
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(M.CheckpointError, match="checksum"):
        M.load_model(tmp_path / "flip")
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(M.CheckpointError, match="magic"):
        M.load_model(tmp_path / "junk")
    with pytest.raises(M.CheckpointError):
        M.load_model(tmp_path / "missing")


@given(st.integers(2, 8), st.integers(2, 4), st.integers(0, 2**32 - 1), st.sampled_from(O.ALL_FUNCTIONS))
@settings(max_examples=60, deadline=None)
def test_block_output_sorted_in_bounds_and_elitist(n, d, seed, fid):
    rng = np.random.default_rng(seed)
    inst = O.sample_instance(fid, d, rng)
    pop = _sorted_pop(inst, n, rng)
    blk = _random_block(n, d, rng)
    out = M.ob_forward(pop, blk, inst, None)
    f = out.fitness
    assert np.all(np.diff(f) >= 0)
    assert f[0] <= pop.fitness[0]
    assert np.all((out.X >= inst.bounds.lower) & (out.X <= inst.bounds.upper))
    assert np.array_equal(O.evaluate(inst, out.X), f)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_pairwise_selection_dominates_input(seed):
    rng = np.random.default_rng(seed)
    fx, fy = rng.normal(size=6), rng.normal(size=6)
    X, Y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    _, mask = M.sm_select(X, fx, Y, fy)
    chosen = np.where(mask == 1, fx, fy)
    assert np.all(chosen <= fx) and np.all(chosen <= fy)


def test_deepcopy_keeps_model_independent():
    mdl = M.init_model(M.ModelConfig(n=4, d=2), np.random.default_rng(0))
    twin = copy.deepcopy(mdl)
    mdl.parameters()[0].value += 1.0
    assert not np.array_equal(mdl.parameters()[0].value, twin.parameters()[0].value)
    assert isinstance(twin.parameters()[0], Parameter)


def test_sac_and_fm_trivial_settings():
    rng = np.random.default_rng(13)
    inst = O.sample_test_instance("F5", 3, rng)
    pop = _sorted_pop(inst, 4, rng)
    blk = M.identity_block(4, 3)
    assert np.array_equal(M.sac_forward(pop, blk.sac), pop.X)
    blk.sac.W1c.value = np.zeros((4, 1))
    assert np.array_equal(M.sac_forward(pop, blk.sac), np.zeros((4, 3)))

    X = np.abs(rng.normal(size=(5, 3)))
    fm = M.identity_block(5, 3, h=3).fm
    fm.W2F.value = rng.normal(size=(3, 3))
    assert np.array_equal(M.fm_forward(X, fm), np.zeros((5, 3)))
    fm.W1F.value, fm.W2F.value = np.eye(3), np.eye(3)
    assert np.array_equal(M.fm_forward(X, fm), X)


def test_zero_block_run_costs_one_population():
    rng = np.random.default_rng(14)
    mdl = M.init_model(M.ModelConfig(n=6, d=3, t=0), rng)
    inst = O.sample_test_instance("F4", 3, rng)
    c = O.EvalCounter()
    pop = M.evaluate_population(O.init_population(inst.bounds, 6, rng), inst, c)
    rec, out = M.b2opt_run(mdl, pop, inst, c)
    assert c.count == 6 and out is pop and rec.steps == 0


def test_init_is_deterministic():
    cfg = M.ModelConfig(n=5, d=3, t=2, weight_sharing=False)
    a = M.init_model(cfg, np.random.default_rng(3))
    b = M.init_model(cfg, np.random.default_rng(3))
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
    assert len(a.blocks) == 2 and len(M.init_model(M.ModelConfig(n=5, d=3, t=4), np.random.default_rng(0)).blocks) == 1
