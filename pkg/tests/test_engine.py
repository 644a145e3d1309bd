import copy
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from rlt2qap import kernels as K
from rlt2qap.engine import (AscentConfig, AscentState, UnsupportedSize,
                            ascent_update, d_mod_count, feasibility_check,
                            init_coefficients, layout, redistribute_slack, restrict_store,
                            run_ascent, sa_perturb, stage_x, stage_y, stage_z,
                            stage_z_second_phase, store_objective, subproblem_store)
from rlt2qap.instance import QapInstance, evaluate_objective, generate_instance, load_fixture
from conftest import all_perms, brute_lap, brute_qap


def cfg_(**kw):
    kw.setdefault("check_feasibility", False)
    return AscentConfig(**kw)


def one_iteration(store, state, cfg, first):
    if not first:
        ascent_update(store, state, cfg)
    stage_z(store, state, cfg, warm=not first)
    if cfg.two_phase and not first:
        stage_z_second_phase(store, state, cfg)
    stage_y(store, state, cfg, balance=not first)
    stage_x(store, state, cfg)
    if cfg.fast:
        state.pi_x, state.pi_y = store.b_mod, store.c_mod


def gl_bound(inst):
    """Gilmore-Lawler bound computed directly with scipy."""
    n = inst.n
    f, d = inst.flow.astype(float), inst.dist.astype(float)
    lcost = inst.linear.astype(float) + np.outer(np.diag(f), np.diag(d))
    for i in range(n):
        for p in range(n):
            js = [j for j in range(n) if j != i]
            qs = [q for q in range(n) if q != p]
            c = np.outer(f[i, js], d[p, qs])
            r, cc = linear_sum_assignment(c)
            lcost[i, p] += c[r, cc].sum()
    r, cc = linear_sum_assignment(lcost)
    return lcost[r, cc].sum()


# ---- coefficient store --------------------------------------------------

def test_init_spot_check_nug20():
    inst, _, _ = load_fixture("nug20")
    store = init_coefficients(inst)
    rng = np.random.default_rng(0)
    for _ in range(100):
        i, j, p, q = rng.choice(20, 2, replace=False).tolist() + rng.choice(20, 2, replace=False).tolist()
        assert store.c_mod[i, j, p, q] == inst.flow[i, j] * inst.dist[p, q]
    assert not store.d_mod.any() and store.d_mod.shape == (72200, 18, 18)
    tile = store.c_tile(3, 5)
    assert tile.shape == (19, 19) and tile[0, 0] == inst.flow[3, 0] * inst.dist[5, 0]


def test_d_mod_count():
    assert d_mod_count(12) == 871_200
    assert init_coefficients(generate_instance(12, 0)).d_mod.size == 871_200
    for n in (3, 5, 7):
        assert init_coefficients(generate_instance(n, 0)).d_mod.size == d_mod_count(n)


def test_small_n_unsupported():
    with pytest.raises(UnsupportedSize):
        init_coefficients(generate_instance(2, 0))


def test_zero_flow_gives_linear_lap():
    lin = np.random.default_rng(1).integers(0, 9, (5, 5))
    inst = QapInstance(5, np.zeros((5, 5)), generate_instance(5, 0).dist, linear=lin)
    store = init_coefficients(inst)
    assert not store.c_mod.any()
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=1))
    assert rep.final_bound == brute_lap(lin.astype(float))


# ---- stages ---------------------------------------------------------------

def test_first_z_stage_is_zero():
    inst = generate_instance(6, 1)
    cfg = cfg_(variant="S1")
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    c0 = store.c_mod.copy()
    stage_z(store, state, cfg)
    assert not state.theta.any() and np.array_equal(store.c_mod, c0)


def test_theta_grows_after_redistribution():
    # incremental form: Z-LAPs start from reduced (all-zero-value) tiles
    inst = generate_instance(6, 4)
    cfg = cfg_(variant="F1")
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    one_iteration(store, state, cfg, True)
    before = state.theta.sum()
    ascent_update(store, state, cfg)
    stage_z(store, state, cfg, warm=True)
    assert state.theta.sum() > before


def test_y_stage_matches_enumeration():
    inst = generate_instance(6, 2)
    cfg = cfg_(variant="S1")
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    for k in range(3):
        one_iteration(store, state, cfg, k == 0)
    ycost = store.c_mod + state.theta4()
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, p = rng.integers(0, 6, 2)
        js = [j for j in range(6) if j != i]
        qs = [q for q in range(6) if q != p]
        tile = ycost[i][np.ix_(js, [p], qs)][:, 0, :]
        assert state.delta[i, p] == pytest.approx(brute_lap(tile), abs=1e-9)


@pytest.mark.parametrize("name", ["nug12"])
def test_first_iteration_is_gilmore_lawler(name):
    inst, _, _ = load_fixture(name)
    gl = gl_bound(inst)
    for v in ("F1", "S2"):
        rep, _, _ = run_ascent(inst, cfg_(variant=v, iter_limit=1))
        assert rep.final_bound == pytest.approx(gl, abs=1e-7)


def test_zero_instance_stays_zero():
    inst = QapInstance(5, np.zeros((5, 5)), np.zeros((5, 5)))
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=5))
    assert all(r.bound == 0 for r in rep.records)
    rep, _, _ = run_ascent(inst, AscentConfig(iter_limit=5))
    assert rep.termination == "feasible-found" and len(rep.records) == 1


def test_fixed_point_when_everything_is_tight():
    inst = QapInstance(4, np.zeros((4, 4)), np.zeros((4, 4)))
    cfg = cfg_(variant="S1")
    store = init_coefficients(inst)
    state = AscentState.fresh(4, cfg)
    one_iteration(store, state, cfg, True)
    snap = store.copy()
    ascent_update(store, state, cfg)
    assert np.array_equal(store.d_mod, snap.d_mod) and np.array_equal(store.c_mod, snap.c_mod)


# ---- rule arithmetic ------------------------------------------------------

def _family(n, a, b, c, la, lb, lc):
    return [(K.tile_id(a, b, la, lb, n), c - 2, K.local(lc, la, lb)),
            (K.tile_id(a, c, la, lc, n), b - 1, K.local(lb, la, lc)),
            (K.tile_id(b, c, lb, lc, n), a, K.local(la, lb, lc))]


def test_type1_example():
    # slack 6 with kappa 2/3 and two upper partners at 1/2 each: -4, +2, +2
    n = 3
    L = layout(n)
    D = np.zeros((L.tiles, 1, 1))
    zeros = np.zeros((L.tiles, 1))
    fam = _family(n, 0, 1, 2, 2, 0, 1)
    D[fam[0]] = 6.0
    K.family_update(D, zeros, zeros, np.zeros(L.tiles), n, 2 / 3, 0.5, True, L.pa, L.pb, 0, L.pairs)
    assert [D[m] for m in fam] == pytest.approx([2.0, 2.0, 2.0])
    assert D.sum() == pytest.approx(6.0)


@pytest.mark.parametrize("slow", [True, False])
def test_family_mass_conservation(slow):
    n = 5
    L = layout(n)
    rng = np.random.default_rng(3)
    D = rng.random((L.tiles, 3, 3)) * 10
    ZU = rng.random((L.tiles, 3))
    ZV = rng.random((L.tiles, 3))
    s = rng.random(L.tiles) * 3
    before = D.copy()
    K.family_update(D, ZU, ZV, s, n, 2 / 3, 0.5, slow, L.pa, L.pb, 0, L.pairs)
    for a, b, c in itertools.combinations(range(n), 3):
        for la, lb, lc in itertools.permutations(range(n), 3):
            fam = _family(n, a, b, c, la, lb, lc)
            change = sum(D[m] - before[m] for m in fam)
            # slow mode moves mass inside the family; fast mode adds the y shares
            expect = 0.0 if slow else sum(s[m[0]] / (n - 2) for m in fam)
            assert change == pytest.approx(expect, abs=1e-9)


def test_second_phase_rule_examples():
    assert not redistribute_slack([0, 0, 0, 0, 0, 0]).any()
    assert redistribute_slack([5, 0, 0, 0, 0, 0]).tolist() == [-5, 1, 1, 1, 1, 1]
    assert not redistribute_slack([1, 2, 3]).any()  # no binding member
    assert redistribute_slack([2, 0, 4]).tolist() == [-2, 6, -4]


def test_second_phase_kernel_matches_rule():
    n = 5
    L = layout(n)
    rng = np.random.default_rng(8)
    D = np.where(rng.random((L.tiles, 3, 3)) < 0.5, 0.0, rng.random((L.tiles, 3, 3)))
    zero = np.zeros((L.tiles, 3))
    expect = D.copy()
    for a, b, c in itertools.combinations(range(n), 3):
        for la, lb, lc in itertools.permutations(range(n), 3):
            fam = _family(n, a, b, c, la, lb, lc)
            delta = redistribute_slack([D[m] for m in fam])
            for m, dv in zip(fam, delta):
                expect[m] += dv
    skipped = np.zeros(L.pairs, np.int64)
    K.second_phase(D, zero, zero, n, 1e-9, L.pa, L.pb, skipped, 0, L.pairs)
    assert np.allclose(D, expect, atol=1e-12)
    assert skipped.sum() > 0


@pytest.mark.parametrize("fast", [False, True])
def test_second_phase_never_lowers_z_values(fast):
    inst = generate_instance(7, 5)
    cfg = cfg_(variant="F2" if fast else "S2")
    store = init_coefficients(inst)
    state = AscentState.fresh(7, cfg)
    one_iteration(store, state, cfg, True)
    for _ in range(3):
        ascent_update(store, state, cfg)
        stage_z(store, state, cfg, warm=True)
        th1 = state.theta.copy()
        stage_z_second_phase(store, state, cfg)
        if fast:  # increments on top of reduced tiles
            assert state.theta.min() >= -1e-9
        else:
            assert (state.theta >= th1 - 1e-7).all()
        stage_y(store, state, cfg)
        stage_x(store, state, cfg)
        if fast:
            state.pi_x, state.pi_y = store.b_mod, store.c_mod


@pytest.mark.parametrize("variant", ["F1", "S1"])
def test_phase_two_step_dominates_phase_one_step(variant):
    # from the same store, one iteration with the second phase bounds at least as high
    inst = generate_instance(7, 3)
    base = cfg_(variant=variant)
    two = cfg_(variant=variant[0] + "2")
    store = init_coefficients(inst)
    state = AscentState.fresh(7, base)
    for k in range(4):
        one_iteration(store, state, base, k == 0)
        s1, st1 = store.copy(), copy.deepcopy(state)
        s2, st2 = store.copy(), copy.deepcopy(state)
        one_iteration(s1, st1, base, False)
        one_iteration(s2, st2, two, False)
        assert st2.bound >= st1.bound - 1e-7


# ---- whole runs -------------------------------------------------------------

SMALL = [(n, s) for n in (5, 6, 7, 8) for s in range(2)]


@pytest.mark.parametrize("n,seed", SMALL)
@pytest.mark.parametrize("variant", ["F1", "F2", "S1", "S2"])
def test_monotone_and_valid(n, seed, variant):
    inst = generate_instance(n, seed)
    opt, _ = brute_qap(inst)
    rep, store, _ = run_ascent(inst, cfg_(variant=variant, iter_limit=40))
    b = [r.bound for r in rep.records]
    assert all(y >= x - 1e-7 for x, y in zip(b, b[1:]))
    assert rep.final_bound <= opt + 1e-7
    rng = np.random.default_rng(n)
    for p in rng.permuted(np.tile(np.arange(n), (10, 1)), axis=1):
        assert store_objective(store, p) == pytest.approx(evaluate_objective(inst, p), abs=1e-7)


@pytest.mark.parametrize("variant", ["F1", "S1"])
def test_gap_to_bound_is_induced_slack(variant):
    # obj(perm) - bound = x + y + z slacks switched on by perm
    n = 6
    inst = generate_instance(n, 7)
    cfg = cfg_(variant=variant)
    store = init_coefficients(inst)
    state = AscentState.fresh(n, cfg)
    for k in range(6):
        one_iteration(store, state, cfg, k == 0)
    ar = np.arange(n)
    off = ~np.eye(n, dtype=bool)
    for p in all_perms(n)[::37]:
        zsum, _ = K.induced_z(store.d_mod, state.z_row, state.z_col, p, n)
        zslack = zsum - (state.z_row.sum(1) + state.z_col.sum(1))[
            [K.tile_id(a, b, p[a], p[b], n) for a in range(n) for b in range(a + 1, n)]].sum()
        ysl = state.pi_y[ar[:, None], ar[None, :], p[:, None], p[None, :]][off].sum()
        xsl = state.pi_x[ar, p].sum()
        assert evaluate_objective(inst, p) - state.bound == pytest.approx(xsl + ysl + zslack, abs=1e-7)


def test_worker_count_does_not_change_reports():
    inst = generate_instance(8, 1)
    outs = []
    for w in (1, 2, 4):
        rep, store, _ = run_ascent(inst, cfg_(variant="F2", iter_limit=15, workers=w))
        outs.append(([r.bound for r in rep.records], store.d_mod))
    for b, d in outs[1:]:
        assert b == outs[0][0] and np.array_equal(d, outs[0][1])


def test_feasibility_check():
    inst = generate_instance(6, 0)
    cfg = cfg_(variant="S1")
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    one_iteration(store, state, cfg, True)
    ok, perm = feasibility_check(state, store)
    p = state.x_assign
    ar = np.arange(6)
    _, wz = K.induced_z(store.d_mod, state.z_row, state.z_col, p, 6)
    ys = state.pi_y[ar[:, None], ar[None, :], p[:, None], p[None, :]].max()
    assert max(wz, ys) > 1e-7 and not ok and perm is None


def test_certificate_is_optimal():
    inst = generate_instance(7, 2)
    opt, _ = brute_qap(inst)
    rep, _, _ = run_ascent(inst, AscentConfig(variant="S1", iter_limit=300))
    assert rep.termination == "feasible-found"
    assert evaluate_objective(inst, rep.certificate) == opt
    assert rep.final_bound == pytest.approx(opt, abs=1e-6)


def test_report_serialisation():
    inst = generate_instance(5, 1)
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=7, upper_bound=1000))
    assert len(rep.records) <= 7 and rep.termination == "iteration-limit"
    d = json.loads(rep.to_json())
    assert [r["m"] for r in d["records"]] == list(range(1, 8))
    assert d["records"][0]["gap"] == pytest.approx((1000 - rep.records[0].best_bound) / 1000)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("m,bound,best,gap") and len(lines) == 8


def test_termination_reasons():
    inst, _, ub = load_fixture("nug12")
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=50, upper_bound=ub, min_gap=0.2))
    assert rep.termination == "gap-closed" and len(rep.records) == 1
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=50, fathom_value=500))
    assert rep.termination == "gap-closed" and math.ceil(rep.final_bound) >= 500
    rep, _, _ = run_ascent(inst, cfg_(iter_limit=400, early_stop_window=5, early_stop_delta=0.01))
    assert rep.termination == "early-stop" and len(rep.records) < 400


def test_warm_start_continues():
    inst = generate_instance(7, 4)
    cfg = cfg_(variant="S1", iter_limit=10)
    full, _, _ = run_ascent(inst, cfg_(variant="S1", iter_limit=20))
    rep, store, state = run_ascent(inst, cfg)
    rep2, _, _ = run_ascent(None, cfg, warm=(store, state))
    assert rep2.records[-1].bound == pytest.approx(full.records[-1].bound, abs=1e-9)
    with pytest.raises(ValueError):
        run_ascent(generate_instance(6, 0), cfg, warm=store)


def test_store_from_one_variant_warm_starts_another():
    inst = generate_instance(7, 6)
    rep, store, _ = run_ascent(inst, cfg_(variant="S1", iter_limit=10))
    rep2, _, _ = run_ascent(None, cfg_(variant="F1", iter_limit=5), warm=store)
    assert rep2.records[0].bound == pytest.approx(rep.records[-1].bound, abs=1e-7)


# ---- simulated annealing ----------------------------------------------------

def test_sa_deterministic_under_seed():
    inst = generate_instance(7, 1)
    runs = [run_ascent(inst, cfg_(sa_enabled=True, iter_limit=30, seed=s, upper_bound=900,
                                  sa_cool_period=5))[0] for s in (3, 3, 4)]
    b = [[r.bound for r in x.records] for x in runs]
    assert b[0] == b[1] and b[0] != b[2]


def test_sa_cold_limit_changes_nothing():
    inst = generate_instance(6, 1)
    cfg = cfg_(variant="F1", sa_enabled=True)
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    one_iteration(store, state, cfg, True)
    state.temperature = 1e-300
    snap = store.copy()
    assert not sa_perturb(store, state, cfg)
    assert np.array_equal(snap.b_mod, store.b_mod) and snap.offset == store.offset


@pytest.mark.parametrize("move", ["family", "x"])
@pytest.mark.parametrize("variant", ["F1", "S1"])
def test_sa_move_keeps_store_valid(move, variant):
    inst = generate_instance(6, 5)
    cfg = cfg_(variant=variant, sa_enabled=True, sa_move=move)
    store = init_coefficients(inst)
    state = AscentState.fresh(6, cfg)
    one_iteration(store, state, cfg, True)
    state.temperature = 1e12
    before = store.copy()
    pix = state.pi_x.copy()
    assert sa_perturb(store, state, cfg)
    if move == "family":
        assert not np.allclose(before.d_mod, store.d_mod)
    elif variant == "F1":
        assert store.offset < state.bound
    else:
        assert (state.pi_x > pix).all()
    for p in all_perms(6)[::53]:
        assert store_objective(store, p) == pytest.approx(evaluate_objective(inst, p), abs=1e-7)


# ---- restriction ------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(4, 7), st.integers(0, 1000), st.integers(0, 30), st.data())
def test_restriction_is_a_valid_reparametrisation(n, seed, iters, data):
    inst = generate_instance(n, seed)
    f = data.draw(st.integers(0, n - 1))
    l = data.draw(st.integers(0, n - 1))
    if iters:
        _, store, _ = run_ascent(inst, cfg_(variant=data.draw(st.sampled_from(["F1", "S2"])),
                                            iter_limit=iters))
    else:
        store = init_coefficients(inst)
    child = restrict_store(store, f, l)
    cold = subproblem_store(inst, [(f, l)])
    for pp in all_perms(n - 1)[:: max(1, len(all_perms(n - 1)) // 30)]:
        full = [int(x) + (x >= l) for x in pp]
        full.insert(f, l)
        v = evaluate_objective(inst, full)
        assert store_objective(child, pp) == pytest.approx(v, abs=1e-7)
        assert store_objective(cold, pp) == pytest.approx(v, abs=1e-9)


def test_subproblem_with_several_fixings():
    inst = generate_instance(7, 9)
    fixed = [(4, 1), (0, 6)]
    store = subproblem_store(inst, fixed)
    assert store.n == 5
    for pp in all_perms(5)[::11]:
        free_l = [0, 2, 3, 4, 5]
        full = [0] * 7
        for i, p in fixed:
            full[i] = p
        for i, k in zip([1, 2, 3, 5, 6], pp):
            full[i] = free_l[k]
        assert store_objective(store, pp) == evaluate_objective(inst, full)
