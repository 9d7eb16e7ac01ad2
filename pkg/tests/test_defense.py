"""Attack-side tests: budget algebra, gradient correctness, PGD updates,
the alternating defense loop, and the frequency budget mask."""

import numpy as np
import pytest
import torch

from purifybench.dataset import generate_toy_dataset
from purifybench.defense import (
    AsplConfig,
    AttackFailedError,
    GreedyTopKSelector,
    PerturbationBudget,
    ProtectedSet,
    UniformRandomSelector,
    aspl_defend,
    cond_loss,
    cond_loss_grad,
    make_hf_mask,
    pgd_attack,
    pgd_step,
    project_delta,
)
from purifybench.diffusion import (
    ModelConfig,
    TrainConfig,
    make_schedule,
    new_model,
    train,
)
from purifybench.metrics import hf_energy

TOKEN = "<id-0>"
SHAPE = (16, 16, 3)
CFG = ModelConfig(hidden=12, blocks=2, downsample=True, emb_dim=16)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(40, 1e-4, 0.05)


@pytest.fixture(scope="module")
def faces():
    return generate_toy_dataset(4, 8, seed=23, size=16).by_identity()


@pytest.fixture(scope="module")
def trained_model(schedule, faces):
    model = new_model(SHAPE, [TOKEN], CFG, seed=5)
    data = [(img, TOKEN) for img in faces[0][:6]]
    return train(model, data, TrainConfig(steps=250, seed=5), schedule)


# ------------------------------------------------------------------- budget


def test_budget_defaults_match_reference_values():
    b = PerturbationBudget()
    assert b.eta == 0.05
    assert b.alpha_step == 0.005


def test_budget_validation():
    with pytest.raises(ValueError):
        PerturbationBudget(eta=1.5)
    with pytest.raises(ValueError):
        PerturbationBudget(eta=0.01, alpha_step=0.02)
    with pytest.raises(ValueError):
        PerturbationBudget(alpha_step=0.0)
    with pytest.raises(ValueError):
        PerturbationBudget(pgd_steps=-1)
    with pytest.raises(ValueError):
        PerturbationBudget(init_mode="random")
    with pytest.raises(ValueError):
        PerturbationBudget(freq_mask=np.full((4, 4), 2.0))
    with pytest.raises(ValueError):
        PerturbationBudget(freq_mask=np.full((4, 4), -0.1))
    with pytest.raises(ValueError):
        PerturbationBudget(freq_mask=np.zeros((4, 4, 3)))
    PerturbationBudget(pgd_steps=0)  # zero attack steps are allowed


def test_pixel_cap_with_mask():
    mask = np.zeros((4, 4))
    mask[1, 2] = 1.0
    b = PerturbationBudget(eta=0.1, alpha_step=0.01, freq_mask=mask)
    cap = b.pixel_cap((4, 4, 3))
    assert cap[1, 2, 0] == pytest.approx(0.1)
    assert cap[0, 0, 1] == 0.0


# ---------------------------------------------------------------- cond_loss


def test_cond_loss_deterministic(trained_model, schedule, faces):
    x = faces[0][0]
    a = cond_loss(trained_model, x, TOKEN, [7], schedule, seed=3)
    b = cond_loss(trained_model, x, TOKEN, [7], schedule, seed=3)
    assert a == b
    c = cond_loss(trained_model, x, TOKEN, [7], schedule, seed=4)
    assert a != c


def test_cond_loss_mean_matches_single_timestep_calls(trained_model, schedule, faces):
    x = faces[0][1]
    both = cond_loss(trained_model, x, TOKEN, [5, 20], schedule, seed=9)
    t5 = cond_loss(trained_model, x, TOKEN, [5], schedule, seed=9)
    t20 = cond_loss(trained_model, x, TOKEN, [20], schedule, seed=9)
    assert both == (t5 + t20) / 2


def test_cond_loss_noise_above_indistribution(trained_model, schedule, faces):
    gen = torch.Generator().manual_seed(2)
    noise_img = torch.rand(SHAPE, generator=gen, dtype=torch.float64).numpy()
    ts = [5, 10, 20, 30]
    in_dist = cond_loss(trained_model, faces[0][2], TOKEN, ts, schedule, seed=1)
    off_dist = cond_loss(trained_model, noise_img, TOKEN, ts, schedule, seed=1)
    assert off_dist >= in_dist


def test_cond_loss_validates_timesteps(trained_model, schedule, faces):
    with pytest.raises(ValueError):
        cond_loss(trained_model, faces[0][0], TOKEN, [], schedule, 0)
    with pytest.raises(ValueError):
        cond_loss(trained_model, faces[0][0], TOKEN, [0], schedule, 0)
    with pytest.raises(ValueError):
        cond_loss(trained_model, faces[0][0], TOKEN, [41], schedule, 0)


def test_gradient_matches_finite_differences(schedule):
    # Small flat model in float64 so central differences are trustworthy.
    cfg = ModelConfig(hidden=8, blocks=1, downsample=False, emb_dim=8)
    model = new_model((4, 4, 3), [TOKEN], cfg, seed=7, dtype=torch.float64)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.8, size=(4, 4, 3))
    ts = [5, 15]
    _, grad = cond_loss_grad(model, x, TOKEN, ts, schedule, seed=2)
    h = 1e-3
    agree = 0
    total = x.size
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (
            cond_loss(model, xp, TOKEN, ts, schedule, seed=2)
            - cond_loss(model, xm, TOKEN, ts, schedule, seed=2)
        ) / (2 * h)
        if np.sign(fd) == np.sign(grad[idx]):
            agree += 1
        it.iternext()
    assert agree / total >= 0.99


# ---------------------------------------------------------- pgd arithmetic


def test_pgd_step_scalar_update():
    x = np.full((1, 1, 1), 0.5)
    budget = PerturbationBudget(eta=0.05, alpha_step=0.005)
    delta = pgd_step(np.zeros_like(x), np.ones_like(x), x, budget)
    assert (x + delta).item() == pytest.approx(0.505)


def test_pgd_step_boundary_projection():
    x = np.full((1, 1, 1), 0.5)
    budget = PerturbationBudget(eta=0.05, alpha_step=0.005)
    at_boundary = np.full_like(x, 0.05)
    delta = pgd_step(at_boundary, np.ones_like(x), x, budget)
    assert (x + delta).item() == pytest.approx(0.55)


def test_project_delta_respects_pixel_range():
    x = np.full((2, 2, 1), 0.99)
    budget = PerturbationBudget(eta=0.05, alpha_step=0.005)
    delta = project_delta(np.full_like(x, 0.05), x, budget)
    assert (x + delta).max() <= 1.0
    assert delta.max() == pytest.approx(0.01)


def test_project_delta_masked_pixels_stay_zero():
    x = np.full((2, 2, 3), 0.5)
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    budget = PerturbationBudget(eta=0.1, alpha_step=0.01, freq_mask=mask)
    delta = project_delta(np.full_like(x, 0.1), x, budget)
    assert delta[0, 1].max() == 0.0
    assert delta[1, 0].max() == 0.0
    assert delta[0, 0].min() == pytest.approx(0.1)


# --------------------------------------------------------------- pgd_attack


def test_pgd_attack_zero_eta_gives_zero_delta(trained_model, schedule, faces):
    budget = PerturbationBudget(eta=0.0, alpha_step=0.005, pgd_steps=3)
    delta = pgd_attack(
        trained_model, faces[0][0], TOKEN, budget, UniformRandomSelector(), schedule, 0
    )
    np.testing.assert_array_equal(delta, 0.0)


def test_pgd_attack_zero_steps_zero_init(trained_model, schedule, faces):
    budget = PerturbationBudget(pgd_steps=0, init_mode="zero")
    delta = pgd_attack(
        trained_model, faces[0][0], TOKEN, budget, UniformRandomSelector(), schedule, 0
    )
    np.testing.assert_array_equal(delta, 0.0)


@pytest.mark.parametrize("init_mode", ["zero", "uniform-in-ball", "gaussian-clipped"])
def test_pgd_attack_budget_soundness(trained_model, schedule, faces, init_mode):
    budget = PerturbationBudget(pgd_steps=4, init_mode=init_mode)
    x = faces[0][3]
    delta = pgd_attack(
        trained_model, x, TOKEN, budget, UniformRandomSelector(), schedule, 11
    )
    assert np.abs(delta).max() <= budget.eta + 1e-6
    assert (x + delta).min() >= 0.0 and (x + delta).max() <= 1.0


def test_pgd_attack_deterministic(trained_model, schedule, faces):
    budget = PerturbationBudget(pgd_steps=2)
    args = (trained_model, faces[0][0], TOKEN, budget, UniformRandomSelector(), schedule, 7)
    np.testing.assert_array_equal(pgd_attack(*args), pgd_attack(*args))


def test_pgd_attack_ascends_objective(trained_model, schedule, faces):
    x = faces[0][4]
    budget = PerturbationBudget(eta=0.05, alpha_step=0.01, pgd_steps=8, init_mode="zero")
    selector = GreedyTopKSelector(k=3)
    delta = pgd_attack(trained_model, x, TOKEN, budget, selector, schedule, 3)
    ts = [5, 10, 20, 30]
    before = cond_loss(trained_model, x, TOKEN, ts, schedule, seed=0)
    after = cond_loss(trained_model, np.clip(x + delta, 0, 1), TOKEN, ts, schedule, seed=0)
    assert after > before


def test_pgd_attack_reports_nonfinite_gradient(schedule, faces):
    broken = new_model(SHAPE, [TOKEN], CFG, seed=5)
    with torch.no_grad():
        for p in broken.net.parameters():
            p.fill_(float("nan"))
    budget = PerturbationBudget(pgd_steps=1)
    with pytest.raises(AttackFailedError, match="step 0"):
        pgd_attack(
            broken, faces[0][0], TOKEN, budget, UniformRandomSelector(), schedule, 0
        )


def test_selector_validation():
    with pytest.raises(ValueError):
        UniformRandomSelector(count=0)
    with pytest.raises(ValueError):
        GreedyTopKSelector(k=0)


def test_greedy_selector_returns_k_distinct(trained_model, schedule, faces):
    sel = GreedyTopKSelector(k=4)
    ts = sel.pick(trained_model, faces[0][0], TOKEN, schedule, seed=1, step=0)
    assert len(ts) == 4
    assert len(set(ts)) == 4
    assert all(1 <= t <= schedule.T_max for t in ts)


# ------------------------------------------------------------ protected set


def test_protected_set_validation(faces):
    x = faces[0][0]
    budget = PerturbationBudget()
    good = np.full_like(x, 0.04)
    good = np.clip(x + good, 0, 1) - x
    ProtectedSet([x], [good], TOKEN, budget)
    with pytest.raises(ValueError):
        ProtectedSet([x], [np.full_like(x, 0.2)], TOKEN, budget)  # over budget
    with pytest.raises(ValueError):
        ProtectedSet([x], [], TOKEN, budget)  # pairing mismatch
    with pytest.raises(ValueError):
        ProtectedSet([], [], TOKEN, budget)  # empty


def test_protected_set_images(faces):
    x = faces[0][0]
    delta = np.clip(x + 0.03, 0, 1) - x
    pset = ProtectedSet([x], [delta], TOKEN, PerturbationBudget())
    np.testing.assert_allclose(pset.images()[0], np.clip(x + delta, 0, 1))
    assert pset.max_deltas()[0] <= 0.05 + 1e-6


# -------------------------------------------------------------------- aspl


def test_aspl_config_validation(faces):
    ref = faces[1][:2]
    AsplConfig(clean_ref_set=ref)
    with pytest.raises(ValueError):
        AsplConfig(aspl_iters=0, clean_ref_set=ref)
    with pytest.raises(ValueError):
        AsplConfig(clean_ref_set=[])
    with pytest.raises(ValueError):
        AsplConfig(clean_ref_set=ref, timestep_selector="bogus")
    with pytest.raises(ValueError):
        AsplConfig(clean_ref_set=ref, topk=0)


def test_aspl_defaults(faces):
    cfg = AsplConfig(clean_ref_set=faces[1][:2])
    assert cfg.aspl_iters == 50
    assert cfg.timestep_selector == "uniform-random"


@pytest.fixture(scope="module")
def small_aspl(trained_model, schedule, faces):
    cfg = AsplConfig(
        aspl_iters=3,
        surrogate_finetune_steps=6,
        clean_ref_set=faces[0][:3],
        seed=13,
    )
    budget = PerturbationBudget(pgd_steps=2)
    pset = aspl_defend(trained_model, faces[0][3:6], TOKEN, budget, cfg, schedule)
    return pset, cfg, budget


def test_aspl_counters_match_iterations(small_aspl):
    pset, cfg, _ = small_aspl
    assert pset.trace.clone_finetunes == cfg.aspl_iters
    assert pset.trace.perturbation_updates == cfg.aspl_iters
    assert pset.trace.surrogate_updates == cfg.aspl_iters
    assert pset.trace.final_clone is not None
    assert pset.trace.final_surrogate is not None


def test_aspl_budget_soundness(small_aspl):
    pset, _, budget = small_aspl
    for x, d in zip(pset.originals, pset.deltas):
        assert np.abs(d).max() <= budget.eta + 1e-6
        assert (x + d).min() >= 0.0 and (x + d).max() <= 1.0


def test_aspl_raises_objective_for_most_images(small_aspl, schedule):
    pset, cfg, _ = small_aspl
    clone = pset.trace.final_clone
    ts = [5, 10, 20, 30]
    wins = 0
    for x, d in zip(pset.originals, pset.deltas):
        clean = cond_loss(clone, x, TOKEN, ts, schedule, seed=0)
        prot = cond_loss(clone, np.clip(x + d, 0, 1), TOKEN, ts, schedule, seed=0)
        wins += prot > clean
    assert wins / len(pset.originals) >= 0.9


def test_aspl_deterministic(trained_model, schedule, faces):
    cfg = AsplConfig(
        aspl_iters=2, surrogate_finetune_steps=4, clean_ref_set=faces[0][:2], seed=3
    )
    budget = PerturbationBudget(pgd_steps=1)
    a = aspl_defend(trained_model, faces[0][3:5], TOKEN, budget, cfg, schedule)
    b = aspl_defend(trained_model, faces[0][3:5], TOKEN, budget, cfg, schedule)
    for da, db in zip(a.deltas, b.deltas):
        np.testing.assert_array_equal(da, db)


def test_aspl_no_attack_steps_keeps_zero_init(trained_model, schedule, faces):
    cfg = AsplConfig(
        aspl_iters=1, surrogate_finetune_steps=2, clean_ref_set=faces[0][:2], seed=3
    )
    budget = PerturbationBudget(pgd_steps=0, init_mode="zero")
    pset = aspl_defend(trained_model, faces[0][3:5], TOKEN, budget, cfg, schedule)
    for d in pset.deltas:
        np.testing.assert_array_equal(d, 0.0)


def test_aspl_rejects_empty_protect_set(trained_model, schedule, faces):
    cfg = AsplConfig(aspl_iters=1, clean_ref_set=faces[0][:2])
    with pytest.raises(ValueError):
        aspl_defend(trained_model, [], TOKEN, PerturbationBudget(), cfg, schedule)


# ------------------------------------------------------------------ hf mask


def test_hf_mask_constant_image_is_uniform_low(faces):
    mask = make_hf_mask(np.full((16, 16, 3), 0.5), cutoff=0.3, low_mult=0.2)
    np.testing.assert_allclose(mask, 0.2)


def test_hf_mask_low_mult_one_is_all_ones(faces):
    mask = make_hf_mask(faces[0][0], cutoff=0.3, low_mult=1.0)
    np.testing.assert_allclose(mask, 1.0)


def test_hf_mask_checkerboard_interior_is_one():
    img = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    img = np.repeat(img[..., None], 3, axis=2)
    # Reference check that the input really is pure high-frequency content.
    assert hf_energy(img, cutoff_frac=0.5) > 0.99
    mask = make_hf_mask(img, cutoff=0.5, low_mult=0.0)
    np.testing.assert_allclose(mask[2:-2, 2:-2], 1.0, atol=1e-9)


def test_hf_mask_validation(faces):
    with pytest.raises(ValueError):
        make_hf_mask(faces[0][0], cutoff=0.0)
    with pytest.raises(ValueError):
        make_hf_mask(faces[0][0], cutoff=0.6)
    with pytest.raises(ValueError):
        make_hf_mask(faces[0][0], low_mult=1.5)


def test_hf_mask_feeds_budget(faces):
    mask = make_hf_mask(faces[0][0], cutoff=0.3, low_mult=0.2)
    budget = PerturbationBudget(freq_mask=mask)
    cap = budget.pixel_cap((16, 16, 3))
    assert cap.max() <= budget.eta + 1e-12
