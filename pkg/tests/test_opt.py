import math

import numpy as np
import pytest
import torch

from helpers import grid_clearance, random_state, tiny_problem
from humanscene.errors import NonFiniteLoss, ValidationError
from humanscene.geom import RigidTransform
from humanscene.opt.config import STAGE1, AdamConfig, LossConfig, OptimConfig, StageConfig
from humanscene.opt.losses import (
    evaluate, loss_prior, nearest_background_depth, resolve, robust, sample_depth, term_prior,
)
from humanscene.opt.optimizer import (
    AdamState, active_masks, adam_step, gradient, numerical_gradient, run_stage, run_two_stage, term_gradients,
)
from humanscene.opt.problem import (
    ParameterSet, build_contact_terms, empty_contact_terms, tangent_shapes, upsample_weights, zero_tangent,
)


def rel_err(a, b):
    return float((a - b).norm()) / max(float(a.norm()), float(b.norm()), 1e-6)


@pytest.mark.parametrize("track", [True, False])
def test_gradients_match_finite_differences(track):
    problem, params, contacts = tiny_problem(1, track_projection=track)
    assert contacts.n_links > 0 and contacts.n_persistent > 0
    rng = np.random.default_rng(7)
    for _ in range(3):
        state = random_state(problem, params, rng)
        num = numerical_gradient(problem, state, contacts, LossConfig())
        ana = term_gradients(problem, state, contacts, LossConfig())
        for term in num:
            for block in num[term]:
                assert rel_err(ana[term][block], num[term][block]) < 1e-4, (term, block)


def test_gradients_near_lookup_grid_lines_match_small_step_differences():
    # close to a pixel grid line the lookup kinks; a step that stays on one side still agrees
    problem, params, contacts = tiny_problem(1, n_persons=2)
    rng = np.random.default_rng(101)
    state = random_state(problem, params, rng)
    while grid_clearance(problem, state, contacts) > 1e-3:
        state = random_state(problem, params, rng)
    num = numerical_gradient(problem, state, contacts, LossConfig(), h=1e-8, terms=("lc1",))
    ana = term_gradients(problem, state, contacts, LossConfig(), terms=("lc1",))
    for block in num["lc1"]:
        assert rel_err(ana["lc1"][block], num["lc1"][block]) < 1e-4, block


def _full_depth(problem, params, f):
    return problem.Z0[f] * np.exp(problem.A_r @ params.field[f].numpy() @ problem.A_c.T)


def test_sample_depth_matches_inverse_bilinear_oracle():
    problem, params, _ = tiny_problem(2)
    params.field = torch.randn_like(params.field) * 0.1
    bg = problem.valid & ~problem.masks
    uv = torch.tensor([[3.3, 2.7], [25.9, 18.2], [0.5, 0.5], [14.0, 10.0], [31.5, 3.0]], dtype=torch.float64)
    frame = torch.zeros(5, dtype=torch.long)
    d, ok = sample_depth(problem, frame, uv, params.field)
    Z = _full_depth(problem, params, 0)
    for k, (u, v) in enumerate(uv.numpy()):
        c0, r0 = int(np.floor(u)), int(np.floor(v))
        corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
        inside = 0 <= c0 <= 30 and 0 <= r0 <= 22
        good = inside and all(bg[0, r, c] for r, c in corners)
        assert bool(ok[k]) == good
        if good:
            a, b = u - c0, v - r0
            w = [(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]
            want = 1.0 / sum(wk / Z[r, c] for wk, (r, c) in zip(w, corners))
            assert abs(float(d[k]) - want) < 1e-12


def test_nearest_background_matches_brute_force():
    problem, params, _ = tiny_problem(3)
    bg = problem.valid & ~problem.masks
    H, W = bg.shape[1:]
    rng = np.random.default_rng(0)
    uv = torch.as_tensor(rng.uniform([0, 0], [W - 1, H - 1], size=(40, 2)))
    frame = torch.as_tensor(rng.integers(0, problem.n_frames, 40))
    d, pix = nearest_background_depth(problem, frame, uv, params.field)
    for k in range(40):
        f = int(frame[k])
        c, r = (int(np.floor(x + 0.5)) for x in uv[k].numpy())
        rr, cc = np.nonzero(bg[f])
        best = np.min((rr - r) ** 2 + (cc - c) ** 2)
        pc, pr = int(pix[k, 0]), int(pix[k, 1])
        assert bg[f, pr, pc] and (pr - r) ** 2 + (pc - c) ** 2 == best
        assert abs(float(d[k]) - _full_depth(problem, params, f)[pr, pc]) < 1e-12


def test_upsample_weights_corner_aligned_rows_sum_to_one():
    A = upsample_weights(24, 6)
    assert np.allclose(A.sum(1), 1.0)
    assert A[0, 0] == 1.0 and A[-1, -1] == 1.0
    assert np.allclose(A @ np.arange(6.0), np.linspace(0, 5, 24))


def test_robust_kernels():
    r = torch.tensor([0.05, 0.1, 0.3], dtype=torch.float64)
    assert torch.allclose(robust(r, 0.1), torch.tensor([0.00125, 0.005, 0.025], dtype=torch.float64))
    assert torch.allclose(robust(r, 0.1, "l1"), r)
    assert torch.allclose(robust(r, 0.1, "l2"), 0.5 * r * r)


def test_prior_is_frobenius_distance_to_initial():
    problem, params, contacts = tiny_problem(4)
    state = random_state(problem, params, np.random.default_rng(1))
    p = resolve(problem, state, zero_tangent(problem))
    got = float(term_prior(problem, p, LossConfig()).sum())
    init = [RigidTransform(R.numpy(), t.numpy()) for R, t in zip(problem.T_init_R, problem.T_init_t)]
    want = sum(np.linalg.norm(a.matrix() - b.matrix()) for a, b in zip(state.body_transforms(), init))
    assert abs(got - want) < 1e-12
    assert abs(loss_prior(state.body_transforms(), init) - want) < 1e-12
    assert float(term_prior(problem, resolve(problem, params, zero_tangent(problem)), LossConfig()).sum()) == 0.0


def test_contact_hinges():
    problem, params, contacts = tiny_problem(5)
    vals = evaluate(problem, params, contacts, LossConfig(delta_c2=1e3))
    assert float(vals["lc2"]) == 0.0
    vals = evaluate(problem, params, contacts, LossConfig(delta_c1=1e3))
    assert float(vals["lc1"]) == 0.0
    vals = evaluate(problem, params, empty_contact_terms(problem), LossConfig())
    assert float(vals["lc1"]) == 0.0 and float(vals["lc2"]) == 0.0


def test_stage_start_pixel_used_without_tracking():
    problem, params, contacts = tiny_problem(6, track_projection=False)
    # the scene point sits at the recorded pixel: the loss equals the link geometry
    K = params.K.numpy()
    total = 0.0
    for row, f, v, pix in zip(contacts.link_row, contacts.link_frame, contacts.link_vertex, contacts.link_pixel):
        xh = params.R_T[row].numpy() @ v.numpy() + params.t_T[row].numpy()
        c, r = pix.numpy().astype(int)
        depth = float(params.sigma[f]) * _full_depth(problem, params, int(f))[r, c]
        xs = np.array([(c - K[2]) / K[0], (r - K[3]) / K[1], 1.0]) * depth
        total += np.linalg.norm(xh - xs)
    assert abs(float(evaluate(problem, params, contacts, LossConfig())["lc1"]) - total) < 1e-10


def test_tracking_uses_projection_and_fallback():
    problem, params, contacts = tiny_problem(6)
    assert contacts.track_projection
    p = resolve(problem, params, zero_tangent(problem))
    xh = (p["R_T"][contacts.link_row] @ contacts.link_vertex[..., None])[..., 0] + p["t_T"][contacts.link_row]
    K = p["K"]
    uv = torch.stack([K[0] * xh[:, 0] / xh[:, 2] + K[2], K[1] * xh[:, 1] / xh[:, 2] + K[3]], -1)
    _, ok = sample_depth(problem, contacts.link_frame, uv, p["field"])
    # the helper places vertices inside the mask: both branches are live
    assert ok.any() and (~ok).any()
    # a vertex on background, at exactly the scene depth, has zero contact cost
    k = int(torch.nonzero(ok)[0])
    d, _ = sample_depth(problem, contacts.link_frame[k:k + 1], uv[k:k + 1], p["field"])
    on_surface = xh[k] / xh[k, 2] * float(p["sigma"][contacts.link_frame[k]]) * float(d[0])
    row = int(contacts.link_row[k])
    vertex = p["R_T"][row].T @ (on_surface - p["t_T"][row])
    single = build_contact_terms(problem, [[[] for _ in pd.rows] for pd in problem.persons])
    single.link_row, single.link_frame = contacts.link_row[k:k + 1], contacts.link_frame[k:k + 1]
    single.link_person, single.link_pixel = contacts.link_person[k:k + 1], contacts.link_pixel[k:k + 1]
    single.link_vertex = vertex[None]
    single.link_lookup = type(contacts.link_lookup)(*(getattr(contacts.link_lookup, n)[k:k + 1]
                                                       for n in ("frame", "z0", "weight", "lo_index", "lo_weight")))
    assert float(evaluate(problem, params, single, LossConfig())["lc1"]) < 1e-12


def test_coupled_scale_coordinate_is_a_global_similarity():
    problem, params, contacts = tiny_problem(7)
    none = empty_contact_terms(problem)
    cfg = LossConfig(robust="l2")
    xi = zero_tangent(problem)
    base = evaluate(problem, params, none, cfg, xi)
    xi["sigma"][0] = 0.3
    moved = evaluate(problem, params, none, cfg, xi)
    # world points stretch about the first camera: 3D residuals grow by exp(g), pixels do not move
    assert float(moved["l3d"]) == pytest.approx(float(base["l3d"]) * math.exp(0.6), rel=1e-12)
    assert float(moved["l2d"]) == pytest.approx(float(base["l2d"]), rel=1e-12)
    p = resolve(problem, params, xi)
    assert torch.allclose(p["sigma"], params.sigma * math.exp(0.3))


def test_active_masks_pin_first_camera_and_freeze_blocks():
    problem, params, contacts = tiny_problem(8)
    stage = StageConfig(1, 0.1, optimize_depth=False, optimize_intrinsics=False, optimize_body=False)
    masks = active_masks(problem, stage)
    _, g = gradient(problem, params, contacts, LossConfig(), masks)
    assert torch.all(g["P"][0] == 0) and torch.any(g["P"][1] != 0)
    assert torch.all(g["K"] == 0) and torch.all(g["depth"] == 0) and torch.all(g["T"] == 0)
    assert torch.any(g["sigma"] != 0)


def test_adam_step_matches_torch_adam_on_euclidean_blocks():
    problem, params, contacts = tiny_problem(9)
    cfg = AdamConfig()
    field = params.field.clone().requires_grad_(True)
    ref = torch.optim.Adam([field], lr=0.05, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    state, cur = AdamState.zeros(problem), params
    for _ in range(3):
        _, g = gradient(problem, cur, contacts, LossConfig())
        field.grad = g["depth"].clone()
        ref.step()
        cur, state = adam_step(problem, cur, state, g, 0.05, cfg)
        # keep the reference in lockstep with the other blocks
        assert torch.allclose(cur.field, field.detach(), atol=1e-14)


def test_learning_rate_schedule():
    s = StageConfig(11, 0.07)
    assert s.learning_rate_at(0) == pytest.approx(0.07)
    assert s.learning_rate_at(10) == pytest.approx(0.0007)
    assert s.learning_rate_at(5) == pytest.approx((0.07 + 0.0007) / 2)
    assert StageConfig(5, 0.1, schedule="constant").learning_rate_at(3) == 0.1
    with pytest.raises(ValidationError):
        StageConfig(5, 0.0)
    with pytest.raises(ValidationError):
        LossConfig(w_c2=-1.0)


def test_run_stage_decreases_loss_and_keeps_best():
    problem, params, contacts = tiny_problem(10)
    hist = []
    res = run_stage(problem, params, contacts, LossConfig(), StageConfig(30, 0.01), history=hist)
    losses = [h["total"] for h in hist]
    assert len(losses) == 31
    assert res.final_loss == min(losses) < losses[0]
    assert res.initial_loss == losses[0]
    vals, _ = gradient(problem, res.params, contacts, LossConfig())
    assert float(vals["total"]) == pytest.approx(res.final_loss, abs=1e-12)


def test_zero_iterations_is_identity():
    problem, params, contacts = tiny_problem(11)
    cfg = OptimConfig(stage1=StageConfig(0, 0.07), stage2=StageConfig(0, 0.014))
    out = run_two_stage(problem, params, cfg)
    assert out.params.max_abs_diff(params) == 0.0
    assert [h["iteration"] for h in out.history] == [0, 0]


def test_non_finite_loss_reports_state():
    problem, params, contacts = tiny_problem(12)
    bad = params.clone()
    bad.log_sigma[1] = float("nan")
    with pytest.raises(NonFiniteLoss) as err:
        run_stage(problem, bad, contacts, LossConfig(), StageConfig(3, 0.01))
    assert isinstance(err.value.state, ParameterSet)


def test_stage_weights_override_loss_weights():
    cfg = LossConfig(w_3d=5.0).with_weights(**STAGE1.weights)
    assert cfg.w_3d == 1.0 and cfg.w_2d == 0.0


def test_tangent_shapes():
    problem, _, _ = tiny_problem(0)
    s = tangent_shapes(problem)
    assert s["P"] == (3, 6) and s["T"] == (3, 6) and s["sigma"] == (3,) and s["depth"] == (3, 6, 8)
