"""Multiscale kernel tests: finite-difference oracles, structure, checkpoints."""

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from greenprec import msnn, pde
from greenprec.errors import CheckpointError, ConfigurationError, NumericError


def small_arch(dim=1, eps=(1e-2,), widths=(8,), hidden=2, **kw):
    return msnn.MsnnArchitecture(dim=dim, eps_schedule=eps, branch_widths=widths,
                                 hidden_layers=hidden, far_width=10, far_layers=2,
                                 **kw)


def zero_final(layers):
    W, b = layers[-1]
    return layers[:-1] + ((jnp.zeros_like(W), jnp.zeros_like(b)),)


def zero_output_model(model):
    """Zero every output layer so the kernel is identically zero."""
    params = jax.tree_util.tree_map(lambda a: a, model.params)  # shallow copy
    new_levels = []
    for level in params["levels"]:
        level = dict(level)
        level["near_body"] = zero_final(level["near_body"])
        level["middle_body"] = zero_final(level["middle_body"])
        new_levels.append(level)
    params = dict(params)
    params["levels"] = tuple(new_levels)
    params["far"] = zero_final(params["far"])
    if "replicas" in params:
        params["replicas"] = tuple(
            {**r, "near_body": zero_final(r["near_body"]),
             "middle_body": zero_final(r["middle_body"])}
            for r in params["replicas"])
    return msnn.MsnnModel(arch=model.arch, params=params)


def fd_grad(model, x, y, h=1e-5, params=None):
    d = model.arch.dim
    g = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[i] = (model.eval(x + e, y, params) - model.eval(x - e, y, params)) / (2 * h)
    return g


def fd_hess(model, x, y, h=1e-5, params=None):
    d = model.arch.dim
    H = np.zeros((d, d))
    f0 = model.eval(x, y, params)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[i, i] = (model.eval(x + ei, y, params) - 2 * f0
                   + model.eval(x - ei, y, params)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (
                model.eval(x + ei + ej, y, params) - model.eval(x + ei - ej, y, params)
                - model.eval(x - ei + ej, y, params) + model.eval(x - ei - ej, y, params)
            ) / (4 * h**2)
    return H


class TestEval:
    def test_zero_network(self):
        model = zero_output_model(msnn.init_model(small_arch(), seed=0))
        rng = np.random.default_rng(0)
        for _ in range(5):
            assert model.eval(rng.uniform(0, 1, 1), rng.uniform(0, 1, 1)) == 0.0

    def test_neutral_scaling_reduces_to_body(self):
        # at eps = 1 the exponents cancel and the near branch is body(x-y, y)
        arch = small_arch(eps=(1.0,))
        model = msnn.init_model(arch, seed=3)
        params = dict(model.params)
        level = dict(params["levels"][0])
        level["middle_body"] = zero_final(level["middle_body"])
        params["levels"] = (level,)
        params["far"] = zero_final(params["far"])
        model = msnn.MsnnModel(arch=arch, params=params)
        x, y = np.array([0.3]), np.array([0.8])
        direct = float(msnn._scalar_mlp(
            level["near_body"], jnp.concatenate([jnp.asarray(x - y), jnp.asarray(y)])))
        assert model.eval(x, y) == pytest.approx(direct, abs=1e-14)

    def test_gate_saturation_selects_one_replica(self):
        arch = small_arch(eps=(1e-2,), n_subdomains=3,
                          seeds=((0.0,), (0.5,), (1.0,)))
        model = msnn.init_model(arch, seed=1)
        gated = msnn.activate_gate(model, np.random.default_rng(0), perturb=0.05)
        params = dict(gated.params)
        W, b = params["gate"][-1]
        params["gate"] = params["gate"][:-1] + (
            (jnp.zeros_like(W), jnp.asarray([50.0, 0.0, 0.0])),)
        gated = msnn.MsnnModel(arch=arch, params=params)

        x, y = np.array([0.4]), np.array([0.7])
        # shared terms + exactly replica 0
        pfeat = jnp.zeros(0)
        shared = float(msnn._scalar_mlp(
            params["far"], jnp.concatenate([jnp.asarray(x), jnp.asarray(y), pfeat])))
        rep0 = float(msnn._level_value(params["replicas"][0], 1e-2,
                                       jnp.asarray(x), jnp.asarray(y), pfeat))
        assert gated.eval(x, y) == pytest.approx(shared + rep0, rel=1e-12)

    def test_parametric_angle_periodicity(self):
        arch = small_arch(dim=2, eps=(1e-2,), param_encoding="angle_double")
        model = msnn.init_model(arch, seed=7)
        x, y = np.array([0.3, 0.4]), np.array([0.6, 0.2])
        v1 = model.eval(x, y, params=(0.3,))
        v2 = model.eval(x, y, params=(0.3 + np.pi,))
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_nonfinite_diagnostics_name_the_branch(self):
        model = msnn.init_model(small_arch(), seed=0)
        params = dict(model.params)
        W, b = params["far"][0]
        params["far"] = ((W, b.at[0].set(jnp.nan)),) + params["far"][1:]
        bad = msnn.MsnnModel(arch=model.arch, params=params)
        with pytest.raises(NumericError, match="far field"):
            bad.eval(np.array([0.5]), np.array([0.5]))

    def test_parametric_guardrails(self):
        model = msnn.init_model(small_arch(), seed=0)
        with pytest.raises(ConfigurationError):
            model.eval(np.array([0.5]), np.array([0.5]), params=(0.3,))
        pmodel = msnn.init_model(
            small_arch(dim=2, param_encoding="angle_double"), seed=0)
        with pytest.raises(ConfigurationError):
            pmodel.eval(np.array([0.5, 0.5]), np.array([0.5, 0.5]))


class TestDerivatives:
    @pytest.mark.parametrize("dim", [1, 2])
    def test_grad_hess_match_finite_differences(self, dim):
        # kernel scales of order one keep the finite-difference oracle itself
        # accurate; the two-eps ratio test below covers the small-eps scaling
        arch = small_arch(dim=dim, eps=(0.5, 0.2), widths=(8, 8))
        model = msnn.init_model(arch, seed=11, n_levels=2)
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.uniform(0.1, 0.9, dim)
            y = rng.uniform(0.1, 0.9, dim)
            g = model.grad_x(x, y)
            gf = fd_grad(model, x, y)
            assert np.max(np.abs(g - gf)) <= 1e-6 * max(np.max(np.abs(gf)), 1e-8)
            H = model.hess_x(x, y)
            Hf = fd_hess(model, x, y)
            np.testing.assert_allclose(H, H.T, atol=1e-10)
            assert np.max(np.abs(H - Hf)) <= 1e-5 * max(np.max(np.abs(Hf)), 1e-6)

    def test_zero_network_derivatives(self):
        model = zero_output_model(msnn.init_model(small_arch(dim=2), seed=0))
        x, y = np.array([0.3, 0.6]), np.array([0.5, 0.5])
        assert np.all(model.grad_x(x, y) == 0)
        assert np.all(model.hess_x(x, y) == 0)

    def test_two_eps_scaling_ratio(self):
        # at a fixed scaled argument the near-branch gradient scales as
        # eps^(alpha - beta) with beta = 1
        models = {}
        for eps in (0.1, 0.01):
            arch = small_arch(eps=(eps,))
            model = msnn.init_model(arch, seed=21)
            params = dict(model.params)
            level = dict(params["levels"][0])
            level["middle_body"] = zero_final(level["middle_body"])
            # push alpha away from its neutral init so the test is not trivial
            Wa, ba = level["alpha1"][-1]
            level["alpha1"] = level["alpha1"][:-1] + ((Wa, jnp.full_like(ba, 1.7)),)
            params["levels"] = (level,)
            params["far"] = zero_final(params["far"])
            models[eps] = msnn.MsnnModel(arch=arch, params=params)
        y = np.array([0.5])
        u = 0.7  # scaled displacement
        g = {eps: m.grad_x(y + eps * u, y)[0] for eps, m in models.items()}
        alpha = msnn.effective_exponents(models[0.1], 0, y)[0][0]
        assert alpha == pytest.approx(1.7)
        expected_ratio = (0.1 / 0.01) ** (alpha - 1.0)
        assert g[0.1] / g[0.01] == pytest.approx(expected_ratio, rel=1e-9)


class TestApplyOperator:
    def test_zero_model(self):
        model = zero_output_model(msnn.init_model(small_arch(), seed=0))
        assert msnn.apply_operator(model, pde.poisson_1d(),
                                   np.array([0.4]), np.array([0.6])) == 0.0

    def test_reaction_only_equals_eval(self):
        model = msnn.init_model(small_arch(), seed=5)
        coeffs = pde.CoefficientField(
            dim=1, a=lambda x, p: ((0.0,),), b=lambda x, p: (0.0,),
            c=lambda x, p: 1.0, div_a=lambda x, p: (0.0,))
        x, y = np.array([0.3]), np.array([0.7])
        assert msnn.apply_operator(model, coeffs, x, y) == pytest.approx(
            model.eval(x, y), rel=1e-14)

    def test_matches_finite_difference_application(self):
        model = msnn.init_model(small_arch(eps=(1e-2,), widths=(10,)), seed=9)
        coeffs = pde.convection_1d()
        rng = np.random.default_rng(8)
        h = 1e-4
        for _ in range(10):
            x = rng.uniform(0.2, 0.8, 1)
            y = rng.uniform(0.2, 0.8, 1)
            u = lambda z: model.eval(np.array([z]), y)
            upp = (-u(x[0] + 2*h) + 16*u(x[0] + h) - 30*u(x[0])
                   + 16*u(x[0] - h) - u(x[0] - 2*h)) / (12 * h**2)
            up = (u(x[0] + h) - u(x[0] - h)) / (2 * h)
            expected = -0.01 * upp + (1 + x[0]**2) * up
            got = msnn.apply_operator(model, coeffs, x, y)
            assert got == pytest.approx(expected, rel=1e-5)

    def test_unsupplied_tensor_divergence_uses_central_differences(self):
        # a(x) varies but div_a is not supplied; compare against the analytic form
        base = pde.variable_diffusion_1d(0.05, 0.8)
        nofd = pde.CoefficientField(dim=1, a=base.a, b=base.b, c=base.c, div_a=None)
        model = msnn.init_model(small_arch(), seed=13)
        x, y = np.array([0.45]), np.array([0.3])
        v_analytic = msnn.apply_operator(model, base, x, y)
        v_fd = msnn.apply_operator(model, nofd, x, y)
        assert v_fd == pytest.approx(v_analytic, rel=1e-6)


class TestParamGrad:
    def _fd_param_check(self, loss, params, n_probe, tol, seed=0):
        val = float(loss(params))
        grads = msnn.param_grad(loss, params)
        leaves, treedef = jax.tree_util.tree_flatten(params)
        gleaves = jax.tree_util.tree_leaves(grads)
        rng = np.random.default_rng(seed)
        sizes = np.array([leaf.size for leaf in leaves])
        probs = sizes / sizes.sum()
        checked = 0
        while checked < n_probe:
            li = rng.choice(len(leaves), p=probs)
            flat_idx = rng.integers(leaves[li].size)
            h = 1e-6 * max(1.0, float(jnp.abs(leaves[li]).max()))
            bumped = []
            for sign in (+1, -1):
                leaf = leaves[li].reshape(-1).at[flat_idx].add(sign * h).reshape(leaves[li].shape)
                test_leaves = list(leaves)
                test_leaves[li] = leaf
                bumped.append(float(loss(jax.tree_util.tree_unflatten(treedef, test_leaves))))
            fd = (bumped[0] - bumped[1]) / (2 * h)
            an = float(gleaves[li].reshape(-1)[flat_idx])
            scale = max(abs(fd), abs(an), 1e-6 * max(abs(val), 1.0))
            assert abs(an - fd) <= tol * scale, (li, flat_idx, an, fd)
            checked += 1

    def test_eval_loss_gradient(self):
        arch = small_arch(eps=(1e-2, 1e-3), widths=(6, 6))
        model = msnn.init_model(arch, seed=17, n_levels=2)
        x = jnp.array([0.35])
        y = jnp.array([0.55])

        def loss(params):
            return msnn._model_value(arch, params, x, y, jnp.zeros(0)) ** 2

        self._fd_param_check(loss, model.params, n_probe=50, tol=1e-6)

    def test_operator_loss_gradient(self):
        arch = small_arch(eps=(0.1,), widths=(6,))
        model = msnn.init_model(arch, seed=19)
        coeffs = pde.reaction_1d()
        rng = np.random.default_rng(1)
        pts = [(jnp.asarray(rng.uniform(0.2, 0.8, 1)),
                jnp.asarray(rng.uniform(0.2, 0.8, 1))) for _ in range(5)]

        def loss(params):
            return sum(
                msnn._operator_value(arch, coeffs, params, x, y, jnp.zeros(0)) ** 2
                for x, y in pts)

        self._fd_param_check(loss, model.params, n_probe=50, tol=1e-5)

    def test_masked_branch_has_zero_gradient_block(self):
        # zeroed output layers make the whole level inert: every upstream
        # parameter of that level gets an exactly-zero gradient
        arch = small_arch(eps=(1e-2,), widths=(6,))
        model = msnn.init_model(arch, seed=23)
        params = dict(model.params)
        level = dict(params["levels"][0])
        level["near_body"] = zero_final(level["near_body"])
        level["middle_body"] = zero_final(level["middle_body"])
        params["levels"] = (level,)
        x = jnp.array([0.4])
        y = jnp.array([0.6])

        def loss(p):
            return msnn._model_value(arch, p, x, y, jnp.zeros(0)) ** 2

        grads = msnn.param_grad(loss, params)
        dead = grads["levels"][0]
        for key in ("alpha1", "alpha2_raw", "beta2_raw"):
            for W, b in dead[key]:
                assert np.all(np.asarray(W) == 0.0)
                assert np.all(np.asarray(b) == 0.0)
        for key in ("near_body", "middle_body"):
            for W, b in dead[key][:-1]:  # layers feeding the zeroed output
                assert np.all(np.asarray(W) == 0.0)
                assert np.all(np.asarray(b) == 0.0)
        # the live far field still receives gradient
        assert np.any(np.asarray(grads["far"][0][0]) != 0.0)

    def test_nonfinite_gradient_raises(self):
        arch = small_arch()
        model = msnn.init_model(arch, seed=2)

        def loss(params):
            return params["far"][0][0][0, 0] * jnp.nan

        with pytest.raises(NumericError):
            msnn.param_grad(loss, model.params)


class TestGate:
    def make_gated(self, seed=0):
        arch = small_arch(eps=(1e-2,), n_subdomains=3,
                          seeds=((0.0,), (0.5,), (1.0,)))
        model = msnn.init_model(arch, seed=seed)
        return msnn.activate_gate(model, np.random.default_rng(seed))

    def test_zero_logits_uniform(self):
        gated = self.make_gated()
        params = dict(gated.params)
        params["gate"] = zero_final(params["gate"])
        gated = msnn.MsnnModel(arch=gated.arch, params=params)
        w = msnn.gate_eval(gated, np.array([0.3]))
        np.testing.assert_allclose(w, np.full(3, 1 / 3), atol=1e-15)

    def test_saturated_softmax_value(self):
        gated = self.make_gated()
        params = dict(gated.params)
        W, b = params["gate"][-1]
        params["gate"] = params["gate"][:-1] + (
            (jnp.zeros_like(W), jnp.asarray([10.0, 0.0, 0.0])),)
        gated = msnn.MsnnModel(arch=gated.arch, params=params)
        w = msnn.gate_eval(gated, np.array([0.9]))
        expected = np.exp(10) / (np.exp(10) + 2.0)
        assert w[0] == pytest.approx(expected, rel=1e-12)

    def test_partition_of_unity(self):
        gated = self.make_gated(seed=4)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            w = msnn.gate_eval(gated, rng.uniform(0, 1, 1))
            assert np.all(w >= 0)
            assert abs(w.sum() - 1.0) <= 1e-12

    def test_replica_perturbation_breaks_symmetry(self):
        gated = self.make_gated(seed=6)
        r0 = gated.params["replicas"][0]["near_body"][0][0]
        r1 = gated.params["replicas"][1]["near_body"][0][0]
        assert not np.array_equal(np.asarray(r0), np.asarray(r1))
        # perturbation is multiplicative and small
        base = gated.params["levels"] if gated.params["levels"] else None
        assert np.max(np.abs(np.asarray(r0) - np.asarray(r1))) < 0.05

    def test_mixture_continuity_in_y(self):
        gated = self.make_gated(seed=8)
        x = np.full((2001, 1), 0.37)
        ys = np.linspace(0, 1, 2001).reshape(-1, 1)
        vals = msnn.eval_batch(gated, x, ys)
        delta = ys[1, 0] - ys[0, 0]
        jumps = np.abs(np.diff(vals))
        # a seam would make one jump vastly exceed its neighbors' slope
        for i in range(1, len(jumps) - 1):
            local = max(jumps[i - 1], jumps[i + 1]) + 1e-12
            assert jumps[i] <= 10 * local


class TestExponents:
    def test_ordering_holds_structurally(self):
        arch = small_arch(eps=(1e-2, 1e-3), widths=(6, 6))
        model = msnn.init_model(arch, seed=31, n_levels=2)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            y = rng.uniform(0, 1, 1)
            for level in (0, 1):
                (a1, b1), (a2, b2) = msnn.effective_exponents(model, level, y)
                assert b1 == 1.0
                assert b2 < b1
                assert a2 >= a1

    def test_far_field_exponents(self):
        model = msnn.init_model(small_arch(), seed=0)
        assert msnn.effective_exponents(model, "far", np.array([0.5])) == [(0.0, 0.0)]

    def test_sigmoid_softplus_construction(self):
        arch = small_arch()
        model = msnn.init_model(arch, seed=41)
        y = np.array([0.25])
        raw_b = float(msnn._scalar_mlp(model.params["levels"][0]["beta2_raw"],
                                       jnp.asarray(y)))
        raw_a = float(msnn._scalar_mlp(model.params["levels"][0]["alpha2_raw"],
                                       jnp.asarray(y)))
        (a1, _), (a2, b2) = msnn.effective_exponents(model, 0, y)
        assert b2 == pytest.approx(1 / (1 + np.exp(-raw_b)), rel=1e-12)
        assert a2 - a1 == pytest.approx(np.logaddexp(0.0, raw_a), rel=1e-12)

    def test_initial_alpha_matches_diffusion_balance(self):
        for dim in (1, 2):
            model = msnn.init_model(small_arch(dim=dim), seed=1)
            y = np.full(dim, 0.4)
            (a1, b1), _ = msnn.effective_exponents(model, 0, y)
            assert a1 == pytest.approx(2.0 - dim)
            assert b1 == 1.0


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        arch = small_arch(eps=(1e-2, 1e-3), widths=(6, 6), n_subdomains=3,
                          seeds=((0.0,), (0.5,), (1.0,)))
        model = msnn.init_model(arch, seed=3, n_levels=2)
        model = msnn.activate_gate(model, np.random.default_rng(1))
        path = tmp_path / "model.npz"
        msnn.save_checkpoint(model, path)
        back = msnn.load_checkpoint(path)
        assert back.arch == model.arch
        assert back.gate_active
        for a, b in zip(jax.tree_util.tree_leaves(model.params),
                        jax.tree_util.tree_leaves(back.params)):
            np.testing.assert_array_equal(np.asarray(a), np.asarray(b))

    def test_corrupt_metadata_rejected(self, tmp_path):
        model = msnn.init_model(small_arch(), seed=0)
        path = tmp_path / "model.npz"
        msnn.save_checkpoint(model, path)
        data = dict(np.load(path))
        data["meta"] = np.frombuffer(b"not json at all", dtype=np.uint8)
        np.savez(path, **data)
        with pytest.raises(CheckpointError):
            msnn.load_checkpoint(path)


class TestArchValidation:
    def test_eps_must_decrease(self):
        with pytest.raises(ConfigurationError):
            small_arch(eps=(1e-3, 1e-2), widths=(6, 6))

    def test_gate_needs_seeds(self):
        arch = small_arch(n_subdomains=3, seeds=((0.0,),))
        model = msnn.init_model(arch, seed=0)
        with pytest.raises(ConfigurationError):
            msnn.activate_gate(model, np.random.default_rng(0))

    def test_add_level_bounds(self):
        arch = small_arch(eps=(1e-2, 1e-3), widths=(6, 6))
        model = msnn.init_model(arch, seed=0, n_levels=2)
        with pytest.raises(ConfigurationError):
            msnn.add_level(model, np.random.default_rng(0))
