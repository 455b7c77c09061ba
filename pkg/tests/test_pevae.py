import math

import pytest
import torch

from fdcheck import grad_rel_err
from penet.nnblocks import UNetEncoder
from penet.pevae import (
    PosteriorConfig,
    PosteriorEncoder,
    PosteriorParams,
    kl_loss,
    reparameterize,
    sample_prior,
)

SMALL = dict(latent_dim=8, image_size=32, channels=(8, 16, 24), dim=32,
             heads=4, depth=1)


def small_config(**kw):
    merged = {**SMALL, **kw}
    return PosteriorConfig(**merged)


class TestKlLoss:
    def test_prior_match_is_zero(self):
        p = PosteriorParams(torch.zeros(1, 4), torch.zeros(1, 4))
        assert kl_loss(p).item() == 0.0

    def test_unit_mean_closed_form(self):
        # mu = (1, 0), sigma = (1, 1): KL reduces to mu^2 / 2 = 0.5.
        p = PosteriorParams(torch.tensor([[1.0, 0.0]]),
                            torch.tensor([[0.0, 0.0]]))
        assert abs(kl_loss(p).item() - 0.5) < 1e-9

    def test_variance_e_closed_form(self):
        # sigma^2 = e, mu = 0, M = 1: KL = -(1 + 1 - e)/2 = (e - 2)/2.
        p = PosteriorParams(torch.tensor([[0.0]], dtype=torch.float64),
                            torch.tensor([[1.0]], dtype=torch.float64))
        want = (math.e - 2.0) / 2.0
        assert abs(kl_loss(p).item() - want) < 1e-12

    def test_nonnegative_and_zero_only_at_prior(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            mu = torch.randn(3, 6, generator=g)
            lv = torch.randn(3, 6, generator=g)
            val = kl_loss(PosteriorParams(mu, lv)).item()
            assert val >= 0.0
            if mu.abs().max() > 1e-3 or lv.abs().max() > 1e-3:
                assert val > 0.0

    def test_batch_mean_reduction(self):
        a = PosteriorParams(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2))
        b = PosteriorParams(torch.tensor([[0.0, 0.0]]), torch.zeros(1, 2))
        both = PosteriorParams(torch.tensor([[1.0, 0.0], [0.0, 0.0]]),
                               torch.zeros(2, 2))
        want = 0.5 * (kl_loss(a).item() + kl_loss(b).item())
        assert kl_loss(both).item() == pytest.approx(want, abs=1e-9)

    def test_analytic_gradients(self):
        mu = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        lv = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        # batch mean divides per-sample gradients by B
        kl_loss(PosteriorParams(mu, lv)).backward()
        torch.testing.assert_close(mu.grad, mu.detach() / 2)
        torch.testing.assert_close(lv.grad, (torch.exp(lv.detach()) - 1) / 2 / 2)

    def test_gradient_vs_finite_differences(self):
        mu = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
        lv = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
        assert grad_rel_err(lambda: kl_loss(PosteriorParams(mu, lv)), mu) < 1e-4
        assert grad_rel_err(lambda: kl_loss(PosteriorParams(mu, lv)), lv) < 1e-4


class TestReparameterize:
    def test_collapsed_variance_returns_mu(self):
        mu = torch.randn(4, 8)
        p = PosteriorParams(mu, torch.full((4, 8), -1e9))
        z = reparameterize(p, torch.Generator().manual_seed(0))
        torch.testing.assert_close(z, mu, atol=0, rtol=0)

    def test_standard_normal_moments(self):
        p = PosteriorParams(torch.zeros(10_000, 4), torch.zeros(10_000, 4))
        z = reparameterize(p, torch.Generator().manual_seed(1))
        assert z.mean(dim=0).abs().max() < 0.05
        assert (z.var(dim=0) - 1).abs().max() < 0.05

    def test_seeded_repeatability(self):
        p = PosteriorParams(torch.randn(2, 4), torch.randn(2, 4))
        a = reparameterize(p, torch.Generator().manual_seed(7))
        b = reparameterize(p, torch.Generator().manual_seed(7))
        torch.testing.assert_close(a, b, atol=0, rtol=0)

    def test_gradients_flow(self):
        mu = torch.zeros(3, 4, requires_grad=True)
        lv = torch.zeros(3, 4, requires_grad=True)
        z = reparameterize(PosteriorParams(mu, lv),
                           torch.Generator().manual_seed(0))
        z.sum().backward()
        assert mu.grad is not None and lv.grad is not None
        # pathwise dz/dmu is exactly 1 per coordinate
        torch.testing.assert_close(mu.grad, torch.ones(3, 4))

    def test_pathwise_mean_gradient_is_identity(self):
        g = torch.Generator().manual_seed(3)
        mu = torch.zeros(10_000, 1, requires_grad=True)
        lv = torch.zeros(10_000, 1)
        z = reparameterize(PosteriorParams(mu, lv), g)
        z.sum().backward()
        assert abs(mu.grad.mean().item() - 1.0) < 0.05


class TestSamplePrior:
    def test_reproducible(self):
        a = sample_prior(5, 8, torch.Generator().manual_seed(0))
        b = sample_prior(5, 8, torch.Generator().manual_seed(0))
        torch.testing.assert_close(a, b, atol=0, rtol=0)

    def test_moments(self):
        z = sample_prior(10_000, 8, torch.Generator().manual_seed(1))
        assert z.mean(dim=0).abs().max() < 0.05

    def test_different_seeds_differ(self):
        a = sample_prior(2, 8, torch.Generator().manual_seed(0))
        b = sample_prior(2, 8, torch.Generator().manual_seed(1))
        assert (a - b).abs().max() > 0

    def test_dimension_validated(self):
        with pytest.raises(ValueError):
            sample_prior(1, 0)


class TestPosteriorConfig:
    def test_bad_scheme(self):
        with pytest.raises(ValueError):
            small_config(scheme="late")

    def test_bad_aggregator(self):
        with pytest.raises(ValueError):
            small_config(aggregator="pool")


def batch(n=2, size=32, ch=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, ch, size, size, generator=g)


class TestPosteriorEncoder:
    def test_zeroed_heads_give_zero_params(self):
        torch.manual_seed(0)
        enc = PosteriorEncoder(small_config())
        with torch.no_grad():
            for head in (enc.mu_head, enc.log_var_head):
                head[-1].weight.zero_()
                head[-1].bias.zero_()
        p = enc(batch(seed=1), batch(seed=2))
        assert p.mu.abs().max() == 0
        assert p.log_var.abs().max() == 0
        assert p.mu.shape == (2, 8)

    def test_pose_enters_posterior(self):
        torch.manual_seed(1)
        enc = PosteriorEncoder(small_config(scheme="early")).eval()
        x = batch(seed=3)
        with torch.no_grad():
            a = enc(x, batch(seed=4))
            b = enc(x, batch(seed=5))
        assert (a.mu - b.mu).abs().max() > 1e-6

    def test_shared_scheme_ties_generator_encoder(self):
        torch.manual_seed(2)
        gen_enc = UNetEncoder(3, SMALL["channels"])
        enc = PosteriorEncoder(small_config(scheme="shared"),
                               pose_encoder=gen_enc).eval()
        x, y = batch(seed=6), batch(seed=7)
        with torch.no_grad():
            before = enc(x, y).mu.clone()
            gen_enc.stem.net[0].weight.add_(0.5)
            after = enc(x, y).mu
        assert (before - after).abs().max() > 1e-6

    def test_separate_scheme_is_untied(self):
        torch.manual_seed(2)
        gen_enc = UNetEncoder(3, SMALL["channels"])
        enc = PosteriorEncoder(small_config(scheme="separate")).eval()
        x, y = batch(seed=6), batch(seed=7)
        with torch.no_grad():
            before = enc(x, y).mu.clone()
            gen_enc.stem.net[0].weight.add_(0.5)
            after = enc(x, y).mu
        torch.testing.assert_close(before, after, atol=0, rtol=0)

    def test_shared_requires_encoder(self):
        with pytest.raises(ValueError):
            PosteriorEncoder(small_config(scheme="shared"))

    def test_tied_encoder_not_in_parameters(self):
        torch.manual_seed(0)
        gen_enc = UNetEncoder(3, SMALL["channels"])
        enc = PosteriorEncoder(small_config(scheme="shared"), pose_encoder=gen_enc)
        tied = {id(p) for p in gen_enc.parameters()}
        own = {id(p) for p in enc.parameters()}
        assert not (tied & own)
        enc_sep = PosteriorEncoder(small_config(scheme="separate"))
        assert sum(1 for _ in enc_sep.pose_encoder.parameters()) > 0

    def test_spatial_mismatch_rejected(self):
        enc = PosteriorEncoder(small_config())
        with pytest.raises(ValueError):
            enc(batch(), batch(size=16))

    def test_missing_pose_rejected(self):
        enc = PosteriorEncoder(small_config())
        with pytest.raises(ValueError):
            enc(batch())

    def test_pose_free_variant_ignores_y(self):
        torch.manual_seed(3)
        enc = PosteriorEncoder(small_config(use_pose=False)).eval()
        x = batch(seed=8)
        with torch.no_grad():
            a = enc(x)
            b = enc(x, batch(seed=9))
        torch.testing.assert_close(a.mu, b.mu, atol=0, rtol=0)

    def test_attribute_upsample_variant(self):
        torch.manual_seed(4)
        enc = PosteriorEncoder(small_config(attribute_in_posterior=True)).eval()
        x, y = batch(seed=1), batch(seed=2)
        with pytest.raises(ValueError):
            enc(x, y)   # a_up required
        with torch.no_grad():
            a = enc(x, y, a_up=batch(seed=3))
            b = enc(x, y, a_up=batch(seed=4))
        assert (a.mu - b.mu).abs().max() > 1e-6

    @pytest.mark.parametrize("scheme", ["early", "separate"])
    def test_conv_aggregator(self, scheme):
        torch.manual_seed(5)
        enc = PosteriorEncoder(small_config(scheme=scheme, aggregator="conv")).eval()
        with torch.no_grad():
            p = enc(batch(), batch(seed=1))
        p.validate()
        assert p.mu.shape == (2, 8)

    def test_eval_mode_deterministic(self):
        torch.manual_seed(6)
        enc = PosteriorEncoder(small_config()).eval()
        x, y = batch(), batch(seed=1)
        with torch.no_grad():
            a = enc(x, y)
            b = enc(x, y)
        torch.testing.assert_close(a.mu, b.mu, atol=0, rtol=0)
        torch.testing.assert_close(a.log_var, b.log_var, atol=0, rtol=0)

    def test_validate_rejects_nonfinite(self):
        p = PosteriorParams(torch.tensor([[float("nan")]]), torch.zeros(1, 1))
        with pytest.raises(ValueError):
            p.validate()
        with pytest.raises(ValueError):
            PosteriorParams(torch.zeros(1, 2), torch.zeros(1, 3)).validate()
