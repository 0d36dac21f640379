import math

import pytest
import torch

from affectdiff.diffusion import (EMA, Conditioning, UNet1d, build_schedule, ddim_sample, ddim_timesteps,
                                  diffusion_loss, ema_update, guided_noise, q_sample)


@pytest.mark.parametrize("T", [10, 100, 1000])
def test_schedule_invariants(T):
    s = build_schedule(T)
    ab = s.alpha_bar
    assert ab[0].item() == 1.0
    assert torch.all(ab[1:] < ab[:-1])
    assert torch.all(ab > 0) and torch.all(ab <= 1)
    assert torch.all(s.betas <= 0.999)


def test_schedule_endpoint_against_closed_form():
    T, s = 1000, 0.008
    f = lambda t: math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2  # noqa: E731
    ab = build_schedule(T).alpha_bar
    assert ab[T].item() < 1e-3
    # away from the clipped tail the cumulative product equals f(t)/f(0)
    for t in (1, 250, 500, 900):
        assert abs(ab[t].item() - f(t) / f(0)) < 1e-12


def test_q_sample_examples(double_precision):
    sched = build_schedule(1000)
    z0, eps = torch.randn(3, 4), torch.randn(3, 4)
    assert math.sqrt(sched.alpha_bar[0]) > 0.9995
    torch.testing.assert_close(q_sample(z0, 0, eps, sched), z0)
    sched.alpha_bar[5] = 0.25
    zt = q_sample(torch.tensor(2.0), 5, torch.tensor(1.0), sched)
    assert abs(zt.item() - (1.0 + math.sqrt(0.75))) < 1e-12
    with pytest.raises(ValueError):
        q_sample(z0, 1001, eps, sched)


def test_q_sample_second_moment(double_precision):
    sched = build_schedule(100)
    t, n = 40, 10_000
    z0 = torch.linspace(-1, 1, 8)
    eps = torch.randn(n, 8, generator=torch.Generator().manual_seed(1))
    sq = (q_sample(z0.expand(n, 8), t, eps, sched) ** 2).sum(-1)
    ab = sched.alpha_bar[t].item()
    expected = ab * (z0 ** 2).sum().item() + (1 - ab) * 8
    assert abs(sq.mean().item() - expected) < 3 * sq.std().item() / math.sqrt(n)


class Oracle(torch.nn.Module):
    """Stub noise model that can see the true noise."""

    null_token = 6

    def __init__(self, eps=None):
        super().__init__()
        self.eps = eps

    def forward(self, z_t, t, y, w):
        return self.eps if self.eps is not None else torch.zeros_like(z_t)


def test_diffusion_loss_with_stub_models():
    sched = build_schedule(100)
    z0, y, w = torch.randn(64, 8, 4), torch.zeros(64, dtype=torch.long), torch.full((64, 3), 1 / 3)
    g = torch.Generator().manual_seed(0)
    # replay the loss's draws (t, then eps) to hand the stub the exact noise
    g2 = torch.Generator().manual_seed(0)
    torch.randint(1, 101, (64,), generator=g2)
    eps = torch.randn(z0.shape, generator=g2)
    assert diffusion_loss(Oracle(eps), z0, y, w, sched, g).item() == 0.0
    zero_loss = diffusion_loss(Oracle(), z0, y, w, sched, torch.Generator().manual_seed(1))
    n = z0.numel()
    assert abs(zero_loss.item() - 1.0) < 3 * math.sqrt(2 / n)


def test_null_token_dropout_rate():
    seen = []

    class Spy(Oracle):
        def forward(self, z_t, t, y, w):
            seen.append(y.clone())
            return torch.zeros_like(z_t)

    sched = build_schedule(50)
    n = 20_000
    diffusion_loss(Spy(), torch.zeros(n, 1, 1), torch.zeros(n, dtype=torch.long), torch.zeros(n, 3), sched,
                   torch.Generator().manual_seed(0), null_prob=0.2)
    rate = (seen[0] == Spy.null_token).double().mean().item()
    assert abs(rate - 0.2) < 3 * math.sqrt(0.2 * 0.8 / n)


def test_unet_shapes_for_any_length():
    net = UNet1d(8, 6, base=8)
    for L in (8, 50, 13, 1):
        out = net(torch.randn(2, L, 8), torch.tensor([1, 5]), torch.tensor([0, 6]), torch.rand(2, 3))
        assert out.shape == (2, L, 8)


def test_conditioning_is_exact_sum():
    c = Conditioning(6, 16)
    t, y, w = torch.tensor([3, 70]), torch.tensor([1, 6]), torch.rand(2, 3)
    a, b, d = c.parts(t, y, w)
    assert torch.equal(c(t, y, w), a + b + d)


def test_guidance_algebra(double_precision):
    ec, eu = torch.randn(4, 5), torch.randn(4, 5)
    assert torch.equal(guided_noise(ec, eu, 0.0), eu)
    assert (guided_noise(ec, eu, 1.0) - ec).abs().max() < 1e-12
    s = torch.tensor([0.5, 2.0, 3.5])
    vals = torch.stack([guided_noise(ec, eu, float(x)) for x in s])
    # affine in s: second differences vanish on an evenly spaced grid
    torch.testing.assert_close(vals[1] - vals[0], (vals[2] - vals[1]) * (1.5 / 1.5))


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 20 and len(ts) == 50
    assert all(a > b for a, b in zip(ts, ts[1:]))
    small = ddim_timesteps(20, 50)
    assert small == sorted(set(small), reverse=True) and min(small) >= 1


def test_ddim_is_deterministic_and_guidance_scale_one_is_conditional(double_precision):
    torch.manual_seed(0)
    net = UNet1d(4, 3, base=8).double()
    sched = build_schedule(50)
    w = torch.full((3,), 1 / 3)
    run = lambda s: ddim_sample(net, 2, 1, w, sched, 8, 4, 10, s, torch.Generator().manual_seed(5),  # noqa: E731
                                torch.float64)
    a, b = run(3.0), run(3.0)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert (run(1.0) - run(None)).abs().max() < 1e-12
    with pytest.raises(ValueError):
        ddim_sample(net, 0, 1, w, sched, 8, 4)


def test_ema_fixed_points_and_one_step():
    s, live = [torch.randn(5)], [torch.randn(5)]
    before = s[0].clone()
    ema_update(s, live, 1.0)
    assert torch.equal(s[0], before)
    same = [live[0].clone()]
    ema_update(same, live, 0.999)
    assert torch.equal(same[0], live[0])
    z = [torch.zeros(1)]
    ema_update(z, [torch.ones(1)], 0.999)
    assert z[0].item() == torch.tensor(0.001).item()
    with pytest.raises(ValueError):
        ema_update([torch.zeros(2)], [torch.zeros(3)])


def test_ema_module_is_frozen_copy():
    net = UNet1d(4, 3, base=8)
    ema = EMA(net, 0.5)
    assert all(not p.requires_grad for p in ema.parameters())
    assert [p.shape for p in ema.shadow.parameters()] == [p.shape for p in net.parameters()]
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
    before = [p.clone() for p in ema.shadow.parameters()]
    ema.update(net)
    for b, s, p in zip(before, ema.shadow.parameters(), net.parameters()):
        torch.testing.assert_close(s, 0.5 * b + 0.5 * p)
