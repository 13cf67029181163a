import numpy as np
import pytest
import torch

import seedshift as ss
from seedshift.config import HistogramConfig
from seedshift.losses import ETA_MODE_UNIFORM, save_domain_spec, load_domain_spec

from oracles import (
    central_difference_grad,
    dense_sobel,
    relative_grad_error,
    soft_histogram_oracle,
)


def rand_image(shape=(8, 8, 3), seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen, dtype=dtype)


# --------------------------------------------------------------------- sobel

def test_sobel_constant_image_is_zero():
    img = torch.full((8, 8, 3), 0.37, dtype=torch.float64)
    assert torch.allclose(ss.sobel(img), torch.zeros(8, 8, 2, dtype=torch.float64))


def test_sobel_vertical_step_edge_response():
    h = 0.25
    img = torch.zeros((8, 8, 3), dtype=torch.float64)
    img[:, 4:, :] = h  # luminance step of height h at column 4
    grad = ss.sobel(img)
    gx = grad[..., 0]
    # edge-adjacent columns respond with magnitude 4h, all else is zero
    assert torch.allclose(gx[:, 3].abs(), torch.full((8,), 4 * h, dtype=torch.float64))
    assert torch.allclose(gx[:, 4].abs(), torch.full((8,), 4 * h, dtype=torch.float64))
    assert torch.allclose(gx[:, :3], torch.zeros(8, 3, dtype=torch.float64))
    assert torch.allclose(gx[:, 5:], torch.zeros(8, 3, dtype=torch.float64))
    assert torch.allclose(grad[..., 1], torch.zeros(8, 8, dtype=torch.float64))


def test_sobel_single_bright_pixel_stamp():
    img = torch.zeros((7, 7, 3), dtype=torch.float64)
    img[3, 3, :] = 1.0
    grad = ss.sobel(img)
    expected = torch.from_numpy(dense_sobel(img.numpy()))
    assert torch.allclose(grad, expected, atol=1e-12)
    # classic 3x3 stamp around the pixel: corners 1, edge-centers 2 in |gx|
    assert abs(float(grad[2, 2, 0])) == pytest.approx(1.0)
    assert abs(float(grad[3, 2, 0])) == pytest.approx(2.0)
    assert float(grad[3, 3, 0]) == pytest.approx(0.0)


def test_sobel_matches_dense_convolution_oracle():
    img = rand_image(seed=3)
    assert torch.allclose(ss.sobel(img), torch.from_numpy(dense_sobel(img.numpy())), atol=1e-12)


# ------------------------------------------------------------------ ST losses

def test_st_structure_loss_zero_on_matching_luminance():
    img = rand_image(seed=1)
    assert float(ss.st_structure_loss(ss.sobel(img), img)) == pytest.approx(0.0, abs=1e-18)


def test_st_structure_loss_invariant_to_constant_offset():
    img = rand_image(seed=2) * 0.5
    shifted = img + 0.2
    loss = float(ss.st_structure_loss(ss.sobel(img), shifted))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_st_structure_loss_fixture_oracle():
    a, b = rand_image(seed=4), rand_image(seed=5)
    expected = float(((dense_sobel(a.numpy()) - dense_sobel(b.numpy())) ** 2).sum())
    assert float(ss.st_structure_loss(ss.sobel(a), b)) == pytest.approx(expected, rel=1e-12)


def test_st_appearance_loss_cases():
    mean = ss.Latent(torch.zeros((4, 4, 4), dtype=torch.float64), 0)
    gen = torch.zeros((4, 4, 4), dtype=torch.float64)
    assert float(ss.st_appearance_loss(mean, gen)) == 0.0
    gen[1, 2, 3] = 1.0
    assert float(ss.st_appearance_loss(mean, gen)) == pytest.approx(1.0)
    a, b = rand_image((4, 4, 4), seed=6), rand_image((4, 4, 4), seed=7)
    expected = float(((a.numpy() - b.numpy()) ** 2).sum())
    assert float(ss.st_appearance_loss(ss.Latent(a, 0), b)) == pytest.approx(expected, rel=1e-12)


def test_to_structure_loss_cases():
    a = ss.Latent(torch.ones((3, 3, 4), dtype=torch.float64), 500)
    b = ss.Latent(torch.ones((3, 3, 4), dtype=torch.float64), 500)
    assert float(ss.to_structure_loss(a, b)) == 0.0
    c = ss.Latent(torch.ones((3, 3, 4), dtype=torch.float64) + 0.5, 500)
    assert float(ss.to_structure_loss(a, c)) == pytest.approx(36 * 0.25)
    with pytest.raises(ValueError):
        ss.to_structure_loss(a, ss.Latent(torch.ones((3, 3, 4)), 400))


# -------------------------------------------------------------- soft histogram

def test_soft_histogram_mass_sums_to_one():
    gen = torch.Generator().manual_seed(8)
    for _ in range(5):
        vals = torch.randn(64, generator=gen, dtype=torch.float64) * 2
        mass = ss.soft_histogram(vals, bins=64, value_range=(-4, 4))
        assert float(mass.sum()) == pytest.approx(1.0, abs=1e-6)
        assert float(mass.min()) >= 0.0


def test_soft_histogram_concentrates_at_center_bin():
    # all values at the center of bin 5 of 8 over (0,8): centers at 0.5..7.5
    vals = torch.full((32,), 5.5, dtype=torch.float64)
    mass = ss.soft_histogram(vals, bins=8, value_range=(0, 8))
    assert int(mass.argmax()) == 5
    assert float(mass[5]) > float(sorted(mass.tolist())[-2])


def test_soft_histogram_symmetry_under_reflection():
    gen = torch.Generator().manual_seed(9)
    half = torch.rand(16, generator=gen, dtype=torch.float64)
    vals = torch.cat([half, -half])  # symmetric about 0 = range midpoint
    mass = ss.soft_histogram(vals, bins=16, value_range=(-2, 2))
    assert torch.allclose(mass, mass.flip(0), atol=1e-12)


def test_soft_histogram_permutation_invariance():
    gen = torch.Generator().manual_seed(10)
    vals = torch.randn(40, generator=gen, dtype=torch.float64)
    perm = vals[torch.randperm(40, generator=gen)]
    assert torch.allclose(
        ss.soft_histogram(vals, 32, (-4, 4)), ss.soft_histogram(perm, 32, (-4, 4)), atol=1e-14
    )


def test_soft_histogram_matches_kernel_oracle():
    gen = torch.Generator().manual_seed(11)
    vals = torch.randn(16, generator=gen, dtype=torch.float64)
    bw = 8.0 / 8  # bin width
    mass = ss.soft_histogram(vals, bins=8, value_range=(-4, 4), bandwidth=bw)
    expected = soft_histogram_oracle(vals.numpy(), 8, -4.0, 4.0, bw)
    assert np.allclose(mass.numpy(), expected, atol=1e-10)


def test_soft_histogram_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ss.soft_histogram(torch.zeros(0), 8, (-1, 1))
    with pytest.raises(ValueError):
        ss.soft_histogram(torch.zeros(4), 8, (1, -1))
    with pytest.raises(ValueError):
        ss.soft_histogram(torch.zeros(4), 8, (-1, 1), bandwidth=0.0)


# ---------------------------------------------------------- TO appearance loss

def test_to_appearance_loss_zero_on_identical():
    lat = ss.Latent(rand_image((4, 4, 4), seed=12), 0)
    eta = torch.full((4,), 0.25, dtype=torch.float64)
    assert float(ss.to_appearance_loss(lat, lat, eta)) == pytest.approx(0.0, abs=1e-18)


def test_to_appearance_loss_one_hot_eta_ignores_other_channels():
    a = rand_image((4, 4, 4), seed=13)
    b = a.clone()
    b[..., 2] += 0.5  # difference only in channel 2
    eta = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)  # one-hot on channel 1
    loss = float(ss.to_appearance_loss(ss.Latent(a, 0), ss.Latent(b, 0), eta))
    assert loss == pytest.approx(0.0, abs=1e-18)


def test_to_appearance_loss_matches_chained_oracle():
    a = rand_image((4, 4, 4), seed=14)
    b = rand_image((4, 4, 4), seed=15)
    cfg = HistogramConfig(bins=16, lo=-1.0, hi=2.0, bandwidth=0.25)
    eta = torch.full((4,), 0.25, dtype=torch.float64)
    expected = 0.0
    for c in range(4):
        ha = soft_histogram_oracle(a[..., c].numpy(), 16, -1.0, 2.0, 0.25)
        hb = soft_histogram_oracle(b[..., c].numpy(), 16, -1.0, 2.0, 0.25)
        expected += 0.25 * float(((ha - hb) ** 2).sum())
    got = float(ss.to_appearance_loss(ss.Latent(a, 0), ss.Latent(b, 0), eta, cfg))
    assert got == pytest.approx(expected, rel=1e-9)


# ----------------------------------------------------------------------- eta

def latents_from(arrays):
    return [ss.Latent(torch.as_tensor(a, dtype=torch.float64), 0) for a in arrays]


def test_eta_uniform_fallback_on_identical_domains():
    examples = latents_from([np.random.default_rng(0).normal(size=(4, 4, 4)) for _ in range(3)])
    eta = ss.compute_eta(examples, examples)
    assert torch.allclose(eta, torch.full((4,), 0.25, dtype=torch.float64))


def test_eta_one_hot_when_single_channel_differs():
    rng = np.random.default_rng(1)
    base = [rng.normal(size=(4, 4, 4)) for _ in range(4)]
    shifted = [a.copy() for a in base]
    for a in shifted:
        a[..., 2] += 1.5
    eta = ss.compute_eta(latents_from(base), latents_from(shifted))
    assert float(eta[2]) == pytest.approx(1.0, abs=1e-9)
    assert float(eta.sum()) == pytest.approx(1.0, abs=1e-12)


def test_eta_matches_brute_force_statistic(toy_world):
    codec = toy_world.backend.codec
    src = [codec.encode(torch.from_numpy(s.image)) for s in toy_world.day[8:13]]
    tgt = [codec.encode(torch.from_numpy(s.image)) for s in toy_world.night[8:13]]
    eta = ss.compute_eta(src, tgt)
    src_np = np.stack([s.values.numpy() for s in src]).astype(np.float64)
    tgt_np = np.stack([s.values.numpy() for s in tgt]).astype(np.float64)
    raw = np.abs(tgt_np.mean(axis=(0, 1, 2)) - src_np.mean(axis=(0, 1, 2)))
    assert np.allclose(eta.numpy(), raw / raw.sum(), atol=1e-9)


def test_eta_invariant_under_example_permutation():
    rng = np.random.default_rng(2)
    src = [rng.normal(size=(3, 3, 4)) for _ in range(4)]
    tgt = [rng.normal(size=(3, 3, 4)) for _ in range(4)]
    e1 = ss.compute_eta(latents_from(src), latents_from(tgt))
    e2 = ss.compute_eta(latents_from(src[::-1]), latents_from(tgt[2:] + tgt[:2]))
    assert torch.allclose(e1, e2, atol=1e-12)


# ---------------------------------------------------------------- domain spec

def test_build_domain_spec_single_example_mean(toy_world):
    backend = toy_world.backend
    img = toy_world.night[8].image
    spec = ss.build_domain_spec("night", backend.condition_for("night"), [img],
                               backend.codec, [toy_world.day[8].image])
    assert torch.equal(spec.mean_latent.values, spec.example_latents[0].values)


def test_build_domain_spec_mean_of_five(toy_world):
    spec = toy_world.night_spec
    assert len(spec.example_latents) == 5  # few-shot operating point
    stacked = torch.stack([e.values for e in spec.example_latents])
    assert torch.allclose(spec.mean_latent.values, stacked.mean(dim=0), atol=1e-6)
    assert float(spec.eta.sum()) == pytest.approx(1.0, abs=1e-9)


def test_domain_spec_validates_mean_and_eta():
    lat = latents_from([np.zeros((2, 2, 4)), np.ones((2, 2, 4))])
    good_mean = ss.Latent(torch.full((2, 2, 4), 0.5, dtype=torch.float64), 0)
    eta = torch.full((4,), 0.25, dtype=torch.float64)
    ss.DomainSpec("x", ss.Condition(torch.zeros(2), "x"), lat, good_mean, eta)
    with pytest.raises(ValueError):
        bad_mean = ss.Latent(torch.zeros((2, 2, 4), dtype=torch.float64), 0)
        ss.DomainSpec("x", ss.Condition(torch.zeros(2), "x"), lat, bad_mean, eta)
    with pytest.raises(ValueError):
        ss.DomainSpec("x", ss.Condition(torch.zeros(2), "x"), lat, good_mean,
                      torch.tensor([0.5, 0.5, 0.25, -0.25], dtype=torch.float64))


def test_domain_spec_archive_roundtrip(tmp_path, toy_world):
    spec = toy_world.night_spec
    path = str(tmp_path / "night.npz")
    save_domain_spec(spec, path)
    loaded = load_domain_spec(path)
    assert loaded.label == "night"
    assert loaded.eta_mode == spec.eta_mode
    assert torch.equal(loaded.mean_latent.values, spec.mean_latent.values)
    assert torch.equal(loaded.eta, spec.eta)
    assert torch.equal(loaded.condition.embedding, spec.condition.embedding)
    assert len(loaded.example_latents) == 5


def test_uniform_fallback_recorded_in_mode(toy_world):
    backend = toy_world.backend
    img = toy_world.day[8].image
    spec = ss.build_domain_spec("day", backend.condition_for("day"), [img],
                               backend.codec, [img])
    assert spec.eta_mode == ETA_MODE_UNIFORM


# ----------------------------------------------------------- gradient checks

def torch_grad(loss_fn, x0):
    x = x0.clone().requires_grad_(True)
    loss_fn(x).backward()
    return x.grad.detach().numpy()


def numeric_grad(loss_fn, x0, h=1e-4):
    def f(arr):
        return float(loss_fn(torch.from_numpy(arr.copy())))
    return central_difference_grad(f, x0.numpy().copy(), h)


def test_gradient_st_structure_loss():
    src_grad = ss.sobel(rand_image(seed=20)).detach()
    x0 = rand_image(seed=21)
    fn = lambda img: ss.st_structure_loss(src_grad, img)
    assert relative_grad_error(torch_grad(fn, x0), numeric_grad(fn, x0)) <= 1e-3


def test_gradient_st_appearance_loss():
    mean = ss.Latent(rand_image((8, 8, 4), seed=22), 0)
    x0 = rand_image((8, 8, 4), seed=23)
    fn = lambda z: ss.st_appearance_loss(mean, z)
    assert relative_grad_error(torch_grad(fn, x0), numeric_grad(fn, x0)) <= 1e-3


def test_gradient_to_structure_loss():
    ref = ss.Latent(rand_image((8, 8, 4), seed=24), 100)
    x0 = rand_image((8, 8, 4), seed=25)
    fn = lambda z: ss.to_structure_loss(ss.Latent(z, 100), ref)
    assert relative_grad_error(torch_grad(fn, x0), numeric_grad(fn, x0)) <= 1e-3


def test_gradient_to_appearance_loss_through_soft_histogram():
    ref = ss.Latent(rand_image((8, 8, 4), seed=26), 0)
    eta = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=torch.float64)
    cfg = HistogramConfig(bins=16, lo=-1.0, hi=2.0)
    x0 = rand_image((8, 8, 4), seed=27)
    fn = lambda z: ss.to_appearance_loss(ss.Latent(z, 0), ref, eta, cfg)
    assert relative_grad_error(torch_grad(fn, x0), numeric_grad(fn, x0)) <= 1e-3
