import numpy as np
import pytest

from trinas import autodiff as ad
from trinas import cig
from trinas.search_space import ArchParams, SupernetSpec


SPEC = cig.GeneratorSpec(num_classes=3, image_shape=(8, 8, 1),
                         noise_dim=4, embed_dim=2, capacity="small",
                         base_channels=4)

TRUNK = SupernetSpec(num_cells=1, num_nodes=4, channels=4, num_classes=3,
                     in_shape=(8, 8, 1),
                     ops=("avg_pool_3x3", "identity", "zero"))


def _players(seed=0):
    rng = np.random.default_rng(seed)
    gen = cig.Generator(SPEC)
    disc = cig.Discriminator(TRUNK)
    return (gen, disc, gen.init_weights(rng), disc.init_weights(rng),
            ArchParams.init(TRUNK, rng))


def test_spec_rejects_odd_sizes_for_conv_capacities():
    with pytest.raises(ValueError):
        cig.GeneratorSpec(num_classes=2, image_shape=(7, 8, 1),
                          capacity="small")
    with pytest.raises(ValueError):
        cig.GeneratorSpec(num_classes=2, image_shape=(6, 6, 1),
                          capacity="medium")
    # tiny has no spatial constraint
    cig.GeneratorSpec(num_classes=2, image_shape=(7, 5, 1), capacity="tiny")


def test_generator_output_shape_and_range():
    gen, _, gws, _, _ = _players()
    rng = np.random.default_rng(1)
    labels = np.array([0, 1, 2, 0])
    out = gen.forward(gws, labels, ad.constant(
        rng.standard_normal((4, SPEC.noise_dim))))
    assert out.shape == (4, 1, 8, 8)
    assert np.abs(out.data).max() < 1.0


def test_capacity_tiers_order_parameter_counts():
    counts = []
    for cap in ("tiny", "small", "medium"):
        spec = cig.GeneratorSpec(num_classes=3, image_shape=(8, 8, 1),
                                 capacity=cap)
        gen = cig.Generator(spec)
        ws = gen.init_weights(np.random.default_rng(0))
        counts.append(ws.num_params)
    assert counts[0] != counts[1] != counts[2]
    # the medium tier must cost more convolution weight than small
    assert counts[2] > counts[1]


def test_generation_is_independent_of_batch_composition():
    """Class c generated alone equals class c inside a mixed batch.

    Equality is up to BLAS rounding: matrix kernels block differently by
    batch size, so agreement is to machine precision, not bitwise.
    """
    gen, _, gws, _, _ = _players(2)
    rng = np.random.default_rng(3)
    noise = rng.standard_normal((6, SPEC.noise_dim))
    labels = np.array([0, 1, 2, 0, 1, 2])
    full = gen.forward(gws, labels, ad.constant(noise)).data
    alone = gen.forward(gws, labels[2:3], ad.constant(noise[2:3])).data
    np.testing.assert_allclose(full[2:3], alone, atol=1e-12, rtol=0)


def test_generate_keeps_noise_for_replay():
    gen, _, gws, _, _ = _players(4)
    batch = cig.generate(gen, gws, [0, 2, 1], rng=np.random.default_rng(5))
    assert batch.images.shape == (3, 8, 8, 1)
    replay = gen.forward(gws, batch.labels, ad.constant(batch.noise)).data
    np.testing.assert_array_equal(batch.images,
                                  replay.transpose(0, 2, 3, 1))


def test_class_slice_picks_matching_rows():
    gen, _, gws, _, _ = _players(6)
    batch = cig.generate(gen, gws, [1, 0, 1, 1], rng=np.random.default_rng(7))
    imgs, noise = batch.class_slice(1)
    assert imgs.shape[0] == 3 and noise.shape[0] == 3
    np.testing.assert_array_equal(imgs, batch.images[[0, 2, 3]])


def test_generate_requires_noise_source():
    gen, _, gws, _, _ = _players(8)
    with pytest.raises(ValueError):
        cig.generate(gen, gws, [0, 1])


def test_discriminator_conditions_on_label():
    _, disc, _, hws, arch = _players(9)
    rng = np.random.default_rng(10)
    x = rng.uniform(-1, 1, (5, 1, 8, 8))
    a = disc.forward(hws, arch, ad.constant(x), np.zeros(5, dtype=int)).data
    b = disc.forward(hws, arch, ad.constant(x), np.ones(5, dtype=int)).data
    assert not np.allclose(a, b)


def test_gan_value_is_negative_binary_cross_entropy():
    gen, disc, gws, hws, arch = _players(11)
    rng = np.random.default_rng(12)
    labels = np.array([0, 1, 2])
    real = rng.uniform(-1, 1, (3, 8, 8, 1))
    noise = rng.standard_normal((3, SPEC.noise_dim))
    v = cig.gan_value(gen, disc, arch, gws, hws, real, labels, noise)
    assert v.item() < 0.0  # minus a sum of positive cross entropies


def test_gan_step_moves_players_in_opposite_directions():
    """G's update lowers V, H's raises it, from the same graph."""
    gen, disc, gws, hws, arch = _players(13)
    rng = np.random.default_rng(14)
    labels = np.array([0, 1, 2, 0])
    real = rng.uniform(-1, 1, (4, 8, 8, 1))
    noise = rng.standard_normal((4, SPEC.noise_dim))

    def value():
        return cig.gan_value(gen, disc, arch, gws, hws, real, labels,
                             noise).item()

    g_before = {k: v.copy() for k, v in gws.snapshot().items()}
    stats = cig.gan_step(gen, disc, arch, gws, hws, real, labels, noise,
                         xi_g=1e-3, xi_h=0.0)
    v_after_g = value()
    assert v_after_g < stats["value"]

    # restore G, step only H: value must rise
    for k, t in gws.items():
        t.data[:] = g_before[k]
    stats = cig.gan_step(gen, disc, arch, gws, hws, real, labels, noise,
                         xi_g=0.0, xi_h=1e-3)
    assert value() > stats["value"]


def test_gan_step_reports_consistent_losses():
    gen, disc, gws, hws, arch = _players(15)
    rng = np.random.default_rng(16)
    labels = np.array([0, 1])
    stats = cig.gan_step(gen, disc, arch, gws, hws,
                         rng.uniform(-1, 1, (2, 8, 8, 1)), labels,
                         rng.standard_normal((2, SPEC.noise_dim)),
                         xi_g=0.0, xi_h=0.0)
    assert stats["loss_g"] == -stats["loss_h"] == stats["value"]
    assert stats["grad_norm_g"] > 0 and stats["grad_norm_h"] > 0
