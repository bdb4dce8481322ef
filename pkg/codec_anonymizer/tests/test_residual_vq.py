import numpy as np
import pytest
import torch
from sklearn.cluster import kmeans_plusplus

from modules.errors import DimensionMismatchError, IndexOutOfRangeError, TooFewSamplesError
from modules.residual_vq import (
    Codebook,
    ResidualBottleneck,
    codebook_perplexity,
    ema_update,
    kmeans_fit,
    nearest_rows,
    quantize_nearest,
    rvq_forward,
    straight_through,
    straight_through_layer,
)


def _codebooks(num_layers, k, dim, seed):
    gen = torch.Generator().manual_seed(seed)
    layers = []
    for _ in range(num_layers):
        cb = Codebook(k, dim).double()
        cb.load_vectors(torch.randn(k, dim, generator=gen, dtype=torch.float64))
        layers.append(cb)
    return layers


# -------------------------------
# Nearest-codeword search
# -------------------------------
def _first_nearest(samples, vectors):
    """Exhaustive search; the first codeword at the minimum distance wins."""
    d2 = ((samples[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
    return np.argmax(d2 == d2.min(axis=1, keepdims=True), axis=1)


@pytest.mark.parametrize("seed", range(10))
def test_quantize_nearest_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        k, dim, t = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 257))
        vectors = rng.normal(size=(k, dim))
        if k > 1 and rng.random() < 0.3:  # duplicated rows tie exactly
            dup = rng.integers(0, k, size=int(rng.integers(1, k)))
            vectors[rng.integers(0, k, size=dup.size)] = vectors[dup]
        cb = Codebook.from_vectors(vectors, zero_codeword=bool(rng.random() < 0.5)).double()
        cb.load_vectors(torch.as_tensor(vectors))
        x = rng.normal(scale=float(rng.choice([0.1, 1.0, 10.0])), size=(t, dim))

        idx, q = quantize_nearest(torch.as_tensor(x), cb)

        np.testing.assert_array_equal(idx.numpy(), _first_nearest(x, cb.vectors.numpy()))
        torch.testing.assert_close(q, cb.vectors[idx])


def test_equidistant_codewords_resolve_to_lowest_index():
    x = torch.tensor([[100.0, -200.0, 300.0, 7.0]], dtype=torch.float64)
    u = torch.tensor([1.0, 2.0, 3.0, 0.0], dtype=torch.float64)
    vectors = torch.stack([x[0] + 50.0, x[0] + u, x[0] - 40.0, x[0] + 9.0, x[0] + u.flip(0)])
    cb = Codebook.from_vectors(vectors).double()
    cb.load_vectors(vectors)

    idx, _ = quantize_nearest(x, cb)
    assert idx.tolist() == [1]


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_integer_codebooks_break_ties_toward_lowest_index(dtype):
    # integer coordinates keep every squared distance exact, so ties are genuine
    rng = np.random.default_rng(21)
    for _ in range(300):
        dim = int(rng.integers(1, 6))
        x = rng.integers(-300, 301, size=(int(rng.integers(1, 40)), dim))
        offsets = rng.integers(-3, 4, size=(int(rng.integers(2, 12)), dim))
        anchor = x[int(rng.integers(0, x.shape[0]))]
        vectors = anchor + np.concatenate([offsets, offsets[:, ::-1]])
        cb = Codebook.from_vectors(vectors).to(dtype)
        cb.load_vectors(torch.as_tensor(vectors, dtype=dtype))

        idx, _ = quantize_nearest(torch.as_tensor(x, dtype=dtype), cb)

        np.testing.assert_array_equal(idx.numpy(), _first_nearest(x, cb.vectors.numpy().astype(np.int64)))


def test_nearest_rows_matches_quantize_nearest():
    rng = np.random.default_rng(4)
    centers = rng.integers(-5, 6, size=(9, 3)).astype(np.float64)
    samples = rng.integers(-5, 6, size=(200, 3)).astype(np.float64)
    cb = Codebook.from_vectors(centers).double()
    cb.load_vectors(torch.as_tensor(centers))

    labels = nearest_rows(samples, centers)

    np.testing.assert_array_equal(labels, _first_nearest(samples, centers))
    np.testing.assert_array_equal(labels, quantize_nearest(torch.as_tensor(samples), cb)[0].numpy())


def test_quantize_nearest_rejects_wrong_dim():
    cb = Codebook(4, 3)
    with pytest.raises(DimensionMismatchError):
        quantize_nearest(torch.zeros(2, 5), cb)


def test_zero_codeword_is_last_and_frozen():
    cb = Codebook(4, 3)
    assert cb.num_codewords == 5
    assert torch.all(cb.vectors[-1] == 0)
    ema_update(cb, torch.full((6,), 4, dtype=torch.long), torch.randn(6, 3), decay=0.5)
    assert torch.all(cb.vectors[-1] == 0)


# -------------------------------
# Residual cascade
# -------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_rvq_telescopes(seed):
    layers = _codebooks(4, 6, 3, seed)
    x = torch.randn(2, 20, 3, generator=torch.Generator().manual_seed(100 + seed), dtype=torch.float64)

    result = rvq_forward(x, layers)

    assert result.indices.shape == (4, 2, 20)
    assert int(result.indices.min()) >= 0 and int(result.indices.max()) <= 6
    torch.testing.assert_close(result.cumulative + result.residuals[-1], x, atol=1e-12, rtol=0)


def test_rvq_residual_never_grows_with_zero_codeword():
    layers = _codebooks(5, 4, 6, seed=3)
    x = torch.randn(50, 6, generator=torch.Generator().manual_seed(9), dtype=torch.float64)

    result = rvq_forward(x, layers)

    previous = x.norm(dim=-1)
    for residual in result.residuals:
        current = residual.norm(dim=-1)
        assert torch.all(current <= previous + 1e-12)
        previous = current


def test_commitment_matches_hand_example():
    cb = Codebook.from_vectors([[2.0]])
    x = torch.tensor([[1.0], [3.0]])

    result = rvq_forward(x, [cb])

    assert float(result.commitment_terms[0]) == pytest.approx(1.0)
    assert result.indices.tolist() == [[0, 0]]


def test_rvq_rejects_wrong_dim():
    with pytest.raises(DimensionMismatchError):
        rvq_forward(torch.zeros(4, 2), _codebooks(2, 3, 3, seed=0))


# -------------------------------
# Straight-through gradients
# -------------------------------
def test_straight_through_forward_and_identity_gradient():
    layers = _codebooks(3, 5, 4, seed=1)
    x = torch.randn(10, 4, dtype=torch.float64, requires_grad=True)

    result = rvq_forward(x, layers)
    out = straight_through(x, result)
    torch.testing.assert_close(out.detach(), result.cumulative)

    weights = torch.randn(10, 4, dtype=torch.float64)
    (out * weights).sum().backward()
    torch.testing.assert_close(x.grad, weights)


def test_straight_through_layer_reaches_encoder():
    layers = _codebooks(3, 5, 4, seed=2)
    x = torch.randn(10, 4, dtype=torch.float64, requires_grad=True)

    result = rvq_forward(x, layers)
    straight_through_layer(result, 1).sum().backward()

    # layer 2 input is x - q1, so its identity gradient lands on x unchanged
    torch.testing.assert_close(x.grad, torch.ones_like(x))


def test_commitment_gradient_reaches_input_only():
    layers = _codebooks(2, 5, 4, seed=4)
    x = torch.randn(8, 4, dtype=torch.float64, requires_grad=True)

    result = rvq_forward(x, layers)
    result.commitment_terms[0].backward()

    expected = 2.0 * (x.detach() - result.quantized_per_layer[0]) / x.numel()
    torch.testing.assert_close(x.grad, expected)
    assert not layers[0].vectors.requires_grad


# -------------------------------
# EMA codebook learning
# -------------------------------
def test_ema_moves_codeword_toward_assigned_mean():
    cb = Codebook.from_vectors([[0.0, 0.0], [10.0, 10.0]])
    inputs = torch.tensor([[1.0, 1.0], [3.0, 3.0]])
    before = cb.vectors[0].clone()

    ema_update(cb, torch.tensor([0, 0]), inputs, decay=0.5)

    target = inputs.mean(0)
    assert torch.norm(cb.vectors[0] - target) < torch.norm(before - target)


def test_ema_revives_dead_codes():
    cb = Codebook.from_vectors([[0.0], [5.0], [9.0]], dead_threshold=0.5)
    inputs = torch.tensor([[0.1], [0.2], [0.3], [0.4]])
    gen = torch.Generator().manual_seed(0)

    idx = torch.zeros(4, dtype=torch.long)
    assert ema_update(cb, idx, inputs, decay=0.5, generator=gen) == 0  # usage 0.5, not yet dead
    assert ema_update(cb, idx, inputs, decay=0.5, generator=gen) == 2
    for j in (1, 2):
        assert any(torch.equal(cb.vectors[j], row) for row in inputs)
        assert float(cb.cluster_size[j]) == 1.0


def test_ema_rejects_bad_decay():
    cb = Codebook(2, 2)
    with pytest.raises(ValueError):
        ema_update(cb, torch.zeros(3, dtype=torch.long), torch.zeros(3, 2), decay=1.0)


def test_ema_converges_to_constant_input():
    cb = Codebook.from_vectors([[0.0, 0.0], [5.0, 5.0]], dead_threshold=0.0).double()
    v = torch.tensor([1.5, -2.0], dtype=torch.float64)
    inputs = v.expand(6, 2)

    for _ in range(300):
        ema_update(cb, torch.zeros(6, dtype=torch.long), inputs, decay=0.9)

    torch.testing.assert_close(cb.vectors[0], v, atol=1e-5, rtol=0)


def test_usage_counts_track_batch_size():
    cb = Codebook(5, 3, dead_threshold=0.0).double()
    gen = torch.Generator().manual_seed(2)
    inputs = torch.randn(40, 3, dtype=torch.float64, generator=gen)

    for _ in range(300):
        before = float(cb.usage_counts.sum())
        idx = torch.randint(0, cb.num_codewords, (40,), generator=gen)
        ema_update(cb, idx, inputs, decay=0.9)
        assert float(cb.usage_counts.sum()) == pytest.approx(0.9 * before + 0.1 * 40, rel=1e-12)

    assert float(cb.usage_counts.sum()) == pytest.approx(40.0, rel=1e-9)


def test_ema_and_revival_are_seeded():
    def run(seed):
        torch.manual_seed(123)
        cb = Codebook(6, 2, dead_threshold=0.3).double()
        gen = torch.Generator().manual_seed(seed)
        data = torch.Generator().manual_seed(99)
        revived = []
        for _ in range(20):
            inputs = torch.randn(10, 2, dtype=torch.float64, generator=data)
            idx, _ = quantize_nearest(inputs, cb)
            revived.append(ema_update(cb, idx, inputs, decay=0.5, generator=gen))
        return cb, revived

    a, revived_a = run(7)
    b, revived_b = run(7)

    assert sum(revived_a) > 0
    assert revived_a == revived_b
    for name in ("vectors", "cluster_size", "embed_sum"):
        assert torch.equal(getattr(a, name), getattr(b, name))


# -------------------------------
# K-means
# -------------------------------
def _reference_lloyd(samples, centers, max_iter=100):
    centers = centers.copy()
    labels = None
    for _ in range(max_iter):
        d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = d2.argmin(1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            if np.any(labels == j):
                centers[j] = samples[labels == j].mean(0)
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return float(d2.min(1).sum())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kmeans_matches_reference_lloyd(seed):
    rng = np.random.default_rng(seed)
    blobs = rng.normal(0.0, 6.0, size=(4, 3))
    samples = np.concatenate([b + rng.normal(0.0, 0.3, size=(40, 3)) for b in blobs])

    _, inertia = kmeans_fit(samples, 4, seed, tol=0.0)
    seeds, _ = kmeans_plusplus(samples, 4, random_state=seed)

    assert inertia == pytest.approx(_reference_lloyd(samples, seeds), rel=1e-9, abs=1e-9)


def test_kmeans_is_seeded():
    samples = np.random.default_rng(7).normal(size=(60, 2))
    a, _ = kmeans_fit(samples, 5, seed=11)
    b, _ = kmeans_fit(samples, 5, seed=11)
    np.testing.assert_array_equal(a, b)


def test_kmeans_needs_enough_samples():
    with pytest.raises(TooFewSamplesError):
        kmeans_fit(np.zeros((3, 2)), 4, seed=0)


# -------------------------------
# Perplexity and the bottleneck module
# -------------------------------
def test_perplexity_bounds():
    layers = _codebooks(2, 4, 2, seed=0)
    result = rvq_forward(torch.zeros(8, 2, dtype=torch.float64), layers)

    result.indices = torch.tensor([[1] * 8, [0, 1, 2, 3, 0, 1, 2, 3]])
    assert codebook_perplexity(result, 0) == pytest.approx(1.0)
    assert codebook_perplexity(result, 1) == pytest.approx(4.0)
    with pytest.raises(IndexOutOfRangeError):
        codebook_perplexity(result, 2)


def test_perplexity_of_uneven_usage():
    layers = _codebooks(2, 4, 2, seed=0)
    result = rvq_forward(torch.zeros(4, 2, dtype=torch.float64), layers)

    result.indices = torch.tensor([[0, 0, 1, 2], [3, 3, 3, 3]])
    assert codebook_perplexity(result, 0) == pytest.approx(2.0 ** 1.5)


def test_bottleneck_needs_two_layers():
    with pytest.raises(DimensionMismatchError):
        ResidualBottleneck(1, 4, 3)


def test_bottleneck_only_learns_in_train_mode():
    torch.manual_seed(0)
    bottleneck = ResidualBottleneck(2, 4, 3)
    x = torch.randn(2, 10, 3)
    frozen = [cb.vectors.clone() for cb in bottleneck.layers]

    bottleneck.eval()
    bottleneck(x)
    assert all(torch.equal(a, cb.vectors) for a, cb in zip(frozen, bottleneck.layers))

    bottleneck.train()
    bottleneck(x)
    assert not torch.equal(frozen[0], bottleneck.layers[0].vectors)


def test_kmeans_warm_start_fits_first_layer():
    torch.manual_seed(0)
    bottleneck = ResidualBottleneck(2, 4, 3).double()
    x = torch.randn(50, 3, dtype=torch.float64)

    bottleneck.kmeans_warm_start(x, seed=3)

    centers, _ = kmeans_fit(x.numpy(), 4, seed=3)
    torch.testing.assert_close(bottleneck.layers[0].vectors[:4], torch.as_tensor(centers))
    assert torch.all(bottleneck.layers[0].vectors[-1] == 0)
    assert torch.isfinite(bottleneck.layers[1].vectors).all()
