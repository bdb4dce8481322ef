# modules/residual_vq.py
"""
Residual vector quantization bottleneck.

N cascaded codebooks, each quantizing what the previous ones left over.
Codewords are learned by EMA (not by gradient); the encoder is pulled toward
its codewords by the commitment terms, and gradients reach it through a
straight-through estimator.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans, kmeans_plusplus
from threadpoolctl import threadpool_limits

from modules.errors import DimensionMismatchError, IndexOutOfRangeError, TooFewSamplesError
from utils.log_utils import get_logger

logger = get_logger(__name__)

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6
LAPLACE_EPS = 1e-5
DISTANCE_CHUNK_ELEMENTS = 1 << 22  # rows x codewords x dims held at once


# -------------------------
# Nearest-row search
# -------------------------
def _chunk_rows(num_codewords: int, dim: int) -> int:
    return max(1, DISTANCE_CHUNK_ELEMENTS // max(1, num_codewords * dim))


def nearest_rows(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """
    Index of the nearest row of `centers` for every row of `samples`, by the
    direct squared distance sum((x - c)^2). Exact ties go to the lowest index.
    """
    samples = np.asarray(samples)
    centers = np.asarray(centers)
    step = _chunk_rows(*centers.shape)
    labels = np.empty(samples.shape[0], dtype=np.int64)
    for start in range(0, samples.shape[0], step):
        block = samples[start:start + step]
        d2 = np.sum((block[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        labels[start:start + step] = np.argmin(d2, axis=1)
    return labels


# -------------------------
# K-means
# -------------------------
def kmeans_fit(samples: np.ndarray, k: int, seed: int,
               max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL) -> Tuple[np.ndarray, float]:
    """
    Lloyd's algorithm (scikit-learn) from k-means++ seeds drawn with `seed`.
    Stops after `max_iter` iterations, when the assignment is stable, or when
    the centre shift falls under `tol` (relative to the data variance; 0 runs
    to a stable assignment). Returns (centers, inertia).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DimensionMismatchError(f"k-means needs an M x D matrix, got shape {samples.shape}")
    m = samples.shape[0]
    if k < 1 or m < k:
        raise TooFewSamplesError(f"k-means needs M >= k >= 1, got M={m} k={k}")

    # one OpenMP thread keeps the Lloyd reduction order fixed
    with threadpool_limits(limits=1, user_api="openmp"):
        seeds, _ = kmeans_plusplus(samples, k, random_state=seed)
        km = KMeans(n_clusters=k, init=seeds, n_init=1, max_iter=max_iter, tol=tol,
                    algorithm="lloyd", random_state=seed).fit(samples)
    return np.asarray(km.cluster_centers_, dtype=np.float64), float(km.inertia_)


# -------------------------
# Codebook
# -------------------------
class Codebook(nn.Module):
    """
    K x D codewords with EMA statistics. With `zero_codeword` a frozen all-zero
    row is appended (index K), so quantizing can never grow a residual.
    """

    def __init__(self, codebook_size: int, dim: int, zero_codeword: bool = True,
                 decay: float = 0.99, dead_threshold: float = 0.01):
        super().__init__()
        if codebook_size < 1 or dim < 1:
            raise DimensionMismatchError(f"codebook needs K >= 1 and D >= 1, got {codebook_size}x{dim}")
        self.codebook_size = codebook_size
        self.dim = dim
        self.zero_codeword = zero_codeword
        self.decay = decay
        self.dead_threshold = dead_threshold
        total = codebook_size + (1 if zero_codeword else 0)

        vectors = torch.randn(total, dim) / np.sqrt(dim)
        if zero_codeword:
            vectors[-1] = 0.0
        self.register_buffer("vectors", vectors)
        self.register_buffer("cluster_size", torch.ones(total))
        self.register_buffer("embed_sum", vectors.clone())

    @classmethod
    def from_vectors(cls, vectors, zero_codeword: bool = False, **kwargs) -> "Codebook":
        vectors = torch.as_tensor(np.asarray(vectors), dtype=torch.get_default_dtype())
        cb = cls(vectors.shape[0], vectors.shape[1], zero_codeword=zero_codeword, **kwargs)
        cb.load_vectors(vectors)
        return cb

    @property
    def num_codewords(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def usage_counts(self) -> torch.Tensor:
        return self.cluster_size

    @torch.no_grad()
    def load_vectors(self, vectors) -> None:
        """Overwrite the learnable codewords (and reset their EMA state)."""
        vectors = torch.as_tensor(vectors, dtype=self.vectors.dtype, device=self.vectors.device)
        if tuple(vectors.shape) != (self.codebook_size, self.dim):
            raise DimensionMismatchError(
                f"expected codewords of shape {(self.codebook_size, self.dim)}, got {tuple(vectors.shape)}"
            )
        self.vectors[: self.codebook_size] = vectors
        self.cluster_size.fill_(1.0)
        self.embed_sum.copy_(self.vectors)


def kmeans_init(samples: np.ndarray, k: int, seed: int) -> Codebook:
    centers, _ = kmeans_fit(samples, k, seed)
    return Codebook.from_vectors(centers, zero_codeword=False)


# -------------------------
# Quantization
# -------------------------
def quantize_nearest(inputs: torch.Tensor, codebook: Codebook) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Nearest codeword per row of a (T, D) input by the direct squared distance;
    exact ties go to the lowest index. Returns (indices (T,), quantized (T, D)).
    No gradient flows through.
    """
    vectors = codebook.vectors
    if inputs.dim() != 2 or inputs.shape[1] != vectors.shape[1]:
        raise DimensionMismatchError(
            f"input of shape {tuple(inputs.shape)} does not match codebook dimension {vectors.shape[1]}"
        )
    with torch.no_grad():
        flat = inputs.detach().to(vectors.dtype)
        step = _chunk_rows(*vectors.shape)
        indices = torch.cat([
            torch.argmin(((block[:, None, :] - vectors[None, :, :]) ** 2).sum(-1), dim=1)
            for block in flat.split(step)
        ]) if flat.shape[0] > 0 else torch.zeros(0, dtype=torch.long, device=flat.device)
        quantized = vectors[indices].to(inputs.dtype)
    return indices, quantized


@dataclass
class QuantizationResult:
    indices: torch.Tensor  # (N, ...) long
    quantized_per_layer: List[torch.Tensor]  # N x (..., D), codewords
    layer_inputs: List[torch.Tensor]  # x_i = residual before layer i (carries encoder gradient)
    residuals: List[torch.Tensor]  # residual after layer i
    cumulative: torch.Tensor  # (..., D) sum of quantized layers
    commitment_terms: List[torch.Tensor]  # mean ||x_i - sg(q_i)||^2 per layer

    @property
    def num_layers(self) -> int:
        return len(self.quantized_per_layer)


def rvq_forward(inputs: torch.Tensor, layers) -> QuantizationResult:
    """
    Cascade: residual_0 = input; layer i quantizes residual_{i-1} and leaves
    residual_i = residual_{i-1} - q_i. Inputs may be (T, D) or (B, T, D).
    """
    layers = list(layers)
    dim = layers[0].dim
    if inputs.shape[-1] != dim:
        raise DimensionMismatchError(f"input dimension {inputs.shape[-1]} does not match codebooks ({dim})")
    lead_shape = inputs.shape[:-1]

    residual = inputs
    indices, quantized, layer_inputs, residuals, terms = [], [], [], [], []
    cumulative = torch.zeros_like(inputs.detach())
    for cb in layers:
        idx, q = quantize_nearest(residual.reshape(-1, dim), cb)
        q = q.reshape(residual.shape)
        layer_inputs.append(residual)
        terms.append(torch.mean((residual - q) ** 2))
        indices.append(idx.reshape(lead_shape))
        quantized.append(q)
        cumulative = cumulative + q
        residual = residual - q
        residuals.append(residual)
    return QuantizationResult(
        indices=torch.stack(indices),
        quantized_per_layer=quantized,
        layer_inputs=layer_inputs,
        residuals=residuals,
        cumulative=cumulative,
        commitment_terms=terms,
    )


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inputs, quantized):
        return quantized.detach().clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(inputs: torch.Tensor, result: QuantizationResult) -> torch.Tensor:
    """Forward value = result.cumulative; backward = identity to `inputs`."""
    return _StraightThrough.apply(inputs, result.cumulative)


def straight_through_layer(result: QuantizationResult, layer: int) -> torch.Tensor:
    """Codewords of one layer with identity gradient to that layer's input x_i."""
    return _StraightThrough.apply(result.layer_inputs[layer], result.quantized_per_layer[layer])


# -------------------------
# Codebook learning
# -------------------------
@torch.no_grad()
def ema_update(codebook: Codebook, indices: torch.Tensor, inputs: torch.Tensor, decay: Optional[float] = None,
               generator: Optional[torch.Generator] = None) -> int:
    """
    One EMA step of cluster sizes and sums, Laplace-smoothed codewords, then
    dead-code revival: learnable codewords whose usage EMA fell under the
    threshold are reset to random rows of `inputs`. Returns the revived count.
    """
    decay = codebook.decay if decay is None else decay
    if not (0.0 < decay < 1.0):
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    flat = inputs.detach().reshape(-1, codebook.dim).to(codebook.vectors.dtype)
    idx = indices.reshape(-1)
    k_total = codebook.num_codewords

    one_hot = torch.zeros(idx.shape[0], k_total, dtype=flat.dtype, device=flat.device)
    one_hot.scatter_(1, idx.unsqueeze(1), 1.0)
    codebook.cluster_size.mul_(decay).add_(one_hot.sum(0), alpha=1.0 - decay)
    codebook.embed_sum.mul_(decay).add_(one_hot.t() @ flat, alpha=1.0 - decay)

    n = codebook.cluster_size.sum()
    smoothed = (codebook.cluster_size + LAPLACE_EPS) / (n + k_total * LAPLACE_EPS) * n
    learnable = codebook.codebook_size
    codebook.vectors[:learnable] = codebook.embed_sum[:learnable] / smoothed[:learnable].unsqueeze(1)
    if codebook.zero_codeword:
        codebook.vectors[-1] = 0.0

    dead = torch.nonzero(codebook.cluster_size[:learnable] < codebook.dead_threshold).reshape(-1)
    if dead.numel() > 0 and flat.shape[0] > 0:
        picks = torch.randint(flat.shape[0], (dead.numel(),), generator=generator, device=flat.device)
        codebook.vectors[dead] = flat[picks]
        codebook.embed_sum[dead] = flat[picks]
        codebook.cluster_size[dead] = 1.0
    return int(dead.numel())


def codebook_perplexity(result: QuantizationResult, layer: int) -> float:
    """exp(entropy) of the empirical assignment distribution at one layer."""
    if not (0 <= layer < result.num_layers):
        raise IndexOutOfRangeError(f"layer {layer} outside [0, {result.num_layers})")
    counts = torch.bincount(result.indices[layer].reshape(-1)).to(torch.float64)
    probs = counts[counts > 0] / counts.sum()
    return float(torch.exp(-(probs * probs.log()).sum()))


# -------------------------
# Bottleneck module
# -------------------------
class ResidualBottleneck(nn.Module):
    def __init__(self, num_quantizers: int, codebook_size: int, dim: int,
                 decay: float = 0.99, dead_threshold: float = 0.01, zero_codeword: bool = True):
        super().__init__()
        if num_quantizers < 2:
            raise DimensionMismatchError(f"bottleneck needs at least 2 quantizers, got {num_quantizers}")
        self.layers = nn.ModuleList(
            Codebook(codebook_size, dim, zero_codeword=zero_codeword, decay=decay, dead_threshold=dead_threshold)
            for _ in range(num_quantizers)
        )
        self.dim = dim

    @property
    def num_quantizers(self) -> int:
        return len(self.layers)

    def forward(self, inputs: torch.Tensor, generator: Optional[torch.Generator] = None) -> QuantizationResult:
        result = rvq_forward(inputs, self.layers)
        if self.training:
            for i, cb in enumerate(self.layers):
                ema_update(cb, result.indices[i], result.layer_inputs[i], generator=generator)
        return result

    @torch.no_grad()
    def kmeans_warm_start(self, inputs: torch.Tensor, seed: int) -> None:
        """Initialize every layer by k-means on the cascade residuals of `inputs`."""
        residual = inputs.detach().reshape(-1, self.dim)
        for i, cb in enumerate(self.layers):
            samples = residual.double().cpu().numpy()
            if samples.shape[0] >= cb.codebook_size:
                centers, inertia = kmeans_fit(samples, cb.codebook_size, seed + i)
                logger.debug(f"layer {i}: k-means inertia {inertia:.4f}")
            else:
                rng = np.random.default_rng(seed + i)
                centers = samples[rng.integers(samples.shape[0], size=cb.codebook_size)]
                logger.warning(f"⚠️ layer {i}: {samples.shape[0]} frames < {cb.codebook_size} codewords, "
                               f"random-row init")
            cb.load_vectors(torch.as_tensor(centers))
            _, q = quantize_nearest(residual, cb)
            residual = residual - q
