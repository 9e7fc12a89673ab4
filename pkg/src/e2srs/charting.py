"""
Self-supervised channel-charting objective and training loop.

For a pair of snapshots (t_i, t_j) taken at most ``epsilon`` seconds apart,
with embeddings z_i, z_j:

    tdoa term   sum over both members t, over every non-reference TRP m of
                mask[t, m] * ((||z_t - x_m|| - ||z_t - x_ref(m)||) - c * tdoa[t, m])**2
    disp term   (||z_i - z_j|| - d_ij)**2

The batch objective averages over pairs and divides the tdoa term by
sum_k (M_k - 1):  total = tdoa_sum + beta * disp_sum.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import SPEED_OF_LIGHT
from .geometry import Geometry, _as_3d
from .model import Network, build_network

log = logging.getLogger(__name__)


class NoValidPairs(ValueError):
    code = "NO_VALID_PAIRS"


class EmptyBatch(ValueError):
    code = "EMPTY_BATCH"


@dataclass
class TrainConfig:
    beta: float = 1.0
    epsilon_s: float = 2.0
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_pairs: int = 64
    epochs: int = 30
    seed: int = 0
    displacement_noise_m: float = 0.0
    arch: str = "default"
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epsilon_s <= 0:
            raise ValueError("epsilon must be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossBreakdown:
    total: float
    tdoa_sum: float
    disp_sum: float
    pairs: int
    masked_out: int


@dataclass
class PairBatch:
    """A batch of sampled pairs, stored column-wise."""

    i: np.ndarray  # (P,) snapshot indices
    j: np.ndarray
    x_i: np.ndarray  # (P, M, C)
    x_j: np.ndarray
    tdoa_i: np.ndarray  # (P, M) seconds
    tdoa_j: np.ndarray
    mask_i: np.ndarray  # (P, M)
    mask_j: np.ndarray
    displacement: np.ndarray  # (P,) meters

    def __len__(self):
        return len(self.i)

    @classmethod
    def from_indices(cls, data, i, j, displacement):
        i = np.asarray(i, dtype=int)
        j = np.asarray(j, dtype=int)
        return cls(
            i, j, data.inputs[i], data.inputs[j], data.tdoa[i], data.tdoa[j],
            data.mask[i], data.mask[j], np.asarray(displacement, dtype=float),
        )

    def concat(self, other: PairBatch) -> PairBatch:
        return PairBatch(*(np.concatenate([a, b]) for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))


# --------------------------------------------------------------------------
# Loss terms
# --------------------------------------------------------------------------


def _tdoa_residuals(z, tdoa, geometry: Geometry, c: float):
    """Range-difference residuals (B, M) and their gradient wrt z (B, M, 2)."""
    z3 = _as_3d(z, geometry.ue_height)
    diff = z3[:, None, :] - geometry.positions[None]
    dist = np.linalg.norm(diff, axis=-1)
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    ref = geometry.ref_of_row
    res = dist - dist[:, ref] - c * tdoa
    dres = (unit - unit[:, ref])[..., :2]
    return res, dres


def _term_mask(mask, geometry: Geometry):
    return (np.asarray(mask) != 0) & ~geometry.is_ref


def tdoa_pair_loss(z_i, z_j, tdoa_i, tdoa_j, mask_i, mask_j, geometry: Geometry, c: float = SPEED_OF_LIGHT) -> float:
    """Unnormalized TDoA loss of one pair (summed over both members)."""
    z = np.array([z_i, z_j], dtype=float)
    res, _ = _tdoa_residuals(z, np.array([tdoa_i, tdoa_j], dtype=float), geometry, c)
    use = _term_mask([mask_i, mask_j], geometry)
    return float(np.sum(np.where(use, res, 0.0) ** 2))


def displacement_pair_loss(z_i, z_j, displacement: float) -> float:
    return float((np.linalg.norm(np.subtract(z_i, z_j)) - displacement) ** 2)


def _loss_and_dz(z, batch: PairBatch, config: TrainConfig, geometry: Geometry):
    p = len(batch)
    if p == 0:
        raise EmptyBatch("empty batch")
    z_i, z_j = z[:p], z[p:]
    tdoa = np.concatenate([batch.tdoa_i, batch.tdoa_j])
    use = _term_mask(np.concatenate([batch.mask_i, batch.mask_j]), geometry)
    res, dres = _tdoa_residuals(z, tdoa, geometry, config.c)
    res = np.where(use, res, 0.0)
    norm_t = p * geometry.num_tdoa_terms
    tdoa_sum = float(np.sum(res * res)) / norm_t
    dz = np.einsum("bm,bmd->bd", 2.0 * res, dres) / norm_t

    sep = z_i - z_j
    dist = np.linalg.norm(sep, axis=1)
    err = dist - batch.displacement
    disp_sum = float(np.sum(err * err)) / p
    unit = np.divide(sep, dist[:, None], out=np.zeros_like(sep), where=dist[:, None] > 0)
    g = (2.0 * config.beta / p) * err[:, None] * unit
    dz[:p] += g
    dz[p:] -= g

    masked = int(np.sum(~use & ~geometry.is_ref))
    total = tdoa_sum + config.beta * disp_sum
    return LossBreakdown(total, tdoa_sum, disp_sum, p, masked), dz


def total_loss(batch: PairBatch, network: Network, config: TrainConfig, geometry: Geometry) -> LossBreakdown:
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    z = network.forward(np.concatenate([batch.x_i, batch.x_j]))
    return _loss_and_dz(z, batch, config, geometry)[0]


def backward(network: Network, batch: PairBatch, config: TrainConfig, geometry: Geometry):
    """Loss breakdown and gradient of the total loss wrt every network parameter."""
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    z, caches = network.forward(np.concatenate([batch.x_i, batch.x_j]), keep=True)
    loss, dz = _loss_and_dz(z, batch, config, geometry)
    return loss, network.backward(dz, caches)


# --------------------------------------------------------------------------
# Pair sampling
# --------------------------------------------------------------------------


def valid_pairs(timestamps_s, epsilon_s: float) -> np.ndarray:
    """All unordered index pairs (i < j) with |t_j - t_i| <= epsilon, shape (n, 2)."""
    t = np.asarray(timestamps_s, dtype=float)
    order = np.argsort(t, kind="stable")
    ts = t[order]
    hi = np.searchsorted(ts, ts + epsilon_s, side="right")
    counts = hi - np.arange(len(ts)) - 1
    a = np.repeat(np.arange(len(ts)), counts)
    offsets = np.arange(len(a)) - np.repeat(np.cumsum(counts) - counts, counts)
    b = a + 1 + offsets
    pairs = np.stack([order[a], order[b]], axis=1)
    pairs.sort(axis=1)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def _displacements(data, i, j, config: TrainConfig, rng):
    gt = data.ground_truth
    d = np.linalg.norm(gt[i, :2] - gt[j, :2], axis=1)
    if config.displacement_noise_m > 0:
        d = np.abs(d + rng.normal(0.0, config.displacement_noise_m, size=d.shape))
    return d


def sample_pairs(data, config: TrainConfig, rng, count: int | None = None) -> PairBatch:
    """Draw up to ``count`` distinct pairs uniformly from the valid ones."""
    pairs = valid_pairs(data.timestamps_s, config.epsilon_s)
    if len(pairs) == 0:
        raise NoValidPairs(f"no two snapshots lie within {config.epsilon_s} s")
    count = config.batch_pairs if count is None else count
    pick = rng.choice(len(pairs), size=min(count, len(pairs)), replace=False)
    i, j = pairs[pick, 0], pairs[pick, 1]
    return PairBatch.from_indices(data, i, j, _displacements(data, i, j, config, rng))


# --------------------------------------------------------------------------
# Optimizer and training
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    return LossBreakdown(
        total=sum(b.total for b in items) / n,
        tdoa_sum=sum(b.tdoa_sum for b in items) / n,
        disp_sum=sum(b.disp_sum for b in items) / n,
        pairs=sum(b.pairs for b in items),
        masked_out=sum(b.masked_out for b in items),
    )


def train(data, geometry: Geometry, config: TrainConfig, network: Network | None = None):
    """Train the chart network; returns (network, per-epoch loss log).

    log[0] is the loss of the initial network over the first epoch's batches,
    log[e] the mean batch loss seen during epoch e.
    """
    if data.inputs.shape[1] != geometry.num_trps:
        raise ValueError("training inputs do not match the geometry's TRP count")
    rng = np.random.default_rng(config.seed)
    if network is None:
        network = build_network(data.inputs.shape[1], data.inputs.shape[2], config.arch)
        center = geometry.positions[:, :2].mean(axis=0)
        network.init(rng, output_bias=center)
    pairs = valid_pairs(data.timestamps_s, config.epsilon_s)
    if len(pairs) == 0:
        raise NoValidPairs(f"no two snapshots lie within {config.epsilon_s} s")
    if config.beta > 0 and np.isnan(data.ground_truth[:, :2]).any():
        raise ValueError("displacement term needs ground-truth trajectories (or beta=0)")
    disp = (
        _displacements(data, pairs[:, 0], pairs[:, 1], config, rng)
        if config.beta > 0 else np.zeros(len(pairs))
    )
    opt = Adam(network.params(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        batches = [order[s:s + config.batch_pairs] for s in range(0, len(order), config.batch_pairs)]
        if epoch == 1:
            history.append(_mean_breakdown([
                total_loss(PairBatch.from_indices(data, pairs[b, 0], pairs[b, 1], disp[b]), network, config, geometry)
                for b in batches
            ]))
        seen = []
        for b in batches:
            batch = PairBatch.from_indices(data, pairs[b, 0], pairs[b, 1], disp[b])
            loss, grads = backward(network, batch, config, geometry)
            if config.learning_rate != 0:
                opt.step(grads)
            seen.append(loss)
        history.append(_mean_breakdown(seen))
        log.info("epoch %d: loss %.4f (tdoa %.4f, disp %.4f)", epoch, history[-1].total,
                 history[-1].tdoa_sum, history[-1].disp_sum)
    return network, history


def write_loss_log(history: list[LossBreakdown], path) -> None:
    """CSV loss log; row 0 is the untrained network."""
    lines = ["epoch,total,tdoa,displacement,pairs,masked_out"]
    for epoch, b in enumerate(history):
        lines.append(f"{epoch},{b.total!r},{b.tdoa_sum!r},{b.disp_sum!r},{b.pairs},{b.masked_out}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
