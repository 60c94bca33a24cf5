"""Training of per-channel metric scalars against a distortion ordering.

The metric's distance between two fixed feature stacks is a quadratic form
in the scalars, d(w) = sum(w^2 * coeffs), so each triplet is reduced once
to two coefficient stacks and training never touches images again within
a batch.  A small judge network maps the distance pair to a probability
that the second variant is the more similar one; its binary cross-entropy
against the ordering's label, plus a synchronizing loss directly on the
distances, drives Adam updates of the scalars and the judge.  The loss
network itself stays frozen throughout.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .distortions import make_triplet, triplet_rng
from .errors import ConfigError, DeepsimError, TrainingDivergedError
from .nets import forward_extract, write_container, WeightContainer
from .similarity import channel_normalize, distance_coeffs, ScalarWeights

EPS_RATIO = 1e-10
EPS_PROB = 1e-7
SYNC_WEIGHT = 10.0
LEAKY_SLOPE = 0.2
JUDGE_WIDTHS = (32, 32, 1)

_STREAM_SPLIT = 0
_STREAM_JUDGE = 1
_STREAM_ORDER = 2


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce(p, target):
    """Binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS_PROB, 1.0 - EPS_PROB)
    target = np.asarray(target, dtype=np.float64)
    return -(target * np.log(p) + (1.0 - target) * np.log1p(-p))


def sync_loss(d0, d1, judgement):
    """Hinge on the cross-entropy between sigmoid(d0 - d1) and the label.

    Pushes d0 > d1 when the label says x1 is the more similar variant and
    vice versa, keeping the raw distances aligned with the labels rather
    than their opposite.  The hinge never clips since cross-entropy is
    nonnegative; it is kept for fidelity to the definition.
    """
    return SYNC_WEIGHT * np.maximum(0.0, bce(sigmoid(np.asarray(d0, dtype=np.float64)
                                                     - np.asarray(d1, dtype=np.float64)),
                                             judgement))


def _sync_grad(d0, d1, judgement):
    """d(sync)/d(d0); the gradient w.r.t. d1 is its negation."""
    p = sigmoid(np.asarray(d0, dtype=np.float64) - np.asarray(d1, dtype=np.float64))
    inside = (p > EPS_PROB) & (p < 1.0 - EPS_PROB)
    return SYNC_WEIGHT * (p - np.asarray(judgement, dtype=np.float64)) * inside


def judge_features(d0, d1):
    """The 5-vector fed to the judge, plus its jacobians w.r.t. d0 and d1."""
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    r0 = d0 / (d1 + EPS_RATIO)
    r1 = d1 / (d0 + EPS_RATIO)
    feats = np.stack([d0, d1, d0 - d1, r0, r1], axis=-1)
    one = np.ones_like(d0)
    zero = np.zeros_like(d0)
    dd0 = np.stack([one, zero, one,
                    1.0 / (d1 + EPS_RATIO),
                    -d1 / (d0 + EPS_RATIO) ** 2], axis=-1)
    dd1 = np.stack([zero, one, -one,
                    -d0 / (d1 + EPS_RATIO) ** 2,
                    1.0 / (d0 + EPS_RATIO)], axis=-1)
    return feats, dd0, dd1


class JudgeNet:
    """Affine 5->32->32->1 network with leaky ReLUs and a sigmoid head."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.w3 = np.asarray(w3, dtype=np.float64)
        self.b3 = np.asarray(b3, dtype=np.float64)
        if self.w1.shape != (32, 5) or self.w2.shape != (32, 32) \
                or self.w3.shape != (1, 32):
            raise ConfigError("judge layer widths must be 32, 32, 1")

    @classmethod
    def init(cls, rng):
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        def layer(fan_out, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return (rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                    np.zeros(fan_out))

        w1, b1 = layer(32, 5)
        w2, b2 = layer(32, 32)
        w3, b3 = layer(1, 32)
        return cls(w1, b1, w2, b2, w3, b3)

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def forward(self, feats, with_cache=False):
        """Probability (batch,) that x1 is the more similar variant."""
        feats = np.asarray(feats, dtype=np.float64)
        z1 = feats @ self.w1.T + self.b1
        a1 = np.where(z1 > 0, z1, LEAKY_SLOPE * z1)
        z2 = a1 @ self.w2.T + self.b2
        a2 = np.where(z2 > 0, z2, LEAKY_SLOPE * z2)
        z3 = a2 @ self.w3.T + self.b3
        p = sigmoid(z3)[..., 0]
        if not with_cache:
            return p
        return p, (feats, z1, a1, z2, a2, p)

    def backward(self, cache, dz3):
        """Backprop from d(loss)/d(pre-sigmoid); returns grads and d(feats)."""
        feats, z1, a1, z2, a2, _ = cache
        dz3 = np.asarray(dz3, dtype=np.float64)[..., None]
        grads = {}
        grads["w3"] = dz3.T @ a2
        grads["b3"] = dz3.sum(axis=0)
        da2 = dz3 @ self.w3
        dz2 = da2 * np.where(z2 > 0, 1.0, LEAKY_SLOPE)
        grads["w2"] = dz2.T @ a1
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ self.w2
        dz1 = da1 * np.where(z1 > 0, 1.0, LEAKY_SLOPE)
        grads["w1"] = dz1.T @ feats
        grads["b1"] = dz1.sum(axis=0)
        dfeats = dz1 @ self.w1
        return grads, dfeats


def judge_forward(net: JudgeNet, feats):
    return net.forward(feats)


def save_judge(path, judge: JudgeNet, meta=None):
    tensors = {f"judge.{k}": v.astype(np.float32) for k, v in judge.params().items()}
    write_container(path, tensors, meta=dict(meta or {}, kind="judge"))


def load_judge(path) -> JudgeNet:
    with WeightContainer(path) as box:
        return JudgeNet(*(box.tensor(f"judge.{k}") for k in JudgeNet.PARAM_NAMES))


class Adam:
    """Adam update rule; moments keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        """Update ``params`` in place.  lr == 0 leaves every part of the
        trainer state, moments included, untouched."""
        if lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.m[name] = m
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    batch_size: int = 50
    seed: int = 0
    epochs: int = 10
    val_fraction: float = 0.2
    repeats: int = 4
    sync_weight: float = SYNC_WEIGHT

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")

    def lr_at(self, epoch):
        """Constant, then linear decay to 0 across the last five epochs.

        Epochs are 1-indexed; lr(epochs) == 0.
        """
        ramp = (self.epochs - epoch) / 5.0
        return self.base_lr * min(1.0, max(0.0, ramp))

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class CoeffBatch:
    """Triplets reduced to quadratic-form coefficients.

    coeffs0[l][b] are the per-channel coefficients of d(ref_b, x0_b) at tap
    layer l; squaring the scalars and summing against them gives the
    distance.  Labels are 0 when x0 is the more similar variant.
    """
    coeffs0: tuple
    coeffs1: tuple
    judgements: np.ndarray
    manifest_lines: tuple = ()

    def __len__(self):
        return self.judgements.shape[0]

    def distances(self, scalars):
        d0 = np.zeros(len(self), dtype=np.float64)
        d1 = np.zeros(len(self), dtype=np.float64)
        for w, a0, a1 in zip(scalars, self.coeffs0, self.coeffs1):
            w2 = w * w
            d0 += a0 @ w2
            d1 += a1 @ w2
        return d0, d1


def triplet_coeffs(network, method, triplets, normalize=True) -> CoeffBatch:
    """Reduce triplets to a CoeffBatch through the frozen network."""
    per0 = []
    per1 = []
    labels = []
    lines = []
    for trip in triplets:
        stacks = []
        for img in (trip.ref, trip.x0, trip.x1):
            feats = forward_extract(network, img)
            stacks.append(channel_normalize(feats) if normalize else feats)
        per0.append(distance_coeffs(method, stacks[0], stacks[1]))
        per1.append(distance_coeffs(method, stacks[0], stacks[2]))
        labels.append(trip.judgement)
        lines.append(trip.manifest_record())
    n_layers = len(per0[0])
    stack = lambda rows, l: np.stack([r[l] for r in rows]).astype(np.float64)
    return CoeffBatch(
        coeffs0=tuple(stack(per0, l) for l in range(n_layers)),
        coeffs1=tuple(stack(per1, l) for l in range(n_layers)),
        judgements=np.asarray(labels, dtype=np.float64),
        manifest_lines=tuple(lines))


class TrainerState:
    """All mutable training state: scalars, judge, optimizer moments."""

    def __init__(self, channel_counts, judge: JudgeNet):
        self.scalars = [np.ones(c, dtype=np.float64) for c in channel_counts]
        self.judge = judge
        self.adam = Adam()

    def params(self):
        out = {f"scalars.{i}": w for i, w in enumerate(self.scalars)}
        out.update(self.judge.params())
        return out


def _loss_forward(state: TrainerState, batch: CoeffBatch, sync_active):
    d0, d1 = batch.distances(state.scalars)
    feats, dfeats_d0, dfeats_d1 = judge_features(d0, d1)
    prob, cache = state.judge.forward(feats, with_cache=True)
    judge_losses = bce(prob, batch.judgements)
    sync_losses = (sync_loss(d0, d1, batch.judgements) if sync_active
                   else np.zeros_like(judge_losses))
    return d0, d1, feats, dfeats_d0, dfeats_d1, prob, cache, judge_losses, sync_losses


def loss_and_grads(state: TrainerState, batch: CoeffBatch, sync_active):
    """Per-triplet losses and exact batch-mean gradients.

    Returns (stats, grads) where stats carries the per-triplet total loss
    plus mean components and grads maps every parameter name (judge weights
    and ``scalars.<i>``) to the gradient of the batch-mean loss.
    """
    (d0, d1, _, dfeats_d0, dfeats_d1, prob, cache,
     judge_losses, sync_losses) = _loss_forward(state, batch, sync_active)
    losses = judge_losses + sync_losses
    n = float(len(batch))
    # BCE through the sigmoid head: d(loss)/d(pre-sigmoid) = p - target,
    # zeroed where the probability clamp is pinned.
    inside = (prob > EPS_PROB) & (prob < 1.0 - EPS_PROB)
    dz3 = (prob - batch.judgements) * inside / n
    judge_grads, dfeats = state.judge.backward(cache, dz3)
    dd0 = (dfeats * dfeats_d0).sum(axis=1)
    dd1 = (dfeats * dfeats_d1).sum(axis=1)
    if sync_active:
        g = _sync_grad(d0, d1, batch.judgements) / n
        dd0 += g
        dd1 -= g
    grads = dict(judge_grads)
    for i, w in enumerate(state.scalars):
        grads[f"scalars.{i}"] = 2.0 * w * (dd0 @ batch.coeffs0[i]
                                           + dd1 @ batch.coeffs1[i])
    stats = {"per_triplet": losses,
             "loss": float(losses.mean()),
             "judge_bce": float(judge_losses.mean()),
             "sync": float(sync_losses.mean())}
    return stats, grads


def train_step(state: TrainerState, batch: CoeffBatch, lr, sync_active,
               epoch=None, batch_index=None):
    """One optimizer step on a batch; returns the losses it saw.

    The batch-mean judge cross-entropy plus (when active) the batch-mean
    synchronizing loss is backpropagated into the judge parameters and the
    scalars; the scalars are clamped to >= 0 after the update.
    """
    stats, grads = loss_and_grads(state, batch, sync_active)
    losses = stats["per_triplet"]
    if not np.all(np.isfinite(losses)):
        bad = int(np.flatnonzero(~np.isfinite(losses))[0])
        line = batch.manifest_lines[bad] if batch.manifest_lines else None
        raise TrainingDivergedError(
            f"non-finite loss {losses[bad]!r} in batch",
            epoch=epoch, batch=batch_index, triplet_line=line)
    state.adam.step(state.params(), grads, lr)
    if lr != 0.0:
        for w in state.scalars:
            np.maximum(w, 0.0, out=w)
    return {"loss": stats["loss"],
            "judge_bce": stats["judge_bce"],
            "sync": stats["sync"]}


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_2afc: float
    sync_active: bool


@dataclass
class AdaptionHistory:
    seed: int
    baseline_val_2afc: float
    records: list = field(default_factory=list)
    sync_off_epoch: int = -1

    def to_dict(self):
        return {"seed": self.seed,
                "baseline_val_2afc": self.baseline_val_2afc,
                "sync_off_epoch": self.sync_off_epoch,
                "epochs": [r.__dict__ for r in self.records]}


def _two_afc(d0, d1, judgements):
    """Mean agreement between distance order and labels (ties count against)."""
    judgements = np.asarray(judgements, dtype=np.float64)
    scores = np.where(np.asarray(d1) < np.asarray(d0),
                      judgements, 1.0 - judgements)
    return float(scores.mean())


def train_adaption(network, method, images, ordering, config: TrainConfig,
                   normalize=True, progress=None):
    """Adapt per-channel scalars (and the judge) to a distortion ordering.

    images: sequence of (3, H, W) float arrays in [0, 1].
    Returns (ScalarWeights, JudgeNet, AdaptionHistory).
    """
    n = len(images)
    if n == 0:
        raise ConfigError("empty image set")
    spec = network.spec
    checksum = network.checksum()
    seed = config.seed

    perm = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_SPLIT])).permutation(n)
    n_val = max(1, int(n * config.val_fraction))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size == 0:
        raise ConfigError("no training images left after the validation split")

    judge = JudgeNet.init(np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_JUDGE])))
    state = TrainerState(spec.tap_channels(), judge)

    # Validation triplets are fixed for the whole run (repeat slot 0).
    val_batch = triplet_coeffs(
        network, method,
        [make_triplet(images[i], ordering, triplet_rng(seed, i, 0))
         for i in val_idx],
        normalize=normalize)

    def val_metrics(sync_active):
        (d0, d1, _, _, _, _, _, judge_losses,
         sync_losses) = _loss_forward(state, val_batch, sync_active)
        return (float((judge_losses + sync_losses).mean()),
                _two_afc(d0, d1, val_batch.judgements))

    _, baseline_2afc = val_metrics(sync_active=False)
    history = AdaptionHistory(seed=seed, baseline_val_2afc=baseline_2afc)
    # Sync starts active; only epoch-end validations can switch it off.
    sync_active = True

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence([seed, _STREAM_ORDER, epoch])).permutation(train_idx)
        loss_sum = 0.0
        seen = 0
        for batch_index, start in enumerate(range(0, order.size, config.batch_size)):
            chunk = order[start:start + config.batch_size]
            batch = triplet_coeffs(
                network, method,
                [make_triplet(images[i], ordering, triplet_rng(seed, i, epoch))
                 for i in chunk],
                normalize=normalize)
            losses = train_step(state, batch, lr, sync_active,
                                epoch=epoch, batch_index=batch_index)
            loss_sum += losses["loss"] * len(batch)
            seen += len(batch)
        val_loss, val_2afc = val_metrics(sync_active)
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=loss_sum / seen,
                             val_loss=val_loss, val_2afc=val_2afc,
                             sync_active=sync_active)
        history.records.append(record)
        if sync_active and val_2afc > 0.5:
            sync_active = False
            history.sync_off_epoch = epoch
        if progress is not None:
            progress(record)

    if network.checksum() != checksum:
        raise DeepsimError("loss-network weights changed during training")

    weights = ScalarWeights(values=tuple(w.copy() for w in state.scalars),
                            tap_indices=spec.tap_indices,
                            network=spec.name,
                            method=method.value)
    return weights, judge, history
