"""Counterfactual expression models: linear, latent-additive and decoder-only.

All three share one training recipe: minibatch MSE on log-normalized values,
AdamW, and early stopping on a composite validation objective. Forward and
backward passes are written directly in float64 numpy so that training is
exactly repeatable for a given seed and the gradients can be verified against
finite differences (see loss_and_grads).

Inputs per cell are a matched control expression vector x, a multi-hot
perturbation encoding p and a one-hot covariate encoding c:

    linear           x' = x + W [p; c]
    latent_additive  x' = dec(enc(x) + pem(p) - pem(0))
    decoder_only     x' = dec(z),  z in {p, c, [p; c]}

Subtracting pem(0) pins the perturbation embedding of "no perturbation" to
zero, so a control request reproduces dec(enc(x)) exactly.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .dataset import Condition, PerturbationDataset
from .errors import (ControlError, FormatError, GeneMismatchError, TrainError,
                     UsageError)
from .metrics import composite_objective, rank_metric
from .preprocess import ConditionAggregate
from .splits import SplitAssignment

log = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "latent_additive", "decoder_only")
DECODER_INPUTS = ("pert", "cov", "pert_cov")
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# encodings


@dataclasses.dataclass(frozen=True)
class OneHotVocab:
    """Fixed encoding order for perturbations and covariate levels."""

    perturbations: tuple[str, ...]
    covariate_levels: tuple[tuple[str, tuple[str, ...]], ...]
    control_value: str = "control"

    @classmethod
    def from_dataset(cls, d: PerturbationDataset) -> "OneHotVocab":
        perts = sorted({name for i, pset in enumerate(d.perturbations)
                        if not d.is_control(i) for name in pset})
        levels = tuple((k, tuple(sorted(set(d.covariates[k]))))
                       for k in d.meta.covariate_keys)
        return cls(tuple(perts), levels, d.meta.control_value)

    @property
    def pert_dim(self) -> int:
        return len(self.perturbations)

    @property
    def cov_dim(self) -> int:
        return sum(len(levels) for _, levels in self.covariate_levels)

    def encode_perturbation(self, pset: Iterable[str]) -> np.ndarray:
        v = np.zeros(self.pert_dim)
        for name in pset:
            if name == self.control_value:
                continue
            try:
                v[self.perturbations.index(name)] = 1.0
            except ValueError:
                raise UsageError(f"perturbation {name!r} not in vocabulary") from None
        return v

    def encode_covariates(self, assignment) -> np.ndarray:
        if isinstance(assignment, Mapping):
            lookup = dict(assignment)
        else:
            lookup = {k: v for k, v in assignment}
        v = np.zeros(self.cov_dim)
        offset = 0
        for key, levels in self.covariate_levels:
            if key not in lookup:
                raise UsageError(f"covariate {key!r} missing from assignment")
            try:
                v[offset + levels.index(lookup[key])] = 1.0
            except ValueError:
                raise UsageError(f"level {lookup[key]!r} of covariate {key!r} "
                                 "not in vocabulary") from None
            offset += len(levels)
        return v

    def encode_condition(self, cond: Condition) -> tuple[np.ndarray, np.ndarray]:
        return (self.encode_perturbation(cond.perturbation),
                self.encode_covariates(cond.covariates))


def save_vocab(vocab: OneHotVocab, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"control\t{vocab.control_value}\n")
        for name in vocab.perturbations:
            f.write(f"pert\t{name}\n")
        for key, levels in vocab.covariate_levels:
            for lev in levels:
                f.write(f"cov\t{key}\t{lev}\n")


def load_vocab(path: str) -> OneHotVocab:
    control, perts = "control", []
    levels: dict[str, list[str]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "control" and len(parts) == 2:
                control = parts[1]
            elif parts[0] == "pert" and len(parts) == 2:
                perts.append(parts[1])
            elif parts[0] == "cov" and len(parts) == 3:
                if parts[1] not in levels:
                    order.append(parts[1])
                levels.setdefault(parts[1], []).append(parts[2])
            else:
                raise FormatError(f"{path}:{ln}: bad vocabulary line {line!r}")
    return OneHotVocab(tuple(perts),
                       tuple((k, tuple(levels[k])) for k in order), control)


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture plus optimizer settings; one flat record, saved as config.tsv.

    n_layers counts hidden layers (each Linear -> LayerNorm -> ReLU -> Dropout);
    a final Linear maps to the output. val_controls is the number of matched
    controls averaged when scoring the validation objective. ema_decay keeps
    a Polyak average of the weights and validates that instead of the raw
    iterates, which matters once minibatch noise dominates late progress;
    0 turns it off.
    """

    architecture: str
    latent_dim: int = 128
    n_layers: int = 2
    hidden_width: int = 256
    dropout: float = 0.0
    layer_norm: bool = True
    softplus_output: bool = False
    decoder_input: str = "pert_cov"
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_controls: int = 100
    ema_decay: float = 0.995
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise UsageError(f"unknown architecture {self.architecture!r}")
        if self.decoder_input not in DECODER_INPUTS:
            raise UsageError(f"unknown decoder_input {self.decoder_input!r}")
        if self.latent_dim < 1 or self.hidden_width < 1 or self.n_layers < 0:
            raise UsageError("latent_dim and hidden_width must be positive, "
                             "n_layers non-negative")
        if not 0 <= self.dropout < 1:
            raise UsageError(f"dropout must be in [0,1), got {self.dropout}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise UsageError("lr must be positive and weight_decay non-negative")
        if min(self.batch_size, self.max_epochs, self.patience, self.val_controls) < 1:
            raise UsageError("batch_size, max_epochs, patience and val_controls "
                             "must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise UsageError(f"ema_decay must be in [0,1), got {self.ema_decay}")


# ---------------------------------------------------------------------------
# layers


def _acc(grads: dict, name: str, g: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


class _Linear:
    def __init__(self, name, n_in, n_out, bias=True, zero_init=False):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.bias, self.zero_init = bias, zero_init

    def init_params(self, rng, params):
        if self.zero_init:
            params[f"{self.name}.W"] = np.zeros((self.n_out, self.n_in))
        else:
            params[f"{self.name}.W"] = rng.normal(
                0.0, np.sqrt(2.0 / self.n_in), size=(self.n_out, self.n_in))
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.n_out)

    def forward(self, params, x, caches, train, rng):
        caches.append(x)
        y = x @ params[f"{self.name}.W"].T
        if self.bias:
            y = y + params[f"{self.name}.b"]
        return y

    def backward(self, params, cache, gy, grads):
        _acc(grads, f"{self.name}.W", gy.T @ cache)
        if self.bias:
            _acc(grads, f"{self.name}.b", gy.sum(axis=0))
        return gy @ params[f"{self.name}.W"]


class _LayerNorm:
    def __init__(self, name, dim):
        self.name, self.dim = name, dim

    def init_params(self, rng, params):
        params[f"{self.name}.g"] = np.ones(self.dim)
        params[f"{self.name}.b"] = np.zeros(self.dim)

    def forward(self, params, x, caches, train, rng):
        mu = x.mean(axis=-1, keepdims=True)
        s = np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
        xhat = (x - mu) / s
        caches.append((xhat, s))
        return xhat * params[f"{self.name}.g"] + params[f"{self.name}.b"]

    def backward(self, params, cache, gy, grads):
        xhat, s = cache
        _acc(grads, f"{self.name}.g", (gy * xhat).sum(axis=0))
        _acc(grads, f"{self.name}.b", gy.sum(axis=0))
        gxhat = gy * params[f"{self.name}.g"]
        return (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) / s


class _ReLU:
    def init_params(self, rng, params):
        pass

    def forward(self, params, x, caches, train, rng):
        mask = x > 0
        caches.append(mask)
        return x * mask

    def backward(self, params, cache, gy, grads):
        return gy * cache


class _Dropout:
    def __init__(self, p):
        self.p = p

    def init_params(self, rng, params):
        pass

    def forward(self, params, x, caches, train, rng):
        if not train or self.p == 0.0:
            caches.append(None)
            return x
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        caches.append(mask)
        return x * mask

    def backward(self, params, cache, gy, grads):
        return gy if cache is None else gy * cache


class _Softplus:
    def init_params(self, rng, params):
        pass

    def forward(self, params, x, caches, train, rng):
        caches.append(x)
        return np.logaddexp(0.0, x)

    def backward(self, params, cache, gy, grads):
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-cache))
        return gy * sig


def _mlp(name, n_in, n_out, cfg: ModelConfig, softplus=False):
    layers = []
    width = n_in
    for i in range(cfg.n_layers):
        layers.append(_Linear(f"{name}.l{i}", width, cfg.hidden_width))
        if cfg.layer_norm:
            layers.append(_LayerNorm(f"{name}.n{i}", cfg.hidden_width))
        layers.append(_ReLU())
        if cfg.dropout > 0:
            layers.append(_Dropout(cfg.dropout))
        width = cfg.hidden_width
    layers.append(_Linear(f"{name}.out", width, n_out))
    if softplus:
        layers.append(_Softplus())
    return layers


def _seq_forward(layers, params, x, train, rng):
    caches = []
    for lay in layers:
        x = lay.forward(params, x, caches, train, rng)
    return x, caches

def _seq_backward(layers, params, caches, gy, grads):
    for lay, cache in zip(reversed(layers), reversed(caches)):
        gy = lay.backward(params, cache, gy, grads)
    return gy


# ---------------------------------------------------------------------------
# networks


class LinearNet:
    """x' = x + W [p; c]; W starts at zero so the initial model is the identity."""

    def __init__(self, n_genes, pert_dim, cov_dim):
        self.effect = _Linear("effect", pert_dim + cov_dim, n_genes,
                              bias=False, zero_init=True)

    def init_params(self, rng):
        params = {}
        self.effect.init_params(rng, params)
        return params

    def forward(self, params, X, P, C, train, rng):
        caches = []
        delta = self.effect.forward(params, np.hstack([P, C]), caches, train, rng)
        return X + delta, caches

    def backward(self, params, caches, gpred):
        grads = {}
        self.effect.backward(params, caches[0], gpred, grads)
        return grads


class LatentAdditiveNet:
    def __init__(self, n_genes, pert_dim, cov_dim, cfg: ModelConfig):
        self.pert_dim = pert_dim
        self.enc = _mlp("enc", n_genes, cfg.latent_dim, cfg)
        self.pem = _mlp("pem", pert_dim, cfg.latent_dim, cfg)
        self.dec = _mlp("dec", cfg.latent_dim, n_genes, cfg)

    def init_params(self, rng):
        params = {}
        for lay in self.enc + self.pem + self.dec:
            lay.init_params(rng, params)
        return params

    def forward(self, params, X, P, C, train, rng):
        z_ctrl, cache_e = _seq_forward(self.enc, params, X, train, rng)
        z_pert, cache_p = _seq_forward(self.pem, params, P, train, rng)
        zero = np.zeros((1, self.pert_dim))
        z_base, cache_0 = _seq_forward(self.pem, params, zero, train, rng)
        pred, cache_d = _seq_forward(self.dec, params, z_ctrl + z_pert - z_base,
                                     train, rng)
        return pred, (cache_e, cache_p, cache_0, cache_d)

    def backward(self, params, caches, gpred):
        cache_e, cache_p, cache_0, cache_d = caches
        grads = {}
        gz = _seq_backward(self.dec, params, cache_d, gpred, grads)
        _seq_backward(self.enc, params, cache_e, gz, grads)
        _seq_backward(self.pem, params, cache_p, gz, grads)
        _seq_backward(self.pem, params, cache_0, -gz.sum(axis=0, keepdims=True), grads)
        return grads


class DecoderOnlyNet:
    """x' = dec(z) with z built from the encodings alone; ignores the control."""

    def __init__(self, n_genes, pert_dim, cov_dim, cfg: ModelConfig):
        self.mode = cfg.decoder_input
        n_in = {"pert": pert_dim, "cov": cov_dim,
                "pert_cov": pert_dim + cov_dim}[self.mode]
        self.dec = _mlp("dec", n_in, n_genes, cfg, softplus=cfg.softplus_output)

    def _input(self, X, P, C):
        if self.mode == "pert":
            return P
        if self.mode == "cov":
            return C
        return np.hstack([P, C])

    def init_params(self, rng):
        params = {}
        for lay in self.dec:
            lay.init_params(rng, params)
        return params

    def forward(self, params, X, P, C, train, rng):
        return _seq_forward(self.dec, params, self._input(X, P, C), train, rng)

    def backward(self, params, caches, gpred):
        grads = {}
        _seq_backward(self.dec, params, caches, gpred, grads)
        return grads


def build_network(cfg: ModelConfig, n_genes: int, vocab: OneHotVocab):
    if cfg.architecture == "linear":
        return LinearNet(n_genes, vocab.pert_dim, vocab.cov_dim)
    if cfg.architecture == "latent_additive":
        return LatentAdditiveNet(n_genes, vocab.pert_dim, vocab.cov_dim, cfg)
    return DecoderOnlyNet(n_genes, vocab.pert_dim, vocab.cov_dim, cfg)


def loss_and_grads(net, params, X, P, C, Y, train=False, rng=None):
    """Mean squared error and its gradients; the seam used by gradient checks."""
    pred, caches = net.forward(params, X, P, C, train, rng)
    diff = pred - Y
    loss = float((diff * diff).mean())
    grads = net.backward(params, caches, (2.0 / diff.size) * diff)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            step = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = p - self.lr * (step + self.wd * p)


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class TrainedModel:
    config: ModelConfig
    vocab: OneHotVocab
    gene_names: list[str]
    params: dict[str, np.ndarray]
    history: dict = dataclasses.field(default_factory=dict)


def _dense(d: PerturbationDataset, rows) -> np.ndarray:
    return np.asarray(d.counts[np.asarray(rows, dtype=int)].todense())


def train_model(d: PerturbationDataset, split: SplitAssignment,
                cfg: ModelConfig) -> TrainedModel:
    """Fit one model on the train cells of a split.

    Each epoch re-pairs every perturbed train cell with a freshly sampled
    control from the same covariate assignment. The validation objective is
    macro RMSE over val conditions plus 0.1x the rank average, evaluated on a
    fixed draw of matched controls; training stops once it fails to improve
    for cfg.patience epochs and the best parameters are restored.
    """
    if d.meta.value_space != "lognorm":
        raise UsageError("train_model expects log-normalized values")
    vocab = OneHotVocab.from_dataset(d)
    net = build_network(cfg, d.n_genes, vocab)
    ss = np.random.SeedSequence(cfg.seed)
    r_init, r_shuffle, r_drop, r_ctrl, r_val = (np.random.default_rng(s)
                                                for s in ss.spawn(5))
    params = net.init_params(r_init)

    train_rows = split.rows(d, "train")
    ctrl_pool: dict[tuple, list[int]] = {}
    perturbed = []
    for i in train_rows:
        if d.is_control(i):
            ctrl_pool.setdefault(d.covariate_assignment(i), []).append(int(i))
        else:
            perturbed.append(int(i))
    if not ctrl_pool:
        raise ControlError("train split contains no control cells")
    if not perturbed:
        raise TrainError("train split contains no perturbed cells")
    for i in perturbed:
        if d.covariate_assignment(i) not in ctrl_pool:
            missing = dict(d.covariate_assignment(i))
            raise ControlError(f"no train controls for covariate assignment {missing}")

    enc_cache: dict[Condition, tuple[np.ndarray, np.ndarray]] = {}
    def encode(cond):
        if cond not in enc_cache:
            enc_cache[cond] = vocab.encode_condition(cond)
        return enc_cache[cond]

    n = len(perturbed)
    # the MSE minimizer given (perturbation, covariates) is the condition
    # mean, so averaging the targets up front changes nothing about the
    # optimum while removing almost all gradient noise
    Y = _dense(d, perturbed)
    cond_rows: dict[Condition, list[int]] = {}
    for j, i in enumerate(perturbed):
        cond_rows.setdefault(d.condition_of(i), []).append(j)
    for rows in cond_rows.values():
        Y[rows] = Y[rows].mean(axis=0)
    P = np.stack([encode(d.condition_of(i))[0] for i in perturbed])
    C = np.stack([encode(d.condition_of(i))[1] for i in perturbed])
    by_assign: dict[tuple, np.ndarray] = {}
    for j, i in enumerate(perturbed):
        by_assign.setdefault(d.covariate_assignment(i), []).append(j)
    by_assign = {a: np.array(js) for a, js in sorted(by_assign.items())}
    pools = {a: np.array(rows) for a, rows in ctrl_pool.items()}

    val_pack = []
    val_groups: dict[Condition, list[int]] = {}
    for i in split.rows(d, "val"):
        if not d.is_control(i):
            val_groups.setdefault(d.condition_of(i), []).append(int(i))
    for cond in sorted(val_groups):
        pool = pools.get(tuple(cond.covariates))
        if pool is None:
            raise ControlError(f"no train controls for val condition "
                               f"{cond.label(d.meta.combination_delimiter)}")
        picks = pool[r_val.integers(0, len(pool), size=cfg.val_controls)]
        pvec, cvec = encode(cond)
        val_pack.append((cond, _dense(d, picks),
                         np.tile(pvec, (cfg.val_controls, 1)),
                         np.tile(cvec, (cfg.val_controls, 1)),
                         _dense(d, val_groups[cond]).mean(axis=0)))

    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    ema = ({k: np.zeros_like(v) for k, v in params.items()}
           if cfg.ema_decay else None)
    ema_t = 0

    def snapshot():
        if ema is None:
            return {k: v.copy() for k, v in params.items()}
        c = 1.0 - cfg.ema_decay ** ema_t
        return {k: v / c for k, v in ema.items()}

    best = (np.inf, {k: v.copy() for k, v in params.items()}, 0)
    wait = 0
    losses, objectives = [], []
    for epoch in range(1, cfg.max_epochs + 1):
        ctrl_rows = np.empty(n, dtype=int)
        for assign, js in by_assign.items():
            pool = pools[assign]
            ctrl_rows[js] = pool[r_ctrl.integers(0, len(pool), size=len(js))]
        X = _dense(d, ctrl_rows)
        order = r_shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(net, params, X[idx], P[idx], C[idx],
                                         Y[idx], train=True, rng=r_drop)
            if not np.isfinite(loss):
                raise TrainError(f"non-finite loss at epoch {epoch}; "
                                 "lower the learning rate")
            opt.step(params, grads)
            if ema is not None:
                ema_t += 1
                for k, v in params.items():
                    ema[k] += (1.0 - cfg.ema_decay) * (v - ema[k])
            total += loss * len(idx)
        losses.append(total / n)

        if val_pack:
            candidate = snapshot()
            obj = _validation_objective(net, candidate, val_pack)
            objectives.append(obj)
            if obj < best[0]:
                best = (obj, candidate, epoch)
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
    if val_pack:
        params = best[1]
        best_epoch = best[2]
    else:
        params = snapshot()
        best_epoch = len(losses)
    history = {"train_loss": losses, "val_objective": objectives,
               "best_epoch": best_epoch}
    return TrainedModel(config=cfg, vocab=vocab, gene_names=list(d.gene_names),
                        params=params, history=history)


def _validation_objective(net, params, val_pack) -> float:
    preds, obs = [], []
    rmses = []
    for cond, X, P, C, target in val_pack:
        out, _ = net.forward(params, X, P, C, False, None)
        mean = out.mean(axis=0)
        rmses.append(float(np.sqrt(np.mean((mean - target) ** 2))))
        preds.append(ConditionAggregate(cond, mean, n_cells=1))
        obs.append(ConditionAggregate(cond, target, n_cells=1))
    rank_avg = 0.0
    if len(preds) >= 2:
        _, rank_avg = rank_metric(preds, obs, dist_kind="rmse_mean")
    return composite_objective(float(np.mean(rmses)), rank_avg)


# ---------------------------------------------------------------------------
# prediction


def predict(model: TrainedModel, d: PerturbationDataset, requests,
            n_controls: int = 100, seed: int = 0) -> list[ConditionAggregate]:
    """Predict each requested condition by averaging over sampled controls.

    LogFC is reported against the mean of the full matched control pool.
    decoder_only models ignore the control input, so they are run once per
    condition and report n_cells = 1.
    """
    if d.meta.value_space != "lognorm":
        raise UsageError("predict expects log-normalized values")
    if list(d.gene_names) != list(model.gene_names):
        raise GeneMismatchError(
            f"dataset genes do not match the model ({d.n_genes} vs "
            f"{len(model.gene_names)}); reuse the training gene selection")
    if n_controls < 1:
        raise UsageError("n_controls must be >= 1")
    net = build_network(model.config, len(model.gene_names), model.vocab)
    rng = np.random.default_rng(seed)
    out = []
    for req in requests:
        if not req.control_rows:
            raise ControlError(f"request {req.condition.label()} has an empty "
                               "control pool")
        pool = np.asarray(req.control_rows, dtype=int)
        baseline = _dense(d, pool).mean(axis=0)
        pvec, cvec = model.vocab.encode_condition(req.condition)
        if model.config.architecture == "decoder_only":
            pred, _ = net.forward(model.params, np.zeros((1, d.n_genes)),
                                  pvec[None, :], cvec[None, :], False, None)
            mean, n_cells = pred[0], 1
        else:
            picks = pool[rng.integers(0, len(pool), size=n_controls)]
            X = _dense(d, picks)
            pred, _ = net.forward(model.params, X,
                                  np.tile(pvec, (n_controls, 1)),
                                  np.tile(cvec, (n_controls, 1)), False, None)
            mean, n_cells = pred.mean(axis=0), n_controls
        out.append(ConditionAggregate(req.condition, mean, n_cells=n_cells,
                                      logfc=mean - baseline))
    return out


# ---------------------------------------------------------------------------
# model archive


_CONFIG_TYPES = {
    "architecture": str, "decoder_input": str,
    "latent_dim": int, "n_layers": int, "hidden_width": int,
    "batch_size": int, "max_epochs": int, "patience": int,
    "val_controls": int, "seed": int,
    "dropout": float, "lr": float, "weight_decay": float,
    "layer_norm": bool, "softplus_output": bool,
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, typ):
    if typ is bool:
        if text not in ("true", "false"):
            raise FormatError(f"expected true/false, got {text!r}")
        return text == "true"
    return typ(text)


def save_model(model: TrainedModel, path: str) -> None:
    """Write config.tsv, vocab.tsv, genes.tsv, params.idx and params.bin."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.tsv"), "w", encoding="utf-8") as f:
        for name in sorted(_CONFIG_TYPES):
            f.write(f"{name}\t{_format_value(getattr(model.config, name))}\n")
    save_vocab(model.vocab, os.path.join(path, "vocab.tsv"))
    with open(os.path.join(path, "genes.tsv"), "w", encoding="utf-8") as f:
        f.write("gene_name\n")
        f.writelines(g + "\n" for g in model.gene_names)
    names = sorted(model.params)
    with open(os.path.join(path, "params.idx"), "w", encoding="utf-8") as f:
        for name in names:
            shape = ",".join(str(s) for s in model.params[name].shape)
            f.write(f"{name}\t{shape}\n")
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for name in names:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path: str) -> TrainedModel:
    cfg_path = os.path.join(path, "config.tsv")
    if not os.path.isfile(cfg_path):
        raise FormatError(f"missing file {cfg_path}")
    kv = {}
    with open(cfg_path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{cfg_path}:{ln}: expected key<TAB>value")
            kv[parts[0]] = parts[1]
    unknown = set(kv) - set(_CONFIG_TYPES)
    if unknown:
        raise FormatError(f"{cfg_path}: unknown keys {sorted(unknown)}")
    missing = set(_CONFIG_TYPES) - set(kv)
    if missing:
        raise FormatError(f"{cfg_path}: missing keys {sorted(missing)}")
    cfg = ModelConfig(**{k: _parse_value(kv[k], t) for k, t in _CONFIG_TYPES.items()})

    vocab = load_vocab(os.path.join(path, "vocab.tsv"))
    with open(os.path.join(path, "genes.tsv"), encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != "gene_name":
            raise FormatError(f"{path}/genes.tsv: header must be 'gene_name'")
        genes = [line.rstrip("\n") for line in f if line.rstrip("\n")]

    shapes = []
    with open(os.path.join(path, "params.idx"), encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}/params.idx:{ln}: expected name<TAB>shape")
            shape = tuple(int(s) for s in parts[1].split(",") if s)
            shapes.append((parts[0], shape))
    params = {}
    with open(os.path.join(path, "params.bin"), "rb") as f:
        blob = f.read()
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(blob):
            raise FormatError(f"{path}/params.bin: truncated at {name!r}")
        params[name] = np.frombuffer(blob[offset:offset + size],
                                     dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise FormatError(f"{path}/params.bin: {len(blob) - offset} trailing bytes")

    model = TrainedModel(config=cfg, vocab=vocab, gene_names=genes, params=params)
    want = build_network(cfg, len(genes), vocab).init_params(
        np.random.default_rng(0))
    if sorted(want) != sorted(params):
        raise FormatError(f"{path}: parameter names do not match the architecture")
    for name in want:
        if want[name].shape != params[name].shape:
            raise FormatError(f"{path}: parameter {name!r} has shape "
                              f"{params[name].shape}, expected {want[name].shape}")
    return model
