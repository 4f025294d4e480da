"""Conditional diffusion core for the 2D toy problem.

Linear-beta DDPM schedule, a small conditional MLP noise predictor with
sinusoidal time embeddings and a learned label table (last row = the
null condition), DDPM training, deterministic DDIM decoding/inversion
over a uniform step grid, classifier-free guidance, and two-stage
sampling that switches the condition on at a chosen timestep.

Timestep convention: alpha_bar has length T+1 with alpha_bar[0] = 1, so
t = 0 is the clean-data point and DDIM steps move between grid points
of [0, T].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InvalidInputError, TrainingDivergedError
from .rng import Rng
from .toydata import ToyDataset


@dataclass
class NoiseSchedule:
    t_max: int
    beta: np.ndarray            # beta[0] unused, beta[1..T] the forward variances
    alpha_bar: np.ndarray       # alpha_bar[t] = prod_{k<=t} (1 - beta_k), alpha_bar[0] = 1
    ddim_eta: float = 0.0
    ddim_steps: int = 100


def linear_schedule(t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                    ddim_eta: float = 0.0, ddim_steps: int = 100) -> NoiseSchedule:
    beta = np.zeros(t_max + 1)
    beta[1:] = np.linspace(beta_start, beta_end, t_max)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(t_max=t_max, beta=beta, alpha_bar=alpha_bar,
                         ddim_eta=ddim_eta, ddim_steps=ddim_steps)


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of (possibly batched) timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(u: np.ndarray) -> np.ndarray:
    return u / (1.0 + np.exp(-u))


def _silu_grad(u: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-u))
    return sig * (1.0 + u * (1.0 - sig))


class CondDenoiser:
    """3-layer MLP noise predictor f(x_t, t, cond) -> eps_hat.

    Input is the 2D point concatenated with a 16-d sinusoidal time
    embedding and a 16-d learned label embedding; label index
    `n_classes` is the null condition.
    """

    def __init__(self, rng: Rng, n_classes: int = 2, hidden_dim: int = 80, embed_dim: int = 16):
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        in_dim = 2 + 2 * embed_dim
        h = hidden_dim
        self.W1 = Tensor(rng.normal((in_dim, h)) * np.sqrt(2.0 / in_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(h), requires_grad=True)
        self.W2 = Tensor(rng.normal((h, h)) * np.sqrt(2.0 / h), requires_grad=True)
        self.b2 = Tensor(np.zeros(h), requires_grad=True)
        self.W3 = Tensor(rng.normal((h, 2)) * np.sqrt(2.0 / h), requires_grad=True)
        self.b3 = Tensor(np.zeros(2), requires_grad=True)
        self.label_emb = Tensor(rng.normal((n_classes + 1, embed_dim)), requires_grad=True)

    @property
    def null_id(self) -> int:
        return self.n_classes

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3, self.label_emb]

    def _inputs_np(self, x: np.ndarray, t, cond) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = x.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (b,))
        cond = np.broadcast_to(np.atleast_1d(np.asarray(cond, dtype=np.int64)), (b,))
        temb = time_embedding(t, self.embed_dim)
        lemb = self.label_emb.data[cond]
        return np.concatenate([x, temb, lemb], axis=1)

    def _cache(self, x, t, cond) -> dict:
        inp = self._inputs_np(x, t, cond)
        a1 = inp @ self.W1.data + self.b1.data
        h1 = _silu(a1)
        a2 = h1 @ self.W2.data + self.b2.data
        h2 = _silu(a2)
        out = h2 @ self.W3.data + self.b3.data
        return {"a1": a1, "h1": h1, "a2": a2, "h2": h2, "out": out}

    def eps(self, x, t, cond) -> np.ndarray:
        """Noise prediction, batched, pure numpy (no graph)."""
        return self._cache(x, t, cond)["out"]

    def hidden(self, x, t, cond, layer: int = 2) -> np.ndarray:
        """Post-activation hidden features of the chosen layer (1 or 2)."""
        if layer not in (1, 2):
            raise InvalidInputError(f"layer must be 1 or 2, got {layer}")
        c = self._cache(x, t, cond)
        return c["h1"] if layer == 1 else c["h2"]

    def feature_jvp(self, x, t, cond, v: np.ndarray, layer: int = 2) -> np.ndarray:
        """Directional derivative of hidden(layer) along v in data space."""
        if layer not in (1, 2):
            raise InvalidInputError(f"layer must be 1 or 2, got {layer}")
        c = self._cache(x, t, cond)
        dinp = np.zeros((1, 2 + 2 * self.embed_dim))
        dinp[0, :2] = np.asarray(v, dtype=np.float64)
        da1 = dinp @ self.W1.data
        dh1 = _silu_grad(c["a1"]) * da1
        if layer == 1:
            return dh1[0]
        da2 = dh1 @ self.W2.data
        dh2 = _silu_grad(c["a2"]) * da2
        return dh2[0]

    def eps_graph(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> Tensor:
        """Autodiff forward pass for training (gradients wrt parameters)."""
        x_in = Tensor(np.atleast_2d(x_t))
        temb = Tensor(time_embedding(t, self.embed_dim))
        lemb = ad.embedding(self.label_emb, cond)
        inp = ad.concat([x_in, temb, lemb], axis=1)
        h1 = ad.silu(inp @ self.W1 + self.b1)
        h2 = ad.silu(h1 @ self.W2 + self.b2)
        return h2 @ self.W3 + self.b3


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    label_drop: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class LatentState:
    x: np.ndarray
    t: int
    cond: int


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward noising: sqrt(a_t) x0 + sqrt(1 - a_t) eps."""
    t_arr = np.atleast_1d(np.asarray(t))
    if np.any(t_arr < 1) or np.any(t_arr > sched.t_max):
        raise InvalidInputError(f"timestep out of range [1, {sched.t_max}]")
    a = sched.alpha_bar[t_arr]
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    out = np.sqrt(a)[:, None] * x0 + np.sqrt(1.0 - a)[:, None] * eps
    return out[0] if out.shape[0] == 1 and np.isscalar(t) else out


def train_cdm(data: ToyDataset, sched: NoiseSchedule, cfg: TrainConfig, rng: Rng):
    """DDPM training of the conditional denoiser.

    Minimizes mean squared error between true and predicted noise, with
    labels replaced by the null condition at rate cfg.label_drop.
    Returns (model, per-epoch mean losses).
    """
    if len(data) == 0:
        raise InvalidInputError("empty dataset")
    model = CondDenoiser(rng.split("init"))
    opt = ad.Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                  eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    train_rng = rng.split("train")
    xs, ys = data.xs(), data.ys()
    n = len(data)
    losses = []
    for epoch in range(cfg.epochs):
        order = train_rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            b = len(idx)
            t = train_rng.integers(1, sched.t_max + 1, size=b)
            eps = train_rng.normal((b, 2))
            drop = train_rng.uniform(size=b) < cfg.label_drop
            cond = np.where(drop, model.null_id, ys[idx])
            x_t = q_sample(xs[idx], t, eps, sched)
            pred = model.eps_graph(x_t, t, cond)
            diff = pred - Tensor(eps)
            loss = (diff * diff).mean()
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
    return model, losses


def cfg_combine(eps_null: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Guided prediction eps_null + w (eps_cond - eps_null).

    Written as (1-w) eps_null + w eps_cond so w = 0 returns the
    unconditional and w = 1 the conditional prediction bitwise.
    """
    return (1.0 - w) * eps_null + w * eps_cond


def guided_eps(model: CondDenoiser, x, t, cond, cfg_scale: float) -> np.ndarray:
    """Classifier-free-guided prediction at scale w = cfg_scale.

    w = 1 is the plain conditional prediction and w = 0 the plain
    unconditional one (single model evaluation each, no blending
    arithmetic); any other w blends the two branches.
    """
    cond_arr = np.atleast_1d(np.asarray(cond, dtype=np.int64))
    if cfg_scale == 1.0 or np.all(cond_arr == model.null_id):
        return model.eps(x, t, cond)
    if cfg_scale == 0.0:
        return model.eps(x, t, np.full_like(cond_arr, model.null_id))
    eps_null = model.eps(x, t, np.full_like(cond_arr, model.null_id))
    eps_cond = model.eps(x, t, cond)
    return cfg_combine(eps_null, eps_cond, cfg_scale)


def ddim_grid(sched: NoiseSchedule, top_t: int) -> list[int]:
    """Ascending timestep grid from 0 to top_t (inclusive), uniformly subsampled."""
    if top_t < 0 or top_t > sched.t_max:
        raise InvalidInputError(f"timestep out of range [0, {sched.t_max}]")
    base = np.unique(np.round(np.linspace(0, sched.t_max, sched.ddim_steps + 1)).astype(int))
    grid = sorted(set(g for g in base.tolist() if g < top_t) | {0, top_t})
    return grid


def decode_batch(x: np.ndarray, t: int, cond, model: CondDenoiser, sched: NoiseSchedule,
                 cfg_scale: float = 1.0, rng: Rng | None = None,
                 te_switch: int | None = None, null_before_switch: bool = False) -> np.ndarray:
    """DDIM decode of a batch from timestep t down to 0.

    With te_switch set, steps whose upper timestep exceeds the switch
    use the null condition (two-stage sampling); otherwise cond is used
    throughout. eta > 0 adds per-step noise drawn from rng.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    if t == 0:
        return x
    grid = ddim_grid(sched, t)
    cond_arr = np.broadcast_to(np.atleast_1d(np.asarray(cond, dtype=np.int64)), (x.shape[0],))
    null_arr = np.full(x.shape[0], model.null_id, dtype=np.int64)
    eta = sched.ddim_eta
    if eta != 0.0 and rng is None:
        raise InvalidInputError("eta > 0 requires an rng for the per-step noise")
    for hi, lo in zip(reversed(grid[1:]), reversed(grid[:-1])):
        step_cond = cond_arr
        if null_before_switch and te_switch is not None and hi > te_switch:
            step_cond = null_arr
        eps_hat = guided_eps(model, x, hi, step_cond, cfg_scale)
        a_hi, a_lo = sched.alpha_bar[hi], sched.alpha_bar[lo]
        x0_hat = (x - np.sqrt(1.0 - a_hi) * eps_hat) / np.sqrt(a_hi)
        if eta != 0.0:
            xi = eta * np.sqrt((1.0 - a_lo) / (1.0 - a_hi)) * np.sqrt(1.0 - a_hi / a_lo)
        else:
            xi = 0.0
        x = np.sqrt(a_lo) * x0_hat + np.sqrt(max(1.0 - a_lo - xi * xi, 0.0)) * eps_hat
        if eta != 0.0:
            x = x + xi * rng.normal(x.shape)
    return x


def invert_batch(x0: np.ndarray, target_t: int, cond, model: CondDenoiser,
                 sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM inversion of a batch from data space to target_t.

    Reverses the eta = 0 decode by evaluating the noise prediction at the
    current lower-noise state (timestep clamped to at least 1) and
    re-noising one grid step at a time.
    """
    if sched.ddim_eta != 0.0:
        raise ContractError("inversion requires a deterministic schedule (eta = 0)")
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    if target_t == 0:
        return x
    grid = ddim_grid(sched, target_t)
    cond_arr = np.broadcast_to(np.atleast_1d(np.asarray(cond, dtype=np.int64)), (x.shape[0],))
    for lo, hi in zip(grid[:-1], grid[1:]):
        eps_hat = model.eps(x, max(lo, 1), cond_arr)
        a_lo, a_hi = sched.alpha_bar[lo], sched.alpha_bar[hi]
        x0_hat = (x - np.sqrt(1.0 - a_lo) * eps_hat) / np.sqrt(a_lo)
        x = np.sqrt(a_hi) * x0_hat + np.sqrt(1.0 - a_hi) * eps_hat
    return x


def ddim_decode(state: LatentState, model: CondDenoiser, sched: NoiseSchedule,
                cfg_scale: float = 1.0, rng: Rng | None = None) -> np.ndarray:
    """Single-sample decode from a latent state back to data space."""
    return decode_batch(state.x, state.t, state.cond, model, sched, cfg_scale, rng)[0]


def ddim_invert(x0, target_t: int, cond: int, model: CondDenoiser,
                sched: NoiseSchedule) -> LatentState:
    """Single-sample inversion to target_t; returns the latent state."""
    x = invert_batch(x0, target_t, cond, model, sched)[0]
    return LatentState(x=x, t=target_t, cond=cond)


def two_stage_batch(n: int, t_e: int, cond: int, model: CondDenoiser, sched: NoiseSchedule,
                    rng: Rng, cfg_scale: float = 1.0) -> np.ndarray:
    """Sample n points: null condition above t_e, the class condition at or below."""
    if t_e < 0 or t_e > sched.t_max:
        raise InvalidInputError(f"t_e out of range [0, {sched.t_max}]")
    x_T = rng.normal((n, 2))
    return decode_batch(x_T, sched.t_max, cond, model, sched, cfg_scale, rng,
                        te_switch=t_e, null_before_switch=True)


def two_stage_sample(t_e: int, cond: int, model: CondDenoiser, sched: NoiseSchedule,
                     rng: Rng, cfg_scale: float = 1.0) -> np.ndarray:
    return two_stage_batch(1, t_e, cond, model, sched, rng, cfg_scale)[0]


def feature_extract(state: LatentState, model: CondDenoiser, layer: int = 2) -> np.ndarray:
    """Hidden-layer feature vector of the denoiser at the state's timestep."""
    return model.hidden(state.x, state.t, state.cond, layer)[0]


def save_checkpoint(model: CondDenoiser, path: str, kind: str = "cdm") -> None:
    payload = {
        "format": f"{kind}-checkpoint-v1",
        "n_classes": model.n_classes,
        "hidden_dim": model.hidden_dim,
        "embed_dim": model.embed_dim,
        "params": {
            name: p.data.tolist()
            for name, p in zip(["W1", "b1", "W2", "b2", "W3", "b3", "label_emb"],
                               model.parameters())
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def load_checkpoint(path: str) -> CondDenoiser:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != "cdm-checkpoint-v1":
        raise InvalidInputError(f"unexpected checkpoint format: {payload.get('format')}")
    model = CondDenoiser(Rng(0), n_classes=payload["n_classes"],
                         hidden_dim=payload["hidden_dim"], embed_dim=payload["embed_dim"])
    for name, p in zip(["W1", "b1", "W2", "b2", "W3", "b3", "label_emb"], model.parameters()):
        p.data = np.asarray(payload["params"][name], dtype=np.float64)
    return model
