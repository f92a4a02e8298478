# wgan_trainer.py - Wasserstein training with gradient penalty for the 3D generator
#
# One training step = `n_critic` critic updates followed by one generator
# update. Every random draw comes from streams spawned off a single seed.

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

import autodiff_tensor as ad
import matgan_logger as _mlog
from autodiff_tensor import DimensionError, Tensor
from style_gan3d import Discriminator, Generator, save_checkpoint

logger = _mlog.get("trainer")

LOG_COLUMNS = ["step", "d_loss", "g_loss", "wasserstein_estimate", "wall_time_s"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, term, value):
        self.step = step
        self.term = term
        super().__init__(f"step {step}: {term} is {value}, training diverged")


class DatasetTooSmallError(ValueError):
    pass


# ========== CONFIGURATION ==========
@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch: int = 8
    n_critic: int = 5
    lambda_gp: float = 10.0
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    z_variance: float = 0.2
    max_steps: int = 300
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.adam_eps <= 0 or self.z_variance <= 0:
            raise ValueError(f"lr, adam_eps and z_variance must be positive: {self}")
        if self.batch < 1 or self.n_critic < 1 or self.checkpoint_every < 1 or self.max_steps < 0:
            raise ValueError(f"batch, n_critic and checkpoint_every must be >= 1, max_steps >= 0: {self}")
        if self.lambda_gp < 0:
            raise ValueError(f"lambda_gp must be non-negative, got {self.lambda_gp}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1): {self.beta1}, {self.beta2}")


# ========== ADAM ==========
@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_update(params, grads, state, lr, beta1, beta2, eps):
    """Bias-corrected Adam step applied to each parameter's data in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("adam_update", f"{len(params)} params, {len(grads)} grads, {len(state.m)} slots")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError("adam_update", f"parameter {i}: {p.shape} vs gradient {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data = (p.data - step).astype(p.dtype)
    return params


# ========== SAMPLING ==========
def sample_latent(rng, n, dim, variance=0.2, dtype=np.float32):
    """z ~ N(0, variance I), shape [n, dim]."""
    return rng.normal(0.0, np.sqrt(variance), size=(n, dim)).astype(dtype)


def to_packs(samples, pack_size):
    """[m * pack_size, 1, S, S, S] -> [m, pack_size, S, S, S], consecutive samples share a pack."""
    n = samples.shape[0]
    if n % pack_size:
        raise DimensionError("to_packs", f"{n} samples do not split into packs of {pack_size}")
    shape = (n // pack_size, pack_size) + tuple(samples.shape[2:])
    if isinstance(samples, Tensor):
        return ad.reshape(samples, shape)
    return samples.reshape(shape)


# ========== LOSSES ==========
def gradient_penalty(critic, real_pack, fake_pack, rng=None, epsilon=None):
    """
    mean over packs of (||grad_x D(x_hat)||_2 - 1)^2, x_hat = e * real + (1 - e) * fake
    with e ~ U[0, 1] per pack. Differentiable with respect to the critic's parameters.
    """
    real = real_pack.data if isinstance(real_pack, Tensor) else np.asarray(real_pack)
    fake = fake_pack.data if isinstance(fake_pack, Tensor) else np.asarray(fake_pack)
    if real.shape != fake.shape:
        raise DimensionError("gradient_penalty", f"real {real.shape} and fake {fake.shape} differ")
    if epsilon is None:
        rng = rng if rng is not None else np.random.default_rng()
        epsilon = rng.uniform(0.0, 1.0, size=real.shape[0])
    e = np.asarray(epsilon, dtype=real.dtype).reshape((-1,) + (1,) * (real.ndim - 1))
    x_hat = Tensor(e * real + (1.0 - e) * fake, requires_grad=True)

    scores = critic(x_hat)
    (g,) = ad.grad(ad.sum(scores), [x_hat], create_graph=True)
    gap = ad.shift(ad.l2_norm(g), -1.0)
    return ad.mean(ad.mul(gap, gap))


def critic_loss(real_scores, fake_scores, penalty=None, lambda_gp=0.0):
    """mean(D(G(z))) - mean(D(x)) + lambda * penalty."""
    loss = ad.sub(ad.mean(fake_scores), ad.mean(real_scores))
    if penalty is not None and lambda_gp:
        loss = ad.add(loss, ad.scale(penalty, lambda_gp))
    return loss


def generator_loss(fake_scores):
    return ad.neg(ad.mean(fake_scores))


def d_loss(critic, generator, real_pack, z, pack_size, lambda_gp=10.0, rng=None):
    """Critic objective on a real batch and a latent batch; returns (loss, terms)."""
    with ad.no_grad():
        fake = generator(Tensor(z))
    fake_pack = Tensor(to_packs(fake.data, pack_size))
    real_pack = real_pack if isinstance(real_pack, Tensor) else Tensor(real_pack)
    real_scores = critic(real_pack)
    fake_scores = critic(fake_pack)
    penalty = gradient_penalty(critic, real_pack, fake_pack, rng) if lambda_gp else None
    loss = critic_loss(real_scores, fake_scores, penalty, lambda_gp)
    terms = {
        "real_mean": float(real_scores.data.mean()),
        "fake_mean": float(fake_scores.data.mean()),
        "penalty": float(penalty.item()) if penalty is not None else 0.0,
    }
    return loss, terms


def g_loss(critic, generator, z, pack_size):
    fake = generator(Tensor(z))
    return generator_loss(critic(to_packs(fake, pack_size)))


# ========== TRAINING LOOP ==========
@dataclass
class StepRecord:
    step: int
    d_loss: float
    g_loss: float
    wasserstein_estimate: float
    wall_time_s: float

    def row(self):
        return [self.step, repr(self.d_loss), repr(self.g_loss), repr(self.wasserstein_estimate),
                f"{self.wall_time_s:.3f}"]


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    trace: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    critic_updates: int = 0
    generator_updates: int = 0

    def loss_trace(self):
        """(d_loss, g_loss, wasserstein_estimate) per step, without wall time."""
        return [(r.d_loss, r.g_loss, r.wasserstein_estimate) for r in self.trace]


class _PackSampler:
    """Draws pack_size * m samples per call from a seeded reshuffled order."""

    def __init__(self, data, count, rng):
        self.data = data
        self.count = count
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)

    def draw(self):
        if self.order.size < self.count:
            self.order = np.concatenate([self.order, self.rng.permutation(self.data.shape[0])])
        idx, self.order = self.order[:self.count], self.order[self.count:]
        return self.data[idx]


def _check_finite(step, term, value):
    if not np.isfinite(value):
        raise TrainingDivergedError(step, term, value)


def _checked_grads(step, term, grads):
    for grad in grads:
        bad = grad.data[~np.isfinite(grad.data)]
        if bad.size:
            raise TrainingDivergedError(step, term, float(bad[0]))
    return grads


def _as_dataset(dataset, model_config):
    arrays = [np.asarray(getattr(item, "data", item)) for item in dataset]
    s = model_config.output_size
    for i, a in enumerate(arrays):
        if a.shape != (s, s, s):
            raise DimensionError("train", f"sample {i} has shape {a.shape}, model expects {(s, s, s)}")
    if not arrays:
        return np.empty((0, s, s, s), dtype=model_config.np_dtype)
    return np.stack(arrays).astype(model_config.np_dtype)


def train(config, model_config, dataset, out_dir=None, generator=None, discriminator=None, start_step=0):
    """
    Run `config.max_steps` steps on `dataset` (VoxelGrids or [S, S, S] arrays).
    With `out_dir`, writes train_log.csv and a checkpoint every `checkpoint_every` steps.
    """
    data = _as_dataset(dataset, model_config)
    pack = model_config.pack_size
    need = pack * config.batch
    if data.shape[0] < need:
        raise DatasetTooSmallError(f"dataset has {data.shape[0]} samples, one step needs "
                                   f"pack_size * batch = {need}")

    data_seq, latent_seq, eps_seq = np.random.SeedSequence(config.seed).spawn(3)
    sampler = _PackSampler(data[:, None], need, np.random.default_rng(data_seq))
    z_rng = np.random.default_rng(latent_seq)
    eps_rng = np.random.default_rng(eps_seq)

    g = generator if generator is not None else Generator(model_config, seed=config.seed)
    d = discriminator if discriminator is not None else Discriminator(model_config, seed=config.seed)
    g_params, d_params = g.parameters(), d.parameters()
    g_state, d_state = AdamState.for_params(g_params), AdamState.for_params(d_params)
    result = TrainResult(generator=g, discriminator=d)

    log_file = writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.csv"), "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)

    logger.info(f"Training {config.max_steps} steps: {data.shape[0]} samples, "
                f"batch {config.batch} x pack {pack}, n_critic {config.n_critic}, λ={config.lambda_gp}")
    t0 = time.perf_counter()
    try:
        for step in range(start_step + 1, start_step + config.max_steps + 1):
            for _ in range(config.n_critic):
                real = to_packs(sampler.draw(), pack)
                z = sample_latent(z_rng, need, model_config.latent_dim, config.z_variance, data.dtype)
                loss_d, terms = d_loss(d, g, real, z, pack, config.lambda_gp, eps_rng)
                _check_finite(step, "d_loss", loss_d.item())
                _check_finite(step, "gradient_penalty", terms["penalty"])
                grads = _checked_grads(step, "critic_gradient", ad.grad(loss_d, d_params))
                adam_update(d_params, grads, d_state,
                            config.lr, config.beta1, config.beta2, config.adam_eps)
                result.critic_updates += 1

            z = sample_latent(z_rng, need, model_config.latent_dim, config.z_variance, data.dtype)
            loss_g = g_loss(d, g, z, pack)
            _check_finite(step, "g_loss", loss_g.item())
            grads = _checked_grads(step, "generator_gradient", ad.grad(loss_g, g_params))
            adam_update(g_params, grads, g_state,
                        config.lr, config.beta1, config.beta2, config.adam_eps)
            result.generator_updates += 1

            record = StepRecord(step, loss_d.item(), loss_g.item(),
                                terms["real_mean"] - terms["fake_mean"], time.perf_counter() - t0)
            result.trace.append(record)
            if writer is not None:
                writer.writerow(record.row())
                log_file.flush()
            logger.debug(f"step {step}: L_D={record.d_loss:.5g} L_G={record.g_loss:.5g} "
                         f"W={record.wasserstein_estimate:.5g}")

            last = step == start_step + config.max_steps
            if out_dir is not None and (step % config.checkpoint_every == 0 or last):
                path = os.path.join(out_dir, f"checkpoint_{step:06d}.3dmg")
                save_checkpoint(path, g, d, step)
                result.checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()

    if result.critic_updates != config.n_critic * result.generator_updates:
        raise RuntimeError(f"update audit failed: {result.critic_updates} critic vs "
                           f"{result.generator_updates} generator updates")
    logger.info(f"Training finished after {result.generator_updates} steps "
                f"({result.critic_updates} critic updates, {time.perf_counter() - t0:.1f}s)")
    return result
