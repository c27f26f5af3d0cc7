"""Training loop: schedules, optimizer, checkpointing, deterministic replay.

The objective is maximized, so each step minimizes its negation.  Both the
norm weight and the KL weight ramp linearly from zero; the norm weight can
instead be pinned to a constant.  A checkpoint is persisted every time the
validation perplexity reaches a new minimum, and the serialized state
(parameters, optimizer moments, step counter, generator states) resumes a
run exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .corpus import PAD_ID, DialoguePair, Vocabulary, encode_pairs
from .errors import DomainError, EmptyCorpus, NonFiniteLoss
from .model import ModelConfig, SegCVAE, select_positive, total_loss
from .parallel import worker_count

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.txt"


@dataclass
class TrainingConfig:
    """Every knob of a run: optimizer, schedules, model dimensions, ablations."""

    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 50
    grad_clip: float = 5.0
    snorm_step: int = 20000
    lambda_constant: float | None = None
    kl_anneal_steps: int = 10000
    seed: int = 123456
    vocab_cap: int = 20000
    max_len: int = 25
    emb_dim: int = 300
    hidden_dim: int = 300
    latent_dim: int = 300
    kernel_width: int = 3
    conv_channels: int = 3
    num_triggers: int = 8
    tau: float = 0.1
    gs_noise: bool = True
    no_is: bool = False
    no_eg: bool = False
    no_san: bool = False
    no_scn: bool = False
    no_sdn: bool = False

    def validate(self):
        positive = ("learning_rate", "batch_size", "epochs", "grad_clip",
                    "snorm_step", "kl_anneal_steps", "vocab_cap", "max_len",
                    "emb_dim", "hidden_dim", "latent_dim", "kernel_width",
                    "conv_channels", "num_triggers", "tau")
        for name in positive:
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda_constant is not None and not 0.0 <= self.lambda_constant <= 1.0:
            raise DomainError(f"lambda_constant must lie in [0, 1], got {self.lambda_constant}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, max_len=self.max_len, emb_dim=self.emb_dim,
            hidden_dim=self.hidden_dim, latent_dim=self.latent_dim,
            kernel_width=self.kernel_width, conv_channels=self.conv_channels,
            num_triggers=self.num_triggers, tau=self.tau,
            no_is=self.no_is, no_eg=self.no_eg, no_san=self.no_san,
            no_scn=self.no_scn, no_sdn=self.no_sdn)


def lambda_schedule(step: int, cfg: TrainingConfig) -> float:
    """Norm weight: linear 0 to 1 over the first snorm_step batches, unless
    pinned by lambda_constant (then the ramp is inactive)."""
    if step < 0:
        raise DomainError("step must be non-negative")
    if cfg.lambda_constant is not None:
        return cfg.lambda_constant
    return min(step / cfg.snorm_step, 1.0)


def kl_anneal(step: int, cfg: TrainingConfig) -> float:
    """KL weight: linear 0 to 1 over the first kl_anneal_steps batches."""
    if step < 0:
        raise DomainError("step must be non-negative")
    return min(step / cfg.kl_anneal_steps, 1.0)


class Adam:
    """Adaptive-moment updates with global-norm gradient clipping.

    Parameters whose gradient is absent are left untouched, moments
    included.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, clip: float = None):
        names = [k for k in sorted(self.params) if self.params[k].grad is not None]
        scale = 1.0
        if clip is not None:
            total = math.fsum(float((self.params[k].grad ** 2).sum()) for k in names)
            norm = math.sqrt(total)
            if norm > clip:
                scale = clip / norm
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for k in names:
            g = self.params[k].grad * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / correct1
            v_hat = self.v[k] / correct2
            self.params[k].values = self.params[k].values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    """Everything a run needs to continue exactly where it stopped."""

    model: SegCVAE
    optimizer: Adam
    rng: Rng         # trigger/latent noise stream
    data_rng: Rng    # batch-order stream
    step: int = 0
    best_ppl: float = math.inf


def init_state(cfg: TrainingConfig, vocab: Vocabulary) -> TrainState:
    cfg.validate()
    model = SegCVAE(cfg.model_config(vocab.size), vocab.embedding, Rng(cfg.seed))
    return TrainState(
        model=model,
        optimizer=Adam(model.params, lr=cfg.learning_rate),
        rng=Rng(cfg.seed + 1),
        data_rng=Rng(cfg.seed + 2))


def train_step(batch: tuple[np.ndarray, np.ndarray], state: TrainState,
               cfg: TrainingConfig) -> dict:
    """One optimization step; returns the logged statistics."""
    ctx_ids, resp_ids = batch
    lam = lambda_schedule(state.step, cfg)
    klw = kl_anneal(state.step, cfg)
    parts = state.model.forward_losses(ctx_ids, resp_ids, klw, state.rng,
                                       gs_noise=cfg.gs_noise)
    objective = total_loss(parts["elbo_plus"], parts["san"], parts["scn"],
                           parts["sdn"], lam, no_san=cfg.no_san,
                           no_scn=cfg.no_scn, no_sdn=cfg.no_sdn)
    loss = ad.mul(objective, -1.0)
    if not np.isfinite(loss.values):
        raise NonFiniteLoss(state.step)
    state.model.zero_grad()
    loss.backward()
    state.optimizer.step(clip=cfg.grad_clip)
    stats = {
        "step": state.step,
        "elbo": float(parts["elbo_plus"].values),
        "recon": parts["recon_mean"],
        "kl": parts["kl_mean"],
        "san": float(parts["san"].values),
        "scn": float(parts["scn"].values),
        "sdn": float(parts["sdn"].values),
        "loss": float(loss.values),
    }
    state.step += 1
    return stats


def format_stats(stats: dict) -> str:
    return ("step={step} elbo={elbo!r} recon={recon!r} kl={kl!r} "
            "san={san!r} scn={scn!r} sdn={sdn!r} loss={loss!r}").format(**stats)


def iterate_batches(n: int, batch_size: int, data_rng: Rng):
    order = data_rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# evaluation-time likelihood
# ---------------------------------------------------------------------------

def _branch_recon(model: SegCVAE, ctx_ids, resp_ids) -> tuple[np.ndarray, np.ndarray]:
    """Per-branch teacher-forced log-likelihoods with z at the prior mean.

    Branch conditioning never reads the response encoding; the response
    appears only as the scored target sequence.
    """
    xs = model.prominent_semantics(ctx_ids, noise=False)
    recons = []
    for x in xs:
        mu_p, _ = model.prior(x)
        state = model.decoder_initial(mu_p, x)
        recon, _ = model._teacher_forced(resp_ids, state, want_generated=False)
        recons.append(recon.values)
    tokens = (resp_ids[:, 1:] != PAD_ID).sum(axis=1)
    return np.stack(recons), tokens


def _ppl_shard(model: SegCVAE, ctx_ids, resp_ids, batch_size: int) -> tuple[float, int]:
    nll = 0.0
    tokens = 0
    with ad.no_grad():
        for start in range(0, ctx_ids.shape[0], batch_size):
            ctx = ctx_ids[start:start + batch_size]
            resp = resp_ids[start:start + batch_size]
            recons, counts = _branch_recon(model, ctx, resp)
            best = np.atleast_1d(select_positive([Tensor(r) for r in recons]))
            nll -= float(recons[best, np.arange(ctx.shape[0])].sum())
            tokens += int(counts.sum())
    return nll, tokens


def perplexity(model: SegCVAE, dataset: tuple[np.ndarray, np.ndarray],
               batch_size: int = 32) -> float:
    """exp of the mean per-token negative log-likelihood under teacher
    forcing, with the latent at the prior mean and the branch chosen by the
    largest prior-side likelihood."""
    ctx_ids, resp_ids = dataset
    if ctx_ids.shape[0] == 0:
        raise EmptyCorpus("cannot evaluate perplexity on an empty dataset")
    workers = min(worker_count(), ctx_ids.shape[0])
    shards = np.array_split(np.arange(ctx_ids.shape[0]), workers)
    if workers == 1:
        results = [_ppl_shard(model, ctx_ids, resp_ids, batch_size)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda idx: _ppl_shard(model, ctx_ids[idx], resp_ids[idx], batch_size),
                shards))
    nll = math.fsum(r[0] for r in results)
    tokens = sum(r[1] for r in results)
    return math.exp(nll / tokens)


# ---------------------------------------------------------------------------
# state persistence
# ---------------------------------------------------------------------------

def save_state(state: TrainState, cfg: TrainingConfig, path):
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.model.params.items():
        arrays[f"param.{name}"] = p.values
        arrays[f"adam.m.{name}"] = state.optimizer.m[name]
        arrays[f"adam.v.{name}"] = state.optimizer.v[name]
    arrays["opt.t"] = np.array(state.optimizer.t, dtype=np.uint64)
    arrays["train.step"] = np.array(state.step, dtype=np.uint64)
    arrays["train.best_ppl"] = np.array(state.best_ppl, dtype=np.float64)
    arrays["rng.noise"] = state.rng.get_state()
    arrays["rng.data"] = state.data_rng.get_state()
    meta = state.model.config.meta()
    meta["seed"] = str(cfg.seed)
    ad.save_checkpoint(path, arrays, meta)


def load_state(path, cfg: TrainingConfig) -> TrainState:
    arrays, meta = ad.load_checkpoint(path)
    config = ModelConfig.from_meta(meta)
    model = SegCVAE(config, np.zeros((config.vocab_size, config.emb_dim)), Rng(0))
    model.load_state({k[len("param."):]: v for k, v in arrays.items()
                      if k.startswith("param.")})
    optimizer = Adam(model.params, lr=cfg.learning_rate)
    optimizer.t = int(arrays["opt.t"])
    for name in model.params:
        optimizer.m[name] = np.array(arrays[f"adam.m.{name}"])
        optimizer.v[name] = np.array(arrays[f"adam.v.{name}"])
    rng, data_rng = Rng(0), Rng(0)
    rng.set_state(arrays["rng.noise"])
    data_rng.set_state(arrays["rng.data"])
    return TrainState(model=model, optimizer=optimizer, rng=rng,
                      data_rng=data_rng, step=int(arrays["train.step"]),
                      best_ppl=float(arrays["train.best_ppl"]))


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)
    val_ppl: list[float] = field(default_factory=list)


def fit(splits: dict[str, Sequence[DialoguePair]], vocab: Vocabulary,
        cfg: TrainingConfig, run_dir) -> FitResult:
    """Train for up to ``cfg.epochs`` epochs over ``splits['train']``,
    checkpointing at every new validation-perplexity minimum."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = list(splits.get("train", ()))
    valid_pairs = list(splits.get("valid", ())) or train_pairs
    if not train_pairs:
        raise EmptyCorpus("training split is empty")

    train_data = encode_pairs(train_pairs, vocab, cfg.max_len)
    valid_data = encode_pairs(valid_pairs, vocab, cfg.max_len)
    state = init_state(cfg, vocab)

    ckpt_path = run_dir / CHECKPOINT_NAME
    log_path = run_dir / LOG_NAME
    result = FitResult(ckpt_path, log_path)
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            for index in iterate_batches(len(train_pairs), cfg.batch_size, state.data_rng):
                batch = (train_data[0][index], train_data[1][index])
                stats = train_step(batch, state, cfg)
                log.write(format_stats(stats) + "\n")
                result.history.append(stats)
            val_ppl = perplexity(state.model, valid_data, batch_size=cfg.batch_size)
            result.val_ppl.append(val_ppl)
            log.write(f"epoch={epoch} val_ppl={val_ppl!r}\n")
            if val_ppl < state.best_ppl:
                state.best_ppl = val_ppl
                save_state(state, cfg, ckpt_path)
    if not ckpt_path.exists():  # non-finite ppl throughout; keep the last state
        save_state(state, cfg, ckpt_path)
    return result
