"""The segmentation-guided conditional VAE.

A context is segmented into several "prominent semantics" vectors: trigger
networks (one convolution plus one dense projection, sharpened by a
temperature softmax) select word subsets from inside the context and from
the whole vocabulary; a shared recurrent encoder turns each selection into
one semantics vector.  Each vector conditions its own recognition/prior
latent heads and the decoder; the branch with the largest evidence lower
bound is the only one optimized (selection is not differentiated through).
Three self-supervised norms keep the vectors mutually distinct, centered on
the context, and aligned with how ground-truth responses relate to each
other inside a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .corpus import PAD_ID, SPECIALS
from .errors import DomainError, ShapeError

LOGVAR_CLIP = 10.0


@dataclass
class ModelConfig:
    """Network dimensions and structural ablation switches."""

    vocab_size: int
    max_len: int = 25
    emb_dim: int = 300
    hidden_dim: int = 300
    latent_dim: int = 300
    kernel_width: int = 3
    conv_channels: int = 3
    num_triggers: int = 8
    tau: float = 0.1
    no_is: bool = False
    no_eg: bool = False
    no_san: bool = False
    no_scn: bool = False
    no_sdn: bool = False

    def validate(self):
        for name in ("vocab_size", "max_len", "emb_dim", "hidden_dim",
                     "latent_dim", "kernel_width", "conv_channels", "num_triggers"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tau <= 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.max_len < self.kernel_width:
            raise ShapeError(f"max_len {self.max_len} shorter than kernel width {self.kernel_width}")

    def meta(self) -> dict[str, str]:
        """Hyperparameters under their checkpoint-index key names."""
        return {
            "max_clen": str(self.max_len), "N_emb": str(self.emb_dim),
            "N_hid": str(self.hidden_dim), "d_z": str(self.latent_dim),
            "m": str(self.kernel_width), "chan": str(self.conv_channels),
            "M": str(self.num_triggers), "tau": repr(self.tau),
            "vocab_size": str(self.vocab_size),
            "no_is": str(int(self.no_is)), "no_eg": str(int(self.no_eg)),
            "no_san": str(int(self.no_san)), "no_scn": str(int(self.no_scn)),
            "no_sdn": str(int(self.no_sdn)),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        return cls(
            vocab_size=int(meta["vocab_size"]), max_len=int(meta["max_clen"]),
            emb_dim=int(meta["N_emb"]), hidden_dim=int(meta["N_hid"]),
            latent_dim=int(meta["d_z"]), kernel_width=int(meta["m"]),
            conv_channels=int(meta["chan"]), num_triggers=int(meta["M"]),
            tau=float(meta["tau"]),
            no_is=bool(int(meta["no_is"])), no_eg=bool(int(meta["no_eg"])),
            no_san=bool(int(meta["no_san"])), no_scn=bool(int(meta["no_scn"])),
            no_sdn=bool(int(meta["no_sdn"])),
        )


@dataclass
class TriggerNetwork:
    """One word-selection unit: convolution kernel, dense projection, and
    the softmax temperature.  ``dense`` is (max_len-kernel_width+1, max_len)
    for in-context selection or (..., vocab_size) for vocabulary selection."""

    kernel: Tensor
    dense: Tensor
    tau: float
    stride: tuple[int, int, int, int] = (1, 1, 1, 1)


@dataclass
class ProminentInputs:
    """Per-trigger word selections: rows are convex mixes of embedding rows."""

    c_is: list[Tensor]
    v_eg: list[Tensor]


@dataclass
class ProminentSemantics:
    """The segmented semantics vectors of a batch plus the selected branch."""

    x: list[Tensor]            # num_triggers tensors of shape (B, hidden)
    stacked: Tensor            # (B, num_triggers, hidden)
    positive_index: np.ndarray  # (B,) ints


class SegCVAE:
    """Holds all parameters and the forward computations."""

    def __init__(self, config: ModelConfig, embedding: np.ndarray, rng: Rng):
        config.validate()
        if embedding.shape != (config.vocab_size, config.emb_dim):
            raise ShapeError(f"embedding shape {embedding.shape} does not match "
                             f"({config.vocab_size}, {config.emb_dim})")
        self.config = config
        c = config
        self.params: dict[str, Tensor] = {}

        self.emb = self._add("emb", Tensor(np.array(embedding, dtype=np.float64),
                                           requires_grad=True))
        self.enc = ad.gru_params(c.emb_dim, c.hidden_dim, rng)
        self.params.update(self.enc.named("enc"))

        conv_len = c.max_len - c.kernel_width + 1
        self.is_triggers: list[TriggerNetwork] = []
        self.eg_triggers: list[TriggerNetwork] = []
        if not c.no_is:
            for i in range(c.num_triggers):
                kernel = ad.glorot((c.kernel_width, c.emb_dim, 1, c.conv_channels), rng)
                dense = ad.glorot((conv_len, c.max_len), rng)
                self._add(f"is{i}.kernel", kernel)
                self._add(f"is{i}.dense", dense)
                self.is_triggers.append(TriggerNetwork(kernel, dense, c.tau))
        if not c.no_eg:
            for i in range(c.num_triggers):
                kernel = ad.glorot((c.kernel_width, c.emb_dim, 1, c.conv_channels), rng)
                dense = ad.glorot((conv_len, c.vocab_size), rng)
                self._add(f"eg{i}.kernel", kernel)
                self._add(f"eg{i}.dense", dense)
                self.eg_triggers.append(TriggerNetwork(kernel, dense, c.tau))

        self.rec_w = self._add("rec.w", ad.glorot((2 * c.hidden_dim, 2 * c.latent_dim), rng))
        self.rec_b = self._add("rec.b", Tensor(np.zeros(2 * c.latent_dim), requires_grad=True))
        self.pri_w = self._add("pri.w", ad.glorot((c.hidden_dim, 2 * c.latent_dim), rng))
        self.pri_b = self._add("pri.b", Tensor(np.zeros(2 * c.latent_dim), requires_grad=True))
        self.init_w = self._add("init.w", ad.glorot((c.latent_dim + c.hidden_dim, c.hidden_dim), rng))
        self.init_b = self._add("init.b", Tensor(np.zeros(c.hidden_dim), requires_grad=True))

        self.dec = ad.gru_params(c.emb_dim, c.hidden_dim, rng)
        self.params.update(self.dec.named("dec"))
        self.out_w = self._add("out.w", ad.glorot((c.hidden_dim, c.vocab_size), rng))
        self.out_b = self._add("out.b", Tensor(np.zeros(c.vocab_size), requires_grad=True))

    def _add(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        return tensor

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def branch_param_names(self, index: int) -> list[str]:
        """Parameters used by no other branch than ``index``."""
        return [name for name in self.params
                if name.startswith((f"is{index}.", f"eg{index}."))]

    # -- encoding ------------------------------------------------------
    def embed_matrix(self, ids: np.ndarray) -> Tensor:
        """(B, T) ids to one (B, T, emb) tensor."""
        return ad.take_rows(self.emb, ids)

    def encode_ids(self, ids: np.ndarray) -> Tensor:
        """Run the shared encoder over token ids; padding keeps the state."""
        ids = np.atleast_2d(ids)
        lengths = (ids != PAD_ID).sum(axis=1)
        if np.any(lengths == 0):
            raise DomainError("cannot encode an all-padding sequence")
        t_eff = int(lengths.max())
        steps = [ad.take_rows(self.emb, ids[:, t]) for t in range(t_eff)]
        return ad.gru_encode(self.enc, steps, mask=(ids[:, :t_eff] != PAD_ID))

    def encode_embedded(self, seq: Tensor, mask: np.ndarray = None) -> Tensor:
        """Encode a (B, T, emb) tensor of already-embedded rows."""
        steps = [seq[:, t, :] for t in range(seq.shape[1])]
        return ad.gru_encode(self.enc, steps, mask=mask)

    # -- word selection --------------------------------------------------
    def _selection(self, trigger: TriggerNetwork, c_emb: Tensor,
                   mask_row: np.ndarray, rng: Rng, noise: bool) -> Tensor:
        """Soft selection weights (B, channels, width) of one trigger."""
        f_c = ad.conv_seq(c_emb, trigger.kernel)
        logits = ad.matmul(f_c, trigger.dense)
        logits = ad.add(logits, Tensor(mask_row))
        return ad.gumbel_softmax(logits, trigger.tau, rng=rng, noise=noise)

    def internal_separation(self, c_emb: Tensor, pad_mask: np.ndarray,
                            rng: Rng = None, noise: bool = False) -> list[Tensor]:
        """Per trigger, mix context rows by the selection weights; padding
        positions are excluded via additive -inf logits."""
        if c_emb.ndim != 3 or c_emb.shape[1] != self.config.max_len:
            raise ShapeError(f"context must be (B, {self.config.max_len}, emb), got {c_emb.shape}")
        mask_row = np.where(pad_mask, -np.inf, 0.0)[:, None, :]  # (B, 1, max_len)
        return [ad.matmul(self._selection(t, c_emb, mask_row, rng, noise), c_emb)
                for t in self.is_triggers]

    def external_guidance(self, c_emb: Tensor, rng: Rng = None,
                          noise: bool = False) -> list[Tensor]:
        """Per trigger, mix vocabulary embedding rows by the selection
        weights; the four special-token columns are excluded."""
        if self.config.vocab_size <= len(SPECIALS):
            raise DomainError("vocabulary holds only special tokens; nothing to select")
        mask_row = np.zeros((1, 1, self.config.vocab_size))
        mask_row[..., :len(SPECIALS)] = -np.inf
        return [ad.matmul(self._selection(t, c_emb, mask_row, rng, noise), self.emb)
                for t in self.eg_triggers]

    def prominent_inputs(self, ctx_ids: np.ndarray, rng: Rng = None,
                         noise: bool = False) -> ProminentInputs:
        c_emb = self.embed_matrix(ctx_ids)
        pad = ctx_ids == PAD_ID
        c_is = self.internal_separation(c_emb, pad, rng, noise) if not self.config.no_is else []
        v_eg = self.external_guidance(c_emb, rng, noise) if not self.config.no_eg else []
        return ProminentInputs(c_is, v_eg)

    def prominent_semantics(self, ctx_ids: np.ndarray, rng: Rng = None,
                            noise: bool = False) -> list[Tensor]:
        """Encode each trigger's selected rows (in-context part first, then
        the vocabulary part along the sequence axis) into one vector.  With
        both selection paths ablated every branch is the raw context
        encoding."""
        ctx_ids = np.atleast_2d(ctx_ids)
        cfg = self.config
        if cfg.no_is and cfg.no_eg:
            x = self.encode_ids(ctx_ids)
            return [x] * cfg.num_triggers
        inputs = self.prominent_inputs(ctx_ids, rng, noise)
        xs = []
        for i in range(cfg.num_triggers):
            parts = []
            if not cfg.no_is:
                parts.append(inputs.c_is[i])
            if not cfg.no_eg:
                parts.append(inputs.v_eg[i])
            pseudo = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
            xs.append(self.encode_embedded(pseudo))
        return xs

    # -- latent heads and decoding ---------------------------------------
    def recognition(self, r_e: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.add(ad.matmul(ad.concat([r_e, x], axis=1), self.rec_w), self.rec_b)
        d = self.config.latent_dim
        return h[:, :d], ad.clamp(h[:, d:], -LOGVAR_CLIP, LOGVAR_CLIP)

    def prior(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.add(ad.matmul(x, self.pri_w), self.pri_b)
        d = self.config.latent_dim
        return h[:, :d], ad.clamp(h[:, d:], -LOGVAR_CLIP, LOGVAR_CLIP)

    def decoder_initial(self, z: Tensor, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(ad.concat([z, x], axis=1), self.init_w), self.init_b)

    def decode_step(self, state: Tensor, token_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        x = ad.take_rows(self.emb, token_ids)
        return ad.gru_decode_step(self.dec, self.out_w, self.out_b, state, x)

    def _teacher_forced(self, resp_ids: np.ndarray, state: Tensor,
                        want_generated: bool) -> tuple[Tensor, Tensor | None]:
        """Sum log-likelihood of each response (non-padding targets only);
        optionally also encode the probability-weighted embedding sequence
        the decoder implies, for the distillation norm."""
        inputs, targets = resp_ids[:, :-1], resp_ids[:, 1:]
        live = targets != PAD_ID
        t_eff = int(live.any(axis=0).sum())
        batch = resp_ids.shape[0]
        recon = Tensor(np.zeros(batch))
        expected_steps = []
        for t in range(t_eff):
            logits, state = self.decode_step(state, inputs[:, t])
            logp = ad.log_softmax(logits)
            picked = ad.gather_last(logp, targets[:, t])
            recon = ad.add(recon, ad.mul(picked, Tensor(live[:, t].astype(np.float64))))
            if want_generated:
                expected_steps.append(ad.matmul(ad.exp(logp), self.emb))
        generated = None
        if want_generated:
            generated = ad.gru_encode(self.enc, expected_steps, mask=live[:, :t_eff])
        return recon, generated

    def elbo(self, resp_ids: np.ndarray, x: Tensor, r_e: Tensor,
             kl_weight: float, rng: Rng, want_generated: bool = False) -> dict:
        """Evidence lower bound of one branch, per example.

        Returns tensors keyed ``elbo``/``recon``/``kl`` of shape (B,) plus
        ``generated`` (B, hidden) when requested.
        """
        if not 0.0 <= kl_weight <= 1.0:
            raise DomainError(f"kl_weight must lie in [0, 1], got {kl_weight}")
        mu_q, logvar_q = self.recognition(r_e, x)
        mu_p, logvar_p = self.prior(x)
        z = ad.reparameterize(mu_q, logvar_q, rng)
        state = self.decoder_initial(z, x)
        recon, generated = self._teacher_forced(resp_ids, state, want_generated)
        kl = ad.gaussian_kl(mu_q, logvar_q, mu_p, logvar_p)
        elbo = ad.sub(recon, ad.mul(kl, kl_weight))
        return {"elbo": elbo, "recon": recon, "kl": kl, "generated": generated}

    def forward_losses(self, ctx_ids: np.ndarray, resp_ids: np.ndarray,
                       kl_weight: float, rng: Rng, gs_noise: bool = True) -> dict:
        """All training quantities for one batch.

        The positive branch is picked per example; only its bound reaches
        the loss (the other branches are multiplied by an exact zero, so
        their exclusive parameters get exactly zero gradient from it).
        """
        cfg = self.config
        ctx_ids, resp_ids = np.atleast_2d(ctx_ids), np.atleast_2d(resp_ids)
        batch = ctx_ids.shape[0]
        r_e = self.encode_ids(resp_ids)
        xs = self.prominent_semantics(ctx_ids, rng, noise=gs_noise)
        want_generated = not cfg.no_sdn and batch >= 2
        branches = [self.elbo(resp_ids, x, r_e, kl_weight, rng, want_generated)
                    for x in xs]

        positive = np.atleast_1d(select_positive([b["elbo"] for b in branches]))
        one_hot = np.zeros((cfg.num_triggers, batch))
        one_hot[positive, np.arange(batch)] = 1.0

        elbo_plus = Tensor(np.zeros(batch))
        for i, b in enumerate(branches):
            elbo_plus = ad.add(elbo_plus, ad.mul(b["elbo"], Tensor(one_hot[i])))
        elbo_plus = ad.tmean(elbo_plus)

        rows = np.arange(batch)
        recon_sel = np.stack([b["recon"].values for b in branches])[positive, rows]
        kl_sel = np.stack([b["kl"].values for b in branches])[positive, rows]

        zero = Tensor(np.zeros(()))
        san_v = scn_v = sdn_v = zero
        if not cfg.no_san:
            san_v = san(ad.stack_rows(xs))
        if not cfg.no_scn:
            scn_v = scn(self.encode_ids(ctx_ids), xs)
        if want_generated:
            generated = Tensor(np.zeros((batch, cfg.hidden_dim)))
            for i, b in enumerate(branches):
                generated = ad.add(generated, ad.mul(b["generated"], Tensor(one_hot[i][:, None])))
            sdn_v = sdn(r_e.detach(), generated)

        return {
            "elbo_plus": elbo_plus, "san": san_v, "scn": scn_v, "sdn": sdn_v,
            "semantics": ProminentSemantics(xs, ad.stack_rows(xs), positive),
            "recon_mean": float(recon_sel.mean()), "kl_mean": float(kl_sel.mean()),
        }

    # -- persistence -----------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise DomainError(f"checkpoint is missing parameter '{name}'")
            if arrays[name].shape != p.values.shape:
                raise ShapeError(f"parameter '{name}' has shape {arrays[name].shape}, "
                                 f"want {p.values.shape}")
            p.values = np.array(arrays[name], dtype=np.float64)


# ---------------------------------------------------------------------------
# branch selection and the semantic norms
# ---------------------------------------------------------------------------

def select_positive(elbos: Sequence) -> np.ndarray | int:
    """Index of the largest bound; ties resolve to the lowest index.  The
    selection itself carries no gradient.  Scalar inputs give one int,
    per-example vectors give an (B,) index array."""
    if len(elbos) == 0:
        raise DomainError("cannot select from an empty branch list")
    rows = []
    scalar = True
    for e in elbos:
        v = np.atleast_1d(np.asarray(e.values if isinstance(e, Tensor) else e, dtype=np.float64))
        scalar = scalar and v.size == 1
        rows.append(v)
    stacked = np.stack(rows)
    idx = np.argmax(stacked, axis=0)
    return int(idx[0]) if scalar else idx


def san(x_stacked: Tensor) -> Tensor:
    """Mean absolute gap between the identity and the row-softmaxed Gram
    matrix of the semantics vectors: zero when each vector correlates only
    with itself.  Accepts (M, H) or a batch (B, M, H)."""
    if x_stacked.ndim == 2:
        gram = ad.matmul(x_stacked, ad.transpose(x_stacked))
    elif x_stacked.ndim == 3:
        gram = ad.matmul(x_stacked, ad.transpose(x_stacked, (0, 2, 1)))
    else:
        raise ShapeError(f"expected (M, H) or (B, M, H), got {x_stacked.shape}")
    m = x_stacked.shape[-2]
    eye = Tensor(np.eye(m))
    return ad.tmean(ad.absolute(ad.sub(eye, ad.softmax_rows(gram))))


def scn(enc_c: Tensor, x: Sequence[Tensor]) -> Tensor:
    """One minus the cosine between the context encoding and the sum of the
    semantics vectors, averaged over the batch; lies in [0, 2]."""
    if len(x) == 0:
        raise DomainError("need at least one semantics vector")
    total = x[0]
    for xi in x[1:]:
        total = ad.add(total, xi)
    return ad.sub(1.0, ad.tmean(ad.cosine(enc_c, total)))


def sdn(r_gt: Tensor, r_gen_plus: Tensor) -> Tensor:
    """Row-wise KL from the ground-truth response Gram distribution to the
    generated one, averaged over rows.  The ground-truth side is a constant
    of the graph; gradient flows only into ``r_gen_plus``."""
    if r_gt.ndim != 2 or r_gt.shape[0] < 2:
        raise DomainError("distillation needs a batch of at least 2 responses")
    if r_gt.shape != r_gen_plus.shape:
        raise ShapeError(f"batch mismatch: {r_gt.shape} vs {r_gen_plus.shape}")
    gram_gt = r_gt.values @ r_gt.values.T
    shifted = gram_gt - gram_gt.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    entropy_rows = (p * np.log(p)).sum(axis=-1)  # constant part of the KL
    q_log = ad.log_softmax(ad.matmul(r_gen_plus, ad.transpose(r_gen_plus)))
    cross = ad.tsum(ad.mul(Tensor(p), q_log), axis=-1)
    return ad.tmean(ad.sub(Tensor(entropy_rows), cross))


def total_loss(elbo_plus: Tensor, san_v, scn_v, sdn_v, lambda_w: float,
               no_san: bool = False, no_scn: bool = False, no_sdn: bool = False) -> Tensor:
    """The quantity to maximize: the positive bound minus the weighted sum
    of the enabled norms."""
    if not 0.0 <= lambda_w <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lambda_w}")
    zero = Tensor(np.zeros(()))
    terms = [zero]
    if not no_san:
        terms.append(ad.as_tensor(san_v))
    if not no_scn:
        terms.append(ad.as_tensor(scn_v))
    if not no_sdn:
        terms.append(ad.as_tensor(sdn_v))
    norms = terms[0]
    for t in terms[1:]:
        norms = ad.add(norms, t)
    return ad.sub(elbo_plus, ad.mul(norms, lambda_w))
