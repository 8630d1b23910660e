"""Language-pivoted alignment at desk scale.

Synthetic heterogeneous modalities are generated from shared latent
concepts (x = A_m z_c + b_m + noise). A trainable two-block encoder maps
each image to a grid of visual tokens; a frozen bigram-with-context linear
decoder (the "pivot") produces next-token logits from the mean visual
token plus the previous token's embedding. Training minimizes the negative
log-likelihood of the response tokens only.

The pivot is calibrated once on token-only sequences so that concept token
chains are already predictable from the previous token; the visual context
is what disambiguates which chain to start.
"""

import math
from dataclasses import dataclass

import numpy as np

from babelkit import lvsa
from babelkit import tape as T
from babelkit.lvsa import AnnealSchedule, FeaturePyramid, SelectedSet, anneal_alpha
from babelkit.tape import DiffTape


class NonFiniteLossError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# -- concepts and synthetic modalities ---------------------------------------


@dataclass
class ConceptVocabulary:
    concepts: list
    vocab_size: int
    token_seqs: dict  # concept -> tuple of token ids
    latents: dict  # concept -> unit-norm latent vector
    prompt_tokens: tuple  # the shared instruction token sequence

    @classmethod
    def build(cls, concepts, latent_dim, seed=0, tokens_per_concept=2, prompt_len=2):
        concepts = list(concepts)
        if len(set(concepts)) != len(concepts):
            raise ValueError("concept names must be unique")
        if latent_dim < len(concepts):
            raise ValueError("latent_dim must be >= number of concepts")
        rng = np.random.default_rng(seed)
        # orthonormal latents keep concepts maximally distinguishable
        basis, _ = np.linalg.qr(rng.standard_normal((latent_dim, len(concepts))))
        latents = {c: basis[:, i].copy() for i, c in enumerate(concepts)}
        prompt = tuple(range(prompt_len))
        seqs = {
            c: tuple(
                prompt_len + i * tokens_per_concept + j for j in range(tokens_per_concept)
            )
            for i, c in enumerate(concepts)
        }
        vocab_size = prompt_len + len(concepts) * tokens_per_concept
        return cls(concepts, vocab_size, seqs, latents, prompt)


@dataclass
class InstructionSample:
    image: np.ndarray
    instruction_tokens: tuple
    response_tokens: tuple
    modality: str
    concept: str


class SyntheticModalityGenerator:
    """x = A_m z_c + b_m + sigma * gaussian noise, per modality."""

    def __init__(self, modality, mixing, offset, noise_sigma=0.0):
        mixing = np.asarray(mixing, dtype=np.float64)
        offset = np.asarray(offset, dtype=np.float64)
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if np.linalg.matrix_rank(mixing) < mixing.shape[1]:
            raise ValueError(f"mixing matrix for {modality!r} is column rank deficient")
        self.modality = modality
        self.mixing = mixing
        self.offset = offset
        self.noise_sigma = float(noise_sigma)

    @classmethod
    def random(cls, modality, image_dim, latent_dim, seed, noise_sigma=0.0, flip=False):
        """Seeded random orthogonal mixing columns; ``flip`` negates them,
        which builds near-antipodal modality pairs for conflict studies."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((image_dim, latent_dim)))
        if flip:
            q = -q
        offset = 0.1 * rng.standard_normal(image_dim)
        return cls(modality, q, offset, noise_sigma)

    def generate_sample(self, vocab, concept, rng_seed=0):
        if concept not in vocab.latents:
            raise KeyError(f"unknown concept {concept!r}")
        x = self.mixing @ vocab.latents[concept] + self.offset
        if self.noise_sigma > 0:
            rng = np.random.default_rng(rng_seed)
            x = x + self.noise_sigma * rng.standard_normal(x.shape)
        return InstructionSample(
            image=x,
            instruction_tokens=vocab.prompt_tokens,
            response_tokens=vocab.token_seqs[concept],
            modality=self.modality,
            concept=concept,
        )


def generate_sample(gen, vocab, concept, rng_seed=0):
    return gen.generate_sample(vocab, concept, rng_seed)


# -- encoder -----------------------------------------------------------------


@dataclass
class EncoderConfig:
    image_dim: int = 12
    embed_dim: int = 16
    token_count: int = 4
    lvsa_enabled: bool = True
    lvsa_tau: int = 200
    lvsa_selected: tuple = (1, 2)


class SharedEncoder:
    """Two nonlinear blocks over a token grid; the block outputs form a
    two-level feature pyramid fused by LVSA before leaving the encoder."""

    PARAM_NAMES = ("enc.W0", "enc.W1", "enc.b1", "enc.W2", "enc.b2")

    def __init__(self, config, seed=0):
        self.config = config
        d_x, d_e, n_z = config.image_dim, config.embed_dim, config.token_count
        rng = np.random.default_rng(seed)
        s0 = 1.0 / math.sqrt(d_x)
        s = 1.0 / math.sqrt(d_e)
        self.params = {
            "enc.W0": s0 * rng.standard_normal((d_x, n_z * d_e)),
            "enc.W1": s * rng.standard_normal((d_e, d_e)),
            "enc.b1": np.zeros(d_e),
            "enc.W2": s * rng.standard_normal((d_e, d_e)),
            "enc.b2": np.zeros(d_e),
        }
        self.schedule = AnnealSchedule(config.lvsa_tau)
        self.selected = SelectedSet(tuple(config.lvsa_selected))

    def register(self, tp):
        """Register current parameter values on a tape; returns name -> Tensor."""
        return {name: tp.parameter(self.params[name], name) for name in self.PARAM_NAMES}

    def encode(self, p, x, alpha):
        """Visual tokens (token_count, embed_dim) for one image.

        ``p`` is the tensor dict from register(); ``x`` an image vector.
        """
        cfg = self.config
        row = np.asarray(x, dtype=np.float64).reshape(1, cfg.image_dim)
        t0 = T.reshape(T.matmul(row, p["enc.W0"]), (cfg.token_count, cfg.embed_dim))
        t1 = T.relu(T.add(T.matmul(t0, p["enc.W1"]), p["enc.b1"]))
        t2 = T.relu(T.add(T.matmul(t1, p["enc.W2"]), p["enc.b2"]))
        if not cfg.lvsa_enabled:
            return t2
        pyramid = FeaturePyramid([t1, t2])
        return lvsa.fuse(pyramid, self.selected, alpha)

    def alpha_at(self, t_step):
        if not self.config.lvsa_enabled:
            return 1.0
        return anneal_alpha(self.schedule, t_step)

    def encode_plain(self, x, alpha):
        """Tape-free encoding (inference only)."""
        tp = DiffTape()
        p = {name: tp.constant(self.params[name]) for name in self.PARAM_NAMES}
        return self.encode(p, x, alpha).data

    def copy(self):
        clone = SharedEncoder.__new__(SharedEncoder)
        clone.config = self.config
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.schedule = self.schedule
        clone.selected = self.selected
        return clone

    def state_arrays(self):
        return {k: v.copy() for k, v in self.params.items()}


# -- frozen language pivot ---------------------------------------------------


class LanguagePivot:
    """Frozen token embeddings plus a bigram-with-context linear decoder.

    Next-token logits at response position j are
        (mean visual token + embedding of previous token) @ W + b.
    W, b are fit once by least squares on token-only bigram transitions
    (no images), then never updated.
    """

    PARAM_NAMES = ("pivot.embed", "pivot.W", "pivot.b")

    def __init__(self, vocab, embed_dim, seed=0, target_logit=4.0):
        V = vocab.vocab_size
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.embed = rng.standard_normal((V, embed_dim)) / math.sqrt(embed_dim)
        # Token-only calibration: one sequence per concept (prompt followed
        # by the concept's token chain). The context slot carries the
        # concept's topic vector (mean response-token embedding) -- the same
        # slot the visual tokens occupy at inference -- which makes the
        # concept chains linearly separable in the decoder's input space.
        rows, targets = [], []
        for r in vocab.token_seqs.values():
            topic = self.embed[list(r)].mean(axis=0)
            seq = vocab.prompt_tokens + r
            for prev_tok, next_tok in zip(seq, seq[1:]):
                rows.append(self.embed[prev_tok] + topic)
                t = np.full(V, -target_logit)
                t[next_tok] = target_logit
                targets.append(t)
        self.W, *_ = np.linalg.lstsq(np.array(rows), np.array(targets), rcond=None)
        self.b = np.zeros(V)

    def register(self, tp):
        """Register the frozen parameters on a tape (trainable=False, so
        backward reports exactly-zero gradients for them)."""
        return {
            "pivot.embed": tp.parameter(self.embed, "pivot.embed", trainable=False),
            "pivot.W": tp.parameter(self.W, "pivot.W", trainable=False),
            "pivot.b": tp.parameter(self.b, "pivot.b", trainable=False),
        }

    def response_log_probs(self, fp, tokens, visual_tokens):
        """Log-probability tensor of each response token (teacher forced).

        ``fp`` is the frozen tensor dict from register(); ``tokens`` the
        full (instruction, response) pair; returns a (|r|,) tensor.
        """
        q, r = tokens
        prev = (q[-1],) + tuple(r[:-1])
        z_bar = T.mean(visual_tokens, axis=0, keepdims=True)  # (1, d_e)
        e_prev = T.gather(fp["pivot.embed"], prev)  # (|r|, d_e)
        h = T.add(e_prev, z_bar)
        logits = T.add(T.matmul(h, fp["pivot.W"]), fp["pivot.b"])  # (|r|, V)
        logp = T.log(T.softmax(logits, axis=-1))
        flat = T.reshape(logp, (len(r) * self.vocab.vocab_size,))
        picked = T.gather(flat, [j * self.vocab.vocab_size + tok for j, tok in enumerate(r)])
        return picked

    def next_token_distributions(self, tokens, visual_tokens_plain):
        """Numpy-only next-token distributions, one row per response position."""
        q, r = tokens
        prev = (q[-1],) + tuple(r[:-1])
        z_bar = np.mean(visual_tokens_plain, axis=0, keepdims=True)
        h = self.embed[list(prev)] + z_bar
        logits = h @ self.W + self.b
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)


# -- alignment loss ----------------------------------------------------------


def sample_loss(p, fp, encoder, pivot, sample, alpha):
    """Negative log-likelihood of the response tokens, as a tape scalar."""
    for tok in sample.instruction_tokens + sample.response_tokens:
        if not 0 <= tok < pivot.vocab.vocab_size:
            raise ValueError(f"token {tok} outside vocabulary of size {pivot.vocab.vocab_size}")
    z = encoder.encode(p, sample.image, alpha)
    logp = pivot.response_log_probs(
        fp, (sample.instruction_tokens, sample.response_tokens), z
    )
    n = len(sample.response_tokens)
    return T.mul(T.mean(logp), -float(n))


def alignment_loss(encoder, pivot, sample, alpha=1.0, mode=None):
    """Loss value plus gradients for a single sample.

    Returns (loss, grads) where grads maps encoder parameter names to
    arrays; pivot gradients are exactly zero by construction.
    """
    tp = DiffTape(mode) if mode is not None else DiffTape()
    p = encoder.register(tp)
    fp = pivot.register(tp)
    loss = sample_loss(p, fp, encoder, pivot, sample, alpha)
    grads = tp.backward(loss)
    return float(loss.data), grads


# -- pretraining -------------------------------------------------------------


@dataclass
class AlignConfig:
    concepts: tuple = ("ship", "bridge")
    modalities: tuple = ("sar", "optical")
    image_dim: int = 12
    latent_dim: int = 4
    embed_dim: int = 16
    token_count: int = 4
    noise_sigma: float = 0.0
    steps: int = 2000
    lr: float = 0.05
    seed: int = 0
    lvsa_enabled: bool = True
    lvsa_tau: int = 200
    lvsa_selected: tuple = (1, 2)
    antipodal_modalities: bool = False

    def encoder_config(self):
        return EncoderConfig(
            image_dim=self.image_dim,
            embed_dim=self.embed_dim,
            token_count=self.token_count,
            lvsa_enabled=self.lvsa_enabled,
            lvsa_tau=self.lvsa_tau,
            lvsa_selected=tuple(self.lvsa_selected),
        )

    @classmethod
    def from_dict(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        obj = dict(obj)
        for key in ("concepts", "modalities", "lvsa_selected"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def build_world(config):
    """Vocabulary, per-modality generators, pivot, and fresh encoder for a
    config; deterministic given config.seed."""
    vocab = ConceptVocabulary.build(config.concepts, config.latent_dim, seed=config.seed)
    gens = {}
    for i, m in enumerate(config.modalities):
        flip = config.antipodal_modalities and i % 2 == 1
        gens[m] = SyntheticModalityGenerator.random(
            m,
            config.image_dim,
            config.latent_dim,
            seed=config.seed * 1000 + i,
            noise_sigma=config.noise_sigma,
            flip=flip,
        )
    pivot = LanguagePivot(vocab, config.embed_dim, seed=config.seed + 17)
    encoder = SharedEncoder(config.encoder_config(), seed=config.seed + 29)
    return vocab, gens, pivot, encoder


def training_batch(vocab, gens, config, step):
    """Full deterministic batch: one sample per (modality, concept)."""
    batch = []
    for mi, gen in enumerate(gens.values()):
        for ci, c in enumerate(vocab.concepts):
            noise_seed = ((config.seed * 1009 + step) * 101 + mi) * 31 + ci
            batch.append(gen.generate_sample(vocab, c, rng_seed=noise_seed))
    return batch


def pretrain_align(config, encoder=None, mode=None):
    """Plain full-batch gradient descent on the alignment loss.

    Returns (encoder, trace) where trace is a list of (step, loss, alpha)
    tuples; raises NonFiniteLossError on numerical failure.
    """
    if len(config.modalities) < 2 or len(config.concepts) < 2:
        raise ValueError("need at least 2 modalities and 2 concepts")
    vocab, gens, pivot, fresh = build_world(config)
    if encoder is None:
        encoder = fresh
    trace = []
    for step in range(config.steps):
        alpha = encoder.alpha_at(step)
        tp = DiffTape(mode) if mode is not None else DiffTape()
        p = encoder.register(tp)
        fp = pivot.register(tp)
        batch = training_batch(vocab, gens, config, step)
        total = None
        for sample in batch:
            loss_i = sample_loss(p, fp, encoder, pivot, sample, alpha)
            total = loss_i if total is None else T.add(total, loss_i)
        total = T.mul(total, 1.0 / len(batch))
        loss = float(total.data)
        if not np.isfinite(loss):
            raise NonFiniteLossError(step)
        grads = tp.backward(total)
        trace.append((step, loss, alpha))
        for name in encoder.PARAM_NAMES:
            encoder.params[name] = encoder.params[name] - config.lr * grads[name]
    return encoder, trace


# -- consistency metric ------------------------------------------------------


def _sym_kl(p, q, eps=1e-12):
    p = np.clip(p, eps, None)
    q = np.clip(q, eps, None)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


def cross_modal_consistency(encoder, pivot, vocab, concept, gens, modality_pair,
                            alpha=1.0):
    """Mean symmetric KL between next-response-token distributions
    conditioned on the two modalities' encodings of the same concept
    (noiseless probe images)."""
    m_i, m_j = modality_pair
    for m in (m_i, m_j):
        if m not in gens:
            raise KeyError(f"modality {m!r} not registered")
    dists = []
    for m in (m_i, m_j):
        gen = gens[m]
        probe = SyntheticModalityGenerator(gen.modality, gen.mixing, gen.offset, 0.0)
        sample = probe.generate_sample(vocab, concept)
        z = encoder.encode_plain(sample.image, alpha)
        dists.append(
            pivot.next_token_distributions(
                (sample.instruction_tokens, sample.response_tokens), z
            )
        )
    di, dj = dists
    return float(np.mean([_sym_kl(di[k], dj[k]) for k in range(di.shape[0])]))


def consistency_report(encoder, pivot, vocab, gens, alpha=1.0):
    """Per-concept mean consistency over all modality pairs."""
    mods = sorted(gens)
    pairs = [(a, b) for i, a in enumerate(mods) for b in mods[i + 1:]]
    out = {}
    for c in vocab.concepts:
        vals = [
            cross_modal_consistency(encoder, pivot, vocab, c, gens, pair, alpha)
            for pair in pairs
        ]
        out[c] = float(np.mean(vals))
    return out
