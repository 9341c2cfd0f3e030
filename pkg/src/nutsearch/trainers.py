"""Training loops for the stand-in models.

All three trainers are deterministic functions of (corpus, config, seed):
model init, batch order, and noise draws all derive from the config seed,
so identical calls produce bit-identical weights. SGD with momentum and
global-norm clipping is the only optimizer; a non-finite loss aborts with
a divergence error naming the phase that produced it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractViolation, NumericError, TrainingDiverged
from .gradcore import Graph, Tensor
from .models import ARAEModel, ScoringLM, VictimClassifier, pad_batch, step_masks
from .textdata import Split, Vocab, neutral_scaffold


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.2
    gan_lr: float = 0.05
    momentum: float = 0.99
    gan_momentum: float = 0.5
    clip_norm: float = 5.0
    critic_steps: int = 5
    gp_weight: float = 10.0
    enc_noise: float = 0.0
    enc_noise_anneal: float = 0.95
    lr_anneal: float = 1.0
    augment_prefixes: float = 0.0
    emb_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        for name in ("batch_size", "lr", "gan_lr", "clip_norm",
                     "critic_steps", "gp_weight"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        for name in ("momentum", "gan_momentum"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractViolation(f"{name} must be in [0, 1)")
        if self.enc_noise < 0:
            raise ContractViolation("enc_noise must be >= 0")
        for name in ("enc_noise_anneal", "lr_anneal"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must be in (0, 1]")
        if not 0.0 <= self.augment_prefixes <= 1.0:
            raise ContractViolation("augment_prefixes must be in [0, 1]")
        if self.emb_noise < 0:
            raise ContractViolation("emb_noise must be >= 0")


class SGD:
    """Momentum SGD over a named subset of a model's weights, with
    global-norm gradient clipping across the provided grads."""

    def __init__(self, weights: dict[str, Tensor], lr: float,
                 momentum: float = 0.9, clip_norm: float = 5.0):
        self.weights = weights
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(t.data) for k, t in weights.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        total = 0.0
        for v in grads.values():
            total += float((v * v).sum())
        norm = np.sqrt(total)
        factor = 1.0
        if self.clip_norm and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for name, gv in grads.items():
            vel = self.velocity[name]
            vel *= self.momentum
            vel -= self.lr * factor * gv
            self.weights[name].data += vel


def _split_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0])
            for s in np.random.SeedSequence(seed).spawn(n)]


def _grads_by_name(g: Graph, params, loss) -> dict[str, np.ndarray]:
    raw = gc.backward(g, loss)
    return {name: raw[node.idx].data for name, node in params.items()
            if node.requires_grad}


def _write_metrics(path, rows) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# victim classifiers


def train_classifier(split: Split, vocab: Vocab, arch: str, n_classes: int,
                     cfg: TrainConfig, emb_dim=32, hidden_dim=64,
                     metrics_path=None, model: VictimClassifier | None = None):
    """Supervised training on the train split; returns (model, metrics)."""
    init_seed, shuffle_seed, noise_seed = _split_seeds(cfg.seed, 3)
    if model is None:
        model = VictimClassifier(vocab, arch, n_classes, emb_dim=emb_dim,
                                 hidden_dim=hidden_dim, seed=init_seed)
    rng = np.random.default_rng(shuffle_seed)
    noise_rng = np.random.default_rng(noise_seed)
    opt = SGD(model.weights, cfg.lr, cfg.momentum, cfg.clip_norm)
    texts = [ex.text for ex in split.train]
    prems = [ex.premise for ex in split.train] if arch == "pair" else None
    labels = np.array([ex.label for ex in split.train])
    # label-neutral prefix pool: teaches the model that an arbitrary short
    # lead-in does not change the label, so only label-bearing prefixes
    # can move a prediction
    aug_pool = None
    if cfg.augment_prefixes > 0:
        aug_pool = np.array([vocab.stoi[t] for t in sorted(neutral_scaffold())
                             if t in vocab.stoi])
        if aug_pool.size == 0:
            aug_pool = None

    def maybe_prefix(txt):
        if rng.random() >= cfg.augment_prefixes:
            return txt
        k = int(rng.integers(1, 4))
        return [int(t) for t in rng.choice(aug_pool, size=k)] + list(txt)

    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(texts), cfg.batch_size, rng):
            batch_texts = [texts[i] for i in idx]
            if aug_pool is not None:
                batch_texts = [maybe_prefix(t) for t in batch_texts]
            g = Graph()
            P = model.lift(g, trainable=True)
            noise = None
            if cfg.emb_noise > 0:
                T = max(len(t) for t in batch_texts)
                noise = cfg.emb_noise * noise_rng.standard_normal(
                    (T, len(batch_texts), model.emb_dim))
            try:
                logits = model.logits_ids(g, P, batch_texts,
                                          [prems[i] for i in idx] if prems else None,
                                          emb_noise=noise)
                loss = gc.cross_entropy(logits, labels[idx])
                grads = _grads_by_name(g, P, loss)
            except NumericError as err:
                raise TrainingDiverged(f"classifier epoch {epoch}: {err}") from err
            losses.append(float(loss.value))
            opt.step(grads)
        dev_acc = classifier_accuracy(model, split.dev)
        metrics.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "dev_acc": dev_acc})
    _write_metrics(metrics_path, metrics)
    return model, metrics


def classifier_accuracy(model: VictimClassifier, examples) -> float:
    if not examples:
        raise ContractViolation("accuracy of an empty example list")
    texts = [ex.text for ex in examples]
    prems = [ex.premise for ex in examples] if model.kind == "pair" else None
    pred = model.predict(texts, prems)
    labels = np.array([ex.label for ex in examples])
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# scoring language model


def _lm_batch(model: ScoringLM, texts, g: Graph, P):
    ids, lengths = pad_batch(texts, model.vocab.pad_id)
    B, T = ids.shape
    in_ids = np.concatenate([np.full((B, 1), model.vocab.bos_id), ids[:, :-1]],
                            axis=1)
    logits = model.step_logits(g, P, in_ids)
    flat = gc.concat(logits, axis=0) if len(logits) > 1 else logits[0]
    # concat is step-major: row t*B + i holds batch row i at step t
    targets = ids.T.reshape(-1)
    weights = np.concatenate(step_masks(lengths, T))
    targets = np.where(weights > 0, targets, 0)
    return gc.cross_entropy(flat, targets, weights)


def lm_corpus_ce(model: ScoringLM, examples, batch_size: int = 256) -> float:
    """Token-weighted mean CE over a list of Examples."""
    tot_ce, tot_tok = 0.0, 0
    for lo in range(0, len(examples), batch_size):
        texts = [ex.text for ex in examples[lo : lo + batch_size]]
        g = Graph()
        P = model.lift(g)
        ce = _lm_batch(model, texts, g, P)
        n = sum(len(t) for t in texts)
        tot_ce += float(ce.value) * n
        tot_tok += n
    return tot_ce / tot_tok


def train_lm(split: Split, vocab: Vocab, cfg: TrainConfig, emb_dim=32,
             hidden_dim=64, metrics_path=None, model: ScoringLM | None = None):
    """Next-token training on the train split; returns (model, metrics)."""
    init_seed, shuffle_seed = _split_seeds(cfg.seed, 2)
    if model is None:
        model = ScoringLM(vocab, emb_dim=emb_dim, hidden_dim=hidden_dim,
                          seed=init_seed)
    rng = np.random.default_rng(shuffle_seed)
    opt = SGD(model.weights, cfg.lr, cfg.momentum, cfg.clip_norm)
    texts = [ex.text for ex in split.train]
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(texts), cfg.batch_size, rng):
            g = Graph()
            P = model.lift(g, trainable=True)
            try:
                loss = _lm_batch(model, [texts[i] for i in idx], g, P)
                grads = _grads_by_name(g, P, loss)
            except NumericError as err:
                raise TrainingDiverged(f"lm epoch {epoch}: {err}") from err
            losses.append(float(loss.value))
            opt.step(grads)
        metrics.append({"epoch": epoch, "train_ce": float(np.mean(losses)),
                        "dev_ce": lm_corpus_ce(model, split.dev)})
    _write_metrics(metrics_path, metrics)
    return model, metrics


# ---------------------------------------------------------------------------
# adversarially regularized autoencoder


AE_PARTS = ("emb_enc", "emb_dec", "enc.", "enc_proj.", "dec.", "dec_init.",
            "dec_out.")
ENC_PARTS = ("emb_enc", "enc.", "enc_proj.")


def train_arae(split: Split, vocab: Vocab, cfg: TrainConfig, emb_dim=32,
               hidden_dim=64, latent_dim=32, noise_dim=16, gen_hidden=64,
               critic_hidden=64, latent_scale=1.0, metrics_path=None,
               model: ARAEModel | None = None):
    """Three phases per batch: (1) reconstruction, (2) critic with a
    gradient penalty at interpolates, (3) adversarial encoder/generator.
    Returns (model, metrics)."""
    init_seed, shuffle_seed, noise_seed = _split_seeds(cfg.seed, 3)
    if model is None:
        model = ARAEModel(vocab, emb_dim=emb_dim, hidden_dim=hidden_dim,
                          latent_dim=latent_dim, noise_dim=noise_dim,
                          gen_hidden=gen_hidden, critic_hidden=critic_hidden,
                          latent_scale=latent_scale, seed=init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    noise_rng = np.random.default_rng(noise_seed)
    opt_ae = SGD(model.weights, cfg.lr, cfg.momentum, cfg.clip_norm)
    opt_critic = SGD(model.weights, cfg.gan_lr, cfg.gan_momentum, cfg.clip_norm)
    # the adversarial nudge on the encoder must stay well below the
    # reconstruction step or it erases what the autoencoder learned
    opt_enc = SGD(model.weights, 0.1 * cfg.gan_lr, cfg.gan_momentum, cfg.clip_norm)
    opt_gen = SGD(model.weights, cfg.gan_lr, cfg.gan_momentum, cfg.clip_norm)

    texts = [ex.text for ex in split.train]
    metrics = []

    def encode_batch(g, P, batch_texts, sigma=0.0):
        ids, lengths = pad_batch(batch_texts, vocab.pad_id)
        noise = None
        if sigma > 0.0:
            noise = sigma * noise_rng.standard_normal(
                (len(batch_texts), model.latent_dim))
        return model.encode(g, P, ids, lengths, noise_rows=noise)

    for epoch in range(1, cfg.epochs + 1):
        # perturbing the encoder output during reconstruction stops the
        # decoder from ignoring the latent and fitting a token prior instead
        sigma = cfg.enc_noise * cfg.enc_noise_anneal ** (epoch - 1)
        opt_ae.lr = cfg.lr * cfg.lr_anneal ** (epoch - 1)
        recon_sum = recon_tok = recon_hit = 0
        recon_losses, critic_losses, gp_vals, gen_vals = [], [], [], []
        for idx in _batches(len(texts), cfg.batch_size, shuffle_rng):
            batch = [texts[i] for i in idx]
            B = len(batch)

            # (1) reconstruction
            g = Graph()
            P = model.lift(g, trainable=AE_PARTS)
            try:
                z = encode_batch(g, P, batch, sigma=sigma)
                dec_in_rows = [[vocab.bos_id] + t for t in batch]
                tgt_rows = [t + [vocab.eos_id] for t in batch]
                dec_in, dlen = pad_batch(dec_in_rows, vocab.pad_id)
                tgt, _ = pad_batch(tgt_rows, vocab.pad_id)
                logits = model.teacher_logits(g, P, z, dec_in)
                flat = gc.concat(logits, axis=0) if len(logits) > 1 else logits[0]
                targets = tgt.T.reshape(-1)
                weights = np.concatenate(step_masks(dlen, dec_in.shape[1]))
                loss = gc.cross_entropy(flat, targets, weights)
                grads = _grads_by_name(g, P, loss)
            except NumericError as err:
                raise TrainingDiverged(
                    f"arae reconstruction epoch {epoch}: {err}") from err
            pred = flat.value.argmax(axis=1)
            keep = weights > 0
            recon_hit += int((pred[keep] == targets[keep]).sum())
            recon_tok += int(keep.sum())
            recon_sum += float(loss.value) * int(keep.sum())
            recon_losses.append(float(loss.value))
            opt_ae.step(grads)

            # (2) critic
            for _ in range(cfg.critic_steps):
                g = Graph()
                P = model.lift(g, trainable=("critic.",))
                try:
                    c_lat = encode_batch(g, P, batch)
                    noise = noise_rng.standard_normal((B, model.noise_dim))
                    z_lat = model.generate_node(g, P, g.constant(noise))
                    d_real = gc.mean_all(model.critic_score(g, P, c_lat))
                    d_fake = gc.mean_all(model.critic_score(g, P, z_lat))
                    alpha = noise_rng.random((B, 1))
                    x_hat = g.constant(alpha * c_lat.value
                                       + (1.0 - alpha) * z_lat.value)
                    gradx = model.critic_input_grad(g, P, x_hat)
                    nrm = gc.sqrt(gc.add_const(
                        gc.sum_axis(gc.mul(gradx, gradx), 1), 1e-12))
                    nm1 = gc.add_const(nrm, -1.0)
                    gp = gc.mean_all(gc.mul(nm1, nm1))
                    loss = gc.add(gc.sub(d_fake, d_real),
                                  gc.scale(gp, cfg.gp_weight))
                    grads = _grads_by_name(g, P, loss)
                except NumericError as err:
                    raise TrainingDiverged(
                        f"arae critic epoch {epoch}: {err}") from err
                critic_losses.append(float(loss.value))
                gp_vals.append(float(gp.value))
                opt_critic.step(grads)

            # (3) adversarial: encoder makes real latents look fake,
            # generator makes fake latents look real
            g = Graph()
            P = model.lift(g, trainable=ENC_PARTS)
            try:
                c_lat = encode_batch(g, P, batch)
                loss = gc.mean_all(model.critic_score(g, P, c_lat))
                grads = _grads_by_name(g, P, loss)
            except NumericError as err:
                raise TrainingDiverged(
                    f"arae adversarial epoch {epoch}: {err}") from err
            opt_enc.step(grads)

            g = Graph()
            P = model.lift(g, trainable=("gen.",))
            try:
                noise = noise_rng.standard_normal((B, model.noise_dim))
                z_lat = model.generate_node(g, P, g.constant(noise))
                loss = gc.scale(gc.mean_all(model.critic_score(g, P, z_lat)), -1.0)
                grads = _grads_by_name(g, P, loss)
            except NumericError as err:
                raise TrainingDiverged(
                    f"arae adversarial epoch {epoch}: {err}") from err
            gen_vals.append(float(loss.value))
            opt_gen.step(grads)

        metrics.append({
            "epoch": epoch,
            "recon_loss": recon_sum / max(recon_tok, 1),
            "recon_acc": recon_hit / max(recon_tok, 1),
            "critic_loss": float(np.mean(critic_losses)),
            "gp": float(np.mean(gp_vals)),
            "gen_loss": float(np.mean(gen_vals)),
        })
    _write_metrics(metrics_path, metrics)
    return model, metrics
