"""Comparison attacks: embedding-gradient token flips with beam search,
best-of-N random generator decodes, and best-of-N random token strings.

All three produce the same candidate-record shape as the main attack and
select purely by attacked-class accuracy (no naturalness reranking)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .attack import AttackConfig, AttackModels, TriggerCandidate, nuts_attack, rerank
from .errors import ContractViolation
from .evaluation import accuracy_under_trigger
from .gradcore import Graph, Tensor
from .models import pad_batch, step_masks
from .textdata import Example, Vocab


@dataclass
class TokenGradientConfig:
    top_k: int = 20
    beam_width: int = 3
    max_sweeps: int = 5
    filler: str = "the"

    def __post_init__(self):
        if self.top_k < 1 or self.beam_width < 1 or self.max_sweeps < 1:
            raise ContractViolation("top_k, beam_width, max_sweeps must be "
                                    ">= 1")


def _single_class(dev_subset: list[Example]) -> int:
    if not dev_subset:
        raise ContractViolation("dev subset is empty")
    labels = {ex.label for ex in dev_subset}
    if len(labels) != 1:
        raise ContractViolation(f"dev subset must be single-class; "
                                f"found {sorted(labels)}")
    return labels.pop()


def _trigger_loss(victim, trig_ids: list[int], batch: list[Example],
                  want_grads: bool):
    """True mean victim loss of a trigger over `batch`; optionally also the
    loss gradient w.r.t. each trigger position's embedding row."""
    g = Graph()
    PV = victim.lift(g)
    B = len(batch)
    emb = victim.weights["emb"].data
    leaves = [g.leaf(emb[t][None, :].copy(), requires_grad=True)
              for t in trig_ids]
    trig_steps = [gc.tile_rows(leaf, B) for leaf in leaves]
    ids, lengths = pad_batch([list(ex.text) for ex in batch],
                             victim.vocab.pad_id)
    emb_steps = trig_steps + victim.embed_steps(g, PV, ids)
    masks = [np.ones(B)] * len(trig_ids) + step_masks(lengths, ids.shape[1])
    premise = None
    if victim.kind == "pair":
        premise = pad_batch([list(ex.premise) for ex in batch],
                            victim.vocab.pad_id)
    logits = victim.forward_embs(g, PV, emb_steps, masks, premise=premise)
    labels = np.array([ex.label for ex in batch])
    loss = gc.cross_entropy(logits, labels)
    if not want_grads:
        return float(loss.value), None
    grads = gc.backward(g, loss)
    return float(loss.value), [grads[leaf.idx].data[0] for leaf in leaves]


def token_gradient_attack(victim, dev_subset: list[Example], length: int,
                          vocab_mask, cfg: TokenGradientConfig | None = None):
    """Beam search over first-order best token replacements, accepting a
    sweep only when the true dev loss improves.

    Returns (trigger tokens, final dev loss). The trigger lives in the
    victim's vocabulary; `vocab_mask` is boolean over that vocabulary."""
    cfg = cfg or TokenGradientConfig()
    _single_class(dev_subset)
    mask = np.asarray(vocab_mask, dtype=bool)
    vocab: Vocab = victim.vocab
    if mask.shape != (len(vocab),):
        raise ContractViolation("vocab_mask must cover the victim vocabulary")
    allowed = np.flatnonzero(mask)
    allowed = np.array([i for i in allowed
                        if i not in (vocab.pad_id, vocab.unk_id,
                                     vocab.bos_id, vocab.eos_id)])
    if allowed.size == 0:
        raise ContractViolation("vocab_mask admits no usable tokens")
    if cfg.filler not in vocab.stoi:
        raise ContractViolation(f"filler token {cfg.filler!r} not in vocab")
    emb = victim.weights["emb"].data

    trigger = [vocab.stoi[cfg.filler]] * length
    best_loss, _ = _trigger_loss(victim, trigger, dev_subset, False)

    for _ in range(cfg.max_sweeps):
        _, grads = _trigger_loss(victim, trigger, dev_subset, True)
        # beam search across positions; replacements are proposed by the
        # first-order loss increase and verified by the true dev loss
        beam = [(best_loss, list(trigger))]
        for pos in range(length):
            scores = (emb[allowed] - emb[trigger[pos]]) @ grads[pos]
            order = np.argsort(-scores, kind="stable")[:cfg.top_k]
            pool = {tuple(trig): loss for loss, trig in beam}
            for _, trig in beam:
                for cand_tok in allowed[order]:
                    cand = list(trig)
                    cand[pos] = int(cand_tok)
                    key = tuple(cand)
                    if key in pool:
                        continue
                    pool[key], _ = _trigger_loss(victim, cand, dev_subset,
                                                 False)
            ranked = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
            beam = [(loss, list(key))
                    for key, loss in ranked[:cfg.beam_width]]
        top_loss, top_trig = beam[0]
        if top_loss <= best_loss:
            break
        best_loss, trigger = top_loss, top_trig
    return vocab.decode(trigger), best_loss


def random_arae_attack(generator, victim, lm, dev_subset: list[Example],
                       n_candidates: int, length: int, allowed_mask,
                       seed: int):
    """Best-of-N greedy decodes of random generator noise, selected by dev
    attacked-class accuracy. Identical to the main attack at 0 steps with
    reranking off, sharing its seed derivation."""
    y = _single_class(dev_subset)
    models = AttackModels(generator, victim, lm, allowed_mask)
    cfg = AttackConfig(attacked_class=y, trigger_length=length, steps=0,
                       n_inits=n_candidates, lam=0.0, seed=seed)
    return nuts_attack(models, dev_subset, cfg)


def random_sequence_attack(vocab: Vocab, allowed_mask, victim, lm,
                           dev_subset: list[Example], n_candidates: int,
                           length: int, seed: int):
    """Best-of-N uniformly random token sequences over the allowed mask,
    selected by dev attacked-class accuracy."""
    if n_candidates < 1:
        raise ContractViolation("n_candidates must be >= 1")
    y = _single_class(dev_subset)
    mask = np.asarray(allowed_mask, dtype=bool)
    if mask.shape != (len(vocab),):
        raise ContractViolation("allowed_mask must cover the vocabulary")
    allowed = np.array([i for i in np.flatnonzero(mask)
                        if i not in (vocab.pad_id, vocab.unk_id,
                                     vocab.bos_id, vocab.eos_id)])
    if allowed.size == 0:
        raise ContractViolation("allowed_mask admits no usable tokens")
    from .attack import derive_init_seeds
    candidates = []
    for s in derive_init_seeds(seed, n_candidates):
        rng = np.random.default_rng(np.random.SeedSequence(s))
        ids = [int(allowed[i])
               for i in rng.integers(0, allowed.size, size=length)]
        tokens = vocab.decode(ids)
        m1 = accuracy_under_trigger(victim, dev_subset, tokens, y)
        m2 = lm.avg_ce(tokens)
        candidates.append(TriggerCandidate(
            init_seed=s, n_final=Tensor(np.zeros(1)), tokens=tokens,
            m1=m1, m2=m2, score=m1))
    return rerank(candidates, 0.0), candidates
