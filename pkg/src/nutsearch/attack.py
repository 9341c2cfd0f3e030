"""Universal trigger search by projected gradient ascent in noise space.

A candidate starts from Gaussian noise n0, repeatedly climbs the victim's
loss through the generator + relaxed decoder, and stays inside an l2 ball
around n0. Each candidate's greedy-decoded trigger is scored by attacked-
class accuracy (m1, lower = stronger attack) and scoring-LM cross-entropy
(m2, lower = more natural); the final pick minimizes m1 + lambda * m2.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractViolation
from .evaluation import accuracy_under_trigger
from .gradcore import Graph, Node, Tensor, l2_project
from .models import ARAEModel, ScoringLM, VictimClassifier, pad_batch, step_masks
from .textdata import Example, align_vocab


@dataclass
class AttackConfig:
    attacked_class: int
    trigger_length: int = 3
    eps: float = 10.0
    eta: float = 1000.0
    steps: int = 1000
    n_inits: int = 256
    lam: float = 0.05
    tau_start: float = 1.0
    tau_end: float = 0.1
    batch_size: int = 32
    normalize_gradient: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")
        if self.n_inits < 1:
            raise ContractViolation("n_inits must be >= 1")
        if self.trigger_length < 1:
            raise ContractViolation("trigger_length must be >= 1")
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")
        for name in ("eps", "eta", "tau_start", "tau_end"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")

    def tau_at(self, step: int) -> float:
        """Geometric anneal from tau_start to tau_end across the run."""
        if self.steps <= 1:
            return self.tau_start
        frac = step / (self.steps - 1)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** frac)


@dataclass
class TriggerCandidate:
    init_seed: int
    n_final: Tensor
    tokens: list[str]
    m1: float
    m2: float
    score: float


class AttackModels:
    """Read-only bundle of the models the attack climbs through.

    allowed_mask is a boolean vector over the generator's vocabulary;
    False entries can never appear in a trigger (special tokens are
    always banned by the decoder)."""

    def __init__(self, generator: ARAEModel, victim: VictimClassifier,
                 lm: ScoringLM, allowed_mask):
        self.generator = generator
        self.victim = victim
        self.lm = lm
        self.allowed_mask = np.asarray(allowed_mask, dtype=bool)
        if self.allowed_mask.shape != (len(generator.vocab),):
            raise ContractViolation("allowed_mask must cover the generator "
                                    "vocabulary")
        if not self.allowed_mask.any():
            raise ContractViolation("allowed_mask admits no tokens")
        # generator-vocab row -> victim embedding row (zeros when unmapped)
        align = align_vocab(generator.vocab, victim.vocab)
        emb = victim.weights["emb"].data
        self._emb_map = emb[np.maximum(align, 0)].copy()
        self._emb_map[align < 0] = 0.0

    def build_loss(self, g: Graph, noise_leaf: Node, batch: list[Example],
                   tau: float, rng, cfg: AttackConfig,
                   hard: bool = True) -> Node:
        """Mean victim cross-entropy on `batch` with the decoded trigger
        prepended, as a function of the noise leaf."""
        gen, victim = self.generator, self.victim
        PG = gen.lift(g)
        z = gen.generate_node(g, PG, noise_leaf)
        steps = gen.decode_soft(g, PG, z, cfg.trigger_length, tau, rng,
                                self.allowed_mask, hard=hard)
        PV = victim.lift(g)
        B = len(batch)
        emb_node = g.constant(self._emb_map)
        trig_steps = [gc.tile_rows(gc.matmul(fed, emb_node), B)
                      for _, fed in steps]
        ids, lengths = pad_batch([list(ex.text) for ex in batch],
                                 victim.vocab.pad_id)
        emb_steps = trig_steps + victim.embed_steps(g, PV, ids)
        masks = ([np.ones(B)] * cfg.trigger_length
                 + step_masks(lengths, ids.shape[1]))
        premise = None
        if victim.kind == "pair":
            premise = pad_batch([list(ex.premise) for ex in batch],
                                victim.vocab.pad_id)
        logits = victim.forward_embs(g, PV, emb_steps, masks, premise=premise)
        labels = np.array([ex.label for ex in batch])
        return gc.cross_entropy(logits, labels)

    def decode_trigger(self, n: Tensor, length: int) -> list[str]:
        z = self.generator.generate(n.data.reshape(-1))
        ids = self.generator.decode_greedy(z, length, self.allowed_mask)
        return self.generator.vocab.decode(ids)


def attack_step(n_t: Tensor, n0: Tensor, batch: list[Example], models,
                cfg: AttackConfig, tau: float | None = None,
                rng=None) -> Tensor:
    """One projected-ascent update: climb the batch loss gradient by eta,
    then project back into the eps-ball around n0."""
    if not batch:
        raise ContractViolation("attack_step: empty batch")
    if tau is None:
        tau = cfg.tau_start
    if rng is None:
        rng = np.random.default_rng(0)
    g = Graph()
    leaf = g.leaf(n_t, requires_grad=True)
    loss = models.build_loss(g, leaf, batch, tau, rng, cfg)
    grad = gc.backward(g, loss)[leaf.idx].data
    if cfg.normalize_gradient:
        nrm = float(np.sqrt((grad * grad).sum()))
        if nrm > 0.0:
            grad = grad / nrm
    return l2_project(Tensor(n_t.data + cfg.eta * grad), n0, cfg.eps)


def _check_subset(dev_subset: list[Example], y: int) -> None:
    if not dev_subset:
        raise ContractViolation("dev subset is empty")
    bad = {ex.label for ex in dev_subset} - {y}
    if bad:
        raise ContractViolation(
            f"dev subset must contain only class {y}; found {sorted(bad)}")


def run_candidate(init_seed: int, dev_subset: list[Example],
                  models: AttackModels, cfg: AttackConfig) -> TriggerCandidate:
    """One full ascent from a seeded Gaussian start to a scored candidate."""
    _check_subset(dev_subset, cfg.attacked_class)
    init_ss, steps_ss = np.random.SeedSequence(init_seed).spawn(2)
    noise_dim = models.generator.noise_dim
    n0 = Tensor(np.random.default_rng(init_ss).standard_normal((1, noise_dim)))
    rng = np.random.default_rng(steps_ss)
    n = n0
    for t in range(cfg.steps):
        take = min(cfg.batch_size, len(dev_subset))
        idx = rng.choice(len(dev_subset), size=take, replace=False)
        batch = [dev_subset[i] for i in idx]
        n = attack_step(n, n0, batch, models, cfg, tau=cfg.tau_at(t), rng=rng)
    tokens = models.decode_trigger(n, cfg.trigger_length)
    m1 = accuracy_under_trigger(models.victim, dev_subset, tokens,
                                cfg.attacked_class)
    m2 = models.lm.avg_ce(tokens)
    return TriggerCandidate(init_seed=init_seed, n_final=n, tokens=tokens,
                            m1=m1, m2=m2, score=m1 + cfg.lam * m2)


def rerank(candidates: list[TriggerCandidate], lam: float) -> TriggerCandidate:
    """Pick argmin of m1 + lam*m2; ties break toward lower m1, then
    lexicographically earlier tokens."""
    if not candidates:
        raise ContractViolation("rerank: no candidates")
    return min(candidates,
               key=lambda c: (c.m1 + lam * c.m2, c.m1, tuple(c.tokens)))


def derive_init_seeds(master_seed: int, n: int) -> list[int]:
    """n independent per-candidate seeds derived from one master seed."""
    return [int(ss.generate_state(1)[0])
            for ss in np.random.SeedSequence(master_seed).spawn(n)]


def _run_candidate_star(args):
    return run_candidate(*args)


def nuts_attack(models: AttackModels, dev_subset: list[Example],
                cfg: AttackConfig, workers: int = 1):
    """Run n_inits independent candidates and rerank.

    Returns (selected, candidates); the candidate list order follows the
    derived seed order no matter how execution was scheduled."""
    _check_subset(dev_subset, cfg.attacked_class)
    seeds = derive_init_seeds(cfg.seed, cfg.n_inits)
    if workers <= 1:
        candidates = [run_candidate(s, dev_subset, models, cfg)
                      for s in seeds]
    else:
        jobs = [(s, dev_subset, models, cfg) for s in seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(_run_candidate_star, jobs))
    selected = rerank(candidates, cfg.lam)
    return selected, candidates


def candidate_record(c: TriggerCandidate, kind: str = "nuts",
                     config_hash: str = "") -> dict:
    return {"init_seed": c.init_seed, "tokens": list(c.tokens),
            "m1_dev": c.m1, "m2": c.m2, "score": c.score, "kind": kind,
            "config_hash": config_hash}


def write_candidates(path, candidates: list[TriggerCandidate],
                     kind: str = "nuts", config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps(candidate_record(c, kind, config_hash),
                                sort_keys=True) + "\n")


def write_selected(path, selected: TriggerCandidate, m1_test: float,
                   kind: str = "nuts", config_hash: str = "") -> None:
    rec = candidate_record(selected, kind, config_hash)
    rec["m1_test"] = m1_test
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
