"""The DG objective zoo.

Each entry either builds a scalar loss node on a shared tape (so one backward
pass trains everything jointly) or transforms gradients/forwards directly.

Conventions fixed here once:
  * variance across domains is population variance (divide by K);
  * within-group variance for pair groups is the unbiased sample variance
    (so a 2-member group equals half the pair squared difference);
  * probability matching uses D_KL(p(.|x) || p(.|x~)) as written, with an
    optional symmetrized mode;
  * Gaussian-kernel MMD bandwidth is the median pooled pairwise squared
    distance, recomputed per batch and kept inside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkit as dk
from .diffkit import Model, Node, Tape
from .errors import (
    ConfigError,
    ShapeMismatch,
    TooFewDomains,
    TooFewExamples,
    UnlabeledPair,
)
from .pairgen import ContrastivePair, PairGroup
from .rng import substream

KINDS = ("ERM", "PAIR_PROB", "PAIR_LOGIT", "PAIR_FEAT", "LAM", "VREX",
         "GROUP_DRO", "FISH", "IGA", "AND_MASK", "FISHR", "IRM", "SD", "RSC",
         "CORAL", "MMD", "DANN", "CDANN", "MIXUP", "SWA")


@dataclass(frozen=True)
class DomainBatch:
    """One domain's examples; optional weights make it an exact cell batch."""

    domain_id: str
    inputs: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if np.asarray(self.inputs).shape[0] == 0:
            raise ShapeMismatch("empty domain batch")
        if np.asarray(self.labels).shape[0] != np.asarray(self.inputs).shape[0]:
            raise ShapeMismatch("inputs and labels length mismatch")
        if self.weights is not None and abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ShapeMismatch("batch weights must sum to 1")

    def __len__(self) -> int:
        return int(np.asarray(self.inputs).shape[0])


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str
    lam: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("objective.kind", f"unknown kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("objective.lambda", "must be nonnegative")
        ex = self.extras
        if self.kind == "RSC":
            q = ex.get("q", 1.0 / 3.0)
            if not 0.0 < q < 1.0:
                raise ConfigError("objective.extras.q", "q must be in (0,1)")
        if self.kind == "AND_MASK":
            tau = ex.get("tau", 1.0)
            if not 0.5 < tau <= 1.0:
                raise ConfigError("objective.extras.tau", "tau must be in (0.5,1]")
        if self.kind == "MIXUP":
            alpha = ex.get("alpha", 0.2)
            if alpha <= 0:
                raise ConfigError("objective.extras.alpha", "alpha must be > 0")
        if self.kind == "MMD":
            bw = ex.get("bandwidth")
            if bw is not None and bw <= 0:
                raise ConfigError("objective.extras.bandwidth", "must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "ObjectiveConfig":
        if "kind" not in doc:
            raise ConfigError("objective.kind", "missing")
        return cls(doc["kind"], float(doc.get("lambda", 0.0)),
                   dict(doc.get("extras", {})))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "extras": dict(self.extras)}


# ---------------------------------------------------------------------------
# ERM and shared forward plumbing
# ---------------------------------------------------------------------------

def _weight_node(batch: DomainBatch) -> Node:
    n = len(batch)
    w = batch.weights if batch.weights is not None else np.full(n, 1.0 / n)
    return dk.constant(np.asarray(w, dtype=np.float64))


def erm_loss(model: Model, batch: DomainBatch, tape: Tape | None = None) -> Node:
    """(Weighted) mean negative log-likelihood of the true classes, in nats."""
    tape = tape if tape is not None else Tape(model)
    labels = np.asarray(batch.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ShapeMismatch("label out of range")
    _, z, _, _ = dk.forward(model, batch.inputs, tape)
    logp = dk.log_softmax_rows(z)
    picked = dk.take_cols(logp, labels)
    return dk.neg(dk.nsum(dk.mul(picked, _weight_node(batch))))


def domain_losses(model: Model, batches: list[DomainBatch],
                  tape: Tape) -> list[Node]:
    return [erm_loss(model, b, tape) for b in batches]


def mean_domain_loss(model: Model, batches: list[DomainBatch],
                     tape: Tape) -> Node:
    losses = domain_losses(model, batches, tape)
    return dk.nmean(dk.stack_list(losses))


# ---------------------------------------------------------------------------
# Pair-based regularizers
# ---------------------------------------------------------------------------

def _pair_forward(model: Model, idx_a, idx_b, tape: Tape):
    ha, za, _, _ = dk.forward(model, np.asarray(idx_a, dtype=np.int64), tape)
    hb, zb, _, _ = dk.forward(model, np.asarray(idx_b, dtype=np.int64), tape)
    return ha, za, hb, zb


def pair_regularizer(model: Model, pairs_or_groups, kind: str,
                     tape: Tape | None = None, weights=None,
                     symmetrized: bool = False) -> Node:
    """Mean divergence over contrastive pairs or the group-variance form.

    kind PROB: KL between predicted distributions; LOGIT / FEAT: summed
    squared differences of logits / features.  Groups use the unbiased
    within-group variance summed over coordinates.
    """
    if kind not in ("PROB", "LOGIT", "FEAT"):
        raise ShapeMismatch(f"unknown pair kind {kind!r}")
    items = list(pairs_or_groups)
    if not items:
        raise ShapeMismatch("no pairs given")
    tape = tape if tape is not None else Tape(model)
    if isinstance(items[0], PairGroup):
        return _group_variance(model, items, kind, tape)
    if weights is None:
        w = dk.constant(np.full(len(items), 1.0 / len(items)))
    else:
        w = dk.constant(np.asarray(weights, dtype=np.float64))
    ha, za, hb, zb = _pair_forward(model, [p.x for p in items],
                                   [p.x_tilde for p in items], tape)
    if kind == "PROB":
        la, lb = dk.log_softmax_rows(za), dk.log_softmax_rows(zb)
        pa = dk.exp(la)
        kl = dk.nsum(dk.mul(pa, dk.sub(la, lb)), axis=1)
        if symmetrized:
            pb = dk.exp(lb)
            kl = dk.mul(dk.add(kl, dk.nsum(dk.mul(pb, dk.sub(lb, la)), axis=1)),
                        dk.constant(0.5))
        return dk.nsum(dk.mul(kl, w))
    diff = dk.sub(za, zb) if kind == "LOGIT" else dk.sub(ha, hb)
    per_pair = dk.nsum(dk.square(diff), axis=1)
    return dk.nsum(dk.mul(per_pair, w))


def _group_variance(model: Model, groups: list[PairGroup], kind: str,
                    tape: Tape) -> Node:
    if kind == "PROB":
        # KL has no variance form; average it over ordered in-group pairs
        pairs = []
        for g in groups:
            for i in range(len(g.xs)):
                for j in range(len(g.xs)):
                    if i != j:
                        pairs.append(ContrastivePair(g.xs[i], g.xs[j], g.label,
                                                     g.xc, g.xns[i], g.xns[j]))
        return pair_regularizer(model, pairs, "PROB", tape)
    totals = []
    for g in groups:
        k = len(g.xs)
        if k < 2:
            raise ShapeMismatch("group needs at least 2 members")
        h, z, _, _ = dk.forward(model, np.asarray(g.xs, dtype=np.int64), tape)
        rows = z if kind == "LOGIT" else h
        mean = dk.nmean(rows, axis=0, keepdims=True)
        centered = dk.sub(rows, mean)
        # unbiased: divide by k-1, so 2-member groups give half the pair form
        var = dk.mul(dk.nsum(dk.square(centered)), dk.constant(1.0 / (k - 1)))
        totals.append(var)
    return dk.nmean(dk.stack_list(totals))


def lam_regularizer(model: Model, labeled_pairs, tape: Tape | None = None,
                    weights=None) -> Node:
    """Head-weighted feature matching: mean of sum_u w[u,y]^2 (df_u)^2."""
    pairs = list(labeled_pairs)
    if not pairs:
        raise ShapeMismatch("no pairs given")
    if any(p.label is None for p in pairs):
        raise UnlabeledPair("LAM needs labeled pairs")
    tape = tape if tape is not None else Tape(model)
    if weights is None:
        w = dk.constant(np.full(len(pairs), 1.0 / len(pairs)))
    else:
        w = dk.constant(np.asarray(weights, dtype=np.float64))
    ha, _, hb, _ = _pair_forward(model, [p.x for p in pairs],
                                 [p.x_tilde for p in pairs], tape)
    labels = np.asarray([p.label for p in pairs], dtype=np.int64)
    head = tape.node("head")
    u = model.u_count
    real_units = dk.slice_rows(head, 0, u)  # drop the dummy bias unit
    w_y = dk.gather_rows(dk.t2(real_units), labels)  # [n_pairs, u]
    contrib = dk.nsum(dk.mul(dk.square(w_y), dk.square(dk.sub(ha, hb))), axis=1)
    return dk.nsum(dk.mul(contrib, w))


# ---------------------------------------------------------------------------
# Risk matching
# ---------------------------------------------------------------------------

def _need_domains(batches, k: int = 2):
    if len(batches) < k:
        raise TooFewDomains(f"need at least {k} domains, got {len(batches)}")


def vrex(model: Model, batches: list[DomainBatch], lam: float = 1.0,
         tape: Tape | None = None) -> Node:
    """Mean domain loss plus lam times the population variance of losses."""
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    losses = dk.stack_list(domain_losses(model, batches, tape))
    mean = dk.nmean(losses)
    var = dk.nmean(dk.square(dk.sub(losses, mean)))
    return dk.add(mean, dk.mul(dk.constant(float(lam)), var))


def vrex_penalty(model: Model, batches: list[DomainBatch],
                 tape: Tape | None = None) -> Node:
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    losses = dk.stack_list(domain_losses(model, batches, tape))
    return dk.nmean(dk.square(dk.sub(losses, dk.nmean(losses))))


def group_dro(model: Model, batches: list[DomainBatch],
              tape: Tape | None = None) -> Node:
    """Worst-domain loss; ties give the subgradient to the lowest index."""
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    losses = domain_losses(model, batches, tape)
    worst = int(np.argmax([float(l.val) for l in losses]))
    return losses[worst]


# ---------------------------------------------------------------------------
# Gradient matching
# ---------------------------------------------------------------------------

def _domain_grad_blocks(model: Model, batches, tape: Tape) -> list[list[Node]]:
    return [dk.grad_nodes(erm_loss(model, b, tape), tape.param_nodes)
            for b in batches]


def _block_dot(ga: list[Node], gb: list[Node]) -> Node:
    parts = [dk.nsum(dk.mul(a, b)) for a, b in zip(ga, gb)]
    return dk.nsum(dk.stack_list(parts))


def fish_from_grads(grads: list[list[Node]]) -> Node:
    """Negated mean inner product over ordered pairs of gradient block lists."""
    k = len(grads)
    if k < 2:
        raise TooFewDomains("need >= 2 gradient vectors")
    dots = [_block_dot(grads[i], grads[j])
            for i in range(k) for j in range(k) if i != j]
    return dk.neg(dk.nmean(dk.stack_list(dots)))


def iga_from_grads(grads: list[list[Node]]) -> Node:
    """Trace of the population covariance of gradient vectors."""
    k = len(grads)
    if k < 2:
        raise TooFewDomains("need >= 2 gradient vectors")
    total = []
    for b in range(len(grads[0])):
        mean = dk.nmean(dk.stack_list([g[b] for g in grads]), axis=0)
        dev = [dk.nsum(dk.square(dk.sub(g[b], mean))) for g in grads]
        total.append(dk.nmean(dk.stack_list(dev)))
    return dk.nsum(dk.stack_list(total))


def fish_penalty(model: Model, batches: list[DomainBatch],
                 tape: Tape | None = None) -> Node:
    """Negated mean inner product of domain gradients over ordered pairs."""
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    return fish_from_grads(_domain_grad_blocks(model, batches, tape))


def iga_penalty(model: Model, batches: list[DomainBatch],
                tape: Tape | None = None) -> Node:
    """Trace of the population covariance of the domain gradient vectors."""
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    return iga_from_grads(_domain_grad_blocks(model, batches, tape))


def and_mask(domain_grads: list[np.ndarray], quorum: float = 1.0) -> np.ndarray:
    """Keep components whose sign wins a quorum across domains; zero the rest.

    Kept components carry the across-domain mean.  Exact zeros count as
    agreeing with nothing.
    """
    if len(domain_grads) < 2:
        raise TooFewDomains("AND-mask needs at least 2 domain gradients")
    if not 0.5 < quorum <= 1.0:
        raise ShapeMismatch("quorum must be in (0.5, 1]")
    g = np.stack(domain_grads)  # [K, P]
    k = g.shape[0]
    pos = (g > 0).sum(axis=0)
    negs = (g < 0).sum(axis=0)
    agree = np.maximum(pos, negs) / k
    keep = agree >= quorum
    return np.where(keep, g.mean(axis=0), 0.0)


def fishr_from_grads(per_example_by_domain: list[list[list[Node]]],
                     weights_by_domain=None) -> Node:
    """Penalty from per-example gradient block lists, one inner list per domain.

    Componentwise (weighted) population variance per domain, then squared
    Euclidean distance between variance vectors, mean over unordered pairs.
    """
    if len(per_example_by_domain) < 2:
        raise TooFewDomains("need >= 2 domains of per-example gradients")
    variance_blocks = []
    for d, per_example in enumerate(per_example_by_domain):
        n = len(per_example)
        if n < 2:
            raise TooFewExamples("need >= 2 examples per domain")
        wts = (np.full(n, 1.0 / n) if weights_by_domain is None
               else np.asarray(weights_by_domain[d], dtype=np.float64))
        blocks = []
        for blk in range(len(per_example[0])):
            gs = dk.stack_list([per_example[i][blk] for i in range(n)])
            w_shape = (n,) + (1,) * (gs.val.ndim - 1)
            w = dk.constant(wts.reshape(w_shape))
            mean = dk.nsum(dk.mul(gs, w), axis=0)
            var = dk.nsum(dk.mul(dk.square(dk.sub(gs, mean)), w), axis=0)
            blocks.append(var)
        variance_blocks.append(blocks)
    k = len(variance_blocks)
    dists = []
    for i in range(k):
        for j in range(i + 1, k):
            parts = [dk.nsum(dk.square(dk.sub(a, b)))
                     for a, b in zip(variance_blocks[i], variance_blocks[j])]
            dists.append(dk.nsum(dk.stack_list(parts)))
    return dk.nmean(dk.stack_list(dists))


def fishr_penalty(model: Model, batches: list[DomainBatch],
                  tape: Tape | None = None) -> Node:
    """Match per-domain componentwise variances of per-example gradients.

    Variance is over the batch's (weighted) empirical distribution; the
    penalty is the squared Euclidean distance between variance vectors,
    averaged over unordered domain pairs.  Weighted cell batches give the
    exact population form of the same quantity.
    """
    _need_domains(batches)
    for b in batches:
        if len(b) < 2:
            raise TooFewExamples(f"domain {b.domain_id}: need >= 2 examples")
    tape = tape if tape is not None else Tape(model)
    per_domain, weights = [], []
    for b in batches:
        labels = np.asarray(b.labels, dtype=np.int64)
        _, z, _, _ = dk.forward(model, b.inputs, tape)
        logp = dk.log_softmax_rows(z)
        picked = dk.take_cols(logp, labels)
        n = len(b)
        per_domain.append([dk.grad_nodes(dk.neg(dk.index0(picked, i)),
                                         tape.param_nodes) for i in range(n)])
        weights.append(b.weights if b.weights is not None
                       else np.full(n, 1.0 / n))
    return fishr_from_grads(per_domain, weights)


def irm_penalty(model: Model, batches: list[DomainBatch],
                tape: Tape | None = None) -> Node:
    """Squared loss-gradient w.r.t. a unit logit multiplier, summed over domains."""
    if len(batches) < 1:
        raise TooFewDomains("IRM needs at least 1 domain")
    tape = tape if tape is not None else Tape(model)
    terms = []
    for b in batches:
        labels = np.asarray(b.labels, dtype=np.int64)
        scale = dk.constant(1.0)
        _, z, _, _ = dk.forward(model, b.inputs, tape)
        zs = dk.mul(z, scale)
        logp = dk.log_softmax_rows(zs)
        picked = dk.take_cols(logp, labels)
        loss = dk.neg(dk.nsum(dk.mul(picked, _weight_node(b))))
        (g,) = dk.grad_nodes(loss, [scale])
        terms.append(dk.square(g))
    return dk.nsum(dk.stack_list(terms))


# ---------------------------------------------------------------------------
# Logit / feature shaping
# ---------------------------------------------------------------------------

def sd_penalty(logits: Node, weights: np.ndarray | None = None) -> Node:
    """Mean squared logit norm over the batch."""
    sq = dk.nsum(dk.square(logits), axis=1)
    if weights is None:
        return dk.nmean(sq)
    return dk.nsum(dk.mul(sq, dk.constant(np.asarray(weights, dtype=np.float64))))


def rsc_mask(model: Model, batch: DomainBatch, q: float,
             tape: Tape | None = None):
    """Mute the feature units whose true-class logit gradients are largest.

    Returns (masked loss node, muted unit indices, tape).  The score is the
    batch mean absolute gradient of the true-class logit w.r.t. H; the top
    ceil(q*u) units are muted, ties muting higher indices first.
    """
    if not 0.0 < q < 1.0:
        raise ShapeMismatch("q must be in (0,1)")
    tape = tape if tape is not None else Tape(model)
    labels = np.asarray(batch.labels, dtype=np.int64)
    h, z, _, _ = dk.forward(model, batch.inputs, tape)
    true_logit_sum = dk.nsum(dk.take_cols(z, labels))
    (gh,) = dk.grad_nodes(true_logit_sum, [h])
    score = np.abs(gh.val).mean(axis=0)
    u = score.shape[0]
    n_mute = int(np.ceil(q * u))
    order = sorted(range(u), key=lambda i: (-score[i], -i))
    muted = sorted(order[:n_mute])
    mask = np.ones(u)
    mask[muted] = 0.0
    _, z2, _, _ = dk.forward(model, batch.inputs, tape, feature_mask=mask)
    logp = dk.log_softmax_rows(z2)
    loss = dk.neg(dk.nsum(dk.mul(dk.take_cols(logp, labels), _weight_node(batch))))
    return loss, muted, tape


# ---------------------------------------------------------------------------
# Distribution matching on features
# ---------------------------------------------------------------------------

def _as_feature_nodes(features_by_domain) -> list[Node]:
    nodes = []
    for f in features_by_domain:
        node = f if isinstance(f, Node) else dk.constant(np.asarray(f, dtype=np.float64))
        if node.val.ndim != 2:
            raise ShapeMismatch("features must be [n, u] matrices")
        if node.val.shape[0] < 2:
            raise TooFewExamples("need >= 2 feature vectors per domain")
        nodes.append(node)
    if len(nodes) < 2:
        raise TooFewDomains("need >= 2 domains of features")
    return nodes


def coral_penalty(features_by_domain) -> Node:
    """Squared mean difference plus squared Frobenius difference of
    population covariances, averaged over unordered domain pairs."""
    nodes = _as_feature_nodes(features_by_domain)
    stats = []
    for f in nodes:
        n = f.val.shape[0]
        mean = dk.nmean(f, axis=0, keepdims=True)  # [1, u]
        centered = dk.sub(f, mean)
        cov = dk.mul(dk.matmul(dk.t2(centered), centered), dk.constant(1.0 / n))
        stats.append((mean, cov))
    k = len(stats)
    terms = []
    for i in range(k):
        for j in range(i + 1, k):
            dmean = dk.nsum(dk.square(dk.sub(stats[i][0], stats[j][0])))
            dcov = dk.nsum(dk.square(dk.sub(stats[i][1], stats[j][1])))
            terms.append(dk.add(dmean, dcov))
    return dk.nmean(dk.stack_list(terms))


def _sq_dists(a: Node, b: Node) -> Node:
    na = dk.nsum(dk.square(a), axis=1, keepdims=True)  # [m,1]
    nb = dk.reshape(dk.nsum(dk.square(b), axis=1), (1, b.val.shape[0]))
    cross = dk.matmul(a, dk.t2(b))
    d = dk.add(dk.sub(na, dk.mul(dk.constant(2.0), cross)), nb)
    return dk.relu(d)  # clip tiny negative float residue


def _median_bandwidth(dmat: Node, m: int) -> Node:
    """Median pooled pairwise squared distance as a graph node.

    The median element's position is found on values; the node at that
    position carries the gradient.  Degenerate all-equal batches fall back
    to a constant floor.
    """
    iu, ju = np.triu_indices(m, k=1)
    vals = dmat.val[iu, ju]
    order = np.argsort(vals, kind="stable")
    k = len(vals)
    picks = [order[k // 2]] if k % 2 == 1 else [order[k // 2 - 1], order[k // 2]]
    if vals[picks].mean() <= 1e-12:
        return dk.constant(1e-12)
    elems = []
    for p in picks:
        row = dk.gather_rows(dmat, np.array([iu[p]]))
        elems.append(dk.reshape(dk.take_cols(row, np.array([ju[p]])), ()))
    med = elems[0] if len(elems) == 1 else dk.mul(dk.add(elems[0], elems[1]),
                                                  dk.constant(0.5))
    return med


class MmdResult:
    """Clamped penalty node plus the raw (possibly negative) estimate."""

    __slots__ = ("node", "raw", "bandwidth")

    def __init__(self, node: Node, raw: float, bandwidth: float):
        self.node = node
        self.raw = raw
        self.bandwidth = bandwidth


def mmd_penalty(features_by_domain, bandwidth: float | None = None) -> MmdResult:
    """Unbiased Gaussian-kernel MMD^2, averaged over unordered domain pairs.

    The estimator may dip below zero; the returned node is clamped at zero
    and the raw value is reported alongside.
    """
    nodes = _as_feature_nodes(features_by_domain)
    k = len(nodes)
    terms = []
    bw_used = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            a, b = nodes[i], nodes[j]
            m, n = a.val.shape[0], b.val.shape[0]
            pooled = dk.concat_rows([a, b])
            dmat = _sq_dists(pooled, pooled)
            h = (dk.constant(float(bandwidth)) if bandwidth is not None
                 else _median_bandwidth(dmat, m + n))
            bw_used = float(h.val)
            kmat = dk.exp(dk.neg(dk.div(dmat, h)))
            kaa = dk.slice_rows(kmat, 0, m)
            kaa = dk.slice_cols(kaa, 0, m)
            kbb = dk.slice_cols(dk.slice_rows(kmat, m, m + n), m, m + n)
            kab = dk.slice_cols(dk.slice_rows(kmat, 0, m), m, m + n)
            term_a = dk.div(dk.sub(dk.nsum(kaa), dk.constant(float(m))),
                            dk.constant(float(m * (m - 1))))
            term_b = dk.div(dk.sub(dk.nsum(kbb), dk.constant(float(n))),
                            dk.constant(float(n * (n - 1))))
            term_ab = dk.mul(dk.nmean(kab), dk.constant(2.0))
            terms.append(dk.sub(dk.add(term_a, term_b), term_ab))
    total = dk.nmean(dk.stack_list(terms))
    return MmdResult(dk.relu(total), float(total.val), bw_used)


# ---------------------------------------------------------------------------
# Adversarial objectives
# ---------------------------------------------------------------------------

def dann_losses(model: Model, adversary: Model, batches: list[DomainBatch],
                tape: Tape | None = None, adv_tape: Tape | None = None,
                reversal_scale: float = 1.0):
    """Label loss plus domain-classification loss behind gradient reversal.

    The adversary is a Model with no embedding, consuming feature rows; its
    head width must equal the number of domains.
    """
    _need_domains(batches)
    tape = tape if tape is not None else Tape(model)
    adv_tape = adv_tape if adv_tape is not None else Tape(adversary)
    if adversary.n_classes != len(batches):
        raise ShapeMismatch("adversary classes must equal the domain count")
    feats, label_losses, dom_ids, wparts = [], [], [], []
    for d, b in enumerate(batches):
        h, z, _, _ = dk.forward(model, b.inputs, tape)
        labels = np.asarray(b.labels, dtype=np.int64)
        logp = dk.log_softmax_rows(z)
        label_losses.append(dk.neg(dk.nsum(dk.mul(dk.take_cols(logp, labels),
                                                  _weight_node(b)))))
        feats.append(h)
        dom_ids.append(np.full(len(b), d, dtype=np.int64))
        w = (b.weights if b.weights is not None
             else np.full(len(b), 1.0 / len(b)))
        wparts.append(np.asarray(w) / len(batches))
    label_loss = dk.nmean(dk.stack_list(label_losses))
    pooled = dk.gradient_reversal(dk.concat_rows(feats), reversal_scale)
    _, zd, _, _ = dk.forward(adversary, pooled, adv_tape)
    dom = np.concatenate(dom_ids)
    wall = dk.constant(np.concatenate(wparts))
    logpd = dk.log_softmax_rows(zd)
    domain_loss = dk.neg(dk.nsum(dk.mul(dk.take_cols(logpd, dom), wall)))
    return label_loss, domain_loss, tape, adv_tape


def cdann_losses(model: Model, adversaries: list[Model],
                 batches: list[DomainBatch], tape: Tape | None = None,
                 adv_tapes: list[Tape] | None = None,
                 reversal_scale: float = 1.0):
    """Class-conditional adversaries plus one on the prior-normalized marginal.

    adversaries[y] is the domain classifier for class y; adversaries[-1]
    consumes all features with each class weighted exactly 1/|Y| inside its
    domain.  Returns (label loss, mean adversarial loss, tape, adv_tapes).
    """
    _need_domains(batches)
    n_classes = model.n_classes
    if len(adversaries) != n_classes + 1:
        raise ShapeMismatch(f"need {n_classes + 1} adversaries")
    tape = tape if tape is not None else Tape(model)
    adv_tapes = (adv_tapes if adv_tapes is not None
                 else [Tape(a) for a in adversaries])
    feats, label_losses = [], []
    for b in batches:
        h, z, _, _ = dk.forward(model, b.inputs, tape)
        labels = np.asarray(b.labels, dtype=np.int64)
        logp = dk.log_softmax_rows(z)
        label_losses.append(dk.neg(dk.nsum(dk.mul(dk.take_cols(logp, labels),
                                                  _weight_node(b)))))
        feats.append(h)
    label_loss = dk.nmean(dk.stack_list(label_losses))
    adv_terms = []
    # per-class conditional domain classifiers
    for y in range(n_classes):
        parts, ids, wparts = [], [], []
        for d, b in enumerate(batches):
            sel = np.flatnonzero(np.asarray(b.labels) == y)
            if sel.size == 0:
                continue
            parts.append(dk.gather_rows(feats[d], sel))
            ids.append(np.full(sel.size, d, dtype=np.int64))
            bw = (b.weights if b.weights is not None
                  else np.full(len(b), 1.0 / len(b)))
            wy = np.asarray(bw)[sel]
            wparts.append(wy / wy.sum())
        if len(parts) < 2:
            continue  # class absent almost everywhere; nothing to confuse
        pooled = dk.gradient_reversal(dk.concat_rows(parts), reversal_scale)
        _, zd, _, _ = dk.forward(adversaries[y], pooled, adv_tapes[y])
        w = np.concatenate(wparts) / len(parts)
        logpd = dk.log_softmax_rows(zd)
        adv_terms.append(dk.neg(dk.nsum(dk.mul(
            dk.take_cols(logpd, np.concatenate(ids)), dk.constant(w)))))
    # prior-normalized marginal: each class contributes exactly 1/|Y|
    parts, ids, wparts = [], [], []
    for d, b in enumerate(batches):
        labels = np.asarray(b.labels, dtype=np.int64)
        bw = (b.weights if b.weights is not None
              else np.full(len(b), 1.0 / len(b)))
        w = np.zeros(len(b))
        for y in range(n_classes):
            sel = labels == y
            mass = bw[sel].sum()
            if mass > 0:
                w[sel] = bw[sel] / mass / n_classes
        parts.append(feats[d])
        ids.append(np.full(len(b), d, dtype=np.int64))
        wparts.append(w / len(batches))
    pooled = dk.gradient_reversal(dk.concat_rows(parts), reversal_scale)
    _, zd, _, _ = dk.forward(adversaries[-1], pooled, adv_tapes[-1])
    logpd = dk.log_softmax_rows(zd)
    adv_terms.append(dk.neg(dk.nsum(dk.mul(
        dk.take_cols(logpd, np.concatenate(ids)),
        dk.constant(np.concatenate(wparts))))))
    adv_loss = dk.nmean(dk.stack_list(adv_terms))
    return label_loss, adv_loss, tape, adv_tapes


# ---------------------------------------------------------------------------
# Data-level and parameter-level methods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixupBatch:
    domain_id: str
    inputs: np.ndarray  # already-embedded real vectors
    soft_labels: np.ndarray  # [n, n_classes]


def mixup(model: Model, batch: DomainBatch, alpha: float, seed: int,
          n_classes: int | None = None) -> MixupBatch:
    """Convex combinations of embedded inputs and one-hot labels."""
    if alpha <= 0:
        raise ShapeMismatch("alpha must be > 0")
    n_classes = n_classes if n_classes is not None else model.n_classes
    rng = substream(seed, "mixup")
    emb = dk.embed_inputs(model, batch.inputs)
    labels = np.asarray(batch.labels, dtype=np.int64)
    onehot = np.eye(n_classes)[labels]
    n = len(batch)
    lam = rng.beta(alpha, alpha, size=n)
    partner = rng.permutation(n)
    mixed_x = lam[:, None] * emb + (1 - lam)[:, None] * emb[partner]
    mixed_y = lam[:, None] * onehot + (1 - lam)[:, None] * onehot[partner]
    return MixupBatch(batch.domain_id, mixed_x, mixed_y)


def soft_label_loss(model: Model, mixed: MixupBatch,
                    tape: Tape | None = None) -> Node:
    tape = tape if tape is not None else Tape(model)
    _, z, _, _ = dk.forward(model, mixed.inputs, tape)
    logp = dk.log_softmax_rows(z)
    per = dk.nsum(dk.mul(logp, dk.constant(mixed.soft_labels)), axis=1)
    return dk.neg(dk.nmean(per))


def swa_average(checkpoints: list[Model]) -> Model:
    """Parameterwise arithmetic mean of same-shape models."""
    if len(checkpoints) < 2:
        raise ShapeMismatch("need at least 2 checkpoints")
    first = checkpoints[0]
    for m in checkpoints[1:]:
        if len(m.weights) != len(first.weights):
            raise ShapeMismatch("layer count mismatch")
        for a, b in zip(m.param_blocks(), first.param_blocks()):
            if a[1].shape != b[1].shape:
                raise ShapeMismatch(f"shape mismatch in block {a[0]}")
        if (first.embedding is None) != (m.embedding is None):
            raise ShapeMismatch("embedding presence mismatch")
        if first.embedding is not None and not np.array_equal(
                first.embedding, m.embedding):
            raise ShapeMismatch("embeddings differ; cannot average")
    out = first.clone()
    k = len(checkpoints)
    for i in range(len(out.weights)):
        out.weights[i] = sum(m.weights[i] for m in checkpoints) / k
        out.biases[i] = sum(m.biases[i] for m in checkpoints) / k
    out.head = sum(m.head for m in checkpoints) / k
    return out
