"""Exact enumeration oracle for discrete causal-latent families.

Everything here is computed by summation over the finite latent and observed
spaces: cross-entropy losses, Bayes and causal-faithful optima, fused
conditionals, the causal-invariance index, and an executable suite of the
framework's theorems and propositions.  No estimation, no tolerance juggling
beyond float arithmetic.

Log conventions: losses are in nats; the invariance index uses base-2
Jensen-Shannon divergence.  The two bases coexist deliberately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .cld_core import CldFamily, DomainSpec, LatentSpaces, joint_cnxy, make_domain
from .errors import NotStochastic, TooFewDomains
from .rng import substream

CLAIM_IDS = ("P1", "P2", "T1", "T2", "T3", "P4", "P5", "P6", "P7", "P8", "T5")

PASS, FAIL, NOT_APPLICABLE = "PASS", "FAIL", "NOT-APPLICABLE"


@dataclass(frozen=True)
class PredictorTable:
    """An exact conditional table x -> distribution over predicted classes."""

    p_yhat_given_x: np.ndarray  # [n_obs, n_classes]


@dataclass(frozen=True)
class FusedTable:
    """Predictor pushed through the generation channel: [C, N, n_classes]."""

    p_yhat_given_cn: np.ndarray


def predictor_table(rows, tol: float = 1e-12) -> PredictorTable:
    arr = np.asarray(rows, dtype=np.float64)
    sums = arr.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad) or np.any(arr < 0):
        i = int(np.argmax(bad)) if np.any(bad) else int(np.argwhere(arr < 0)[0][0])
        raise NotStochastic("p_yhat_given_x", i, float(sums[i]))
    out = arr.copy()
    out.setflags(write=False)
    return PredictorTable(out)


def random_predictor(spaces: LatentSpaces, rng: np.random.Generator,
                     floor: float = 0.01) -> PredictorTable:
    raw = floor + rng.random((spaces.n_obs, spaces.n_classes))
    return predictor_table(raw / raw.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Reachability and contrastive structure
# ---------------------------------------------------------------------------

def core_reach_sets(family: CldFamily) -> list[np.ndarray]:
    """For each core value c, the observations reachable from (c, any n)."""
    reach = family.p_x_given_cn.max(axis=1) > 0.0  # [C, X]
    return [np.flatnonzero(reach[c]) for c in range(family.spaces.n_core)]


def contrastive_components(family: CldFamily):
    """Partition observations into contrastive-equivalence components.

    Two observations land in one component when a chain of shared core
    values forces any causal-invariant predictor to treat them identically.
    Returns (comp, n_components, owners) where comp[x] is the component id
    (or -1 for observations no latent pair can generate) and owners[x] is
    the list of core values that can generate x.
    """
    n_obs = family.spaces.n_obs
    parent = list(range(n_obs))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    reach = core_reach_sets(family)
    for xs in reach:
        for x in xs[1:]:
            union(int(xs[0]), int(x))
    reachable_any = np.zeros(n_obs, dtype=bool)
    for xs in reach:
        reachable_any[xs] = True
    comp = np.full(n_obs, -1, dtype=np.int64)
    next_id = 0
    roots: dict[int, int] = {}
    for x in range(n_obs):
        if not reachable_any[x]:
            continue
        r = find(x)
        if r not in roots:
            roots[r] = next_id
            next_id += 1
        comp[x] = roots[r]
    owners = [[] for _ in range(n_obs)]
    for c, xs in enumerate(reach):
        for x in xs:
            owners[int(x)].append(c)
    return comp, next_id, owners


def recoverable_core_map(family: CldFamily, core_support=None):
    """Map x -> generating core value when that value is unique, else None.

    `core_support` restricts which core values count as generators (used for
    claims quantified over a source's core support); default is all of them.
    """
    s = family.spaces
    cores = range(s.n_core) if core_support is None else [int(c) for c in core_support]
    reach = core_reach_sets(family)
    owner = np.full(s.n_obs, -1, dtype=np.int64)
    for c in cores:
        for x in reach[c]:
            if owner[x] == -1:
                owner[x] = c
            elif owner[x] != c:
                return None
    return owner


# ---------------------------------------------------------------------------
# Losses and optimal predictors
# ---------------------------------------------------------------------------

def domain_p_xy(family: CldFamily, domain: DomainSpec) -> np.ndarray:
    """Exact joint P^d(x, y) as an [n_obs, n_classes] array."""
    return joint_cnxy(family, domain).sum(axis=(0, 1))


def exact_loss(family: CldFamily, domain: DomainSpec,
               predictor: PredictorTable) -> float:
    """Exact expected cross-entropy E[-log predictor(y | x)] in nats.

    0 * log 0 counts as 0; probability 0 on any reachable (x, y) gives +inf.
    """
    p_xy = domain_p_xy(family, domain)
    pred = predictor.p_yhat_given_x
    mask = p_xy > 0.0
    if np.any(pred[mask] == 0.0):
        return float("inf")
    return float(-(p_xy[mask] * np.log(pred[mask])).sum())


def exact_accuracy(family: CldFamily, domain: DomainSpec,
                   predictor: PredictorTable) -> float:
    """Exact 0-1 accuracy of the argmax rule (ties broken by lowest class)."""
    p_xy = domain_p_xy(family, domain)
    picks = predictor.p_yhat_given_x.argmax(axis=1)
    return float(p_xy[np.arange(p_xy.shape[0]), picks].sum())


def bayes_predictor(family: CldFamily, domain: DomainSpec):
    """Exact P^d(Y | x) rowwise; unreachable rows are uniform and flagged.

    Returns (PredictorTable, unreachable) where unreachable is a boolean
    mask over observations the domain can never generate.
    """
    p_xy = domain_p_xy(family, domain)
    p_x = p_xy.sum(axis=1)
    n_obs, n_classes = p_xy.shape
    rows = np.full((n_obs, n_classes), 1.0 / n_classes)
    reach = p_x > 0.0
    rows[reach] = p_xy[reach] / p_x[reach, None]
    return predictor_table(rows), ~reach


class CausalFaithful(NamedTuple):
    table: PredictorTable
    degenerate: bool


def optimal_causal_faithful(family: CldFamily, source: DomainSpec) -> CausalFaithful:
    """The in-distribution-optimal predictor among causal-faithful tables.

    When the family is deterministic and every observation generated from
    the source's core support pins down a unique core value, this is the
    lift of P*(Y | x^c).  Otherwise no table can factor through the core
    pointwise, and the contract falls back to the best constant predictor
    (the source label marginal) with the degeneracy flag set.
    """
    s = family.spaces
    core_supp = np.flatnonzero(source.core_marginal() > 0.0)
    owner = recoverable_core_map(family, core_supp) if family.deterministic else None
    if owner is None:
        marginal = domain_p_xy(family, source).sum(axis=0)
        marginal = marginal / marginal.sum()
        rows = np.tile(marginal, (s.n_obs, 1))
        return CausalFaithful(predictor_table(rows), True)
    rows = np.full((s.n_obs, s.n_classes), 1.0 / s.n_classes)
    lifted = owner >= 0
    rows[lifted] = family.p_y_given_c[owner[lifted]]
    return CausalFaithful(predictor_table(rows), False)


def fuse(family: CldFamily, predictor: PredictorTable) -> FusedTable:
    """Push the predictor through the generation channel (mixing over x)."""
    fused = np.einsum("cnx,xy->cny", family.p_x_given_cn,
                      predictor.p_yhat_given_x)
    fused.setflags(write=False)
    return FusedTable(fused)


class InvarianceResult(NamedTuple):
    invariant: bool
    deviation: float
    witness: tuple | None  # (x^c, x^n, x~^n) of the worst violation


def is_causal_invariant(family: CldFamily, predictor: PredictorTable,
                        tol: float = 1e-9) -> InvarianceResult:
    """Check the per-example invariance condition on the predictor table.

    For every core value and every pair of non-core values, any two
    observations those latent pairs can generate must receive the same
    predicted distribution (within `tol` total variation).  Observations no
    latent pair can generate are exempt.
    """
    s = family.spaces
    pred = predictor.p_yhat_given_x
    tv = 0.5 * np.abs(pred[:, None, :] - pred[None, :, :]).sum(axis=2)
    supp = family.p_x_given_cn > 0.0  # [C, N, X]
    worst = 0.0
    witness = None
    for c in range(s.n_core):
        for n in range(s.n_noncore):
            xs = np.flatnonzero(supp[c, n])
            if xs.size == 0:
                continue
            for m in range(s.n_noncore):
                xt = np.flatnonzero(supp[c, m])
                if xt.size == 0:
                    continue
                dev = float(tv[np.ix_(xs, xt)].max())
                if dev > worst:
                    worst = dev
                    witness = (c, n, m)
    return InvarianceResult(worst <= tol, worst, witness if worst > tol else None)


def _jsd2(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Base-2 Jensen-Shannon divergence along the last axis, vectorized."""
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(p > 0.0, p * (np.log2(np.where(p > 0.0, p, 1.0)) -
                                      np.log2(np.where(m > 0.0, m, 1.0))), 0.0)
        right = np.where(q > 0.0, q * (np.log2(np.where(q > 0.0, q, 1.0)) -
                                       np.log2(np.where(m > 0.0, m, 1.0))), 0.0)
    return 0.5 * left.sum(axis=-1) + 0.5 * right.sum(axis=-1)


def exact_ci_index(family: CldFamily, domain: DomainSpec,
                   predictor: PredictorTable) -> float:
    """Exact causal-invariance index of the predictor in the domain.

    1 minus the expected base-2 JSD between fused conditionals at the
    domain's latent pairs and at non-core values resampled from the
    domain marginal.
    """
    fused = fuse(family, predictor).p_yhat_given_cn  # [C, N, Y]
    p_cn = domain.p_cn
    p_n = domain.noncore_marginal()
    jsd = _jsd2(fused[:, :, None, :], fused[:, None, :, :])  # [C, N, N]
    return float(1.0 - np.einsum("cn,m,cnm->", p_cn, p_n, jsd))


def support_condition(family: CldFamily, source: DomainSpec,
                      target: DomainSpec) -> dict:
    """Check the two support-containment conditions for generalization."""
    s_core = source.core_marginal() > 0.0
    t_core = target.core_marginal() > 0.0
    cond3 = bool(np.all(s_core[t_core]))
    s_joint = source.p_cn > 0.0
    t_joint = target.p_cn > 0.0
    cond3prime = bool(np.all(s_joint[t_joint]))
    assert not cond3prime or cond3, "joint containment must imply core containment"
    return {"cond3": cond3, "cond3prime": cond3prime}


# ---------------------------------------------------------------------------
# Theorem suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClaimResult:
    id: str
    status: str
    deviation: float | None
    witness: object = None

    def to_dict(self) -> dict:
        return {"id": self.id, "status": self.status,
                "deviation": self.deviation, "witness": self.witness}


@dataclass(frozen=True)
class TheoremReport:
    claims: tuple[ClaimResult, ...]

    def __post_init__(self):
        assert tuple(c.id for c in self.claims) == CLAIM_IDS

    @property
    def all_pass(self) -> bool:
        return all(c.status != FAIL for c in self.claims)

    def claim(self, cid: str) -> ClaimResult:
        return next(c for c in self.claims if c.id == cid)

    def to_dict(self) -> dict:
        return {"claims": [c.to_dict() for c in self.claims]}


def _component_constant_predictor(family, comp, n_comp, rng) -> PredictorTable:
    """A random predictor constant on each contrastive component."""
    s = family.spaces
    raw = 0.05 + rng.random((max(n_comp, 1), s.n_classes))
    raw /= raw.sum(axis=1, keepdims=True)
    rows = np.full((s.n_obs, s.n_classes), 1.0 / s.n_classes)
    lifted = comp >= 0
    rows[lifted] = raw[comp[lifted]]
    return predictor_table(rows)


def _pairwise_max(values: list[float]) -> float:
    return float(max(values) - min(values)) if len(values) >= 2 else 0.0


def verify_theorems(family: CldFamily, domains: list[DomainSpec],
                    tol: float = 1e-9, seed: int = 0,
                    n_random: int = 12) -> TheoremReport:
    """Run every claim in the fixed suite by exact enumeration.

    Convention: domains[0] is the source; domains[1] (when present) is the
    target for the claims that need one.  Claims whose structural
    preconditions fail are reported NOT-APPLICABLE, never FAIL.
    """
    if not domains:
        raise TooFewDomains("verify_theorems needs at least a source domain")
    rng = substream(seed, "verify")
    s = family.spaces
    comp, n_comp, _ = contrastive_components(family)
    source = domains[0]
    target = domains[1] if len(domains) > 1 else None
    cld2 = [d for d in domains if d.variant == "CLD2"]
    cld3 = [d for d in domains if d.variant == "CLD3"]
    ci_preds = [_component_constant_predictor(family, comp, n_comp, rng)
                for _ in range(n_random)]
    results: dict[str, ClaimResult] = {}

    def record(cid, deviation, witness=None, claim_tol=None):
        t = tol if claim_tol is None else claim_tol
        status = PASS if deviation <= t else FAIL
        results[cid] = ClaimResult(cid, status, float(deviation),
                                   witness if status == FAIL else None)

    def not_applicable(cid, why):
        results[cid] = ClaimResult(cid, NOT_APPLICABLE, None, why)

    # P1: invariant predictor => fused rows constant across non-core values.
    dev = 0.0
    wit = None
    for k, pred in enumerate(ci_preds):
        fused = fuse(family, pred).p_yhat_given_cn
        tv = 0.5 * np.abs(fused[:, :, None, :] - fused[:, None, :, :]).sum(axis=3)
        d = float(tv.max())
        if d > dev:
            dev, wit = d, ("predictor", k) + tuple(
                int(i) for i in np.unravel_index(tv.argmax(), tv.shape))
    record("P1", dev, wit)

    # P2: invariance <=> factoring through the core, via a uniform
    # full-support reference domain.
    dev = 0.0
    wit = None
    for k, pred in enumerate(ci_preds):
        fused = fuse(family, pred).p_yhat_given_cn
        factored = fused.mean(axis=1)  # uniform reference over non-core
        for c in range(s.n_core):
            xs = np.flatnonzero(family.p_x_given_cn[c].max(axis=0) > 0.0)
            if xs.size == 0:
                continue
            d = float(np.abs(pred.p_yhat_given_x[xs] - factored[c]).max())
            if d > dev:
                dev, wit = d, ("predictor", k, "core", c)
    owner_all = recoverable_core_map(family)
    if owner_all is not None:
        # converse direction: any table factoring through the core is invariant
        for k in range(3):
            raw = 0.05 + rng.random((s.n_core, s.n_classes))
            raw /= raw.sum(axis=1, keepdims=True)
            rows = np.full((s.n_obs, s.n_classes), 1.0 / s.n_classes)
            rows[owner_all >= 0] = raw[owner_all[owner_all >= 0]]
            inv = is_causal_invariant(family, predictor_table(rows), tol)
            if inv.deviation > dev:
                dev, wit = inv.deviation, ("lifted", k, inv.witness)
    record("P2", dev, wit)

    # T1: a causal-faithful predictor's loss depends only on the core
    # marginal.  Compare two synthetic domains sharing a core marginal but
    # with different non-core conditionals.
    p_c = 0.05 + rng.random(s.n_core)
    p_c /= p_c.sum()
    doms = []
    for _ in range(2):
        p_n_c = 0.02 + rng.random((s.n_core, s.n_noncore))
        p_n_c /= p_n_c.sum(axis=1, keepdims=True)
        doms.append(make_domain(family, "CLD", domain_id="t1",
                                p_cn=p_c[:, None] * p_n_c, tol=1e-9))
    dev = 0.0
    for pred in ci_preds[:6]:
        losses = [exact_loss(family, d, pred) for d in doms]
        dev = max(dev, _pairwise_max(losses))
    record("T1", dev)

    # T2 / T3: the causal-faithful loss minimizer.
    if source.variant == "CLD3":
        not_applicable("T2", "anti-causal source: no invariant label mechanism")
        not_applicable("T3", "anti-causal source: no invariant label mechanism")
    else:
        ocf = optimal_causal_faithful(family, source)
        pred = ocf.table.p_yhat_given_x
        if ocf.degenerate:
            marginal = domain_p_xy(family, source).sum(axis=0)
            marginal /= marginal.sum()
            dev = float(np.abs(pred - marginal).max())
            record("T2", dev, "constant branch differs from source marginal")
        else:
            core_supp = np.flatnonzero(source.core_marginal() > 0.0)
            dev = 0.0
            wit = None
            for c in core_supp:
                for n in range(s.n_noncore):
                    xs = np.flatnonzero(family.p_x_given_cn[c, n] > 0.0)
                    d = float(np.abs(pred[xs] - family.p_y_given_c[c]).max())
                    if d > dev:
                        dev, wit = d, (int(c), int(n))
            loss_ocf = exact_loss(family, source, ocf.table)
            best_rand = min(
                exact_loss(family, source,
                           _component_constant_predictor(family, comp, n_comp, rng))
                for _ in range(20))
            dev = max(dev, max(0.0, loss_ocf - best_rand))
            record("T2", dev, wit)
        if target is None:
            not_applicable("T3", "needs a target domain")
        else:
            cond = support_condition(family, source, target)
            if not cond["cond3"]:
                not_applicable("T3", "target core support not contained in source")
            else:
                loss_t = exact_loss(family, target, ocf.table)
                if ocf.degenerate:
                    ref = optimal_causal_faithful(family, target).table
                    ref_loss = exact_loss(family, target, ref)
                else:
                    ref_loss = exact_loss(family, target,
                                          bayes_predictor(family, target)[0])
                record("T3", max(0.0, loss_t - ref_loss))

    # P4: invariant predictor => equal losses across shared-core domains.
    if len(cld2) < 2:
        not_applicable("P4", "fewer than two CLD2 domains")
    else:
        dev = 0.0
        wit = None
        for k, pred in enumerate(ci_preds[:6]):
            losses = [exact_loss(family, d, pred) for d in cld2]
            d = _pairwise_max(losses)
            if d > dev:
                dev, wit = d, ("predictor", k, "losses", losses)
        record("P4", dev, wit)

    # P5: gradients of the two domain losses agree on an explicitly
    # causal-faithful logit chart (finite differences).
    if len(cld2) < 2:
        not_applicable("P5", "fewer than two CLD2 domains")
    else:
        owner = recoverable_core_map(family)
        chart_groups = owner if owner is not None else comp
        n_groups = int(chart_groups.max()) + 1
        dev = 0.0
        eps = 1e-6
        for _ in range(2):
            logits = 0.5 * rng.standard_normal((n_groups, s.n_classes))

            def chart_loss(L, dom):
                z = L - L.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                rows = np.full((s.n_obs, s.n_classes), 1.0 / s.n_classes)
                rows[chart_groups >= 0] = p[chart_groups[chart_groups >= 0]]
                return exact_loss(family, dom, predictor_table(rows, tol=1e-9))

            grads = []
            for dom in cld2[:2]:
                g = np.zeros_like(logits)
                for idx in np.ndindex(logits.shape):
                    bump = np.zeros_like(logits)
                    bump[idx] = eps
                    g[idx] = (chart_loss(logits + bump, dom) -
                              chart_loss(logits - bump, dom)) / (2 * eps)
                grads.append(g)
            dev = max(dev, float(np.abs(grads[0] - grads[1]).max()))
        record("P5", dev, claim_tol=1e-5)

    # P6: invariant feature table => equal feature marginals across CLD2.
    if len(cld2) < 2:
        not_applicable("P6", "fewer than two CLD2 domains")
    else:
        dev = 0.0
        for _ in range(6):
            n_feat = int(rng.integers(1, n_comp + 1))
            g = rng.integers(0, n_feat, size=max(n_comp, 1))
            dists = []
            for d in cld2:
                p_x = domain_p_xy(family, d).sum(axis=1)
                ph = np.zeros(n_feat)
                for x in range(s.n_obs):
                    if comp[x] >= 0:
                        ph[g[comp[x]]] += p_x[x]
                dists.append(ph)
            for i in range(1, len(dists)):
                dev = max(dev, float(np.abs(dists[i] - dists[0]).max()))
        record("P6", dev)

    # P7: anti-causal domains: equal class-conditional fused feature
    # distributions, hence equal prior-normalized marginals.
    if len(cld3) < 2:
        not_applicable("P7", "fewer than two CLD3 domains")
    else:
        dev = 0.0
        for _ in range(6):
            n_feat = int(rng.integers(1, n_comp + 1))
            g = rng.integers(0, n_feat, size=max(n_comp, 1))
            onehot = np.zeros((s.n_obs, n_feat))
            for x in range(s.n_obs):
                if comp[x] >= 0:
                    onehot[x, g[comp[x]]] = 1.0
            per_domain = []
            for d in cld3:
                # chain form: defined for every class, no Bayes division
                p_h_given_y = np.einsum("yc,cn,cnx,xv->yv", d.p_c_given_y,
                                        d.p_n_given_c, family.p_x_given_cn,
                                        onehot)
                per_domain.append(p_h_given_y)
            for i in range(1, len(per_domain)):
                dev = max(dev, float(np.abs(per_domain[i] - per_domain[0]).max()))
                bar_a = per_domain[0].mean(axis=0)
                bar_b = per_domain[i].mean(axis=0)
                dev = max(dev, float(np.abs(bar_a - bar_b).max()))
        record("P7", dev)

    # P8: deterministic shared-core family: every domain's optimal head
    # weights over a fixed causal-faithful feature table coincide.
    if not family.deterministic:
        not_applicable("P8", "family is not deterministic")
    elif len(cld2) < 2:
        not_applicable("P8", "fewer than two CLD2 domains")
    else:
        qs = []
        masses = []
        for d in cld2:
            p_xy = domain_p_xy(family, d)
            q = np.zeros((n_comp, s.n_classes))
            for x in range(s.n_obs):
                if comp[x] >= 0:
                    q[comp[x]] += p_xy[x]
            masses.append(q.sum(axis=1))
            qs.append(q)
        active = np.ones(n_comp, dtype=bool)
        for mass in masses:
            active &= mass > 0.0
        cond_rows = [q[active] / np.maximum(q[active].sum(axis=1, keepdims=True),
                                            1e-300) for q in qs]
        if any(np.any(r == 0.0) for r in cond_rows):
            not_applicable("P8", "a head optimum is unbounded (zero class mass)")
        else:
            weights = [np.stack([_newton_logit_fit(row) for row in rows])
                       for rows in cond_rows]
            dev = 0.0
            for i in range(1, len(weights)):
                dev = max(dev, float(np.abs(weights[i] - weights[0]).max()))
            record("P8", dev, claim_tol=max(tol, 1e-6))

    # T5: the unconstrained source optimum already matches the core label
    # law pointwise, provided each generated observation identifies its core
    # value; then joint support containment gives target optimality.
    if source.variant == "CLD3":
        not_applicable("T5", "anti-causal source: no invariant label mechanism")
    elif target is None:
        not_applicable("T5", "needs a target domain")
    else:
        cond = support_condition(family, source, target)
        if not cond["cond3prime"]:
            not_applicable("T5", "joint support containment fails")
        else:
            src_cores = np.flatnonzero(source.core_marginal() > 0.0)
            owner = _source_unique_owner(family, source)
            if owner is None:
                not_applicable(
                    "T5", "an observation is generated by several core values")
            else:
                bayes_s, _ = bayes_predictor(family, source)
                dev = 0.0
                wit = None
                for c in src_cores:
                    for n in np.flatnonzero(source.p_cn[c] > 0.0):
                        xs = np.flatnonzero(family.p_x_given_cn[c, n] > 0.0)
                        d = float(np.abs(bayes_s.p_yhat_given_x[xs] -
                                         family.p_y_given_c[c]).max())
                        if d > dev:
                            dev, wit = d, (int(c), int(n))
                loss_t = exact_loss(family, target, bayes_s)
                ref = exact_loss(family, target, bayes_predictor(family, target)[0])
                dev = max(dev, max(0.0, loss_t - ref))
                record("T5", dev, wit)

    return TheoremReport(tuple(results[cid] for cid in CLAIM_IDS))


def _source_unique_owner(family: CldFamily, source: DomainSpec):
    """x -> unique generating core value under the source, else None."""
    s = family.spaces
    owner = np.full(s.n_obs, -1, dtype=np.int64)
    for c in range(s.n_core):
        for n in range(s.n_noncore):
            if source.p_cn[c, n] <= 0.0:
                continue
            for x in np.flatnonzero(family.p_x_given_cn[c, n] > 0.0):
                if owner[x] == -1:
                    owner[x] = c
                elif owner[x] != c:
                    return None
    return owner


def _newton_logit_fit(q: np.ndarray, grad_tol: float = 1e-10) -> np.ndarray:
    """Minimize cross-entropy against q over logits; zero-mean representative.

    The head objective per feature component is softmax regression with a
    free logit vector; the minimizer is unique once the per-example shift
    gauge is fixed by zero-mean logits.  Plain Newton converges in a
    handful of steps at these sizes.
    """
    k = q.shape[0]
    z = np.zeros(k - 1)  # last logit pinned to 0
    for _ in range(200):
        full = np.append(z, 0.0)
        full -= full.max()
        p = np.exp(full)
        p /= p.sum()
        grad = p[:-1] - q[:-1]
        if float(np.abs(grad).max()) <= grad_tol:
            break
        h = np.diag(p[:-1]) - np.outer(p[:-1], p[:-1])
        z = z - np.linalg.solve(h + 1e-14 * np.eye(k - 1), grad)
    full = np.append(z, 0.0)
    return full - full.mean()
