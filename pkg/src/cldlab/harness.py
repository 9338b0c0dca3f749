"""Deterministic experiment execution: config ingestion, training loop,
evaluation rows, verification, sweeps, and atomic result persistence."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import diffkit as dk
from . import objectives as ob
from .cld_core import (
    CldFamily,
    DomainSpec,
    canonical_fixture,
    load_family_json,
    sample_dataset,
)
from .errors import ConfigError, NonFiniteActivation, UnknownFixture
from .metrics import ci_index_mc, evaluate, evaluate_exact
from .objectives import DomainBatch, ObjectiveConfig
from .oracle import domain_p_xy, verify_theorems
from .pairgen import sample_pairs, write_pairs_jsonl
from .rng import derive_seed, substream

__all__ = [
    "CSV_HEADER",
    "EvalSpec",
    "ExperimentConfig",
    "ModelSpec",
    "PairSpec",
    "ResultRecord",
    "TrainerSpec",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "generate_artifacts",
    "resolve_family",
    "resolve_out_dir",
    "run_experiment",
    "sweep",
    "verify_suite",
    "write_rows_csv",
]

CSV_HEADER = ("run_id,config_hash,step,domain_id,split,loss_nats,accuracy,"
              "ci_index,penalty_value,penalty_kind,seed")

FIXTURES = ("CANON-D", "CANON-N")

# Kinds that regularize toward multi-domain agreement; they need >= 2
# training sources.  Feature-cloud and per-example kinds additionally need
# raw example rows rather than collapsed weighted cells.
MULTI_DOMAIN_KINDS = frozenset({
    "VREX", "GROUP_DRO", "FISH", "IGA", "FISHR", "IRM", "CORAL", "MMD",
    "DANN", "CDANN", "AND_MASK",
})
RAW_ROW_KINDS = frozenset({"CORAL", "MMD", "DANN", "CDANN", "MIXUP"})
PAIR_KINDS = frozenset({"PAIR_PROB", "PAIR_LOGIT", "PAIR_FEAT", "LAM"})


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple = (16,)
    embedding: str = "bits"


@dataclass(frozen=True)
class TrainerSpec:
    optimizer: str = "gd"  # gd = full batch; sgd/adam draw minibatches
    lr: float = 0.1
    steps: int = 2000
    batch_size: int | None = None
    seed: int = 0
    data_mode: str = "sample"  # or "population": exact joint as weights
    train_n: int = 200
    eval_every: int = 0  # 0: evaluate only after the final step
    head_only_steps: int = 0  # optional linear-probe phase before joint


@dataclass(frozen=True)
class EvalSpec:
    exact: bool = True
    n_samples: int = 10000
    ci_pairs: int = 2000
    ci_reps: int = 1
    ci_style: str = "marginal"


@dataclass(frozen=True)
class PairSpec:
    n: int = 200
    style: str = "marginal"


@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    sources: tuple
    target: str
    objective: ObjectiveConfig
    model: ModelSpec = field(default_factory=ModelSpec)
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    pairs: PairSpec = field(default_factory=PairSpec)
    out: str = "results"


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _section(doc: dict, name: str, allowed: set) -> dict:
    sub = doc.get(name, {})
    _require(isinstance(sub, dict), name, "must be a JSON object")
    for key in sub:
        _require(key in allowed, f"{name}.{key}", "unknown field")
    return sub


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Parse and validate a config document; ConfigError names the field."""
    _require(isinstance(doc, dict), "", "config must be a JSON object")
    top = {"family", "source", "target", "objective", "model", "trainer",
           "eval", "pairs", "out"}
    for key in doc:
        _require(key in top, key, "unknown field")
    _require("family" in doc, "family", "required")
    _require("source" in doc, "source", "required")
    _require("target" in doc, "target", "required")
    family = doc["family"]
    _require(isinstance(family, str) and family, "family", "must be a name or path")
    src = doc["source"]
    sources = tuple([src] if isinstance(src, str) else src)
    _require(len(sources) >= 1 and all(isinstance(s, str) for s in sources),
             "source", "must be a domain id or list of ids")
    _require(isinstance(doc["target"], str), "target", "must be a domain id")

    obj_doc = doc.get("objective", {"kind": "ERM"})
    _require(isinstance(obj_doc, dict), "objective", "must be a JSON object")
    try:
        objective = ObjectiveConfig.from_dict(obj_doc)
    except ConfigError:
        raise
    except Exception as exc:  # invalid kind/extras surface as ConfigError
        raise ConfigError("objective", str(exc)) from exc

    msub = _section(doc, "model", {"widths", "embedding"})
    widths = tuple(msub.get("widths", (16,)))
    _require(all(isinstance(w, int) and w >= 1 for w in widths),
             "model.widths", "must be positive integers")
    embedding = msub.get("embedding", "bits")
    _require(embedding in ("onehot", "bits"), "model.embedding",
             "must be 'onehot' or 'bits'")

    tsub = _section(doc, "trainer", {"optimizer", "lr", "steps", "batch_size",
                                     "seed", "data_mode", "train_n",
                                     "eval_every", "head_only_steps"})
    trainer = TrainerSpec(
        optimizer=tsub.get("optimizer", "gd"),
        lr=float(tsub.get("lr", 0.1)),
        steps=int(tsub.get("steps", 2000)),
        batch_size=tsub.get("batch_size"),
        seed=int(tsub.get("seed", 0)),
        data_mode=tsub.get("data_mode", "sample"),
        train_n=int(tsub.get("train_n", 200)),
        eval_every=int(tsub.get("eval_every", 0)),
        head_only_steps=int(tsub.get("head_only_steps", 0)),
    )
    _require(trainer.optimizer in ("gd", "sgd", "adam"), "trainer.optimizer",
             "must be one of gd, sgd, adam")
    _require(trainer.steps >= 1, "trainer.steps", "must be >= 1")
    _require(trainer.lr > 0, "trainer.lr", "must be > 0")
    _require(trainer.data_mode in ("sample", "population"),
             "trainer.data_mode", "must be 'sample' or 'population'")
    _require(trainer.train_n >= 1, "trainer.train_n", "must be >= 1")
    _require(trainer.batch_size is None or
             (isinstance(trainer.batch_size, int) and trainer.batch_size >= 1),
             "trainer.batch_size", "must be a positive integer")
    _require(not (trainer.data_mode == "population" and
                  trainer.batch_size is not None),
             "trainer.batch_size", "population mode is full-batch only")
    _require(trainer.batch_size is None or trainer.optimizer != "gd",
             "trainer.batch_size", "gd is full-batch; use sgd or adam")
    _require(trainer.eval_every >= 0, "trainer.eval_every", "must be >= 0")
    _require(0 <= trainer.head_only_steps <= trainer.steps,
             "trainer.head_only_steps", "must be within [0, steps]")

    esub = _section(doc, "eval", {"exact", "n_samples", "ci_pairs", "ci_reps",
                                  "ci_style"})
    espec = EvalSpec(
        exact=bool(esub.get("exact", True)),
        n_samples=int(esub.get("n_samples", 10000)),
        ci_pairs=int(esub.get("ci_pairs", 2000)),
        ci_reps=int(esub.get("ci_reps", 1)),
        ci_style=esub.get("ci_style", "marginal"),
    )
    _require(espec.n_samples >= 1, "eval.n_samples", "must be >= 1")
    _require(espec.ci_pairs >= 0, "eval.ci_pairs", "must be >= 0")
    _require(espec.ci_reps >= 1, "eval.ci_reps", "must be >= 1")
    _require(espec.ci_style in ("marginal", "uniform"), "eval.ci_style",
             "must be 'marginal' or 'uniform'")

    psub = _section(doc, "pairs", {"n", "style"})
    pspec = PairSpec(n=int(psub.get("n", 200)), style=psub.get("style", "marginal"))
    _require(pspec.n >= 1, "pairs.n", "must be >= 1")
    _require(pspec.style in ("marginal", "uniform"), "pairs.style",
             "must be 'marginal' or 'uniform'")

    out = doc.get("out", "results")
    _require(isinstance(out, str) and out, "out", "must be a path")

    kind = objective.kind
    if kind in MULTI_DOMAIN_KINDS:
        _require(len(sources) >= 2, "source",
                 f"objective {kind} needs at least 2 source domains")
    if kind in RAW_ROW_KINDS:
        _require(trainer.data_mode == "sample", "trainer.data_mode",
                 f"objective {kind} works on example rows; use 'sample'")
    return ExperimentConfig(family=family, sources=sources, target=doc["target"],
                            objective=objective, model=ModelSpec(widths, embedding),
                            trainer=trainer, eval=espec, pairs=pspec, out=out)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "family": cfg.family,
        "source": list(cfg.sources),
        "target": cfg.target,
        "objective": cfg.objective.to_dict(),
        "model": {"widths": list(cfg.model.widths),
                  "embedding": cfg.model.embedding},
        "trainer": {
            "optimizer": cfg.trainer.optimizer, "lr": cfg.trainer.lr,
            "steps": cfg.trainer.steps, "batch_size": cfg.trainer.batch_size,
            "seed": cfg.trainer.seed, "data_mode": cfg.trainer.data_mode,
            "train_n": cfg.trainer.train_n, "eval_every": cfg.trainer.eval_every,
            "head_only_steps": cfg.trainer.head_only_steps,
        },
        "eval": {"exact": cfg.eval.exact, "n_samples": cfg.eval.n_samples,
                 "ci_pairs": cfg.eval.ci_pairs, "ci_reps": cfg.eval.ci_reps,
                 "ci_style": cfg.eval.ci_style},
        "pairs": {"n": cfg.pairs.n, "style": cfg.pairs.style},
        "out": cfg.out,
    }


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig, seed: int) -> str:
    doc = config_to_dict(cfg)
    doc["trainer"]["seed"] = seed
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Family resolution and persistence helpers


def resolve_family(source: str):
    """Fixture name or JSON path -> (family, ordered domain list)."""
    if source in FIXTURES:
        family, src, tgt = canonical_fixture(source)
        return family, [src, tgt]
    if not os.path.exists(source):
        raise ConfigError("family", f"not a fixture {FIXTURES} and no file at "
                                    f"{source!r}")
    try:
        family, domains = load_family_json(source)
    except (KeyError, ValueError, UnknownFixture) as exc:
        raise ConfigError("family", f"could not parse {source!r}: {exc}") from exc
    if not domains:
        raise ConfigError("family", f"{source!r} declares no domains")
    return family, domains


def resolve_out_dir(flag: str | None, cfg_out: str) -> str:
    env = os.environ.get("CLDLAB_OUT")
    out = env if env else (flag if flag else cfg_out)
    os.makedirs(out, exist_ok=True)
    return out


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(path: str, rows: list[dict]) -> None:
    cols = CSV_HEADER.split(",")
    lines = [CSV_HEADER]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_json(path: str, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Batch assembly


def _population_batch(family: CldFamily, domain: DomainSpec) -> DomainBatch:
    p_xy = domain_p_xy(family, domain)
    xs, ys = np.nonzero(p_xy > 0.0)
    w = p_xy[xs, ys]
    return DomainBatch(domain.domain_id, xs, ys, weights=w / w.sum())


def _collapse(domain_id: str, x: np.ndarray, y: np.ndarray) -> DomainBatch:
    cells, counts = np.unique(np.stack([x, y], axis=1), axis=0,
                              return_counts=True)
    return DomainBatch(domain_id, cells[:, 0], cells[:, 1],
                       weights=counts / counts.sum())


def _train_batches(family, sources, cfg, seed):
    """Per-source batches: (weighted-cell view, raw example view or None)."""
    weighted, raw = [], []
    for dom in sources:
        if cfg.trainer.data_mode == "population":
            weighted.append(_population_batch(family, dom))
            raw.append(None)
        else:
            ds = sample_dataset(family, dom, cfg.trainer.train_n,
                                derive_seed(seed, f"data:{dom.domain_id}"))
            weighted.append(_collapse(dom.domain_id, ds.x, ds.y))
            raw.append(DomainBatch(dom.domain_id, ds.x, ds.y))
    return weighted, raw


def _minibatch(batch: DomainBatch, rng, k: int) -> DomainBatch:
    idx = rng.integers(0, len(batch), size=k)
    return DomainBatch(batch.domain_id, batch.inputs[idx], batch.labels[idx])


# ---------------------------------------------------------------------------
# Objective dispatch


class _RunState:
    """Mutable per-run context threaded through the step loop."""

    def __init__(self):
        self.pairs = None
        self.adversary = None
        self.adversaries = None
        self.adv_opt = None
        self.swa_snapshots = []


def _penalty_and_total(model, cfg: ExperimentConfig, weighted, raw, state,
                       seed: int, step: int, tape):
    """Build (total_node, penalty_node) for one step on the given tape.

    penalty_node is the raw regularizer term (not scaled by lambda); kinds
    that replace the loss rather than add to it log their characteristic
    value instead.
    """
    kind = cfg.objective.kind
    lam = cfg.objective.lam
    extras = cfg.objective.extras

    if kind == "ERM" or kind == "SWA":
        return ob.mean_domain_loss(model, weighted, tape), None
    if kind in ("PAIR_PROB", "PAIR_LOGIT", "PAIR_FEAT"):
        base = ob.mean_domain_loss(model, weighted, tape)
        pen = ob.pair_regularizer(model, state.pairs, kind.split("_")[1], tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "LAM":
        base = ob.mean_domain_loss(model, weighted, tape)
        pen = ob.lam_regularizer(model, state.pairs, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "VREX":
        pen = ob.vrex_penalty(model, weighted, tape)
        base = ob.mean_domain_loss(model, weighted, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "GROUP_DRO":
        worst = ob.group_dro(model, weighted, tape)
        return worst, worst
    if kind == "FISH":
        pen = ob.fish_penalty(model, weighted, tape)
        base = ob.mean_domain_loss(model, weighted, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "IGA":
        pen = ob.iga_penalty(model, weighted, tape)
        base = ob.mean_domain_loss(model, weighted, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "FISHR":
        pen = ob.fishr_penalty(model, weighted, tape)
        base = ob.mean_domain_loss(model, weighted, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "IRM":
        pen = ob.irm_penalty(model, weighted, tape)
        base = ob.mean_domain_loss(model, weighted, tape)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "SD":
        base = ob.mean_domain_loss(model, weighted, tape)
        zs = []
        for b in weighted:
            _, z, _, _ = dk.forward(model, b.inputs, tape)
            zs.append(ob.sd_penalty(z, b.weights))
        pen = zs[0] if len(zs) == 1 else dk.mul(
            dk.constant(1.0 / len(zs)), _sum_nodes(zs))
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "CORAL":
        base = ob.mean_domain_loss(model, raw, tape)
        feats = [dk.forward(model, b.inputs, tape)[0] for b in raw]
        pen = ob.coral_penalty(feats)
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "MMD":
        base = ob.mean_domain_loss(model, raw, tape)
        feats = [dk.forward(model, b.inputs, tape)[0] for b in raw]
        bw = extras.get("bandwidth")
        pen = ob.mmd_penalty(feats, bandwidth=bw).node
        return dk.add(base, dk.mul(dk.constant(lam), pen)), pen
    if kind == "MIXUP":
        mixed = [ob.mixup(model, b, extras.get("alpha", 0.3),
                          derive_seed(seed, f"mixup:{step}:{b.domain_id}"))
                 for b in raw]
        losses = [ob.soft_label_loss(model, mb, tape) for mb in mixed]
        total = dk.mul(dk.constant(1.0 / len(losses)), _sum_nodes(losses))
        return total, None
    if kind == "RSC":
        q = extras.get("q", 0.33)
        losses = [ob.rsc_mask(model, b, q, tape)[0] for b in weighted]
        total = dk.mul(dk.constant(1.0 / len(losses)), _sum_nodes(losses))
        return total, None
    raise ConfigError("objective.kind", f"no trainer dispatch for {kind}")


def _sum_nodes(nodes):
    acc = nodes[0]
    for n in nodes[1:]:
        acc = dk.add(acc, n)
    return acc


def _eval_penalty(model, cfg, weighted, raw, state, seed) -> float:
    """Raw penalty value at the current parameters (no training side effects)."""
    kind = cfg.objective.kind
    if kind in ("ERM", "SWA", "MIXUP", "RSC", "AND_MASK"):
        return 0.0
    if kind == "DANN":
        tape = dk.Tape(model)
        _, dl, _, _ = ob.dann_losses(model, state.adversary, raw, tape,
                                     dk.Tape(state.adversary))
        return float(dl.val)
    if kind == "CDANN":
        tape = dk.Tape(model)
        _, al, _, _ = ob.cdann_losses(model, state.adversaries, raw, tape,
                                      [dk.Tape(a) for a in state.adversaries])
        return float(al.val)
    tape = dk.Tape(model)
    _, pen = _penalty_and_total(model, cfg, weighted, raw, state, seed, -1, tape)
    return 0.0 if pen is None else float(pen.val)


# ---------------------------------------------------------------------------
# Optimizers


class _Opt:
    def __init__(self, kind: str, model, lr: float):
        self.kind = kind
        self.lr = lr
        self.adam = dk.AdamState(model.n_params()) if kind == "adam" else None

    def step(self, model, grads: np.ndarray) -> None:
        if self.kind == "adam":
            dk.adam_step(model, grads, self.adam, lr=self.lr)
        else:
            dk.sgd_step(model, grads, lr=self.lr)


def _head_only(model, grads: np.ndarray) -> np.ndarray:
    """Zero every gradient block except the head (linear-probe phase)."""
    out = grads.copy()
    offset = 0
    for name, arr in model.param_blocks():
        size = arr.size
        if name != "head":
            out[offset:offset + size] = 0.0
        offset += size
    return out


# ---------------------------------------------------------------------------
# Run


@dataclass(frozen=True)
class ResultRecord:
    run_id: str
    config_hash: str
    rows: list
    csv_path: str
    summary_path: str
    checkpoint_path: str
    report_path: str | None = None


def _eval_rows(model, family, cfg, sources, target, step, run_id, chash,
               seed, pen_val):
    rows = []
    for dom, split in [*((d, "source") for d in sources), (target, "target")]:
        if cfg.eval.exact:
            res = evaluate_exact(model, family, dom)
        else:
            res = evaluate(model, family, dom, cfg.eval.n_samples,
                           derive_seed(seed, f"eval:{dom.domain_id}"))
        ci = None
        if cfg.eval.ci_pairs > 0:
            ci = ci_index_mc(model, family, dom, cfg.eval.ci_pairs,
                             cfg.eval.ci_reps, cfg.eval.ci_style,
                             derive_seed(seed, f"ci:{dom.domain_id}")).value
        rows.append({
            "run_id": run_id, "config_hash": chash, "step": step,
            "domain_id": dom.domain_id, "split": split,
            "loss_nats": float(res.loss), "accuracy": float(res.accuracy),
            "ci_index": ci, "penalty_value": pen_val,
            "penalty_kind": cfg.objective.kind, "seed": seed,
        })
    return rows


def run_experiment(cfg: ExperimentConfig, *, seed: int | None = None,
                   out_dir: str | None = None) -> ResultRecord:
    """Train per config, evaluate source(s) and target, persist results.

    Fully deterministic for a given (config, seed): no wall-clock content
    is written, files are written atomically, floats use repr round-trip
    formatting.
    """
    eff_seed = cfg.trainer.seed if seed is None else seed
    out = resolve_out_dir(out_dir, cfg.out)
    chash = config_hash(cfg, eff_seed)
    run_id = f"{chash}-s{eff_seed}"

    family, domains = resolve_family(cfg.family)
    by_id = {d.domain_id: d for d in domains}
    for did in (*cfg.sources, cfg.target):
        if did not in by_id:
            raise ConfigError("source" if did in cfg.sources else "target",
                              f"domain {did!r} not in family "
                              f"({sorted(by_id)})")
    sources = [by_id[s] for s in cfg.sources]
    target = by_id[cfg.target]

    cfg_path = os.path.join(out, f"config-{chash}.json")
    stored = config_to_dict(cfg)
    stored["trainer"]["seed"] = eff_seed
    _atomic_write(cfg_path, canonical_json(stored) + "\n")

    s = family.spaces
    model = dk.init_model(s.n_obs, cfg.model.widths, s.n_classes,
                          embedding=cfg.model.embedding,
                          seed=derive_seed(eff_seed, "init"))
    weighted, raw = _train_batches(family, sources, cfg, eff_seed)
    kind = cfg.objective.kind
    lam = cfg.objective.lam
    extras = cfg.objective.extras

    state = _RunState()
    if kind in PAIR_KINDS:
        state.pairs = sample_pairs(family, sources[0], cfg.pairs.n,
                                   style=cfg.pairs.style,
                                   seed=derive_seed(eff_seed, "pairs"))
    if kind == "DANN":
        state.adversary = dk.init_raw_model(
            model.u_count(), tuple(extras.get("adv_widths", (16,))),
            len(sources), seed=derive_seed(eff_seed, "adv"))
        state.adv_opt = _Opt(cfg.trainer.optimizer, state.adversary,
                             cfg.trainer.lr)
    if kind == "CDANN":
        state.adversaries = [
            dk.init_raw_model(model.u_count(),
                              tuple(extras.get("adv_widths", (16,))),
                              len(sources),
                              seed=derive_seed(eff_seed, f"adv:{k}"))
            for k in range(s.n_classes + 1)]
        state.adv_opt = [_Opt(cfg.trainer.optimizer, a, cfg.trainer.lr)
                         for a in state.adversaries]

    opt = _Opt(cfg.trainer.optimizer, model, cfg.trainer.lr)
    order_rng = substream(eff_seed, "data")
    swa_burn = int(extras.get("burn_in", cfg.trainer.steps // 2))
    swa_every = max(1, int(extras.get("every", cfg.trainer.steps // 20)))

    rows: list = []
    final_model = model
    try:
        for step in range(1, cfg.trainer.steps + 1):
            if cfg.trainer.batch_size is not None and \
                    cfg.trainer.optimizer in ("sgd", "adam"):
                step_raw = [_minibatch(b, order_rng, cfg.trainer.batch_size)
                            for b in raw]
                step_weighted = step_raw
            else:
                step_weighted, step_raw = weighted, raw

            if kind == "AND_MASK":
                tape = dk.Tape(model)
                losses = ob.domain_losses(model, step_weighted, tape)
                per_dom = [np.concatenate([g.val.ravel() for g in
                                           dk.grad_nodes(l, tape.param_nodes)])
                           for l in losses]
                grads = ob.and_mask(per_dom, extras.get("tau", 1.0))
            elif kind == "DANN":
                tape, adv_tape = dk.Tape(model), dk.Tape(state.adversary)
                ll, dl, _, _ = ob.dann_losses(model, state.adversary,
                                              step_raw, tape, adv_tape)
                total = dk.add(ll, dk.mul(dk.constant(lam), dl))
                grads = dk.backward(tape, total)
                adv_grads = dk.backward(adv_tape, dl)
                state.adv_opt.step(state.adversary, adv_grads)
            elif kind == "CDANN":
                tape = dk.Tape(model)
                adv_tapes = [dk.Tape(a) for a in state.adversaries]
                ll, al, _, _ = ob.cdann_losses(model, state.adversaries,
                                               step_raw, tape, adv_tapes)
                total = dk.add(ll, dk.mul(dk.constant(lam), al))
                grads = dk.backward(tape, total)
                for a, at, aopt in zip(state.adversaries, adv_tapes,
                                       state.adv_opt):
                    aopt.step(a, dk.backward(at, al))
            else:
                tape = dk.Tape(model)
                total, _ = _penalty_and_total(model, cfg, step_weighted,
                                              step_raw, state, eff_seed,
                                              step, tape)
                grads = dk.backward(tape, total)

            if step <= cfg.trainer.head_only_steps:
                grads = _head_only(model, grads)
            opt.step(model, grads)

            if kind == "SWA" and step > swa_burn and \
                    (step - swa_burn) % swa_every == 0:
                state.swa_snapshots.append(model.clone())

            if cfg.trainer.eval_every and step % cfg.trainer.eval_every == 0 \
                    and step < cfg.trainer.steps:
                pen = _eval_penalty(model, cfg, weighted, raw, state, eff_seed)
                rows.extend(_eval_rows(model, family, cfg, sources, target,
                                       step, run_id, chash, eff_seed, pen))

        final_model = model
        if kind == "SWA" and len(state.swa_snapshots) >= 2:
            final_model = ob.swa_average(state.swa_snapshots)
    except NonFiniteActivation as exc:
        write_json(os.path.join(out, f"run-{run_id}.json"),
                   {"run_id": run_id, "config_hash": chash, "seed": eff_seed,
                    "status": "numeric-failure", "error": str(exc)})
        raise

    pen_val = _eval_penalty(final_model, cfg, weighted, raw, state, eff_seed)
    rows.extend(_eval_rows(final_model, family, cfg, sources, target,
                           cfg.trainer.steps, run_id, chash, eff_seed,
                           pen_val))

    csv_path = os.path.join(out, f"run-{run_id}.csv")
    write_rows_csv(csv_path, rows)
    ckpt_path = os.path.join(out, f"model-{run_id}.json")
    dk.save_checkpoint(final_model, ckpt_path)
    summary_path = os.path.join(out, f"run-{run_id}.json")
    write_json(summary_path, {
        "run_id": run_id, "config_hash": chash, "seed": eff_seed,
        "status": "ok", "rows": rows, "csv": os.path.basename(csv_path),
        "checkpoint": os.path.basename(ckpt_path),
    })
    return ResultRecord(run_id=run_id, config_hash=chash, rows=rows,
                        csv_path=csv_path, summary_path=summary_path,
                        checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# Verify / sweep / generate


def verify_suite(family_source: str, *, out_dir: str | None = None,
                 seed: int = 0, out_name: str | None = None):
    """Run the theorem checks and persist the report; returns (report, path)."""
    family, domains = resolve_family(family_source)
    report = verify_theorems(family, domains, seed=seed)
    out = resolve_out_dir(out_dir, "results")
    base = out_name if out_name else os.path.splitext(
        os.path.basename(family_source))[0]
    path = os.path.join(out, f"verify-{base}.json")
    write_json(path, {"family": family_source, "seed": seed,
                      "all_pass": report.all_pass,
                      "claims": report.to_dict()["claims"]})
    return report, path


def _set_by_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = doc
    for p in parts[:-1]:
        if not isinstance(cur, dict) or p not in cur:
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def sweep(base_doc: dict, grid: dict, *, out_dir: str | None = None) -> list:
    """Cartesian product over dotted config paths; one run per combination.

    Seeds derive as base seed + run index unless the grid itself addresses
    trainer.seed.  Returns the ResultRecords; sweep.csv holds one row per
    run (its final target-domain row), full detail stays in per-run CSVs.
    """
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must be an object of field -> value list")
    for key, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{key}", "must be a nonempty list")
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    records = []
    summary_rows = []
    base_cfg = config_from_dict(base_doc)  # validate before deep-copying
    base_seed = base_cfg.trainer.seed
    explicit_seed = "trainer.seed" in keys
    for idx, combo in enumerate(combos):
        doc = json.loads(canonical_json(base_doc))
        for key, val in zip(keys, combo):
            _set_by_path(doc, key, val)
        cfg = config_from_dict(doc)
        run_seed = cfg.trainer.seed if explicit_seed else base_seed + idx
        rec = run_experiment(cfg, seed=run_seed, out_dir=out_dir)
        records.append(rec)
        summary_rows.append([r for r in rec.rows if r["split"] == "target"][-1])
    out = resolve_out_dir(out_dir, base_cfg.out)
    write_rows_csv(os.path.join(out, "sweep.csv"), summary_rows)
    return records


def generate_artifacts(cfg: ExperimentConfig, *, seed: int | None = None,
                       out_dir: str | None = None) -> list:
    """Sample per-domain datasets and source pairs to JSONL files."""
    eff_seed = cfg.trainer.seed if seed is None else seed
    out = resolve_out_dir(out_dir, cfg.out)
    family, domains = resolve_family(cfg.family)
    by_id = {d.domain_id: d for d in domains}
    paths = []
    for did in (*cfg.sources, cfg.target):
        if did not in by_id:
            raise ConfigError("source", f"domain {did!r} not in family")
        dom = by_id[did]
        ds = sample_dataset(family, dom, cfg.trainer.train_n,
                            derive_seed(eff_seed, f"data:{did}"))
        path = os.path.join(out, f"dataset-{did}.jsonl")
        lines = [json.dumps({"x": int(x), "y": int(y), "xc": int(c),
                             "xn": int(n)}, sort_keys=True)
                 for x, y, c, n in zip(ds.x, ds.y, ds.xc, ds.xn)]
        _atomic_write(path, "\n".join(lines) + "\n")
        paths.append(path)
    pairs = sample_pairs(family, by_id[cfg.sources[0]], cfg.pairs.n,
                         style=cfg.pairs.style,
                         seed=derive_seed(eff_seed, "pairs"))
    ppath = os.path.join(out, f"pairs-{cfg.sources[0]}.jsonl")
    write_pairs_jsonl(pairs, ppath)
    paths.append(ppath)
    return paths
