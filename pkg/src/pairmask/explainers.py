"""Mask-learning explainers for sentence-pair classifiers.

The main method (gmask) learns two categorical distributions per example: a
word-to-group assignment Z (parameters phi, one row per word) and a group
selector G (parameters psi). A mask sample keeps exactly the words of the
selected group, so words that must be kept *together* to preserve the
prediction end up sharing a group, and the per-word attribution is the
exact keep probability theta = phi @ psi.

Losses are optimized with relaxed (Gumbel-softmax) samples flowing through
the model, plus two entropy regularizers: one spreads each sentence's words
evenly over groups, the other concentrates the group selector.

The individual-mask baseline (imask) learns an independent relaxed
Bernoulli keep probability per word and doubles as the top-k prefilter that
fixes the word set and group count before the group masks are fit.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, ExplainerError, NumericError, ParseError
from .models import PairExample
from .optim import Adam
from .tensor import Graph, Tensor, forward_backward

METHODS = ("gmask", "imask", "random", "loo")


@dataclass(frozen=True)
class ExplainerConfig:
    method: str = "gmask"
    gamma1: float = 10.0       # weight of the group-balance (spread) penalty
    gamma2: float = 1.0        # weight of the group-sparsity penalty
    tau: float = 0.5           # relaxation temperature for both mask families
    samples: int = 32          # mask draws per optimization step
    max_epochs: int = 100
    lr: float = 0.05
    k: int = 10                # prefilter width
    sparsity: float = 1.0      # imask keep-probability penalty weight
    seed: int = 0
    stop_tol: float = 1e-3     # early stop: max probability change per epoch
    patience: int = 5          # consecutive quiet epochs required

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractError("penalty weights must be nonnegative")
        if self.tau <= 0:
            raise ContractError("temperature must be positive")
        if self.samples < 1:
            raise ContractError("need at least one mask sample per step")
        if self.k < 2:
            raise ContractError("prefilter width must be at least 2")


@dataclass
class GroupMaskParams:
    """Learnable state of one gmask fit, parameterized by unconstrained logits.

    Row-softmax of phi_logits and softmax of psi_logits are therefore always
    exactly on the simplex. split is the number of words (among the rows)
    that belong to sentence 1.
    """

    phi_logits: np.ndarray   # (n, t)
    psi_logits: np.ndarray   # (t,)
    t: int
    split: int

    def __post_init__(self):
        self.phi_logits = np.asarray(self.phi_logits, dtype=np.float64)
        self.psi_logits = np.asarray(self.psi_logits, dtype=np.float64)
        n = self.phi_logits.shape[0]
        if self.phi_logits.shape != (n, self.t) or self.psi_logits.shape != (self.t,):
            raise ContractError(
                f"logit shapes {self.phi_logits.shape}/{self.psi_logits.shape} "
                f"inconsistent with t={self.t}")
        if not 2 <= self.t <= n:
            raise ContractError(f"group count t={self.t} must lie in [2, {n}]")
        if not 0 < self.split < n:
            raise ContractError("both sentences must contribute at least one word")

    @property
    def n(self) -> int:
        return self.phi_logits.shape[0]

    def phi(self) -> np.ndarray:
        return _softmax_np(self.phi_logits)

    def psi(self) -> np.ndarray:
        return _softmax_np(self.psi_logits)


@dataclass
class MaskSample:
    """One draw of the mask machinery: z rows and g are (relaxed) one-hots."""

    z: np.ndarray            # (n, t)
    g: np.ndarray            # (t,)
    w: np.ndarray            # (n,) with w_i = sum_j z[i, j] g[j]
    tau: float | None        # None marks an exact categorical draw


@dataclass
class AttributionReport:
    """Per-word attributions for one example, serializable to JSONL."""

    example_id: int
    method: str
    theta: np.ndarray
    predicted_label: int
    n1: int
    n2: int
    phi: np.ndarray | None = None          # (n_kept, t); gmask only
    psi: np.ndarray | None = None          # (t,); gmask only
    kept: tuple[int, ...] | None = None    # prefiltered word indices; gmask only
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n1 + self.n2,):
            raise ContractError(
                f"theta has shape {self.theta.shape}, expected ({self.n1 + self.n2},)")
        if self.method == "gmask":
            if self.phi is None or self.psi is None or self.kept is None:
                raise ContractError("gmask reports must carry phi, psi, and kept")
            self.phi = np.asarray(self.phi, dtype=np.float64)
            self.psi = np.asarray(self.psi, dtype=np.float64)
            self.kept = tuple(int(i) for i in self.kept)
            expected = self.phi @ self.psi
            if np.max(np.abs(self.theta[list(self.kept)] - expected)) > 1e-9:
                raise ContractError("theta disagrees with phi @ psi on the kept words")
            dropped = np.setdiff1d(np.arange(self.n1 + self.n2), self.kept)
            if dropped.size and np.any(self.theta[dropped] != 0.0):
                raise ContractError("prefiltered-out words must carry theta exactly 0")


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(low=np.finfo(np.float64).tiny, high=1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(g: Graph, logits: int, tau: float, rng: np.random.Generator) -> int:
    """Relaxed one-hot sample over the last axis, differentiable in `logits`.

    Adds fixed Gumbel noise to the logits and applies a softmax at
    temperature tau. Logits may equal log category probabilities up to an
    additive constant; the softmax cancels the constant.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    noise = g.leaf(_gumbel(rng, g.data(logits).shape))
    return g.softmax(g.smul(g.add(logits, noise), 1.0 / tau))


def gumbel_softmax_np(logits: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Plain-array version of gumbel_softmax_sample."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    return _softmax_np((np.asarray(logits, dtype=np.float64) + _gumbel(rng, np.shape(logits))) / tau)


def _check_simplex(p: np.ndarray, what: str, tol: float = 1e-6) -> None:
    if p.min() < 0.0:
        raise ContractError(f"{what}: negative probability entry")
    sums = p.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ContractError(f"{what}: rows deviate from the simplex by more than {tol}")


def compose_mask(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """w = z @ g: per-word keep weights from group assignments and selector."""
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if z.ndim != 2 or g.shape != (z.shape[1],):
        raise ContractError(f"cannot compose shapes {z.shape} and {g.shape}")
    _check_simplex(z, "z rows")
    _check_simplex(g, "g")
    return z @ g


def sample_mask(params: GroupMaskParams, rng: np.random.Generator,
                tau: float | None = None) -> MaskSample:
    """Draw one mask: exact categorical one-hots, or relaxed at temperature tau."""
    phi, psi = params.phi(), params.psi()
    if tau is None:
        z = np.zeros_like(phi)
        for i in range(params.n):
            z[i, rng.choice(params.t, p=phi[i])] = 1.0
        g = np.zeros_like(psi)
        g[rng.choice(params.t, p=psi)] = 1.0
    else:
        z = gumbel_softmax_np(params.phi_logits, tau, rng)
        g = gumbel_softmax_np(params.psi_logits, tau, rng)
    return MaskSample(z=z, g=g, w=z @ g, tau=tau)


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------


def group_balance_penalty(g: Graph, phi: int, split: int) -> int:
    """Negated entropy of the two sentence-averaged group distributions.

    phi is a row-stochastic (n, t) node; rows before `split` belong to
    sentence 1. Minimized (at -2 ln t) when both averages are uniform.
    """
    n = g.data(phi).shape[0]
    if split <= 0 or split >= n:
        raise ContractError("split must leave at least one word in each sentence")
    upper = g.mean(g.gather(phi, np.arange(split)), axis=0)
    lower = g.mean(g.gather(phi, np.arange(split, n)), axis=0)
    return g.smul(g.add(g.entropy(upper), g.entropy(lower)), -1.0)


def group_sparsity_penalty(g: Graph, psi: int) -> int:
    """Entropy of the group selector; minimizing it concentrates importance."""
    return g.entropy(psi)


@dataclass
class ObjectiveGraph:
    graph: Graph
    loss: int
    leaves: dict[str, int]   # name -> leaf node id of each learnable tensor


def _scatter_full(g: Graph, w_kept: int, kept: np.ndarray, n_words: int) -> int:
    """Embed (B, n_kept) keep weights into (B, n_words); dropped words get 0."""
    if kept.size == n_words:
        return w_kept
    scatter = np.zeros((kept.size, n_words))
    scatter[np.arange(kept.size), kept] = 1.0
    return g.matmul(w_kept, g.leaf(scatter))


def _gmask_loss(g: Graph, model, example: PairExample, y: int, phi_leaf: int,
                psi_leaf: int, split: int, cfg: ExplainerConfig,
                rng: np.random.Generator, kept: np.ndarray) -> int:
    n_kept, t = g.data(phi_leaf).shape
    b = cfg.samples
    # B draws at once: logits broadcast against (B, ...) noise
    noise_z = g.leaf(_gumbel(rng, (b, n_kept, t)))
    z = g.softmax(g.smul(g.add(phi_leaf, noise_z), 1.0 / cfg.tau))      # (B, n, t)
    noise_g = g.leaf(_gumbel(rng, (b, t)))
    g_sel = g.softmax(g.smul(g.add(psi_leaf, noise_g), 1.0 / cfg.tau))  # (B, t)
    w_kept = g.sum(g.mul(z, g.reshape(g_sel, (b, 1, t))), axis=-1)
    w_full = _scatter_full(g, w_kept, kept, example.n_words)
    logits = model.logits_node(g, example, w_full)
    ce = g.cross_entropy(logits, [y] * g.data(logits).shape[0])
    balance = group_balance_penalty(g, g.softmax(phi_leaf), split)
    sparsity = group_sparsity_penalty(g, g.softmax(psi_leaf))
    return g.add(ce, g.add(g.smul(balance, cfg.gamma1), g.smul(sparsity, cfg.gamma2)))


def gmask_objective(model, example: PairExample, y: int, params: GroupMaskParams,
                    cfg: ExplainerConfig, rng: np.random.Generator,
                    kept=None) -> ObjectiveGraph:
    """One-step loss graph: sampled cross entropy plus both penalties.

    Gradients of the returned graph flow into the phi/psi logit leaves.
    `kept` lists the word indices the mask rows refer to (default: all).
    """
    kept = _as_kept(kept, example.n_words, params.n)
    g = Graph()
    phi_leaf = g.leaf(Tensor(params.phi_logits.copy(), requires_grad=True))
    psi_leaf = g.leaf(Tensor(params.psi_logits.copy(), requires_grad=True))
    loss = _gmask_loss(g, model, example, y, phi_leaf, psi_leaf,
                       params.split, cfg, rng, kept)
    return ObjectiveGraph(g, loss, {"phi_logits": phi_leaf, "psi_logits": psi_leaf})


def _imask_loss(g: Graph, model, example: PairExample, y: int, logit_leaf: int,
                cfg: ExplainerConfig, rng: np.random.Generator) -> int:
    n = g.data(logit_leaf).shape[0]
    noise = np.clip(rng.uniform(size=(cfg.samples, n)), 1e-12, 1.0 - 1e-12)
    logistic = g.leaf(np.log(noise) - np.log1p(-noise))
    w = g.sigmoid(g.smul(g.add(logit_leaf, logistic), 1.0 / cfg.tau))
    logits = model.logits_node(g, example, w)
    ce = g.cross_entropy(logits, [y] * g.data(logits).shape[0])
    return g.add(ce, g.smul(g.mean(g.sigmoid(logit_leaf)), cfg.sparsity))


def imask_objective(model, example: PairExample, y: int, logits: np.ndarray,
                    cfg: ExplainerConfig, rng: np.random.Generator) -> ObjectiveGraph:
    """One-step loss graph for independent per-word relaxed Bernoulli masks."""
    g = Graph()
    leaf = g.leaf(Tensor(np.asarray(logits, dtype=np.float64).copy(), requires_grad=True))
    loss = _imask_loss(g, model, example, y, leaf, cfg, rng)
    return ObjectiveGraph(g, loss, {"logits": leaf})


def _as_kept(kept, n_words: int, n_expected: int) -> np.ndarray:
    kept = np.arange(n_words) if kept is None else np.asarray(sorted(int(i) for i in kept))
    if kept.size != n_expected:
        raise ContractError(f"{kept.size} kept words inconsistent with {n_expected} mask rows")
    if kept.size and (kept[0] < 0 or kept[-1] >= n_words):
        raise ContractError("kept indices out of range")
    return kept


# ---------------------------------------------------------------------------
# fitting loops
# ---------------------------------------------------------------------------


def _fit_loop(step, probs_of, max_epochs: int, tol: float, patience: int):
    """Run `step` until the tracked probabilities settle or epochs run out."""
    prev = probs_of()
    quiet = 0
    for _ in range(max_epochs):
        step()
        cur = probs_of()
        delta = max(np.max(np.abs(c - p)) for c, p in zip(cur, prev))
        prev = cur
        quiet = quiet + 1 if delta < tol else 0
        if quiet >= patience:
            break


def fit_gmask(model, example: PairExample, cfg: ExplainerConfig,
              rng: np.random.Generator, kept=None, t: int | None = None) -> GroupMaskParams:
    """Learn group masks for one example, starting from uniform categoricals.

    `kept` is the prefiltered word index set (default: every word); `t`
    defaults to max(2, min(words kept per sentence)).
    """
    n1 = len(example.tokens1)
    kept_arr = np.arange(example.n_words) if kept is None else np.asarray(sorted(set(map(int, kept))))
    split = int((kept_arr < n1).sum())
    if split == 0 or split == kept_arr.size:
        raise ContractError("prefilter left one sentence empty")
    if t is None:
        t = max(2, min(split, kept_arr.size - split))
    y = int(np.argmax(model.predict_proba(example)))

    phi = Tensor(np.zeros((kept_arr.size, t)), requires_grad=True)
    psi = Tensor(np.zeros(t), requires_grad=True)
    opt = Adam([phi, psi], lr=cfg.lr)
    last_good = (phi.data.copy(), psi.data.copy())

    def step():
        nonlocal last_good
        g = Graph()
        phi_leaf = g.leaf(phi)
        psi_leaf = g.leaf(psi)
        try:
            loss = _gmask_loss(g, model, example, y, phi_leaf, psi_leaf,
                               split, cfg, rng, kept_arr)
            forward_backward(g, loss)
            opt.step()
            if not (np.all(np.isfinite(phi.data)) and np.all(np.isfinite(psi.data))):
                raise NumericError("mask logits left the finite range")
        except NumericError as exc:
            params = GroupMaskParams(last_good[0], last_good[1], t, split)
            raise ExplainerError(f"group-mask fit diverged: {exc}", params=params) from exc
        last_good = (phi.data.copy(), psi.data.copy())

    _fit_loop(step, lambda: (_softmax_np(phi.data), _softmax_np(psi.data)),
              cfg.max_epochs, cfg.stop_tol, cfg.patience)
    return GroupMaskParams(phi.data.copy(), psi.data.copy(), t, split)


def fit_imask(model, example: PairExample, cfg: ExplainerConfig,
              rng: np.random.Generator) -> np.ndarray:
    """Learn independent keep probabilities; returns the fitted probabilities."""
    y = int(np.argmax(model.predict_proba(example)))
    logits = Tensor(np.zeros(example.n_words), requires_grad=True)
    opt = Adam([logits], lr=cfg.lr)
    last_good = logits.data.copy()

    def _sigmoid(x):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def step():
        nonlocal last_good
        g = Graph()
        leaf = g.leaf(logits)
        try:
            loss = _imask_loss(g, model, example, y, leaf, cfg, rng)
            forward_backward(g, loss)
            opt.step()
            if not np.all(np.isfinite(logits.data)):
                raise NumericError("mask logits left the finite range")
        except NumericError as exc:
            raise ExplainerError(f"word-mask fit diverged: {exc}",
                                 params=last_good.copy()) from exc
        last_good = logits.data.copy()

    _fit_loop(step, lambda: (_sigmoid(logits.data),),
              cfg.max_epochs, cfg.stop_tol, cfg.patience)
    return _sigmoid(logits.data)


def weighted_attributions(params: GroupMaskParams) -> np.ndarray:
    """theta = phi @ psi: each word's exact probability of surviving masking."""
    return params.phi() @ params.psi()


def prefilter_topk(probabilities: np.ndarray, k: int, n1: int) -> tuple[tuple[int, ...], int]:
    """Keep the top-k words by probability (ties to the lower index).

    If one sentence would end up empty, its best word replaces the weakest
    kept word. Returns the kept indices (ascending) and the group count
    t = max(2, min(kept per sentence)).
    """
    if k < 2:
        raise ContractError("prefilter width must be at least 2")
    p = np.asarray(probabilities, dtype=np.float64)
    n = p.shape[0]
    if not 0 < n1 < n:
        raise ContractError("both sentences must contain at least one word")
    order = np.lexsort((np.arange(n), -p))
    kept = [int(i) for i in order[:min(k, n)]]   # keep-order: weakest keep last
    for lo, hi in ((0, n1), (n1, n)):
        if not any(lo <= i < hi for i in kept):
            kept[-1] = int(next(i for i in order if lo <= i < hi))
    k1 = sum(i < n1 for i in kept)
    t = max(2, min(k1, len(kept) - k1))
    return tuple(sorted(kept)), t


# ---------------------------------------------------------------------------
# the method front door
# ---------------------------------------------------------------------------


def _rank_rescale(raw: np.ndarray) -> np.ndarray:
    """Map raw scores to (0, 1) preserving order only: rank r gets (n-r)/(n+1)."""
    n = raw.shape[0]
    order = np.lexsort((np.arange(n), -raw))
    theta = np.empty(n)
    theta[order] = (n - np.arange(n)) / (n + 1.0)
    return theta


def _example_rng(cfg: ExplainerConfig, example_id: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed, int(example_id), METHODS.index(cfg.method)]))


def _config_meta(cfg: ExplainerConfig) -> dict:
    meta = asdict(cfg)
    meta.pop("stop_tol")
    meta.pop("patience")
    return meta


def explain(model, example: PairExample, cfg: ExplainerConfig,
            example_id: int = 0) -> AttributionReport:
    """Attribute one prediction with the configured method.

    A pure function of (model, example, cfg, example_id): the per-example
    random stream is derived from the config seed and the example id, so
    results do not depend on worker scheduling.
    """
    n1, n2 = len(example.tokens1), len(example.tokens2)
    rng = _example_rng(cfg, example_id)
    y = int(np.argmax(model.predict_proba(example)))
    phi = psi = kept = None

    if cfg.method == "random":
        theta = rng.uniform(size=example.n_words)
    elif cfg.method == "loo":
        p_full = model.predict_proba(example)[y]
        raw = np.empty(example.n_words)
        for i in range(example.n_words):
            mask = np.ones(example.n_words)
            mask[i] = 0.0
            raw[i] = p_full - model.predict_proba(example, mask)[y]
        theta = _rank_rescale(raw)
    elif cfg.method == "imask":
        theta = fit_imask(model, example, cfg, rng)
    else:  # gmask
        probs = fit_imask(model, example, cfg, rng)
        kept, t = prefilter_topk(probs, cfg.k, n1)
        params = fit_gmask(model, example, cfg, rng, kept=kept, t=t)
        theta = np.zeros(example.n_words)
        theta[list(kept)] = weighted_attributions(params)
        phi, psi = params.phi(), params.psi()

    return AttributionReport(example_id=int(example_id), method=cfg.method,
                             theta=theta, predicted_label=y, n1=n1, n2=n2,
                             phi=phi, psi=psi, kept=kept, config=_config_meta(cfg))


def _explain_chunk(args) -> list:
    model, pairs, cfg = args
    return [report_to_dict(explain(model, ex, cfg, example_id=i)) for i, ex in pairs]


def explain_dataset(model, examples, cfg: ExplainerConfig,
                    workers: int = 1) -> list[AttributionReport]:
    """Explain every example; output order is by example id regardless of workers."""
    pairs = list(enumerate(examples))
    if workers <= 1 or len(pairs) < 2:
        return [explain(model, ex, cfg, example_id=i) for i, ex in pairs]
    chunks = max(1, len(pairs) // max(1, 4 * workers))
    tasks = [(model, pairs[i:i + chunks], cfg) for i in range(0, len(pairs), chunks)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out: list[dict] = []
        for part in pool.map(_explain_chunk, tasks):
            out.extend(part)
    return [report_from_dict(d) for d in sorted(out, key=lambda d: d["example_id"])]


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def report_to_dict(report: AttributionReport) -> dict:
    return {
        "example_id": report.example_id,
        "method": report.method,
        "n1": report.n1,
        "n2": report.n2,
        "predicted_label": report.predicted_label,
        "theta": report.theta.tolist(),
        "phi": None if report.phi is None else report.phi.tolist(),
        "psi": None if report.psi is None else report.psi.tolist(),
        "kept": None if report.kept is None else list(report.kept),
        "config": report.config,
    }


def report_from_dict(doc: dict) -> AttributionReport:
    return AttributionReport(
        example_id=int(doc["example_id"]), method=doc["method"],
        theta=np.asarray(doc["theta"], dtype=np.float64),
        predicted_label=int(doc["predicted_label"]),
        n1=int(doc["n1"]), n2=int(doc["n2"]),
        phi=None if doc.get("phi") is None else np.asarray(doc["phi"], dtype=np.float64),
        psi=None if doc.get("psi") is None else np.asarray(doc["psi"], dtype=np.float64),
        kept=None if doc.get("kept") is None else tuple(doc["kept"]),
        config=doc.get("config", {}))


def save_reports(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report_to_dict(report)) + "\n")


def load_reports(path) -> list[AttributionReport]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                reports.append(report_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractError) as exc:
                raise ParseError(f"bad report record: {exc}", line=lineno) from exc
    return reports
