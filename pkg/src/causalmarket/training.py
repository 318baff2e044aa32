"""Loss assembly, the optimization loop, and the finite-difference audit.

Per batch the estimator draws one graph sample, scores the residuals of
every window under it, and adds the graph prior and posterior entropy once:

    ELBO  = mean_windows[ sum_i log p_z(z_i) ] + log p(G) + H(q)
    total = (-ELBO + bce_weight * BCE) / D

The prior is evaluated on the straight-through hard sample, so its value is
the binary-graph prior while sparsity pressure still reaches the edge
parameters through the relaxation.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation, fcm, graph
from .data import MarketDataset
from .errors import ConfigError, DataError, DivergenceError
from .model import Model

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "total", "gaussian", "prior", "entropy", "bce", "val_acc", "val_mcc"]


@dataclass
class LossBreakdown:
    gaussian: float
    prior: float
    entropy: float
    bce: float

    @property
    def elbo(self) -> float:
        return self.gaussian + self.prior + self.entropy

    def total(self, bce_weight: float, n_stocks: int) -> float:
        return (-self.elbo + bce_weight * self.bce) / n_stocks


def bce_loss(labels: np.ndarray, yhat: ad.Node, mask: np.ndarray) -> ad.Node:
    """Masked binary cross entropy summed over stocks, mean over windows."""
    dtype = yhat.value.dtype
    eps = 1e-12 if dtype == np.float64 else 1e-7
    yc = ad.clip(yhat, eps, 1.0 - eps)
    g = ad.constant(labels, dtype=dtype)
    pos = ad.mul(g, ad.log(yc))
    neg = ad.mul(ad.scale_shift(g, -1.0, 1.0), ad.log(ad.scale_shift(yc, -1.0, 1.0)))
    per = ad.mul(ad.add(pos, neg), ad.constant(mask, dtype=dtype))
    return ad.scale_shift(ad.reduce_mean(ad.reduce_sum(per, axis=1)), -1.0)


def compute_loss(
    model: Model,
    batch: dict,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    graph_mode: str = "ste",
    detach_news: bool = True,
    domain_graph: np.ndarray | None = None,
    news_gate_override: ad.Node | None = None,
) -> tuple[ad.Tape, ad.Node, LossBreakdown]:
    """One single-sample loss estimate over a batch of windows.

    graph_mode 'ste' gates the FCM with hard straight-through values (the
    training estimator); 'relaxed' keeps the smooth relaxation end to end,
    which is the differentiable objective the gradient audit checks.
    """
    if graph_mode not in ("ste", "relaxed"):
        raise ConfigError(f"graph_mode must be 'ste' or 'relaxed', got {graph_mode!r}")
    if batch["mask"].sum() == 0:
        raise DataError("batch has no evaluated labels after masking")
    cfg = model.config
    tape = ad.Tape()
    view = ad.ParamView(model.store, tape)
    sigma = model.edge_probabilities(view)
    sample = graph.sample_graph(sigma, tau, rng=rng, noise=noise)
    gate = sample.hard if graph_mode == "ste" else sample.relaxed
    yhat = model.forward(
        batch, view, gate,
        detach_news_for_graph=detach_news,
        news_gate_override=news_gate_override,
    )
    labels, mask = batch["labels"], batch["mask"]
    z = fcm.residual_noise(labels, yhat)
    gauss = fcm.gaussian_loglik(z, view("fcm.noise_logvar"), mask)
    prior = graph.log_prior(gate, cfg.lambda_sparse, cfg.lambda_domain, domain_graph)
    entropy = graph.posterior_entropy(sigma)
    bce = bce_loss(labels, yhat, mask)

    elbo = ad.add(ad.add(gauss, prior), entropy)
    total = ad.scale_shift(
        ad.add(ad.scale_shift(elbo, -1.0), ad.scale_shift(bce, cfg.bce_weight)),
        1.0 / model.n_stocks,
    )
    breakdown = LossBreakdown(
        gaussian=float(gauss.value), prior=float(prior.value),
        entropy=float(entropy.value), bce=float(bce.value),
    )
    return tape, total, breakdown


def evaluate_split(model: Model, dataset: MarketDataset, split: str, batch_size: int = 256) -> tuple[float, float]:
    """ACC/MCC over a split under the expected graph. (nan, nan) if empty."""
    targets = dataset.splits.get(split)
    if targets is None or len(targets) == 0:
        return float("nan"), float("nan")
    gvals = model.sigma_values()
    trues, preds, masks = [], [], []
    for start in range(0, len(targets), batch_size):
        batch = dataset.batch(targets[start:start + batch_size], dtype=model.store.dtype)
        probs = model.predict(batch, graph_values=gvals)
        preds.append(fcm.hard_labels(probs))
        trues.append(batch["labels"])
        masks.append(batch["mask"])
    counts = evaluation.confusion(
        np.concatenate(trues), np.concatenate(preds), np.concatenate(masks)
    )
    if counts.total == 0:
        return float("nan"), float("nan")
    return evaluation.accuracy(counts), evaluation.mcc(counts)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    best_path: Path | None = None
    last_path: Path | None = None
    wall_seconds: float = 0.0

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            for row in self.history:
                writer.writerow([row["epoch"]] + [f"{row[c]:.10g}" for c in METRICS_COLUMNS[1:]])


def train(model: Model, dataset: MarketDataset, out_dir=None, log_every: int = 0) -> TrainResult:
    """Seeded mini-batch training with per-epoch validation and early stop.

    Writes best.npz / last.npz / metrics.csv under out_dir when given. The
    metrics file contains only deterministic columns; wall-clock time is
    reported on the result (and lands in the run manifest, not the log).
    """
    cfg = model.config
    if len(dataset.splits.get("train", ())) == 0:
        raise DataError("training split is empty")
    if dataset.n_stocks != model.n_stocks:
        raise ConfigError("dataset and model disagree on the number of stocks")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    domain_graph = None
    if cfg.domain_prior:
        domain_graph = graph.load_domain_prior(cfg.domain_prior, model.symbols, cfg.lag)

    rng = np.random.default_rng(cfg.seed)
    train_targets = np.asarray(dataset.splits["train"])
    result = TrainResult()
    best_acc = -np.inf
    since_best = 0
    started = time.monotonic()

    for epoch in range(cfg.epochs):
        tau = cfg.tau_at(epoch)
        order = rng.permutation(len(train_targets))
        sums = {"total": 0.0, "gaussian": 0.0, "prior": 0.0, "entropy": 0.0, "bce": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = train_targets[order[start:start + cfg.batch_size]]
            batch = dataset.batch(chunk, dtype=model.store.dtype)
            if batch["mask"].sum() == 0:
                log.warning("skipping all-masked batch at epoch %d", epoch)
                continue
            try:
                tape, total, bd = compute_loss(
                    model, batch, tau=tau, rng=rng, detach_news=True, domain_graph=domain_graph
                )
            except DivergenceError:
                _dump_diverged(model, out_dir)
                raise
            total_val = bd.total(cfg.bce_weight, model.n_stocks)
            if not np.isfinite(total_val):
                _dump_diverged(model, out_dir)
                raise DivergenceError(f"loss diverged at epoch {epoch} (total={total_val})")
            grads = ad.backward(tape, total)
            model.store.zero_grads()
            model.store.accumulate(grads)
            try:
                model.store.adam_step(cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
            except DivergenceError:
                _dump_diverged(model, out_dir)
                raise
            sums["total"] += total_val
            sums["gaussian"] += bd.gaussian
            sums["prior"] += bd.prior
            sums["entropy"] += bd.entropy
            sums["bce"] += bd.bce
            n_batches += 1
        if n_batches == 0:
            raise DataError("every batch in the epoch was fully masked")

        val_acc, val_mcc = evaluate_split(model, dataset, "valid")
        row = {k: v / n_batches for k, v in sums.items()}
        row.update(epoch=epoch, val_acc=val_acc, val_mcc=val_mcc)
        result.history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d: total %.5f val_acc %.4f", epoch, row["total"], val_acc)

        if np.isfinite(val_acc) and val_acc > best_acc:
            best_acc = val_acc
            result.best_epoch = epoch
            result.best_val_acc = val_acc
            since_best = 0
            if out_dir is not None:
                result.best_path = out_dir / "best.npz"
                model.save(result.best_path)
        else:
            since_best += 1
            if np.isfinite(val_acc) and since_best >= cfg.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, cfg.patience)
                break

    result.wall_seconds = time.monotonic() - started
    if out_dir is not None:
        result.last_path = out_dir / "last.npz"
        model.save(result.last_path)
        if result.best_path is None:
            result.best_path = result.last_path
        result.write_metrics(out_dir / "metrics.csv")
    return result


def _dump_diverged(model: Model, out_dir: Path | None) -> None:
    if out_dir is not None:
        path = out_dir / "diverged.npz"
        model.save(path)
        log.error("dumped last finite parameters to %s", path)


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"{name}: max rel err {err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in sorted(self.errors.items())
        ]
        return "\n".join(lines)


def gradient_audit(
    model: Model,
    batch: dict,
    tau: float = 1.0,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    detach_news: bool = True,
    noise_seed: int = 1234,
    domain_graph: np.ndarray | None = None,
) -> AuditReport:
    """Compare analytic gradients of the relaxed objective against central
    finite differences for every parameter group.

    Gumbel noise is frozen across perturbations so the objective is a
    deterministic function of the parameters. With news detachment on, the
    finite-difference objective freezes the news-branch gate at its current
    values, which is exactly the function the detached estimator
    differentiates.
    """
    store = model.store
    if store.dtype != np.float64:
        raise ConfigError("gradient audit requires a float64 parameter store")
    sigma_shape = (model.config.lag, model.n_stocks, model.n_stocks)
    noise = ad.logistic_noise(np.random.default_rng(noise_seed), sigma_shape, np.float64)

    kwargs = dict(tau=tau, noise=noise, graph_mode="relaxed",
                  detach_news=detach_news, domain_graph=domain_graph)
    tape, total, _ = compute_loss(model, batch, **kwargs)
    view_nodes = {leaf.param_name: leaf for leaf in tape.param_leaves}
    grads = ad.backward(tape, total)

    frozen_gate = None
    if detach_news and model.config.use_news:
        view = ad.ParamView(store)
        sample = graph.sample_graph(model.edge_probabilities(view), tau, noise=noise)
        frozen_gate = ad.constant(sample.relaxed.value.copy())

    def loss_at(name: str, values: np.ndarray) -> float:
        original = store.value(name).copy()
        store.set_value(name, values)
        try:
            _, t_node, _ = compute_loss(model, batch, news_gate_override=frozen_gate, **kwargs)
            return float(t_node.value)
        finally:
            store.set_value(name, original)

    errors: dict[str, float] = {}
    for name in store.names():
        if name not in view_nodes:
            errors[name] = 0.0  # parameter not used by this configuration
            continue
        analytic = grads.get(view_nodes[name])
        numeric = ad.finite_difference(lambda v, n=name: loss_at(n, v), store.value(name).copy(), h=h)
        errors[name] = ad.relative_error(analytic, numeric)
    return AuditReport(errors=errors, tolerance=tolerance)
