"""Additive-noise functional causal model over the sampled graph.

Each stock's logit aggregates graph-gated, weight-scaled branch features
from every (source stock, lag) pair, then goes through its own head:

    s_i = sum_{l,j} G[l,j,i] * W[l,j,i] * [ell(P_{T-l}^j), psi(C_{T-l}^j)]
    yhat_i = sigmoid(head_i(s_i))

G carries hard 0/1 forward values (straight-through), so non-parents are
masked exactly: perturbing a non-parent input cannot change yhat_i at all.
On the news branch the graph factor is wrapped in stop-gradient, keeping
graph discovery driven by prices only; the weight tensor and the news
networks still receive news-branch gradients.

Prediction uses the sigmoid output directly; noise enters only the training
likelihood, where the additive form makes the residual density evaluation
exact (unit Jacobian).
"""

import numpy as np

from . import autodiff as ad
from . import kernels, nets
from .errors import DivergenceError

LOG_2PI = float(np.log(2.0 * np.pi))


def init_params(
    store: ad.ParamStore,
    rng: np.random.Generator,
    n_stocks: int,
    d_p: int,
    d_m: int,
    use_news: bool,
    hidden: int = 332,
    depth: int = 3,
    shared_heads: bool = False,
) -> None:
    nets.init_mlp(store, rng, "fcm.ell", nets.mlp_sizes(d_p, d_p, hidden, depth))
    if use_news:
        nets.init_mlp(store, rng, "fcm.psi", nets.mlp_sizes(d_m, d_m, hidden, depth))
    head_in = d_p + (d_m if use_news else 0)
    head_sizes = nets.mlp_sizes(head_in, 1, hidden, depth)
    if shared_heads:
        # shared trunk, per-stock final layer
        nets.init_mlp(store, rng, "fcm.head_trunk", head_sizes[:-1])
        nets.init_grouped_mlp(store, rng, "fcm.head", n_stocks, head_sizes[-2:])
    else:
        nets.init_grouped_mlp(store, rng, "fcm.head", n_stocks, head_sizes)
    store.add("fcm.noise_logvar", np.zeros(n_stocks))


def weighted_parent_sum(w: ad.Node, feats: ad.Node) -> ad.Node:
    """Aggregate parent features under per-edge weights (fused hot kernel).

    w: (L, D, D) indexed [lag, source j, target i]; feats: (B, D, L, K).
    Returns (B, D, K): out[b,i] = sum_{l,j} w[l,j,i] * feats[b,j,l].
    """
    wv = np.ascontiguousarray(w.value)
    fv = np.ascontiguousarray(feats.value)
    value = kernels.parent_sum(wv, fv)

    def vjp(g):
        g_c = np.ascontiguousarray(g)
        return kernels.parent_sum_grad_w(g_c, fv), kernels.parent_sum_grad_feats(g_c, wv)

    return ad.custom_op(value, (w, feats), vjp)


def forward(
    price_emb: ad.Node,
    news_emb: ad.Node | None,
    graph_node: ad.Node,
    p: ad.ParamView,
    depth: int = 3,
    detach_news_for_graph: bool = True,
    shared_heads: bool = False,
    news_gate_override: ad.Node | None = None,
) -> ad.Node:
    """Movement probabilities (B, D) from encoded inputs and a graph draw.

    graph_node supplies the per-edge gate values: the straight-through hard
    sample during training, the relaxed sample for derivative checks, or a
    constant thresholded graph at evaluation time. news_gate_override swaps
    in an explicit news-branch gate (derivative checks freeze it there).
    """
    g_hat = p("graph.weight")
    branch_p = nets.apply_mlp(price_emb, p, "fcm.ell", depth)
    s = weighted_parent_sum(ad.mul(graph_node, g_hat), branch_p)
    if news_emb is not None:
        branch_n = nets.apply_mlp(news_emb, p, "fcm.psi", depth)
        if news_gate_override is not None:
            news_gate = news_gate_override
        elif detach_news_for_graph:
            news_gate = ad.stop_gradient(graph_node)
        else:
            news_gate = graph_node
        s_news = weighted_parent_sum(ad.mul(news_gate, g_hat), branch_n)
        s = ad.concat([s, s_news], axis=-1)
    if shared_heads:
        s = ad.tanh(nets.apply_mlp(s, p, "fcm.head_trunk", depth - 1))
        logits = nets.apply_grouped_mlp(s, p, "fcm.head", 1)
    else:
        logits = nets.apply_grouped_mlp(s, p, "fcm.head", depth)
    lv = logits.value
    if not np.all(np.isfinite(lv)):
        b, i = np.argwhere(~np.isfinite(lv[..., 0]))[0][:2]
        raise DivergenceError(f"non-finite prediction for stock index {i} in batch row {b}")
    return ad.sigmoid(ad.reshape(logits, lv.shape[:-1]))


def hard_labels(probabilities: np.ndarray) -> np.ndarray:
    """Rise/fall calls at the 0.5 threshold."""
    return (probabilities > 0.5).astype(np.int64)


def residual_noise(labels, yhat: ad.Node) -> ad.Node:
    """Training-time residual z = g - yhat implied by the additive form."""
    if not isinstance(labels, ad.Node):
        labels = ad.constant(labels, dtype=yhat.value.dtype)
    return ad.sub(labels, yhat)


def gaussian_loglik(z: ad.Node, log_var: ad.Node, mask: np.ndarray | None = None) -> ad.Node:
    """Per-stock Gaussian log-density of residuals, summed over stocks.

    z: (B, D) residuals; log_var: (D,) trainable noise log-variances. The
    additive model has unit Jacobian, so the density needs no correction.
    Masked entries are excluded; returns the mean over batch rows.
    """
    zsq = ad.mul(z, z)
    inv_var = ad.exp(ad.scale_shift(log_var, -1.0))
    per = ad.sub(
        ad.scale_shift(ad.add(log_var, LOG_2PI), -0.5),
        ad.scale_shift(ad.mul(zsq, inv_var), 0.5),
    )
    if mask is not None:
        per = ad.mul(per, ad.constant(mask, dtype=z.value.dtype))
    summed = ad.reduce_sum(per, axis=1)
    return ad.reduce_mean(summed)
