"""Model assembly: parameter initialization, the end-to-end forward pass,
and checkpoint round-trips that carry config and symbol metadata."""

import numpy as np

from . import autodiff as ad
from . import encoders, fcm, graph
from .config import TrainConfig
from .errors import ConfigError


class Model:
    """All trainable state for one run plus the forward passes over it."""

    def __init__(self, store: ad.ParamStore, config: TrainConfig, symbols: list[str]):
        self.store = store
        self.config = config
        self.symbols = symbols

    @property
    def n_stocks(self) -> int:
        return len(self.symbols)

    @classmethod
    def build(cls, config: TrainConfig, symbols: list[str], rng: np.random.Generator) -> "Model":
        if not symbols:
            raise ConfigError("need at least one stock symbol")
        dtype = np.float32 if config.precision == "float32" else np.float64
        store = ad.ParamStore(dtype=dtype)
        D = len(symbols)
        encoders.init_params(store, rng, config.d_p, config.d_m, config.use_news)
        graph.init_params(
            store, rng, D, config.lag,
            transform_depth=config.graph_transform_depth,
            transform_hidden=config.graph_transform_hidden,
            u_offset=config.graph_init_offset,
        )
        fcm.init_params(
            store, rng, D, config.d_p, config.d_m, config.use_news,
            hidden=config.hidden, depth=config.depth, shared_heads=config.shared_heads,
        )
        return cls(store, config, symbols)

    # --- forward passes ----------------------------------------------------

    def edge_probabilities(self, view: ad.ParamView | None = None) -> ad.Node:
        if view is None:
            view = ad.ParamView(self.store)
        return graph.edge_probabilities(
            view,
            lag_dependent=self.config.lag_dependent,
            existence_only=self.config.existence_only,
            transform_depth=self.config.graph_transform_depth,
        )

    def sigma_values(self) -> np.ndarray:
        """Edge probabilities as a plain array (no gradient tracking)."""
        return self.edge_probabilities().value

    def _encode(self, batch: dict, view: ad.ParamView) -> tuple[ad.Node, ad.Node | None]:
        price_emb = encoders.encode_price(ad.constant(batch["prices"]), view)
        news_emb = None
        if self.config.use_news:
            if "news_mean" not in batch:
                raise ConfigError("model expects news inputs but the batch has none")
            news_emb = encoders.embed_news_batch(
                ad.constant(batch["news_mean"]), ad.constant(batch["news_has"]), view
            )
        return price_emb, news_emb

    def forward(
        self,
        batch: dict,
        view: ad.ParamView,
        graph_node: ad.Node,
        detach_news_for_graph: bool = True,
        news_gate_override: ad.Node | None = None,
    ) -> ad.Node:
        price_emb, news_emb = self._encode(batch, view)
        return fcm.forward(
            price_emb, news_emb, graph_node, view,
            depth=self.config.depth,
            detach_news_for_graph=detach_news_for_graph,
            shared_heads=self.config.shared_heads,
            news_gate_override=news_gate_override,
        )

    def predict(self, batch: dict, graph_values: np.ndarray | None = None) -> np.ndarray:
        """Evaluation-time probabilities; no gradient tracking.

        By default edges are gated with their posterior probabilities (the
        expected graph), the first-order plug-in for integrating over graph
        draws. Pass an explicit binary graph (e.g. mode_graph of the edge
        probabilities, or a sampled one) to evaluate under hard masking.
        """
        view = ad.ParamView(self.store)
        if graph_values is None:
            graph_values = self.sigma_values()
        gnode = ad.constant(graph_values, dtype=self.store.dtype)
        return self.forward(batch, view, gnode).value

    # --- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        self.store.save(path, extra_meta={"config": self.config.to_kv(), "symbols": self.symbols})

    @classmethod
    def load(cls, path) -> "Model":
        store, extra = ad.ParamStore.load(path)
        if "config" not in extra or "symbols" not in extra:
            raise ConfigError(f"{path} lacks model metadata (config/symbols)")
        return cls(store, TrainConfig.from_kv(extra["config"]), list(extra["symbols"]))
