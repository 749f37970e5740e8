"""Population-based PPO training of stock-trading agents on a single machine."""

from .backtest import EquityCurve, MetricsReport, compute_metrics, run_backtest
from .errors import PodracerError
from .evolution import EvolutionConfig, run_generations
from .market_data import IndicatorConfig, MarketDataset, build_features, generate_synthetic, load_ohlcv
from .policy import HyperParams, PolicyParameters, load_params, save_params
from .runtime import AgentConfig, run_agent
from .trading_env import EnvConfig

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "EnvConfig", "EquityCurve", "EvolutionConfig", "HyperParams", "IndicatorConfig",
    "MarketDataset", "MetricsReport", "PodracerError", "PolicyParameters", "build_features",
    "compute_metrics", "generate_synthetic", "load_ohlcv", "load_params", "run_agent",
    "run_backtest", "run_generations", "save_params",
]
