"""Multi-frequency continuous-share trading engine.

GARCH(1,1) volatility features, a parallel three-branch policy network trained
with PPO on a daily trading MDP, and a backtest harness reporting profit and
tax rates against a Buy&Hold baseline.
"""

from .env import EnvConfig, Order, PortfolioState, TradingEnv, buy_and_hold, map_action
from .evalcli import (Metrics, VariantConfig, VARIANTS, backtest, load_checkpoint,
                      profit_rate, report, save_checkpoint, tax_rate)
from .garch import (FitReport, GarchParams, GarchState, filter_variances, fit,
                    forecast_one_step, log_likelihood, rolling_forecast)
from .marketdata import (AlignedDataset, Bar, BarSeries, Frequency, MarketGenParams,
                         Observation, ObservationNormalizer, align, load_bars,
                         resample, simulate_market, split, window_at)
from .policy import Policy, PolicyConfig, PolicyOutput, log_prob_and_entropy, sample_action
from .ppo import PpoConfig, TrajectoryBuffer, compute_gae, ppo_surrogate, prob_ratio, train

__version__ = "0.1.0"
