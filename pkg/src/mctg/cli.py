"""Command-line interface.

Subcommands: generate-data, fit-garch, train, backtest, report.
Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import evalcli, ppo
from .env import EnvError
from .garch import GarchError, rolling_forecast
from .marketdata import (Frequency, MarketDataError, ObservationNormalizer,
                         load_bars, resample, save_bars, simulate_market, split)
from .nn import NetworkError
from .policy import Policy, PolicyError
from .ppo import PpoError

_ERRORS = (evalcli.EvalError, MarketDataError, GarchError, NetworkError,
           PolicyError, EnvError, PpoError, OSError, ValueError)

LOG_COLUMNS = ("update", "steps", "mean_ep_reward", "policy_loss", "value_loss",
               "entropy", "clip_frac", "approx_kl")


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value) -> str:
    # repr round-trips floats bit-exactly, which keeps logs reproducible.
    return repr(value) if isinstance(value, float) else str(value)


def cmd_generate_data(args) -> int:
    cfg = evalcli.load_config(args.config)
    gen = evalcli.market_params_from_config(cfg)
    series = simulate_market(gen, args.days, args.seed)
    save_bars(series, args.out)
    print(f"wrote {len(series)} five-minute bars ({args.days} days) to {args.out}")
    return 0


def cmd_fit_garch(args) -> int:
    five_min = load_bars(args.data, Frequency.FIVE_MIN)
    daily, _ = resample(five_min)
    returns = np.diff(np.log(daily.values[:, 3]))
    sigma = rolling_forecast(returns, window=args.window, refit_every=args.refit_every)
    daily_vol = np.concatenate([[1e-8], sigma])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "open", "high", "low", "close",
                         "volume", "amount", "sigma"])
        for ts, row, s in zip(daily.timestamps, daily.values, daily_vol):
            writer.writerow([ts.date().isoformat()]
                            + [repr(float(x)) for x in row] + [repr(float(s))])
    print(f"wrote {len(daily)} daily bars with sigma to {args.out}")
    return 0


def _load_split_dataset(data_path: str, cfg: dict, garch_window: int,
                        garch_refit: int, boundary=None):
    five_min = load_bars(data_path, Frequency.FIVE_MIN)
    dataset = evalcli.build_dataset(five_min, garch_window, garch_refit)
    if boundary is None:
        boundary = evalcli.split_boundary_from_config(cfg, dataset)
    train_ds, test_ds = split(dataset, boundary)
    return train_ds, test_ds, boundary


def cmd_train(args) -> int:
    cfg = evalcli.load_config(args.config)
    variant = evalcli.VARIANTS[args.variant]
    garch_window = evalcli.config_get(cfg, "garch.window", int, 250)
    garch_refit = evalcli.config_get(cfg, "garch.refit_every", int, 20)
    train_ds, _, boundary = _load_split_dataset(args.data, cfg, garch_window, garch_refit)

    normalizer = ObservationNormalizer().fit(train_ds, range(train_ds.n_days))
    ppo_config = evalcli.ppo_config_from_config(cfg, total_steps=args.total_steps)
    env_config = evalcli.env_config_from_config(cfg)
    env = evalcli.TradingEnv(train_ds, env_config, normalizer)

    rng = np.random.default_rng(args.seed)
    policy = Policy(variant.policy_config(), rng)
    adam = evalcli.AdamState(policy.parameters(), ppo_config.learning_rate)

    os.makedirs(args.out_dir, exist_ok=True)
    metadata = {
        "garch_window": garch_window,
        "garch_refit_every": garch_refit,
        "split_boundary": boundary.isoformat(),
        "seed": args.seed,
    }

    def checkpoint_fn(update_index, pol, adam_state):
        path = os.path.join(args.out_dir, f"checkpoint_{update_index:05d}.json")
        evalcli.save_checkpoint(path, variant.name, pol, normalizer, adam_state,
                                training_step=update_index * ppo_config.rollout,
                                rng=rng, metadata=metadata)

    rows = ppo.train(policy, env, ppo_config, rng, adam=adam,
                     checkpoint_fn=checkpoint_fn)
    _write_csv(os.path.join(args.out_dir, "log.csv"), LOG_COLUMNS, rows)
    final = os.path.join(args.out_dir, "checkpoint.json")
    evalcli.save_checkpoint(final, variant.name, policy, normalizer, adam,
                            training_step=ppo_config.total_steps, rng=rng,
                            metadata=metadata)
    print(f"trained {variant.name} for {ppo_config.total_steps} steps; "
          f"checkpoint at {final}")
    return 0


def cmd_backtest(args) -> int:
    cfg = evalcli.load_config(args.config)
    checkpoint = evalcli.load_checkpoint(args.checkpoint)
    if args.variant is not None and args.variant != checkpoint.variant:
        raise evalcli.EvalError(
            f"checkpoint was trained as {checkpoint.variant} (state dimension "
            f"{checkpoint.policy_config.state_dim}); requested variant "
            f"{args.variant} has a different network shape")
    meta = checkpoint.metadata
    import datetime as dt
    boundary = dt.date.fromisoformat(meta["split_boundary"]) \
        if "split_boundary" in meta else None
    train_ds, test_ds, _ = _load_split_dataset(
        args.data, cfg,
        meta.get("garch_window", evalcli.config_get(cfg, "garch.window", int, 250)),
        meta.get("garch_refit_every", evalcli.config_get(cfg, "garch.refit_every", int, 20)),
        boundary=boundary)
    dataset = train_ds if args.segment == "train" else test_ds

    policy = checkpoint.build_policy()
    normalizer = checkpoint.build_normalizer()
    env_config = evalcli.env_config_from_config(cfg, random_start=False)
    metrics, equity_rows, trajectory_rows = evalcli.backtest(
        policy, dataset, env_config, normalizer)

    bh_annualized, bh_cumulative = evalcli.profit_rate(
        [row["bh_value"] for row in equity_rows])
    doc = {
        "variant": checkpoint.variant,
        "segment": args.segment,
        "metrics": metrics.to_dict(),
        "buy_and_hold": {
            "profit_rate_annualized": bh_annualized,
            "profit_rate_cumulative": bh_cumulative,
        },
    }
    with open(args.out_metrics, "w") as fh:
        json.dump(doc, fh, indent=2)
    _write_csv(args.out_equity,
               ("date", "value", "bh_value", "action", "shares", "cash", "tax_paid"),
               equity_rows)
    if args.out_trajectory:
        _write_csv(args.out_trajectory,
                   ("date", "open", "action", "order_shares", "tax_paid",
                    "cash", "shares", "value", "reward"),
                   trajectory_rows)
    print(f"{checkpoint.variant} {args.segment}: "
          f"PR={metrics.profit_rate_annualized:.4f} "
          f"TR={metrics.tax_rate_annualized:.4f} "
          f"B&H PR={bh_annualized:.4f}")
    return 0


def cmd_report(args) -> int:
    docs = []
    for path in args.metrics:
        with open(path) as fh:
            docs.append(json.load(fh))
    rows = evalcli.report(docs)
    _write_csv(args.out, ("variant", "PR", "TR"), rows)
    print(f"wrote {len(rows)} variant rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mctg",
        description="Multi-frequency continuous-share trading engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize a 5-minute bar CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("fit-garch", help="emit daily bars with a sigma column")
    p.add_argument("--data", required=True, help="5-minute bar CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=250)
    p.add_argument("--refit-every", type=int, default=20)
    p.set_defaults(func=cmd_fit_garch)

    p = sub.add_parser("train", help="train a variant with PPO")
    p.add_argument("--data", required=True, help="5-minute bar CSV")
    p.add_argument("--variant", choices=sorted(evalcli.VARIANTS), default="MCTG")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", help="run a checkpoint through a data segment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="5-minute bar CSV")
    p.add_argument("--segment", choices=("train", "test"), default="test")
    p.add_argument("--variant", default=None,
                   help="must match the checkpoint's variant when given")
    p.add_argument("--config", default=None)
    p.add_argument("--out-metrics", required=True)
    p.add_argument("--out-equity", required=True)
    p.add_argument("--out-trajectory", default=None)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="aggregate backtests into a PR/TR table")
    p.add_argument("--out", required=True)
    p.add_argument("metrics", nargs="+", help="metrics JSON files from backtest")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
