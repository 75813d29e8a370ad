"""``forage`` command line: gen, train, eval, replay, decode, glm, metrics, segment, export.

Exit status: 0 success, 1 domain error, 2 usage error.  Every config field
is also a flag (``--map-size 24``, ``--gamma 0.9``); flags beat the file
given by ``--config``.  ``FORAGE_OUT_ROOT`` prefixes relative output paths.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agent_net as net
from . import behavior, decoding, ppo
from .config import AnalysisConfig, ConfigError, EnvConfig, RunConfig, TrainConfig, block_from_dict, parse_config
from .env import N_ACTIONS, OBS_DIM
from .rng import derive_stream
from .tables import read_table, write_table
from .telemetry import LogCorruptionError, load_logs, read_log, replay_verify
from .world_gen import ArenaGenerationError, generate_arena, save_layout

SUBCOMMANDS = ("gen", "train", "eval", "replay", "decode", "glm", "metrics", "segment", "export")
DOMAIN_ERRORS = (ConfigError, ArenaGenerationError, LogCorruptionError, net.CheckpointMismatch,
                 net.NumericFault, ppo.TrainingAborted, decoding.EmptyDatasetError,
                 behavior.GlmConvergenceError, FileNotFoundError, ValueError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.startswith("["):
        return json.loads(text)
    return text


def _config_flags(p: argparse.ArgumentParser, reserved=()):
    """Hidden ``--field-name`` flag per config field; ``reserved`` names belong to the subcommand."""
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", help="TOML or JSON run config")
    g.add_argument("--seed", type=int, help="master seed (also the training seed)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. env.map_size=24")
    seen = set()
    for block, cls in (("env", EnvConfig), ("train", TrainConfig), ("analysis", AnalysisConfig)):
        for f in dataclasses.fields(cls):
            if f.name in seen or f.name == "seed" or f.name in reserved:
                continue
            seen.add(f.name)
            g.add_argument(_flag(f.name), dest=f"cfg__{block}.{f.name}", default=None,
                           metavar=f.name.upper(), help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forage", description="Foraging-arena simulation, training and analysis.")
    p.add_argument("--jobs", type=int, default=1, help="worker processes inside a subcommand")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("gen", help="generate an arena layout")
    _config_flags(s)
    s.add_argument("--arena-seed", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a PPO agent")
    _config_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", help="comma-separated seeds; one sub-run per seed")
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("eval", help="roll out a frozen checkpoint and log episodes")
    _config_flags(s)
    s.add_argument("--checkpoint", help="checkpoint directory (default: random initialisation)")
    s.add_argument("--episodes", type=int, default=5)
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--hidden-stride", type=int, default=1)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("replay", help="re-simulate logs and verify them")
    s.add_argument("--log", action="append", default=[], help="records file")
    s.add_argument("--logs", help="directory of logs")

    s = sub.add_parser("decode", help="ridge decoding horizon sweep")
    _config_flags(s, reserved={"dts"})
    s.add_argument("--logs", required=True)
    s.add_argument("--dts", default=None, help="'a..b:step' or comma list; write --dts=-100..100:50 for negative starts")
    s.add_argument("--frame", choices=("allo", "ego", "allocentric", "egocentric"), default="allo")
    s.add_argument("--baseline", choices=tuple(decoding.BASELINE_KINDS), default="mean_displacement")
    s.add_argument("--out", required=True)

    s = sub.add_parser("glm", help="patch revisitation GLM")
    _config_flags(s)
    s.add_argument("--logs", required=True, action="append")
    s.add_argument("--min-events", type=int, default=10)
    s.add_argument("--out", required=True)

    s = sub.add_parser("metrics", help="behavioural metric panel, one row per evaluated checkpoint")
    _config_flags(s)
    s.add_argument("--runs", required=True)
    s.add_argument("--episodes", type=int, default=0,
                   help="if > 0, first evaluate every checkpoint under --runs with this many episodes")
    s.add_argument("--out", required=True)

    s = sub.add_parser("segment", help="movement-state segmentation of one episode")
    _config_flags(s)
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("export", help="EMA-smoothed training curves")
    s.add_argument("--curves", required=True, help="run directory or curves.csv")
    s.add_argument("--ema-halflife", type=float, default=None)
    s.add_argument("--x", default="iteration", help="time column for the EMA")
    s.add_argument("--out", default=None)
    return p


def resolve_config(args) -> RunConfig:
    overrides = {}
    for k, v in vars(args).items():
        if k.startswith("cfg__") and v is not None:
            overrides[k[5:]] = _parse_scalar(v)
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _parse_scalar(v)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
    return parse_config(getattr(args, "config", None), overrides)


def out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("FORAGE_OUT_ROOT")
    return Path(root) / p if root and not p.is_absolute() else p


def write_echo(cfg: RunConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.echo").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------

def cmd_gen(args):
    cfg = resolve_config(args)
    seed = cfg.seed if args.arena_seed is None else args.arena_seed
    layout = generate_arena(seed, cfg.env)
    out = out_path(args.out)
    if out.suffix != ".json":
        write_echo(cfg, out)
        out = out / f"arena_{seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_layout(layout, out, cfg.env)
    print(f"arena {seed}: {layout.width}x{layout.height}, {len(layout.cow_spawn_points)} spawn points, "
          f"{len(layout.lake_cells)} water cells, retries={layout.retries} -> {out}")
    return 0


def _train_one(cfg_dict, out, quiet):
    cfg = RunConfig(env=block_from_dict(EnvConfig, cfg_dict["env"], "env"),
                    train=block_from_dict(TrainConfig, cfg_dict["train"], "train"),
                    analysis=block_from_dict(AnalysisConfig, cfg_dict["analysis"], "analysis"),
                    seed=cfg_dict["seed"], out=str(out))
    write_echo(cfg, Path(out))
    show = None if quiet else (lambda r: print(f"step {r['step']:>9d}  return {r['return_mean']:.3f}  "
                                               f"len {r['ep_len_mean']:.1f}  entropy {r['entropy']:.3f}",
                                               flush=True))
    res = ppo.train(cfg.env, cfg.train, out, seed=cfg.train.seed, log_every=10, progress=show)
    return str(res.final_checkpoint)


def cmd_train(args):
    cfg = resolve_config(args)
    out = out_path(args.out)
    if not args.seeds:
        final = _train_one(cfg.to_dict(), out, args.quiet)
        print(f"final checkpoint: {final}")
        return 0
    seeds = [int(s) for s in args.seeds.split(",")]
    jobs = []
    for s in seeds:
        d = cfg.to_dict()
        d["seed"] = s
        d["train"]["seed"] = s
        jobs.append((d, out / f"seed_{s}", True))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            finals = list(ex.map(_train_one, *zip(*jobs)))
    else:
        finals = [_train_one(*j) for j in jobs]
    for s, f in zip(seeds, finals):
        print(f"seed {s}: {f}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args)
    out = out_path(args.out)
    if args.checkpoint:
        params = Path(args.checkpoint)
        net.read_checkpoint_manifest(params)  # fail early if absent
    else:
        ncfg = net.NetConfig(OBS_DIM, cfg.train.hidden_dim, N_ACTIONS, cfg.train.recurrent)
        params = net.init_params(ncfg, derive_stream(cfg.seed, "init"))
    write_echo(cfg, out)
    _, summary = ppo.evaluate(params, cfg.env, args.episodes, master_seed=cfg.seed, greedy=args.greedy,
                              out_dir=out, hidden_stride=args.hidden_stride,
                              aux_enabled=None if args.checkpoint else cfg.train.aux_enabled,
                              max_steps=args.max_steps)
    print(f"{summary.n_episodes} episodes: return {summary.return_mean:.3f} +- {summary.return_ci:.3f}, "
          f"length {summary.length_mean:.1f} +- {summary.length_ci:.1f}; rates eat {summary.eat_rate:.4f} "
          f"drink {summary.drink_rate:.4f} sleep {summary.sleep_rate:.4f} "
          f"(reference {ppo.EXPERT_RATES})")
    return 0


def cmd_replay(args):
    paths = [Path(p) for p in args.log]
    if args.logs:
        paths += sorted(Path(args.logs).glob("*.records.csv"))
    if not paths:
        raise UsageError("replay needs --log FILE or --logs DIR")
    bad = 0
    for path in paths:
        res = replay_verify(read_log(path))
        print(f"{path.name}: {'ok' if res.ok else 'FAIL'} {res.message}")
        bad += not res.ok
    return 1 if bad else 0


def parse_dts(text) -> list:
    if ".." in text:
        span, _, step = text.partition(":")
        a, b = span.split("..")
        return list(range(int(a), int(b) + 1, int(step or 1)))
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_decode(args):
    cfg = resolve_config(args)
    logs = load_logs(args.logs)
    frame = {"allo": "allocentric", "ego": "egocentric"}.get(args.frame, args.frame)
    dts = parse_dts(args.dts) if args.dts else list(cfg.analysis.dts)
    rows, models = decoding.horizon_sweep(logs, dts, frame, cfg.analysis.alpha_grid, cfg.analysis.cv_folds,
                                          args.baseline, return_models=True)
    meta = decoding.sweep_metadata(frame, args.baseline)
    prof = decoding.coefficient_profile(models)
    meta["past_future_overlap"] = {str(k): v for k, v in prof.overlaps.items()}
    meta["uncertainty_predictor"] = ("present" if any(np.isfinite(l.column("predicted_delta_x")).any() for l in logs)
                                     else "absent")
    out = out_path(args.out)
    write_table(out, rows, ["dt", "frame", "alpha", "rmse", "baseline", "n_train", "n_test"], meta)
    weights = [{"unit": u, **{f"dt={m.dt}": float(prof.weights[u, j]) for j, m in enumerate(models)}}
               for u in range(prof.weights.shape[0])]
    write_table(out.with_name(out.stem + ".coefficients.csv"), weights)
    for r in rows:
        print(f"dt={r['dt']:>5d} rmse={r['rmse']:.3f} baseline={r['baseline']:.3f} alpha={r['alpha']:g}")
    print(f"uncertainty predictor: {meta['uncertainty_predictor']}")
    return 0


def _patches_for(log, radius):
    cfg = block_from_dict(EnvConfig, log.header["config"], "env")
    return behavior.detect_patches(generate_arena(log.header["arena_seed"], cfg), radius)


def cmd_glm(args):
    cfg = resolve_config(args)
    a = cfg.analysis
    events = []
    for d in args.logs:
        for log in load_logs(d):
            agent = str(log.header.get("checkpoint_id") or Path(d).name)
            events += behavior.extract_choice_events(log, _patches_for(log, a.patch_radius), a.revisit_gap,
                                                     a.decision_lead, a.drink_radius, agent_id=agent)
    print(f"{len(events)} choice events")
    fit = behavior.fit_choice_glm(events, args.min_events)
    meta = {"n_obs": fit.n_obs, "n_events": len(events), "converged": fit.converged,
            "iterations": fit.iterations, "separation": fit.separation, "warnings": fit.warnings,
            "recency": behavior.RECENCY_CONVENTION, "fixed_effects": fit.intercepts,
            "units": "standardised predictors"}
    write_table(out_path(args.out), fit.table(), ["predictor", "coef", "se", "z", "p", "stars", "vif"], meta)
    for r in fit.table():
        print(f"{r['predictor']:>12s} {r['coef']:+.3f} (se {r['se']:.3f}) {r['stars']}")
    return 0


def _ckpt_step(path: Path) -> int:
    try:
        return int(net.read_checkpoint_manifest(path)["step"])
    except FileNotFoundError:
        return -1


def cmd_metrics(args):
    cfg = resolve_config(args)
    root = Path(args.runs)
    if args.episodes > 0:
        for ckpt in sorted(root.rglob("manifest.json")):
            d = ckpt.parent
            if "tensors" not in json.loads(ckpt.read_text()):
                continue
            target = d.parent.parent / "analysis" / "panel_eval" / d.name
            man = net.read_checkpoint_manifest(d)
            env_cfg = block_from_dict(EnvConfig, man.get("extra", {}).get("env_config", {}), "env") \
                if man.get("extra", {}).get("env_config") else cfg.env
            ppo.evaluate(d, env_cfg, args.episodes, master_seed=cfg.seed, out_dir=target)
    rows = []
    for man in sorted(root.rglob("manifest.json")):
        data = json.loads(man.read_text())
        if "episodes" not in data:
            continue
        logs = load_logs(man.parent)
        row = {"source": str(man.parent.relative_to(root)), "checkpoint": data.get("checkpoint_id") or ""}
        row.update(behavior.metric_panel(logs, cfg.analysis.occupancy_bin))
        rows.append(row)
    if not rows:
        raise FileNotFoundError(f"no evaluated episode directories under {root}")
    rows.sort(key=lambda r: (str(r["checkpoint"]).split(":")[0], r["source"]))
    write_table(out_path(args.out), rows, ["source", "checkpoint", "episodes", *behavior.PANEL_COLUMNS],
                {"bin_size": cfg.analysis.occupancy_bin})
    print(f"{len(rows)} panel rows")
    return 0


def cmd_segment(args):
    cfg = resolve_config(args)
    log = read_log(args.log)
    a = cfg.analysis
    seg = behavior.segment_movement(log.positions(), a.segment_window, a.segment_states, a.segment_restarts,
                                    seed=cfg.seed)
    rows = [{"timestep": int(r.timestep), "state": int(s), "step_length": float(f[0]), "turn": float(f[1])}
            for r, s, f in zip(log.records, seg.labels, seg.features)]
    write_table(out_path(args.out), rows, ["timestep", "state", "step_length", "turn"],
                {"method": seg.note, "window": a.segment_window, "states": a.segment_states,
                 "warning": seg.warning})
    counts = np.bincount(seg.labels, minlength=a.segment_states + 1)[1:]
    print("state occupancy: " + ", ".join(f"{i + 1}:{c}" for i, c in enumerate(counts)))
    return 0


def cmd_export(args):
    src = Path(args.curves)
    path = src / "curves.csv" if src.is_dir() else src
    rows, _ = read_table(path)
    if not rows:
        raise ValueError(f"{path}: empty curve file")
    halflife = args.ema_halflife if args.ema_halflife is not None else AnalysisConfig().ema_halflife
    x = np.array([r[args.x] for r in rows], dtype=np.float64)
    cols = [c for c in rows[0] if c != args.x and isinstance(rows[0][c], float)]
    out_rows = [{args.x: r[args.x]} for r in rows]
    for c in cols:
        sm = behavior.ema_smooth(x, [r[c] for r in rows], halflife)
        for o, v in zip(out_rows, sm):
            o[c] = float(v)
    out = out_path(args.out) if args.out else path.with_name("curves.ema.csv")
    write_table(out, out_rows, [args.x, *cols], {"smoothing": "time-weighted EMA", "halflife": halflife,
                                                 "x": args.x})
    print(f"wrote {out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "replay": cmd_replay, "decode": cmd_decode,
            "glm": cmd_glm, "metrics": cmd_metrics, "segment": cmd_segment, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"forage {args.command}: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"forage {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
