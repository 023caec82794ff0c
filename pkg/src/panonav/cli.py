"""Command-line front end: train, eval, sweep, gradcheck, render.

Every subcommand reads one YAML config (all keys optional, defaults
documented in ``--help``), applies ``--set section.key=value`` overrides,
and writes a manifest into the output directory before any long work
starts.  The output root comes from the config's ``out_dir`` unless the
``PANONAV_OUT`` environment variable overrides it.

Exit codes:
    0  success
    2  configuration problems (bad keys or values, conflicting flags)
    3  input/output problems (missing or corrupt files, bad checkpoints)
    4  numeric failures (non-finite values, failed gradient checks)
"""

import argparse
import csv
import os
import sys

import yaml

from . import evaluation as ev
from . import gradcheck as gc
from . import kernels
from . import policy as pol
from . import training as tr
from .config import (RunConfig, config_keys, load_config, to_yaml,
                     write_manifest)
from .errors import CheckpointError, ConfigError, NumericError
from .rollout import ObsSettings
from .scenario import Scenario, make_circle_swap

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _keys_epilog():
    lines = ["config keys (override with --set KEY=VALUE):"]
    for key, default in config_keys(RunConfig):
        lines.append(f"  {key} = {default!r}")
    return "\n".join(lines)


def _add_common(p):
    p.add_argument("--config", metavar="FILE",
                   help="YAML config (or a manifest.yaml from a prior run)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--workers", type=int, default=None,
                   help="kernel thread count (default: all logical cores)")


def _load(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    cfg = load_config(args.config, overrides)
    workers = args.workers if args.workers is not None else cfg.workers
    if workers and workers > 0:
        kernels.set_num_threads(workers)
    return cfg


def _read_scenario(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read scenario {path}: {e}") from e
    try:
        return Scenario.from_text(text)
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed scenario file {path}: {e}") from e


def _eval_scenario(cfg):
    n = cfg.eval.n_agents
    return make_circle_swap(n, ev.swap_ring_radius(n), cfg.scenario.rho_obs,
                            cfg.scenario.speed, seed=cfg.eval.seed)


def _policy_controller(checkpoint, cfg, failed=None):
    params = pol.load_checkpoint(checkpoint, verbose=False)
    obs = cfg.obs_settings()
    if failed is not None:
        obs = ObsSettings(rig=cfg.rig, pano=cfg.pano, prep=cfg.prep,
                          mode=cfg.obs.mode, d_far=cfg.obs.d_far,
                          prune=cfg.obs.prune, failed=tuple(failed))
    return ev.PolicyController(params, obs)


def _controller(method, args, cfg, failed=None):
    if method == "policy":
        if not args.checkpoint:
            raise ConfigError("method 'policy' needs --checkpoint")
        return _policy_controller(args.checkpoint, cfg, failed)
    if method == "apf":
        return ev.APFController(cfg.baseline)
    if method == "dwa":
        return ev.DWAController(cfg.baseline)
    raise ConfigError(f"unknown method {method!r}; "
                      "expected policy, apf, or dwa")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args):
    extra = []
    if args.iters is not None:
        extra.append(f"train.iterations={args.iters}")
    if args.batch is not None:
        extra.append(f"train.batch_size={args.batch}")
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    cfg = _load(args, extra)
    out = cfg.resolved_out_dir()
    write_manifest(out, "train", cfg, cfg.train.seed,
                   outputs=["train_log.csv", "ckpt_*.bin"])
    params = pol.init_params(cfg.train.seed, cfg.arch, dtype=cfg.dtype,
                             verbose=not args.quiet)
    optim = None
    start = 0
    if args.resume is not None:
        optim = tr.AdamW(params, cfg.train.beta1, cfg.train.beta2,
                         cfg.train.adam_eps, cfg.train.weight_decay)
        tr.load_training_state(params, optim, out, args.resume)
        start = args.resume
    tr.train(params, cfg.train, cfg.scenario_factory(), cfg.dyn,
             cfg.obs_settings(), cfg.loss, out, start_iteration=start,
             optim=optim, verbose=not args.quiet)
    if not args.quiet:
        print(f"training done; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args):
    if args.ablation and args.frames:
        raise ConfigError("--ablation and --frames cannot be combined")
    if args.ablation and args.method != "policy":
        raise ConfigError("the camera-failure ablation needs the policy")
    cfg = _load(args)
    out = os.path.join(cfg.resolved_out_dir(), "eval")
    write_manifest(out, "eval", cfg, cfg.eval.seed,
                   outputs=["results.csv", "report.txt"])
    scenario = (_read_scenario(args.scenario) if args.scenario
                else _eval_scenario(cfg))

    if args.ablation:
        mk = lambda failed: _policy_controller(args.checkpoint, cfg, failed)
        rows, summary = ev.run_occlusion_ablation(
            mk, scenario, cfg.dyn, duration=cfg.eval.duration,
            seed=cfg.eval.seed, verbose=not args.quiet)
        with open(os.path.join(out, "results.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        report = ev.write_report(os.path.join(out, "report.txt"), rows,
                                 config_text=to_yaml(cfg),
                                 title="camera ablation")
        with open(report, "a") as fh:
            fh.write("\n## success-rate gap, left camera out minus right\n")
            for k, v in summary.items():
                fh.write(f"{k}: {v:+.4f}\n")
        if not args.quiet:
            print("left-right gaps:", summary)
        return EXIT_OK

    controller = _controller(args.method, args, cfg)
    rec = ev.run_episode(controller, scenario, cfg.dyn,
                         duration=cfg.eval.duration, seed=cfg.eval.seed)
    rep = ev.compute_metrics([rec])
    rows = [{"method": args.method, "axis": "single", "value": 0,
             "map_seed": scenario.seed or 0, "SR": rep.sr, "CR": rep.cr,
             "MFCT": rep.mfct, "mean_speed": rec.mean_speed,
             "duration": rec.duration}]
    ev.results_to_csv(rows, os.path.join(out, "results.csv"))
    ev.write_report(os.path.join(out, "report.txt"), rows,
                    config_text=to_yaml(cfg))
    if args.frames:
        ev.dump_frames(rec, os.path.join(out, "frames"),
                       every=args.every,
                       pano=cfg.obs_settings()
                       if args.method == "policy" else None,
                       dyn=cfg.dyn)
    if not args.quiet:
        print(f"SR {rep.sr:.3f}  CR {rep.cr:.4f}  MFCT {rep.mfct:.1f}  "
              f"({rep.colliding}/{rep.agents} colliding)")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    out = os.path.join(cfg.resolved_out_dir(), "sweep")
    write_manifest(out, "sweep", cfg, cfg.eval.seed,
                   outputs=["results.csv", "report.txt"])
    methods = {}
    for name in args.methods.split(","):
        name = name.strip()
        if name:
            methods[name] = _controller(name, args, cfg)
    if not methods:
        raise ConfigError("no methods selected")
    rows = ev.run_sweep(methods, cfg.dyn, cfg.eval.axis,
                        list(cfg.eval.values), n_maps=cfg.eval.n_maps,
                        duration=cfg.eval.duration, seed=cfg.eval.seed,
                        verbose=not args.quiet)
    ev.results_to_csv(rows, os.path.join(out, "results.csv"))
    ev.write_report(os.path.join(out, "report.txt"), rows,
                    config_text=to_yaml(cfg), title="method sweep")
    if not args.quiet:
        print(f"{len(rows)} rows -> {out}/results.csv")
    return EXIT_OK


def cmd_gradcheck(args):
    suites = {"ops": gc.check_ops, "losses": gc.check_losses,
              "rollout": gc.check_rollout}
    scopes = list(suites) if args.scope == "all" else [args.scope]
    failed = []
    for scope in scopes:
        print(f"[{scope}]")
        for name, err, tol, ok in suites[scope](verbose=False):
            print(f"  {name:22s} rel_err {err:.3e}  tol {tol:.0e}  "
                  f"{'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(name)
    if failed:
        raise NumericError(f"gradient checks failed: {', '.join(failed)}")
    print("all gradient checks passed")
    return EXIT_OK


def cmd_render(args):
    cfg = _load(args)
    out = os.path.join(cfg.resolved_out_dir(), "render")
    write_manifest(out, "render", cfg, cfg.eval.seed,
                   outputs=["frames/index.txt"])
    scenario = (_read_scenario(args.scenario) if args.scenario
                else _eval_scenario(cfg))
    method = "policy" if args.checkpoint else "apf"
    controller = _controller(method, args, cfg)
    rec = ev.run_episode(controller, scenario, cfg.dyn,
                         duration=cfg.eval.duration, seed=cfg.eval.seed)
    names = ev.dump_frames(
        rec, os.path.join(out, "frames"), every=args.every,
        pano=cfg.obs_settings() if method == "policy" else None,
        dyn=cfg.dyn)
    if not args.quiet:
        print(f"{len(names)} frames -> {out}/frames")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="panonav",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(
            name, help=help_, epilog=_keys_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_common(p)
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train a policy by backprop through time")
    p.add_argument("--iters", type=int, help="shortcut for train.iterations")
    p.add_argument("--batch", type=int, help="shortcut for train.batch_size")
    p.add_argument("--seed", type=int, help="shortcut for train.seed")
    p.add_argument("--resume", type=int, metavar="ITER",
                   help="resume from the checkpoint saved at ITER")

    p = add("eval", cmd_eval, "run one evaluation episode")
    p.add_argument("--checkpoint", help="trained policy weights")
    p.add_argument("--scenario", help="scenario file to replay")
    p.add_argument("--method", default="policy",
                   choices=("policy", "apf", "dwa"))
    p.add_argument("--ablation", action="store_true",
                   help="run the five-condition camera-failure table")
    p.add_argument("--frames", action="store_true",
                   help="dump per-step PNG frames")
    p.add_argument("--every", type=int, default=1,
                   help="frame subsampling stride")

    p = add("sweep", cmd_sweep, "compare methods along a difficulty axis")
    p.add_argument("--methods", default="apf,dwa",
                   help="comma list from {policy, apf, dwa}")
    p.add_argument("--checkpoint", help="weights for the policy method")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit")
    p.add_argument("--scope", default="all",
                   choices=("ops", "losses", "rollout", "all"))

    p = add("render", cmd_render, "simulate one episode and dump frames")
    p.add_argument("--checkpoint", help="policy weights (default: apf)")
    p.add_argument("--scenario", help="scenario file to replay")
    p.add_argument("--every", type=int, default=1)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error (config): {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as e:
        print(f"error (io): {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"error (numeric): {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
