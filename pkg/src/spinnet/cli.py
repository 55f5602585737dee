"""Command-line front end: run, calibrate, list-presets, validate."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from . import io as sio
from .errors import ExportError, InvalidConfigError, SpinNetError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_IO = 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("configuration")
    src.add_argument("--config", metavar="PATH", help="TOML scenario file")
    src.add_argument("--preset", metavar="NAME", help="named preset (see list-presets)")
    src.add_argument("--seed", metavar="U64", type=int, help="master random seed")
    src.add_argument("--trials", metavar="N", type=int, help="trials per set")
    src.add_argument("--sets", metavar="N", type=int, help="number of sets")
    src.add_argument("--override", metavar="KEY=VALUE", action="append", default=[],
                     help="set any config key, dotted for nested tables (repeatable)")


def _load(args) -> harness.ScenarioConfig:
    if not args.config and not args.preset:
        raise InvalidConfigError("give --config PATH or --preset NAME")
    overrides = list(args.override)
    for flag in ("seed", "trials", "sets"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{flag}={value}")
    return sio.parse_config(args.config, preset=args.preset, overrides=overrides)


def _cmd_run(args) -> int:
    cfg = _load(args)
    report = harness.run_scenario(cfg, workers=args.workers)
    bundle = sio.export(report, args.out)
    print(f"{cfg.scenario}: {len(report.rows)} trials in {len(report.groups)} groups -> {bundle.directory}")
    for g in report.groups:
        p = g.pooled
        if g.kind == "contrast":
            print(f"  {g.key:<24} contrast {p.mean_theta:.4f} +- {p.sem_theta:.4f}")
        else:
            print(f"  {g.key:<24} dtheta {p.std_theta * 1e3:8.4f} mrad  xi_net {p.xi_net_db:+7.2f} dB")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    cfg = _load(args)
    result = harness.calibrate_probe_detailed(args.target, cfg, metric=args.metric)
    if result.no_squeezing_needed:
        print(f"target {args.target:+.2f} dB: no squeezing needed (resolution_std = inf)")
    else:
        print(f"resolution_std = {result.qnd.resolution_std!r} spins  ({args.metric} {result.achieved_db:+.3f} dB, "
              f"{len(result.evaluations)} evaluations)")
    if args.out:
        text = sio.serialize_config(replace(cfg, qnd=result.qnd))
        try:
            with open(args.out, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise ExportError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
        print(f"calibrated config written to {args.out}")
    return EXIT_OK


def _cmd_list(args) -> int:
    for name, (desc, data) in sio.PRESETS.items():
        print(f"{name:<9} {data['scenario']:<16} {desc}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = _load(args)
    sys.stdout.write(sio.serialize_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and export its data")
    _add_config_args(run)
    run.add_argument("--out", metavar="DIR", default="spinnet-out", help="output directory")
    run.add_argument("--workers", type=int, default=1, help="worker threads for trials")
    run.set_defaults(func=_cmd_run)

    cal = sub.add_parser("calibrate", help="fit the probe resolution to a target in dB")
    _add_config_args(cal)
    cal.add_argument("--target", type=float, required=True, help="target xi_net (or -gain) in dB")
    cal.add_argument("--metric", choices=("xi_net", "gain"), default="xi_net")
    cal.add_argument("--out", metavar="PATH", help="write the calibrated config here")
    cal.set_defaults(func=_cmd_calibrate)

    lst = sub.add_parser("list-presets", help="show the built-in presets")
    lst.set_defaults(func=_cmd_list)

    val = sub.add_parser("validate", help="check a config and print it with defaults applied")
    _add_config_args(val)
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SpinNetError as exc:
        print(f"spinnet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"spinnet: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
