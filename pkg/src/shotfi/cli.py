"""shotfi command line: gen-synthetic, run, report.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiment import (SpecError, aggregate, collect_reports, failures, render_csv, render_markdown,
                         run_experiment, write_plots, ExperimentSpec, MU_METHODS, SU_METHODS)
from .synth import BenchmarkConfig, ConfigError, generate_benchmark
from .train import TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

GEN_HELP = """generator config keys (TOML, top level or under [benchmark]):
""" + "\n".join(f"  {f.name} (default {f.default if not callable(f.default_factory) else f.default_factory()!r})"
                for f in fields(BenchmarkConfig)) + """
  occupancy_dist uses string keys in TOML, e.g. occupancy_dist = {"0" = 0.2, "1" = 0.8}
"""

RUN_HELP = f"""experiment spec keys (TOML):
  scenario   cross_room | cross_frequency | combined | su_cross_room | su_cross_torso |
             su_cross_face | synthetic_<name>
  setting    multiuser (default) | singleuser
  methods    list from {list(MU_METHODS)} (multiuser) or {list(SU_METHODS)} (singleuser)
  seeds      list of integers; each seed trains its own source model
  [benchmark]  generator keys (see gen-synthetic --help); regenerated per seed
  [data]       source / target / holdout manifest paths, used instead of [benchmark]
  [model]      same_padding (multiuser, default true), width (singleuser, default 64)
  [source]     TrainConfig overrides for source training
  [adapt]      TrainConfig overrides for adaptation
  [overrides.<method>]  TrainConfig overrides for one method
TrainConfig keys: {", ".join(TrainConfig.keys())}
Set SHOTFI_DETERMINISTIC=1 to force deterministic kernels.
"""


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_gen(args) -> int:
    raw = _read_toml(args.config)
    raw = raw.get("benchmark", raw)
    cfg = BenchmarkConfig.from_dict(raw)
    paths = generate_benchmark(cfg, args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = ExperimentSpec.from_dict(_read_toml(args.spec))
    summary = run_experiment(spec, args.out, base_dir=Path(args.spec).resolve().parent)
    n = failures(summary)
    if n:
        print(f"{n} stage(s) failed; see error.txt files under {args.out}", file=sys.stderr)
        return EXIT_RUN
    print(f"wrote reports under {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    records, missing = collect_reports(args.runs)
    for m in missing:
        print(f"missing: {m}", file=sys.stderr)
    if not records:
        print("no reports found", file=sys.stderr)
        return EXIT_RUN
    table = aggregate(records)
    text = render_markdown(table) if args.format == "md" else render_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plots:
        plot_dir = Path(args.plot_dir or Path(args.runs[0]) / "plots")
        for p in write_plots(args.runs, records, plot_dir):
            print(f"plot: {p}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shotfi", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="render a synthetic source/target benchmark",
                       epilog=GEN_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--config", required=True, help="generator TOML file")
    g.add_argument("--out", required=True, help="output directory for manifests and blobs")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="source-train, adapt and evaluate per seed",
                       epilog=RUN_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    r.add_argument("--spec", required=True, help="experiment TOML file")
    r.add_argument("--out", required=True, help="run directory")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate run directories into tables")
    p.add_argument("--runs", nargs="+", required=True, help="one or more run directories")
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.add_argument("--plots", action="store_true", help="also write loss-curve and metric-bar PNGs")
    p.add_argument("--plot-dir", help="plot directory (default <first run>/plots)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger("shotfi").exception("run failed")
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
