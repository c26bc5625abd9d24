"""
main.py - Entry point for the conservative scheme experiments
-------------------------------------------------------------
Subcommands:
    list-problems
    run <config>          consistency <config>
    convergence <config>  divergence <config>
    identity [--problem NAME] [--config FILE]

Any --dotted.key=value flag overrides the config file, e.g.
    python main.py run dho.json --solver.residual_tol=1e-13

Exit status: 0 all checks passed, 1 experiment or check failure,
2 configuration error.
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from debugger import setup_debugger

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
CONFIG_COMMANDS = ("run", "convergence", "consistency", "divergence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Multiplier-method conservative finite difference schemes",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-dir", default="logs", help="directory for the dated run log")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("list-problems", help="show the built-in problems")
    for name in CONFIG_COMMANDS:
        sub = commands.add_parser(name, help=f"{name} mode from a JSON config")
        sub.add_argument("config", help="experiment JSON file")

    identity = commands.add_parser("identity", help="multiplier identity, algebraic identity and stencil checks")
    identity.add_argument("--problem", default=None, help="one problem (default: all)")
    identity.add_argument("--config", default=None, help="optional JSON config")
    return parser


def _print_catalog():
    from problems_module import catalog

    print(f"\n{'═' * 80}")
    print("BUILT-IN PROBLEMS")
    print(f"{'═' * 80}")
    print(f"{'name':<22}{'m':>3}{'s':>3}{'n':>3}{'levels':>8}  {'params':<28}description")
    print("─" * 80)
    for entry in catalog():
        params = ", ".join(f"{k}={v['default']:g}" for k, v in entry["params"].items()) or "-"
        print(f"{entry['name']:<22}{entry['m']:>3}{entry['s']:>3}{entry['n']:>3}"
              f"{entry['time_levels']:>8}  {params:<28}{entry['description']}")
    print()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = [item for item in extra if item.startswith("--") and "=" in item]
    unknown = [item for item in extra if item not in overrides]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")

    setup_debugger(log_dir=args.log_dir, level=logging.DEBUG if args.verbose else logging.INFO)

    import config as settings
    import experiment_runner
    from errors import ConfigError

    if args.command == "list-problems":
        _print_catalog()
        return EXIT_OK

    try:
        if args.command == "identity":
            text = "{}"
            if args.config:
                with open(args.config, "r", encoding="utf-8") as f:
                    text = f.read()
            doc_overrides = ["mode=\"identity\""] + overrides
            if args.problem:
                doc_overrides.append(f"problem={json.dumps(args.problem)}")
            resolved = settings.parse_config(text, doc_overrides)
        else:
            resolved = settings.load_config(args.config, [f"mode={json.dumps(args.command)}"] + overrides)
    except ConfigError as e:
        logging.error("configuration error: %s", e)
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    result = experiment_runner.run(resolved)
    print(f"Results: {result['output_dir']}")
    return EXIT_OK if result["success"] else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
