"""`synth-ellipsoid`: scenario JSON in, terminal-set JSON out."""

import argparse
import json
import sys

from .synthesis import SynthesisError, load_input, synthesize_ellipsoid


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="synth-ellipsoid",
        description="Synthesize an invariant ellipsoidal terminal set "
                    "and feedback gain for a scenario file.",
    )
    parser.add_argument("--scenario", required=True,
                        help="scenario JSON path")
    parser.add_argument("--lambda", dest="lam", type=float, default=1.0,
                        help="contraction factor in [0, 1] (default 1.0)")
    parser.add_argument("--out", required=True,
                        help="terminal-set JSON output path")
    args = parser.parse_args(argv)

    try:
        inp = load_input(args.scenario, lam=args.lam)
        result = synthesize_ellipsoid(inp)
    except (SynthesisError, ValueError) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return 1
    result.save(args.out)
    print(json.dumps({
        "out": args.out,
        "lambda": result.lam,
        "det_root": result.det_root,
        "min_block_eigenvalue": min(result.report.values()),
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
