"""embie-figures KIND INPUT.csv [INPUT2.csv ...] --out FIG.png"""

import argparse
import sys

from .io import SchemaError
from .plots import RENDERERS, PlotSpec, plot


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="embie-figures",
        description="render plots from harness CSV outputs")
    ap.add_argument("kind", choices=sorted(RENDERERS))
    ap.add_argument("inputs", nargs="+", help="CSV file(s) from the harness")
    ap.add_argument("--out", required=True, help="output image (png/svg)")
    ap.add_argument("--phi-cuts", help="comma list of phi cuts in degrees "
                                       "(farfield only)")
    args = ap.parse_args(argv)
    options = {}
    if args.phi_cuts:
        options["phi_cuts"] = [float(t) for t in args.phi_cuts.split(",")]
    spec = PlotSpec(kind=args.kind, inputs=args.inputs, output=args.out,
                    options=options)
    try:
        path, _ = plot(spec)
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
