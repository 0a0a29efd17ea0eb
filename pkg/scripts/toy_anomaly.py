"""Train and evaluate the anomaly toy experiment; prints a JSON result."""
import argparse
import json
from pathlib import Path

from pets.experiments import anomaly_toy_config, run_anomaly_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy_anomaly")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    overrides = {"seed": args.seed, "out": args.out}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = anomaly_toy_config(**overrides)
    result = run_anomaly_toy(cfg, out=Path(args.out), verbose=not args.quiet)
    text = json.dumps(result, sort_keys=True, indent=2)
    (Path(args.out) / "result.json").write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
