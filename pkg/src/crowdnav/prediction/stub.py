"""Loopback predictor speaking the wire protocol on stdin/stdout.

    python -m crowdnav.prediction.stub            # constant-velocity samples
    python -m crowdnav.prediction.stub --delay 0.2
"""
from __future__ import annotations

import argparse
import sys
import time

from crowdnav.prediction.baselines import cvg_predict
from crowdnav.prediction.external import serve_lines


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--delay", type=float, default=0.0, help="seconds to sleep before answering")
    args = parser.parse_args(argv)

    def predict(history, horizon, num_samples):
        if args.delay:
            time.sleep(args.delay)
        return cvg_predict(history, horizon, num_samples)

    serve_lines(predict, sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
