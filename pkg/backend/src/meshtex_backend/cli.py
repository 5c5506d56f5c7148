import argparse
import logging
import sys

from .config import ServiceConfig
from .conformance import conformance_check
from .model import StandInPipeline
from .server import Server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="meshtex-backend", description="Noise-predictor wire service."
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=7447)
    parser.add_argument("--health-port", type=int, dest="health_port", default=7448)
    parser.add_argument("--max-batch", type=int, dest="max_batch", default=8)
    parser.add_argument(
        "--conformance", action="store_true",
        help="print the hooked-layer conformance report and exit",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.conformance:
        report = conformance_check(StandInPipeline())
        worst = max(report.values())
        for name, dev in sorted(report.items()):
            print(f"{name}: {dev:.3e}")
        print(f"worst: {worst:.3e}")
        return 0 if worst <= 1e-4 else 1

    config = ServiceConfig(
        host=args.host, port=args.port, health_port=args.health_port,
        max_batch=args.max_batch,
    )
    Server(config).serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
