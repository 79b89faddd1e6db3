"""Command line entry point: ``urgentkit {simulate,enhance,evaluate,codec,report}``.

Exit codes: 0 success, 1 partial per-item failures, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .codec import CodecFrameConfig
from .errors import ConfigError, UrgentKitError
from .metrics import METRICS

log = logging.getLogger("urgentkit")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


def _setup_logging():
    level = LOG_LEVELS.get(os.environ.get("URGENTKIT_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urgentkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write degraded/target pairs for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("enhance", help="run the multi-stage pipeline over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=1)

    v = sub.add_parser("evaluate", help="score enhanced outputs against targets")
    v.add_argument("--manifest", required=True)
    v.add_argument("--enhanced", required=True, help="directory written by 'enhance'")
    v.add_argument("--metrics", default="sdr,si_sdr,lsd,mcd",
                   help=f"comma-separated subset of {','.join(sorted(METRICS))}")
    v.add_argument("--systems", default=None, help="comma-separated, e.g. noisy,s1,s2,s3,blend")
    v.add_argument("--out", required=True, help="report path (.jsonl); a .txt table is written alongside")
    v.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("codec", help="train or round-trip the RVQ token codec")
    csub = c.add_subparsers(dest="codec_command", required=True)
    t = csub.add_parser("train")
    t.add_argument("--manifest")
    t.add_argument("--inputs", nargs="*", default=[])
    t.add_argument("--out", required=True)
    t.add_argument("--levels", type=int, default=4)
    t.add_argument("--size", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sample-rate", type=int, default=44100)
    t.add_argument("--fft-size", type=int, default=2048)
    t.add_argument("--hop", type=int, default=512)
    t.add_argument("--mels", type=int, default=80)
    r = csub.add_parser("roundtrip")
    r.add_argument("--codebook", required=True)
    r.add_argument("--manifest")
    r.add_argument("--inputs", nargs="*", default=[])
    r.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="render a JSONL report as an aligned table")
    rp.add_argument("--report", required=True)
    rp.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = _parser()
    args = parser.parse_args(argv)
    from . import harness
    from .manifest import load_config

    try:
        if args.command == "simulate":
            return harness.cmd_simulate(args.manifest, args.out, args.seed, args.jobs)
        if args.command == "enhance":
            cfg = load_config(args.config)
            return harness.cmd_enhance(args.manifest, cfg, args.out, args.jobs)
        if args.command == "evaluate":
            metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
            unknown = [m for m in metrics if m not in METRICS]
            if unknown:
                parser.error(f"unknown metric(s) {', '.join(unknown)}; valid names: "
                             f"{', '.join(sorted(METRICS))}")
            systems = args.systems.split(",") if args.systems else None
            _, rows, aggs = harness.cmd_evaluate(args.manifest, args.enhanced, metrics, args.out,
                                                 systems, args.jobs)
            sys.stdout.write(harness.render_table(aggs))
            return 0
        if args.command == "codec":
            if args.codec_command == "train":
                if not args.manifest and not args.inputs:
                    parser.error("codec train needs --manifest or --inputs")
                fc = CodecFrameConfig(args.sample_rate, args.fft_size, args.hop, args.mels)
                cb = harness.cmd_codec_train(args.out, fc, args.levels, args.size, args.seed,
                                             args.manifest, args.inputs)
                print(cb.content_hash)
                return 0
            if not args.manifest and not args.inputs:
                parser.error("codec roundtrip needs --manifest or --inputs")
            report = harness.cmd_codec_roundtrip(args.codebook, args.out, args.manifest, args.inputs)
            print(json.dumps(report, indent=2, sort_keys=True))
            return 0
        if args.command == "report":
            _, _, aggs = harness.read_report(args.report)
            if not aggs:
                _, rows, _ = harness.read_report(args.report)
                aggs = harness.aggregate(rows)
            table = harness.render_table(aggs)
            if args.out:
                Path(args.out).write_text(table)
            sys.stdout.write(table)
            return 0
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except (UrgentKitError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
