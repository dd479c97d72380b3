"""Command line entry point: one subcommand per pipeline stage plus `run`."""

import argparse
import logging
import sys

from . import pipeline as pipe

log = logging.getLogger(__name__)


def _add_common(parser):
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--run-dir", default=None, help="run directory (default: ./run)")
    parser.add_argument("--seed", type=int, default=None, help="base seed for the whole run")
    parser.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override, repeatable")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ipdgi",
        description="Item promotion attacks on visually aware recommenders: "
                    "data prep, model training, diffusion, attacks and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    cmds = {
        "prepare": "generate/load the corpus, k-core filter, split, pick targets",
        "train-rec": "train recommender models",
        "train-diffusion": "train the denoising diffusion model",
        "cluster": "fit visual feature clusters",
        "attack": "run an attack over all target items",
        "evaluate": "score all conditions and write the metric report",
        "sweep": "attack+evaluate over a grid of one attack hyper-parameter",
        "ablate": "full attack vs. its ablations",
        "report": "re-render report markdown and figures from stored metrics",
        "run": "full pipeline end to end",
    }
    parsers = {}
    for name, desc in cmds.items():
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        parsers[name] = p

    parsers["train-rec"].add_argument("--model", choices=("vbpr", "dvbpr", "amr"),
                                      default=None, help="train only this model")
    parsers["attack"].add_argument("--attack", dest="attack_name",
                                   choices=("ipdgi", "aip", "ipdgi_no_clustering",
                                            "ipdgi_no_perturbation"),
                                   default="ipdgi")
    parsers["sweep"].add_argument("--param", required=True,
                                  choices=sorted(set(pipe.SWEEP_PARAMS)))
    parsers["sweep"].add_argument("--values", required=True,
                                  help="comma separated values, e.g. 4,8,16,32")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipe.load_config(path=args.config, run_dir=args.run_dir,
                               seed=args.seed, sets=args.sets)
        run = pipe.Run(cfg)
        if args.command == "prepare":
            run.prepare()
        elif args.command == "train-rec":
            run.prepare()
            run.train_rec(kinds=[args.model] if args.model else None)
        elif args.command == "train-diffusion":
            run.train_diffusion()
        elif args.command == "cluster":
            run.prepare()
            run.cluster()
        elif args.command == "attack":
            run.run_attack(args.attack_name)
        elif args.command == "evaluate":
            report = run.evaluate()
            print(report.markdown())
        elif args.command == "sweep":
            values = [v for v in (s.strip() for s in args.values.split(",")) if v]
            doc, path, plot = pipe.sweep(cfg, args.param, [float(v) for v in values])
            print(f"sweep written to {path} and {plot}")
        elif args.command == "ablate":
            _, report, doc = pipe.ablate(cfg)
            print(report.markdown())
        elif args.command == "report":
            report = run.evaluate()
            paths = run.render_plots(report)
            print(report.markdown())
            print("\n".join(f"figure: {p}" for p in paths))
        elif args.command == "run":
            run, report = pipe.run_pipeline(cfg)
            print(report.markdown())
    except pipe.PipelineError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
