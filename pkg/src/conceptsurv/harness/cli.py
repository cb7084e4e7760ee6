"""Command-line entry point: ``conceptsurv <subcommand> [options]``.

Subcommands
-----------
generate    synthesize a dataset and write train.npz / test.npz
train       fit one model on a dataset file and write a checkpoint
evaluate    C-index and concept F1 of a checkpoint on a dataset file
explain     concept explanation of one instance (JSON, optional SVG panel)
experiment  run a sweep from a config file and write CSV reports
export      rebuild summaries and charts from a results CSV
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..datagen import ConceptSurvivalDataset, build_dataset
from ..interpret import explain_cox_contributions, explain_with_neighbors, neighbor_panel_svg
from ..models import evaluate, fit, predict_arrays
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .experiment import make_pool, model_spec, run_experiment
from .reports import export_reports, read_results

log = logging.getLogger("conceptsurv")


def _global_flags(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="flat YAML file with dotted keys")
    parser.add_argument("--seed", type=int, default=d(None), help="base seed (overrides the config)")
    parser.add_argument("--out", default=d(None), help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=d(None), help="worker processes for experiment")
    parser.add_argument("--svg", action="store_true", default=d(False), help="also write SVG figures")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptsurv", description="Concept-based survival models.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write train.npz and test.npz")
    p.add_argument("--n", type=int, help="sample size (default: first value of the sample-size grid)")
    p.add_argument("--rho", type=float, help="uncensored proportion")

    p = sub.add_parser("train", parents=[common], help="fit a model and save a checkpoint")
    p.add_argument("--data", required=True, help="training dataset (.npz)")
    p.add_argument("--model", help="architecture-head, e.g. survcbm-beran (default: first configured model)")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("explain", parents=[common], help="explain one prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset holding the instance")
    p.add_argument("--train", help="training dataset for neighbor search (Beran models)")
    p.add_argument("--index", type=int, default=0, help="instance index within --data")
    p.add_argument("--k", type=int, default=9, help="number of neighbors")

    sub.add_parser("experiment", parents=[common], help="run a configured sweep")

    p = sub.add_parser("export", parents=[common], help="summaries and charts from results.csv")
    p.add_argument("--results", required=True)
    return parser


def _config(args):
    return load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)


def _out_dir(args, config) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(path)


def cmd_generate(args, config) -> int:
    n = args.n or config.cell(config.axis_values[0])[0]
    rho = args.rho if args.rho is not None else float(config["sweep.fixed_rho"])
    seed = int(config["seed"])
    ds = build_dataset(config["dataset.kind"], make_pool(config), n, config.generation(rho, seed))
    train, test = ds.train_test_split(float(config["test_fraction"]), seed=seed)
    out = _out_dir(args, config)
    for name, part in (("train.npz", train), ("test.npz", test)):
        part.save(out / name)
        print(out / name)
    return 0


def cmd_train(args, config) -> int:
    train = ConceptSurvivalDataset.load(args.data)
    name = args.model or config["models"][0]
    spec = model_spec(config, name, train.schema, train.image_shape)
    model = fit(spec, train, config.train_config(int(config["seed"])))
    out = _out_dir(args, config)
    path = out / f"{name}.scbm"
    save_checkpoint(model, path, {"config_hash": config.digest(), "seed": int(config["seed"]), "data": str(args.data)})
    print(path)
    return 0


def cmd_evaluate(args, config) -> int:
    model = load_checkpoint(args.checkpoint)
    m = evaluate(model, ConceptSurvivalDataset.load(args.data))
    result = {"model": model.spec.name, "c_index": m.c_index, "f1_mean": m.f1_mean, "f1_per_concept": m.f1_per_concept}
    print(json.dumps(result, indent=2))
    _write_json(_out_dir(args, config) / "metrics.json", result)
    return 0


def cmd_explain(args, config) -> int:
    model = load_checkpoint(args.checkpoint)
    data = ConceptSurvivalDataset.load(args.data)
    if not 0 <= args.index < len(data):
        raise ValueError(f"--index must lie in [0, {len(data)})")
    image = data.images[args.index]
    out = _out_dir(args, config)
    if model.spec.head.kind == "beran":
        if args.train is None:
            raise ValueError("--train is required for Beran models")
        train = ConceptSurvivalDataset.load(args.train)
        report = explain_with_neighbors(model, image, train, args.k)
        if args.svg:
            nb = report.neighbors
            labels = ["".join(map(str, c)) for c in nb.predicted_concepts]
            q = "".join(map(str, report.support["predicted_value"]))
            path = out / f"explain_{args.index}.svg"
            path.write_text(neighbor_panel_svg(image, train.images[nb.indices], q, labels), encoding="utf-8")
            print(path)
    else:
        report = explain_cox_contributions(model, image)
    doc = report.to_dict()
    doc["instance"] = {"index": args.index, "true_concepts": data.concepts[args.index].tolist()}
    _, _, expected, _ = predict_arrays(model, image[None])
    doc["instance"]["expected_time"] = float(expected[0])
    _write_json(out / f"explain_{args.index}.json", doc)
    return 0


def cmd_experiment(args, config) -> int:
    def progress(done, total):
        log.info("job %d/%d done", done, total)

    result = run_experiment(config, progress=progress)
    export_reports(result.rows, _out_dir(args, config), svg=args.svg)
    (Path(config["out"]) / "config.yaml").write_text(
        "".join(f"{k}: {json.dumps(v)}\n" for k, v in sorted(config.values.items())), encoding="utf-8"
    )
    for cell in result.failed_cells:
        log.error("every repetition failed for %s-%s at axis value %s", *cell)
    return result.exit_code


def cmd_export(args, config) -> int:
    rows = read_results(args.results)
    for path in export_reports(rows, _out_dir(args, config), svg=args.svg):
        print(path)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "experiment": cmd_experiment,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _config(args)
        return COMMANDS[args.command](args, config)
    except (ValueError, OSError) as err:
        print(f"conceptsurv {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
