"""Single entry point: data generation, the two training stages, evaluation,
the consistency probe, the ablation and transfer experiments, and exports.

Exit codes: 0 success, 1 validation error (single-line diagnostic),
2 runtime failure. Every run writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys

import torch

from . import evaluation, pipeline, synthgen
from .config import Config, ConfigError
from .losses import BatchError
from .synthgen import DatasetError, RenderError

VALIDATION_ERRORS = (ConfigError, DatasetError, RenderError, BatchError,
                     evaluation.ProtocolError, ValueError, KeyError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the CLI contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths: list[str]) -> dict:
    hashes = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in ("meta.json", "train/manifest.jsonl",
                         "query/manifest.jsonl", "gallery/manifest.jsonl"):
                f = os.path.join(p, name)
                if os.path.exists(f):
                    hashes[f] = _sha256_file(f)
        elif os.path.exists(p):
            hashes[p] = _sha256_file(p)
    return hashes


def write_manifest(out_dir: str, command: str, argv: list[str], config: Config,
                   inputs: list[str], outputs: list[str], started: str):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "config_digest": config.digest(),
        "seed": config.train.seed,
        "inputs": _input_hashes(inputs),
        "outputs": sorted(outputs),
        "started_at": started,
        "finished_at": _now(),
    }
    path = os.path.join(out_dir, f"{command}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def load_config(args, overrides: list[str]) -> Config:
    cfg = Config.from_json(args.config) if args.config else Config()
    env_seed = os.environ.get("PIVL_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"PIVL_SEED must be an integer, got {env_seed!r}")
    for dotted, raw in _pair_overrides(overrides):
        cfg.apply_override(dotted, raw)
    return cfg.validate()


def _pair_overrides(tokens: list[str]):
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unknown flag {tok!r} (overrides look like --section.field value)")
        if "=" in tok:
            dotted, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok!r} is missing a value")
            dotted, raw = tok[2:], tokens[i + 1]
            i += 2
        yield dotted, raw


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"cannot parse seed list {raw!r}")


def _parse_flags(raw: str) -> frozenset:
    flags = frozenset(f for f in raw.replace(",", " ").upper().split() if f)
    if not flags <= pipeline.VALID_FLAGS:
        raise ConfigError(f"unknown ablation flags in {raw!r} (valid: H, P, F)")
    return flags


def build_parser() -> _Parser:
    parser = _Parser(prog="pivl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False, out=True):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--workers", type=int, default=1,
                       help="worker parallelism (default 1 for reproducibility)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from `gen`")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen", help="render the synthetic dataset"))

    p = sub.add_parser("stage1", help="prompt tuning against the frozen encoder")
    common(p, data=True)
    p.add_argument("--no-part-phase", action="store_true",
                   help="skip the part-informed phase (identity warm-up only)")

    p = sub.add_parser("stage2", help="encoder training under the full objective")
    common(p, data=True)
    p.add_argument("--prompts", required=True,
                   help="prompt checkpoint base path (from stage1)")
    p.add_argument("--flags", default="", help="ablation flags, e.g. P,F")

    p = sub.add_parser("eval", help="retrieval evaluation on query/gallery")
    common(p, data=True, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--probe", action="store_true", help="include consistency probe")

    p = sub.add_parser("probe", help="within-part consistency probe only")
    common(p, data=True, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("ablate", help="run the B / B+H / B+P / B+P+F comparison")
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--no-probe", action="store_true")

    p = sub.add_parser("transfer", help="student-transfer experiment")
    common(p)
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("export", help="export embeddings to CSV")
    common(p, data=True, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="gallery", choices=("train", "query", "gallery"))
    p.add_argument("--csv", required=True, help="output CSV path")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        config = load_config(args, extra)
        torch.set_num_threads(max(1, args.workers))
        started = _now()
        return _dispatch(args, config, argv, started)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, config: Config, argv, started) -> int:
    command = args.command
    if command == "gen":
        split = synthgen.generate_dataset(config.data, seed=config.train.seed,
                                          workers=args.workers)
        synthgen.save_dataset(split, args.out)
        outputs = [os.path.join(args.out, n) for n in ("meta.json", "train", "query", "gallery")]
        write_manifest(args.out, command, argv, config, [args.config], outputs, started)
        print(f"dataset written to {args.out} "
              f"({len(split.train)} train / {len(split.query)} query / "
              f"{len(split.gallery)} gallery)")
        return 0

    if command == "stage1":
        split = synthgen.load_dataset(args.data)
        out_path = os.path.join(args.out, "prompts")
        log_path = os.path.join(args.out, "stage1_log.jsonl")
        pipeline.run_stage1(split, config, part_phase=not args.no_part_phase,
                            out_path=out_path, log_path=log_path)
        write_manifest(args.out, command, argv, config, [args.config, args.data],
                       [out_path + ".json", out_path + ".npz", log_path], started)
        print(f"prompts written to {out_path}.npz")
        return 0

    if command == "stage2":
        split = synthgen.load_dataset(args.data)
        from .prompts import load_prompts

        prompts = load_prompts(args.prompts)
        flags = _parse_flags(args.flags)
        out_path = os.path.join(args.out, "stage2.pt")
        log_path = os.path.join(args.out, "stage2_log.jsonl")
        pipeline.run_stage2(split, prompts, config, flags,
                            out_path=out_path, log_path=log_path)
        write_manifest(args.out, command, argv, config,
                       [args.config, args.data, args.prompts + ".npz"],
                       [out_path, out_path + ".json", log_path], started)
        print(f"checkpoint written to {out_path}")
        return 0

    if command == "eval":
        split = synthgen.load_dataset(args.data)
        system, ck_config = pipeline.load_checkpoint(args.checkpoint)
        doc = evaluation.evaluate_system(system, split, probe=args.probe,
                                         seed=config.train.seed,
                                         config_digest=ck_config.digest())
        evaluation.write_report(doc, args.report)
        out_dir = os.path.dirname(args.report) or "."
        write_manifest(out_dir, command, argv, config,
                       [args.config, args.data, args.checkpoint], [args.report], started)
        print(json.dumps(doc, sort_keys=True))
        return 0

    if command == "probe":
        split = synthgen.load_dataset(args.data)
        system, _ = pipeline.load_checkpoint(args.checkpoint)
        scores = evaluation.part_consistency_probe(system, split.query + split.gallery,
                                                   seed=config.train.seed)
        evaluation.write_report(scores, args.report)
        out_dir = os.path.dirname(args.report) or "."
        write_manifest(out_dir, command, argv, config,
                       [args.config, args.data, args.checkpoint], [args.report], started)
        print(json.dumps(scores, sort_keys=True))
        return 0

    if command == "ablate":
        table = evaluation.ablation_harness(config, seeds=_parse_seeds(args.seeds),
                                            out_dir=args.out, probe=not args.no_probe)
        write_manifest(args.out, command, argv, config, [args.config],
                       [os.path.join(args.out, "ablation.json")], started)
        for row in table["rows"]:
            cells = [f"{row['variant']:>6}",
                     f"rank1={row['rank1']:.4f}", f"mAP={row['map']:.4f}",
                     f"dRank1={row['delta_rank1']:+.4f}", f"dmAP={row['delta_map']:+.4f}"]
            if "part_probe_acc" in row:
                cells.append(f"probe={row['part_probe_acc']:.4f}")
            print("  ".join(cells))
        return 0

    if command == "transfer":
        table = evaluation.transfer_experiment(config, seeds=_parse_seeds(args.seeds),
                                               out_dir=args.out)
        write_manifest(args.out, command, argv, config, [args.config],
                       [os.path.join(args.out, "transfer.json")], started)
        for arm, row in sorted(table["summary"].items()):
            print(f"{arm:>14}  rank1={row['rank1_median']:.4f}  mAP={row['map_median']:.4f}")
        return 0

    if command == "export":
        split = synthgen.load_dataset(args.data)
        system, _ = pipeline.load_checkpoint(args.checkpoint)
        gallery = evaluation.extract_embeddings(system, getattr(split, args.split))
        evaluation.export_embeddings_csv(gallery, args.csv)
        out_dir = os.path.dirname(args.csv) or "."
        write_manifest(out_dir, command, argv, config,
                       [args.config, args.data, args.checkpoint], [args.csv], started)
        print(f"embeddings written to {args.csv}")
        return 0

    raise ConfigError(f"unknown command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
