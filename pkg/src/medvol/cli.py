"""``medvol`` command line: phantoms, targets, scoring, toy training and evaluation.

Every subcommand reads defaults from an optional INI file (``--config``)
whose values any flag, or ``--set section.key=value``, overrides.  Record
outputs are JSON lines preceded by a header line naming the record kind and
format version.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import shlex
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from medvol import __version__
from medvol.evalmetrics import evaluate
from medvol.experiments import corpus_specs
from medvol.grpo import GrpoConfig, Sample, TrainConfig, TrainingDivergedError, evaluate_policy, rng_for, train
from medvol.propagate import PropagatorSpec
from medvol.reward import InvalidSampleError, RewardConfig, RewardScorer, RewardWeights
from medvol.targets import EmptyTargetError, TopKConfig, derive_target, rank_slices_by_visibility
from medvol.volmask import (PhantomSpec, VolumeFormatError, generate_phantom, read_mask, read_volume,
                            write_mask, write_volume)

logger = logging.getLogger("medvol")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_DATA = 5

RECORD_FORMAT = "medvol-records"
RECORD_VERSION = 1
MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- configuration ----------------------------------------------------------

WEIGHT_KEYS = {"w_format": "format", "w_axial": "axial", "w_spatial": "spatial", "w_consistency": "consistency"}
SECTIONS = {
    "run": {"seed"},
    "topk": {f.name for f in dataclasses.fields(TopKConfig)} - {"seed"},
    "reward": {"delta", "connectivity", "min_area", "prompt_boxes", *WEIGHT_KEYS},
    "propagator": {f.name for f in dataclasses.fields(PropagatorSpec)},
    "grpo": {f.name for f in dataclasses.fields(GrpoConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"grpo", "reward", "topk", "seed"},
    "corpus": {"size", "noise", "height", "width", "depth", "kinds"},
}


def load_settings(path: str | None, overrides: Sequence[str]) -> dict[str, dict[str, str]]:
    """Raw string settings per section: config file first, then ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        if not Path(path).is_file():
            raise CliError(EXIT_USAGE, f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except (configparser.Error, OSError) as exc:
            raise CliError(EXIT_USAGE, f"cannot read config {path}: {exc}") from exc
    settings = {name: dict(parser[name]) for name in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise CliError(EXIT_USAGE, f"--set expects section.key=value, got {item!r}")
        settings.setdefault(section, {})[name] = value.strip()
    for section, values in settings.items():
        if section not in SECTIONS:
            raise CliError(EXIT_USAGE, f"unknown config section [{section}]")
        unknown = set(values) - SECTIONS[section]
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    return settings


def _convert(value: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(value)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(shlex.split(value))
        if default is None:
            return None if value.lower() in ("", "none") else int(value)
        return value
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad value for {key}: {value!r}") from exc


def _build(cls, values: dict[str, str], section: str, **fixed):
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    kwargs = {k: _convert(v, defaults.get(k), f"{section}.{k}") for k, v in values.items()}
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid [{section}] settings: {exc}") from exc


def seed_from(settings: dict, args: argparse.Namespace, required: bool = True) -> int | None:
    if args.seed is not None:
        return args.seed
    if "seed" in settings.get("run", {}):
        return _convert(settings["run"]["seed"], 0, "run.seed")
    if required:
        raise CliError(EXIT_USAGE, f"{args.command} needs a seed (--seed or [run] seed)")
    return None


def topk_config(settings: dict, args: argparse.Namespace, seed: int) -> TopKConfig:
    values = dict(settings.get("topk", {}))
    if getattr(args, "k", None) is not None:
        values["k"] = str(args.k)
    return _build(TopKConfig, values, "topk", seed=seed)


def reward_config(settings: dict, args: argparse.Namespace) -> RewardConfig:
    values = dict(settings.get("reward", {}))
    weights = _build(RewardWeights, {WEIGHT_KEYS[k]: values.pop(k) for k in list(values) if k in WEIGHT_KEYS},
                     "reward")
    if getattr(args, "weights", None) is not None:
        parts = args.weights.split(",")
        if len(parts) != 4:
            raise CliError(EXIT_USAGE, "--weights expects four comma-separated values")
        weights = _build(RewardWeights, dict(zip(("format", "axial", "spatial", "consistency"), parts)), "reward")
    if getattr(args, "no_rc", False):
        weights = dataclasses.replace(weights, consistency=0.0)
    if getattr(args, "delta", None) is not None:
        values["delta"] = str(args.delta)
    propagator = _build(PropagatorSpec, settings.get("propagator", {}), "propagator")
    return _build(RewardConfig, values, "reward", weights=weights, propagator=propagator)


def train_config(settings: dict, args: argparse.Namespace, seed: int) -> TrainConfig:
    grpo_values = dict(settings.get("grpo", {}))
    for flag, key in (("steps", "steps"), ("group_size", "group_size"), ("lr", "lr")):
        if getattr(args, flag, None) is not None:
            grpo_values[key] = str(getattr(args, flag))
    grpo = _build(GrpoConfig, grpo_values, "grpo")
    train_values = dict(settings.get("train", {}))
    if args.no_cold_start:
        train_values["cold_start"] = "false"
    return _build(TrainConfig, train_values, "train", grpo=grpo, reward=reward_config(settings, args),
                  topk=topk_config(settings, args, seed), seed=seed)


# --- record I/O -------------------------------------------------------------


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_records(path: str | None, kind: str, records: Iterable[dict]) -> None:
    """Header line then one JSON object per line; ``None`` or ``-`` writes to stdout."""
    lines = [_dump({"format": RECORD_FORMAT, "version": RECORD_VERSION, "kind": kind, "tool": __version__})]
    lines += [_dump(r) for r in records]
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def read_records(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty record file")
    header = json.loads(lines[0])
    if header.get("format") != RECORD_FORMAT:
        raise ValueError(f"{path}: not a {RECORD_FORMAT} file")
    return header, [json.loads(line) for line in lines[1:]]


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_USAGE, f"{what} not found: {path}")
    return p


def _load_mask(path: Path):
    try:
        return read_mask(path)
    except VolumeFormatError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc


def _load_volume(path: Path):
    try:
        return read_volume(path)
    except VolumeFormatError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc


# --- corpus -----------------------------------------------------------------


def _specs_for(settings: dict, args: argparse.Namespace) -> list[PhantomSpec]:
    if args.specs is not None:
        path = _require_file(args.specs, "spec file")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return [PhantomSpec.from_dict(d) for d in data]
        except (ValueError, TypeError) as exc:
            raise CliError(EXIT_DATA, f"{path}: bad phantom specs: {exc}") from exc
    seed = seed_from(settings, args)
    corpus = settings.get("corpus", {})
    size = args.count if args.count is not None else _convert(corpus.get("size", "32"), 0, "corpus.size")
    dims = tuple(_convert(corpus.get(k, "32"), 0, f"corpus.{k}") for k in ("height", "width", "depth"))
    noise = _convert(corpus.get("noise", "10"), 0.0, "corpus.noise")
    kinds = tuple(shlex.split(args.kinds or corpus.get("kinds", "sphere two-blob")))
    try:
        return corpus_specs(size, seed, dims, noise, kinds)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc


def write_corpus(specs: Sequence[PhantomSpec], out_dir: Path) -> dict:
    """Write one ``.evv``/``.evm`` pair per spec plus a manifest with checksums."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        items = []
        for i, spec in enumerate(specs):
            name = f"{spec.kind}-{i:03d}"
            volume, mask = generate_phantom(spec)
            vol_path, mask_path = out_dir / f"{name}.evv", out_dir / f"{name}.evm"
            write_volume(volume, vol_path)
            write_mask(mask, mask_path)
            items.append({
                "name": name, "spec": spec.to_dict(),
                "volume": vol_path.name, "mask": mask_path.name,
                "sha256": {"volume": sha256(vol_path), "mask": sha256(mask_path)},
            })
        manifest = {"format": "medvol-manifest", "version": RECORD_VERSION, "items": items}
        (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write corpus to {out_dir}: {exc}") from exc
    return manifest


def load_corpus(corpus_dir: str | Path) -> list[Sample]:
    """Samples listed in a corpus manifest, with checksums verified."""
    root = Path(corpus_dir)
    manifest_path = _require_file(str(root / MANIFEST_NAME), "corpus manifest")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"{manifest_path}: {exc}") from exc
    samples = []
    for item in manifest.get("items", []):
        vol_path = _require_file(str(root / item["volume"]), "volume")
        mask_path = _require_file(str(root / item["mask"]), "mask")
        for what, path in (("volume", vol_path), ("mask", mask_path)):
            if sha256(path) != item["sha256"][what]:
                raise CliError(EXIT_DATA, f"checksum mismatch for {path}")
        samples.append(Sample(_load_volume(vol_path), _load_mask(mask_path), item["name"]))
    return samples


# --- subcommands ------------------------------------------------------------


def cmd_gen_phantoms(args: argparse.Namespace, settings: dict) -> int:
    manifest = write_corpus(_specs_for(settings, args), Path(args.out_dir))
    logger.info("wrote %d phantoms to %s", len(manifest["items"]), args.out_dir)
    return EXIT_OK


def cmd_derive_targets(args: argparse.Namespace, settings: dict) -> int:
    seed = seed_from(settings, args)
    cfg = topk_config(settings, args, seed)
    paths = [_require_file(p, "mask file") for p in args.masks]
    records, failed = [], False
    for i, path in enumerate(paths):
        record: dict[str, Any] = {"file": str(path)}
        try:
            mask = read_mask(path)
            anchor = derive_target(mask, cfg, rng_for(seed, i))
        except (VolumeFormatError, EmptyTargetError) as exc:
            record["error"] = str(exc)
            failed = True
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
        else:
            areas = dict(rank_slices_by_visibility(mask))
            record.update(slice=anchor.key_slice, area=areas[anchor.key_slice],
                          bbox_2d_list=[b.as_list() for b in anchor.boxes])
        records.append(record)
    write_records(args.output, "anchors", records)
    return EXIT_DATA if failed else EXIT_OK


def _response_texts(path: Path) -> list[str]:
    """One response per line: a JSON string, ``{"response": ...}``, or raw text."""
    texts = []
    for line in path.read_text(encoding="utf-8", errors="replace").splitlines():
        try:
            value = json.loads(line)
        except ValueError:
            value = line
        if isinstance(value, dict) and isinstance(value.get("response"), str):
            value = value["response"]
        texts.append(value if isinstance(value, str) else line)
    return texts


def cmd_score(args: argparse.Namespace, settings: dict) -> int:
    cfg = reward_config(settings, args)
    responses = _require_file(args.responses, "responses file")
    gt = _load_mask(_require_file(args.gt, "ground-truth mask"))
    volume = None
    if args.volume is not None:
        volume = _load_volume(_require_file(args.volume, "volume"))
    elif cfg.weights.consistency:
        raise CliError(EXIT_USAGE, "scoring the consistency term needs --volume (or pass --no-rc)")
    try:
        scorer = RewardScorer(gt, volume, cfg)
    except InvalidSampleError as exc:
        raise CliError(EXIT_DATA, f"{args.gt}: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    try:
        texts = _response_texts(responses)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {responses}: {exc}") from exc
    records = [{"line": n, **scorer.score(text).to_dict()} for n, text in enumerate(texts, start=1)]
    write_records(args.output, "reward-breakdowns", records)
    return EXIT_OK


def params_document(cfg: TrainConfig, policy, params: np.ndarray, initial: np.ndarray) -> dict:
    return {
        "format": "medvol-params", "version": RECORD_VERSION, "seed": cfg.seed,
        "n_queries": policy.n_queries, "dims": [policy.height, policy.width, policy.depth],
        "max_boxes": policy.max_boxes, "slice_offsets": policy.slice_offsets,
        "params": params.tolist(), "initial_params": initial.tolist(),
    }


def cmd_train_toy(args: argparse.Namespace, settings: dict) -> int:
    seed = seed_from(settings, args)
    cfg = train_config(settings, args, seed)
    if args.corpus is not None:
        samples = load_corpus(args.corpus)
    else:
        args.specs, args.count, args.kinds = None, args.corpus_size, None
        samples = [Sample(*generate_phantom(s), f"{s.kind}-{i:03d}")
                   for i, s in enumerate(_specs_for(settings, args))]
    if not samples:
        raise CliError(EXIT_DATA, "training corpus is empty")
    out_dir = Path(args.out_dir)
    log: list[dict] = []
    try:
        result = train(samples, cfg, on_step=lambda r: log.append({"record": "step", **r}))
    except TrainingDivergedError as exc:
        write_records(str(out_dir / "log.jsonl"), "train-log", log + [{"record": "diverged", "error": str(exc)}])
        raise CliError(EXIT_DIVERGED, str(exc)) from exc
    except (InvalidSampleError, EmptyTargetError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    if args.evaluate:
        ev = evaluate_policy(result.policy, result.params, samples,
                             dataclasses.replace(cfg.reward, weights=RewardWeights()), args.eval_samples, seed)
        log.append({"record": "evaluation", "modal_accuracy": ev.modal_accuracy, "mean_reward": ev.mean_reward,
                    "greedy_reward": ev.greedy_reward, "mean_dsc": ev.mean_dsc})
    write_records(str(out_dir / "log.jsonl"), "train-log", log)
    doc = params_document(cfg, result.policy, result.params, result.initial_params)
    try:
        (out_dir / "params.json").write_text(_dump(doc) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write params: {exc}") from exc
    return EXIT_OK


def _slice_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    try:
        if not sep:
            raise ValueError(text)
        return int(lo), int(hi)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"--slices expects lo:hi, got {text!r}") from exc


def cmd_eval(args: argparse.Namespace, settings: dict) -> int:
    pred = _load_mask(_require_file(args.pred, "predicted mask"))
    gt = _load_mask(_require_file(args.gt, "ground-truth mask"))
    restriction = _slice_range(args.slices) if args.slices else None
    try:
        report = evaluate(pred, gt, restriction)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    record = {"pred": args.pred, "gt": args.gt, "slices": list(restriction) if restriction else None,
              **report.to_dict()}
    write_records(args.output, "metric-report", [record])
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medvol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"medvol {__version__}")
    parser.add_argument("--config", help="INI file with [run], [topk], [reward], [propagator], [grpo], "
                                         "[train] and [corpus] sections")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--seed", type=int, help="global seed; overrides [run] seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="write a phantom corpus and its manifest")
    p.add_argument("out_dir")
    p.add_argument("--specs", help="JSON list of phantom specs; otherwise a seeded random corpus")
    p.add_argument("--count", type=int, help="corpus size (default [corpus] size or 32)")
    p.add_argument("--kinds", help='space-separated kinds to cycle through, e.g. "sphere two-blob"')
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("derive-targets", help="top-K evidence anchors from ground-truth masks")
    p.add_argument("masks", nargs="+")
    p.add_argument("--k", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_derive_targets)

    p = sub.add_parser("score", help="reward breakdown for each response line")
    p.add_argument("responses")
    p.add_argument("--gt", required=True, help="ground-truth mask (.evm)")
    p.add_argument("--volume", help="image volume (.evv); needed for the consistency term")
    p.add_argument("--weights", help="format,axial,spatial,consistency")
    p.add_argument("--no-rc", action="store_true", help="zero the consistency weight")
    p.add_argument("--delta", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-toy", help="cold start plus GRPO on the toy policy")
    p.add_argument("out_dir")
    p.add_argument("--corpus", help="directory written by gen-phantoms")
    p.add_argument("--corpus-size", type=int, help="size of a generated corpus when --corpus is absent")
    p.add_argument("--steps", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--weights", help="format,axial,spatial,consistency")
    p.add_argument("--no-rc", action="store_true")
    p.add_argument("--delta", type=int)
    p.add_argument("--no-cold-start", action="store_true")
    p.add_argument("--evaluate", action="store_true", help="append an evaluation record to the log")
    p.add_argument("--eval-samples", type=int, default=16)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="DSC/IoU of a predicted mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--slices", help="restrict to slices lo:hi (half-open)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config, args.overrides)
        return args.func(args, settings)
    except CliError as exc:
        print(f"medvol {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
