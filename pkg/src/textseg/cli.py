"""Command-line entry point: ``textseg <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 remote endpoint
failure. Errors are reported on stderr as a single JSON line.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable

import numpy as np
from PIL import Image

from . import __version__
from .dataset import DEFAULT_TEMPLATE, CorpusConfig, build_dataset
from .errors import InferenceError, TextsegError
from .evaluation import EvalConfig, ParamCounts, evaluate, overhead
from .grpo import GrpoConfig
from .inference import HttpChatClient, OracleClient, RecordingClient, ReplayClient, run_inference
from .masks import (
    ClassMap,
    InstanceMap,
    SemanticMask,
    instance_table_path,
    instance_to_semantic,
    load_instances,
    load_semantic,
    read_id_raster,
    save_instances,
    save_semantic,
)
from .postprocess import connected_instances, extract_boundaries, load_boundary_map, watershed_instances
from .rrle import decode_rrle, encode_rrle

log = logging.getLogger("textseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REMOTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class StrictFailure(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config handling --------------------------------------------------------

# Hard defaults per command; parser defaults are None so explicit flags are detectable.
DEFAULTS: dict[str, dict[str, Any]] = {
    "common": {"seed": 0, "jobs": os.cpu_count() or 1, "strict": False},
    "synth": {"count": 10, "sizes": None, "min_size": 48, "max_size": 200},
    "encode": {},
    "decode": {"report": None},
    "build-dataset": {
        "patch": 32,
        "patches_per_image": 10,
        "template": DEFAULT_TEMPLATE,
    },
    "infer": {
        "oracle": None,
        "cache": None,
        "endpoint": None,
        "model": "default",
        "token_env": "TEXTSEG_API_TOKEN",
        "timeout_ms": 60000,
        "max_in_flight": 8,
        "retries": 2,
        "backoff_s": 0.5,
        "patch": 32,
        "template": DEFAULT_TEMPLATE,
        "record": None,
    },
    "postprocess": {"boundary": None, "threshold": 0.5, "background_id": None},
    "evaluate": {
        "classes": None,
        "empty": "paper",
        "gsd": None,
        "area_class": None,
        "base": None,
        "projection": 0,
        "decoder": 0,
    },
    "overhead": {"projection": 0, "decoder": 0},
    "grpo-demo": {"steps": 200},
}


def _read_config(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    try:
        if p.suffix == ".toml":
            import tomli

            return tomli.loads(text)
        return json.loads(text)
    except ValueError as e:
        raise UsageError(f"cannot parse config {path}: {e}") from None


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Hard defaults < config file < explicit flags."""
    options = set(vars(args)) - {"command", "config", "func"}
    cfg = {k: None for k in options}
    cfg.update(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if args.config:
        raw = _read_config(args.config)
        if isinstance(raw.get(command), dict):
            section = raw[command]
        else:
            section = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        section = {k.replace("-", "_"): v for k, v in section.items()}
        unknown = set(section) - options
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(section)
        if command == "grpo-demo" and isinstance(raw.get("grpo"), dict):
            cfg["grpo"] = raw["grpo"]
    for k in options:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    return cfg


def _write_manifest(out: Path, command: str, cfg: dict, **extra) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}_manifest.json"
    body = {"command": command, "version": __version__, "config": cfg, **extra}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _positive(name: str, v, allow_zero: bool = False):
    if v is None:
        return
    if v < 0 or (v == 0 and not allow_zero):
        raise UsageError(f"--{name.replace('_', '-')} must be {'>= 0' if allow_zero else '> 0'}")


# --- mask helpers -----------------------------------------------------------


def _load_mask_any(path: Path, cm: ClassMap) -> SemanticMask:
    """Semantic mask from a PNG, or from an instance map when a sidecar table exists."""
    if instance_table_path(path).exists():
        return instance_to_semantic(load_instances(path), cm.background_id)
    return load_semantic(path, cm)


class _MaskSource:
    """Lazy loader that also checks the paired image is readable and the same size."""

    def __init__(self, mask_path: Path, image_path: Path, cm: ClassMap):
        self.mask_path, self.image_path, self.cm = mask_path, image_path, cm

    def __call__(self) -> SemanticMask:
        with Image.open(self.image_path) as im:
            dims = (im.height, im.width)
        m = _load_mask_any(self.mask_path, self.cm)
        if m.shape != dims:
            raise TextsegError(f"{self.image_path.name}: image {dims} and mask {m.shape} sizes differ")
        return m


def _pngs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.glob("*.png"))
    return [path]


# --- commands ---------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    from .synth import scene_sizes, write_corpus

    out = Path(cfg["out"])
    rng = np.random.default_rng(cfg["seed"])
    if cfg["sizes"]:
        sizes = []
        for tok in str(cfg["sizes"]).split(","):
            h, _, w = tok.strip().lower().partition("x")
            sizes.append((int(h), int(w or h)))
    else:
        sizes = scene_sizes(rng, cfg["count"], cfg["min_size"], cfg["max_size"])
    names = write_corpus(out, cfg["seed"], len(sizes), sizes)
    _write_manifest(out, "synth", cfg, scenes=names, sizes=sizes)
    print(f"wrote {len(names)} scenes to {out}")
    return EXIT_OK


def cmd_encode(cfg: dict) -> int:
    cm = ClassMap.load(cfg["classes"])
    m = load_semantic(cfg["mask"], cm)
    text = encode_rrle(m, cm)
    Path(cfg["out"]).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_decode(cfg: dict) -> int:
    cm = ClassMap.load(cfg["classes"])
    text = Path(cfg["text"]).read_text(encoding="utf-8")
    rep = decode_rrle(text, cm, cfg["height"], cfg["width"])
    save_semantic(cfg["out"], rep.mask)
    report_path = cfg["report"] or str(Path(cfg["out"]).with_suffix(".report.json"))
    Path(report_path).write_text(json.dumps(rep.counters(), indent=2, sort_keys=True) + "\n")
    if not rep.clean:
        log.warning("decode needed recovery: %s", rep.counters())
        if cfg["strict"]:
            raise StrictFailure(f"decode needed recovery: {rep.counters()}")
    return EXIT_OK


def cmd_build_dataset(cfg: dict) -> int:
    corpus = Path(cfg["corpus"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cm = ClassMap.load(corpus / "classes.json")
    ccfg = CorpusConfig(
        patch_height=cfg["patch"],
        patch_width=cfg["patch"],
        patches_per_image=cfg["patches_per_image"],
        seed=cfg["seed"],
        instruction_template=cfg["template"],
        jobs=cfg["jobs"],
    )
    items, dims = [], []
    for gt_path in _pngs(corpus / "gt"):
        image_rel = f"images/{gt_path.name}"
        items.append((image_rel, _MaskSource(gt_path, corpus / image_rel, cm)))
        dims.append(None)
    if not items:
        raise TextsegError(f"no ground-truth masks under {corpus / 'gt'}")
    res = build_dataset(items, ccfg, out / "dataset.jsonl", cm, dims)
    body = res.manifest(ccfg, out / "dataset.jsonl")
    body["corpus_config"] = body.pop("config")
    _write_manifest(out, "build-dataset", cfg, **body)
    print(f"wrote {res.written} samples to {out / 'dataset.jsonl'}")
    if res.errors:
        log.warning("%d corpus item(s) failed", len(res.errors))
        if cfg["strict"]:
            raise StrictFailure(f"{len(res.errors)} corpus item(s) failed")
    return EXIT_OK


def _make_client(cfg: dict, cm: ClassMap, images: list[Path]):
    sources = [k for k in ("oracle", "cache", "endpoint") if cfg[k]]
    if len(sources) != 1:
        raise UsageError("exactly one of --oracle, --cache, --endpoint is required")
    if cfg["oracle"]:
        src = Path(cfg["oracle"])
        truth = {}
        for img in images:
            gt = src / img.name if src.is_dir() else src
            truth[img.name] = _load_mask_any(gt, cm)
        client = OracleClient(truth, cm)
    elif cfg["cache"]:
        client = ReplayClient(cfg["cache"])
    else:
        client = HttpChatClient(cfg["endpoint"], cfg["model"], cfg["token_env"], cfg["timeout_ms"])
    if cfg["record"]:
        client = RecordingClient(client, cfg["record"])
    return client


def cmd_infer(cfg: dict) -> int:
    cm = ClassMap.load(cfg["classes"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    images = _pngs(Path(cfg["image"]))
    if not images:
        raise TextsegError(f"no images found at {cfg['image']}")
    client = _make_client(cfg, cm, images)
    manifests, failed_images = [], []
    for img in images:
        with Image.open(img) as im:
            h, w = im.height, im.width
        try:
            mask, man = run_inference(
                img.name, h, w, client, cm,
                patch_h=cfg["patch"], patch_w=cfg["patch"], template=cfg["template"],
                max_in_flight=cfg["max_in_flight"], retries=cfg["retries"], backoff_s=cfg["backoff_s"],
            )
        except InferenceError as e:
            failed_images.append({"image": img.name, "error": str(e)})
            continue
        save_semantic(out / img.name, mask)
        manifests.append(man)
    _write_manifest(out, "infer", cfg, images=manifests, failed_images=failed_images)
    if failed_images and len(failed_images) == len(images):
        raise InferenceError(f"inference failed for every image; first: {failed_images[0]['error']}")
    partial = failed_images or any(m["failed_tiles"] for m in manifests)
    if partial:
        log.warning("inference finished with failed tiles or images")
        if cfg["strict"]:
            raise StrictFailure("inference finished with failures", EXIT_REMOTE)
    print(f"segmented {len(manifests)} image(s) into {out}")
    return EXIT_OK


def cmd_postprocess(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    masks = _pngs(Path(cfg["mask"]))
    bg = cfg["background_id"]
    if bg is None:
        bg = ClassMap.load(cfg["classes"]).background_id if cfg.get("classes") else 0
    written = []
    for path in masks:
        s = SemanticMask(read_id_raster(path))
        if cfg["boundary"]:
            bpath = Path(cfg["boundary"])
            b = load_boundary_map(bpath / path.name if bpath.is_dir() else bpath)
        else:
            b = extract_boundaries(s)
        inst = watershed_instances(s, b, cfg["threshold"], bg)
        save_instances(out / path.name, inst)
        written.append({"mask": path.name, "instances": len(inst.classes)})
    _write_manifest(out, "postprocess", cfg, outputs=written)
    print(f"wrote {len(written)} instance map(s) to {out}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    pred_dir, gt_dir, out = Path(cfg["pred"]), Path(cfg["gt"]), Path(cfg["out"])
    cm = ClassMap.load(cfg["classes_file"]) if cfg.get("classes_file") else None
    gts = [p for p in _pngs(gt_dir) if instance_table_path(p).exists()]
    if not gts:
        raise TextsegError(f"no ground-truth instance maps under {gt_dir}")
    bg = cm.background_id if cm is not None else 0
    preds, truths, warnings, semantic = [], [], [], []
    for g in gts:
        gt = load_instances(g)
        pp = pred_dir / g.name
        if pp.exists() and instance_table_path(pp).exists():
            preds.append(load_instances(pp))
        elif pp.exists():
            # a semantic map: each connected same-class region counts as one instance
            preds.append(connected_instances(SemanticMask(read_id_raster(pp)), bg))
            semantic.append(g.name)
        else:
            warnings.append(f"missing prediction for {g.name}; scored as empty")
            preds.append(InstanceMap(np.zeros(gt.shape, dtype=np.int32), {}))
        truths.append(gt)
    classes = None
    if cfg["classes"]:
        classes = tuple(
            (cm.id_of(c) if cm is not None and not c.strip().isdigit() else int(c))
            for c in str(cfg["classes"]).split(",")
        )
    params = ParamCounts(cfg["base"], cfg["projection"], cfg["decoder"]) if cfg["base"] is not None else None
    area_class = cfg["area_class"]
    if isinstance(area_class, str) and cm is not None and not area_class.isdigit():
        area_class = cm.id_of(area_class)
    ecfg = EvalConfig(classes, cfg["empty"], cfg["gsd"], int(area_class) if area_class is not None else None, params)
    report = evaluate(preds, truths, ecfg, cm)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table())
    (out / "report.csv").write_text(report.to_csv())
    _write_manifest(
        out, "evaluate", cfg, images=[g.name for g in gts], semantic_predictions=semantic, warnings=warnings
    )
    sys.stdout.write(report.to_table())
    for w in warnings:
        log.warning(w)
    if warnings and cfg["strict"]:
        raise StrictFailure(f"{len(warnings)} prediction(s) missing")
    return EXIT_OK


def cmd_overhead(cfg: dict) -> int:
    pct = overhead(ParamCounts(cfg["base"], cfg["projection"], cfg["decoder"]))
    print(f"{pct:.2f}%")
    return EXIT_OK


def cmd_grpo_demo(cfg: dict) -> int:
    from .demo import DEMO_CONFIG, single_target_demo

    gcfg = DEMO_CONFIG
    if cfg.get("grpo"):
        gcfg = GrpoConfig.from_dict({**asdict(DEMO_CONFIG), **cfg["grpo"]})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    res = single_target_demo(seed=cfg["seed"], steps=cfg["steps"], cfg=gcfg)
    keys = ("step", "mean_reward", "expected_reward", "loss", "grpo_loss", "kl", "clipped")
    with (out / "curve.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for s in res.history.steps:
            w.writerow([s[k] if isinstance(s[k], int) else f"{s[k]:.10g}" for k in keys])
    stats = {
        "target": res.target,
        "initial_mean_reward": res.initial_reward,
        "initial_expected_reward": res.initial_expected_reward,
        "final_mean_reward_last10": res.final_reward,
        "final_expected_reward": res.final_expected_reward,
        "sft_final_loss": res.sft_losses[-1],
        "grpo_config": asdict(gcfg),
    }
    (out / "final_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "grpo-demo", {k: v for k, v in cfg.items() if k != "grpo"}, grpo_config=asdict(gcfg))
    print(
        f"mean reward {res.initial_reward:.3f} -> {res.final_reward:.3f} "
        f"(expected {res.initial_expected_reward:.3f} -> {res.final_expected_reward:.3f})"
    )
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textseg", description="Text-encoded segmentation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="TOML or JSON file with option values (flags override it)")
        p.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
        p.add_argument("--jobs", type=int, help="worker threads (default: logical cores)")
        p.add_argument("--strict", action="store_true", default=None, help="exit nonzero on partial failures")
        return p

    p = add("synth", cmd_synth, "Write a synthetic corpus of instance maps and placeholder images.")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of scenes (default 10)")
    p.add_argument("--sizes", help="comma-separated HxW sizes, overrides --count")
    p.add_argument("--min-size", type=int, help="smallest random side (default 48)")
    p.add_argument("--max-size", type=int, help="largest random side (default 200)")

    p = add("encode", cmd_encode, "Encode a semantic mask PNG as RRLE text.")
    p.add_argument("mask")
    p.add_argument("--classes", required=True, help="class-map JSON")
    p.add_argument("--out", required=True)

    p = add("decode", cmd_decode, "Decode RRLE text into a semantic mask PNG.")
    p.add_argument("text")
    p.add_argument("--classes", required=True, help="class-map JSON")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="decode report path (default: <out>.report.json)")

    p = add("build-dataset", cmd_build_dataset, "Sample patches and write an instruction JSONL dataset.")
    p.add_argument("corpus", help="directory with classes.json, images/ and gt/")
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, help="square patch side in pixels (default 32)")
    p.add_argument("--patches-per-image", type=int, help="default 10")
    p.add_argument("--template", help="instruction template with {h} {w} {top} {left}")

    p = add("infer", cmd_infer, "Tiled inference with an oracle, cached or HTTP model.")
    p.add_argument("image", help="image PNG or directory of PNGs")
    p.add_argument("--classes", required=True, help="class-map JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", help="ground-truth mask file or directory (oracle client)")
    p.add_argument("--cache", help="JSONL response cache (replay client)")
    p.add_argument("--endpoint", help="chat-completion URL (HTTP client)")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--token-env", help="environment variable holding the bearer token")
    p.add_argument("--timeout-ms", type=int)
    p.add_argument("--max-in-flight", type=int, help="concurrent tile requests (default 8)")
    p.add_argument("--retries", type=int, help="retries per tile (default 2)")
    p.add_argument("--backoff-s", type=float, help="initial retry backoff in seconds (default 0.5)")
    p.add_argument("--patch", type=int, help="square patch side in pixels (default 32)")
    p.add_argument("--template", help="instruction template with {h} {w} {top} {left}")
    p.add_argument("--record", help="append every response to this JSONL cache")

    p = add("postprocess", cmd_postprocess, "Watershed a semantic mask into instances.")
    p.add_argument("mask", help="semantic mask PNG or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--boundary", help="boundary raster (or directory) replacing class-transition boundaries")
    p.add_argument("--threshold", type=float, help="marker threshold in (0, 1] (default 0.5)")
    p.add_argument("--classes", help="class-map JSON (for the background id)")
    p.add_argument("--background-id", type=int)

    p = add("evaluate", cmd_evaluate, "Instance-wise evaluation of predicted against ground-truth maps.")
    p.add_argument(
        "--pred", required=True,
        help="directory of predicted instance maps (a PNG without a .json table is read as a semantic map)",
    )
    p.add_argument("--gt", required=True, help="directory of ground-truth instance maps")
    p.add_argument("--out", required=True)
    p.add_argument("--classes-file", help="class-map JSON for class names")
    p.add_argument("--classes", help="comma-separated class labels or ids to report")
    p.add_argument("--empty", choices=("paper", "na"), help="convention for classes absent from both maps")
    p.add_argument("--gsd", type=float, help="metres per pixel; enables area buckets")
    p.add_argument("--area-class", help="class label or id for area buckets (default: all)")
    p.add_argument("--base", type=int, help="base-model parameter count; enables the overhead figure")
    p.add_argument("--projection", type=int)
    p.add_argument("--decoder", type=int)

    p = add("overhead", cmd_overhead, "Auxiliary parameters as a percentage of the base model.")
    p.add_argument("base", type=int)
    p.add_argument("projection", type=int, nargs="?")
    p.add_argument("decoder", type=int, nargs="?")

    p = add("grpo-demo", cmd_grpo_demo, "Run the toy-policy SFT + GRPO demo and write its training curve.")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="GRPO steps (default 200)")
    return parser


def _validate(command: str, cfg: dict) -> None:
    _positive("jobs", cfg.get("jobs"))
    for k in ("count", "patch", "patches_per_image", "max_in_flight", "timeout_ms", "steps", "height", "width"):
        _positive(k, cfg.get(k))
    _positive("retries", cfg.get("retries"), allow_zero=True)
    _positive("gsd", cfg.get("gsd"))
    t = cfg.get("threshold")
    if t is not None and not 0 < t <= 1:
        raise UsageError("--threshold must be in (0, 1]")
    if command == "overhead" and cfg["base"] <= 0:
        raise UsageError("base parameter count must be > 0")


def _error_line(kind: str, code: int, message: str) -> str:
    return json.dumps({"error": kind, "exit_code": code, "message": message.replace("\n", " ")})


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = effective_config(args.command, args)
        _validate(args.command, cfg)
        return args.func(cfg)
    except UsageError as e:
        print(_error_line("usage", EXIT_USAGE, str(e)), file=sys.stderr)
        return EXIT_USAGE
    except StrictFailure as e:
        print(_error_line("strict", e.code, str(e)), file=sys.stderr)
        return e.code
    except InferenceError as e:
        print(_error_line(type(e).__name__, EXIT_REMOTE, str(e)), file=sys.stderr)
        return EXIT_REMOTE
    except (TextsegError, OSError, ValueError, KeyError) as e:
        print(_error_line(type(e).__name__, EXIT_DATA, str(e)), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
