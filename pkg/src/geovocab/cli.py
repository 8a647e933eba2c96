"""Command-line entry point: distill, reason, segment, eval, pipeline.

Exit codes are a stable contract: 0 success, 1 data or validation error,
2 gateway error, 3 configuration error.  A missing mock fixture counts as
a data error (the fixture corpus on disk is wrong, not the transport).
All outputs are written atomically.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .align import AlignmentConfig, segment
from .distill import DistillConfig, build_standards
from .errors import (
    ConfigError,
    DimMismatch,
    FixtureMissing,
    GatewayError,
    GeovocabError,
    UnmatchedPair,
)
from .gateway import Gateway, GatewayConfig
from .metrics import (
    accumulate,
    build_report,
    empty_matrix,
    render_report,
    report_to_json_dict,
)
from .model import (
    IGNORE_LABEL,
    AdaptiveVocabulary,
    CategoryPool,
    ImageRef,
    builtin_pool,
    full_pool_vocabulary,
    load_category_pool,
    validate_pool,
)
from .reason import (
    ReasonConfig,
    load_trace,
    run_chain,
    save_trace,
    trace_filename,
)
from .tensorio import (
    atomic_write_bytes,
    atomic_write_text,
    load_feature_map,
    load_label_raster,
    load_standards,
    load_text_embeddings,
    save_label_raster,
    save_standards,
)

logger = logging.getLogger(__name__)

MODES = ("full_pool_baseline", "mllm_descriptions_only", "gr_cot")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_GATEWAY = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors follow the exit-code contract."""

    def error(self, message: str):  # noqa: A003 - argparse API
        raise ConfigError(message)


def _exception_chain(exc: BaseException) -> list[BaseException]:
    chain: list[BaseException] = []
    current: BaseException | None = exc
    while current is not None and current not in chain:
        chain.append(current)
        current = current.__cause__
    return chain


def exit_code_for(exc: BaseException) -> int:
    for err in _exception_chain(exc):
        if isinstance(err, ConfigError):
            return EXIT_CONFIG
        if isinstance(err, FixtureMissing):
            return EXIT_DATA
        if isinstance(err, GatewayError):
            return EXIT_GATEWAY
    return EXIT_DATA


def _report_error(exc: BaseException) -> None:
    chain = _exception_chain(exc)
    print(f"error: {chain[0]}", file=sys.stderr)
    for cause in chain[1:]:
        print(f"  caused by: {cause}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Shared helpers


def _load_pool_arg(value: str) -> CategoryPool:
    path = Path(value)
    if path.is_file():
        pool = load_category_pool(path)
    else:
        try:
            pool = builtin_pool(value)
        except KeyError:
            raise ConfigError(
                f"--pool {value!r} is neither a file nor a builtin pool name"
            ) from None
    violations = validate_pool(pool)
    if violations:
        raise ValueError(f"invalid pool {value!r}: " + "; ".join(violations))
    return pool


def _gateway_config(args: argparse.Namespace) -> GatewayConfig:
    mock_dir = getattr(args, "mock_fixtures", None)
    if mock_dir is not None:
        mock_dir = Path(mock_dir)
        if not mock_dir.is_dir():
            raise ConfigError(f"--mock-fixtures directory does not exist: {mock_dir}")
    return GatewayConfig(
        endpoint_url=getattr(args, "endpoint", None),
        model_name=getattr(args, "model", None),
        timeout_ms=getattr(args, "timeout_ms", 60_000),
        max_retries=getattr(args, "max_retries", 3),
        mock_fixture_dir=mock_dir,
    )


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _canonical_digest(payload: object) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _gt_present_names(pool: CategoryPool, labels) -> set[str]:
    values = {int(v) for v in set(labels.ravel().tolist())} - {IGNORE_LABEL}
    return {pool.categories[v].name for v in values}


def _parse_upsample(value: str) -> tuple[int, int]:
    try:
        h, w = value.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"--upsample must look like 64x64, got {value!r}") from None


# ---------------------------------------------------------------------------
# distill


def cmd_distill(args: argparse.Namespace) -> int:
    pool = _load_pool_arg(args.pool)
    override_pairs = None
    if args.pairs is not None:
        with open(args.pairs, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, list):
            raise ValueError("--pairs file must hold a JSON list of [a, b] pairs")
        override_pairs = tuple((str(a), str(b)) for a, b in raw)
    config = DistillConfig(
        prompt_dir=Path(args.prompt_dir) if args.prompt_dir else None,
        override_pairs=override_pairs,
    )
    gateway = Gateway(_gateway_config(args))
    store = build_standards(pool, gateway, config)
    save_standards(store, args.out)
    print(
        f"wrote {len(store.standards)} standards and {len(store.rules)} rules "
        f"to {args.out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# reason


def _iter_image_paths(args: argparse.Namespace) -> list[Path]:
    paths: list[Path] = []
    if args.images_dir is not None:
        root = Path(args.images_dir)
        if not root.is_dir():
            raise ConfigError(f"--images-dir does not exist: {root}")
        paths.extend(p for p in sorted(root.iterdir()) if p.is_file())
    paths.extend(Path(p) for p in args.images)
    if not paths:
        raise ConfigError("no input images; pass --images-dir or image paths")
    for path in paths:
        if not path.is_file():
            raise ConfigError(f"image does not exist: {path}")
    return paths


def cmd_reason(args: argparse.Namespace) -> int:
    store = load_standards(args.standards)
    image_paths = _iter_image_paths(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gateway = Gateway(_gateway_config(args))
    config = ReasonConfig(
        prompt_dir=Path(args.prompt_dir) if args.prompt_dir else None
    )

    def _one(path: Path):
        image = ImageRef.from_path(path)
        trace = run_chain(image, store, gateway, config)
        save_trace(trace, out_dir)
        return trace

    failures: list[tuple[Path, BaseException]] = []
    written = 0
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool_ex:
            futures = {pool_ex.submit(_one, p): p for p in image_paths}
            for future in concurrent.futures.as_completed(futures):
                path = futures[future]
                try:
                    future.result()
                    written += 1
                except GeovocabError as exc:
                    logger.error("reasoning failed for %s: %s", path, exc)
                    failures.append((path, exc))
                    if not args.keep_going:
                        pool_ex.shutdown(cancel_futures=True)
                        break
    else:
        for path in image_paths:
            try:
                _one(path)
                written += 1
            except GeovocabError as exc:
                logger.error("reasoning failed for %s: %s", path, exc)
                failures.append((path, exc))
                if not args.keep_going:
                    break

    if failures:
        if not args.keep_going:
            raise failures[0][1]
        manifest = {
            "failures": [
                {
                    "image": str(path),
                    "stage": getattr(exc, "stage", ""),
                    "error": str(exc),
                }
                for path, exc in sorted(failures, key=lambda f: str(f[0]))
            ]
        }
        atomic_write_text(
            out_dir / "failures.json", json.dumps(manifest, indent=2) + "\n"
        )
        print(
            f"wrote {written} traces to {out_dir}; "
            f"{len(failures)} failures recorded in failures.json"
        )
        return EXIT_OK
    print(f"wrote {written} traces to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# segment


def cmd_segment(args: argparse.Namespace) -> int:
    pool = _load_pool_arg(args.pool)
    if (args.trace is None) == (not args.full_pool):
        raise ConfigError("pass exactly one of --trace or --full-pool")
    embeddings = load_text_embeddings(args.embeddings, pool, args.sidecar)
    features = load_feature_map(args.features)
    if args.trace is not None:
        vocabulary = load_trace(args.trace).vocabulary
    else:
        vocabulary = full_pool_vocabulary(pool)
    config = AlignmentConfig(
        similarity=args.similarity,
        always_include=tuple(args.always_include),
        upsample_to=_parse_upsample(args.upsample) if args.upsample else None,
    )
    try:
        raster = segment(features, embeddings, vocabulary, config)
    except DimMismatch as exc:
        raise DimMismatch(
            f"{exc} (features: {args.features}, embeddings: {args.embeddings})"
        ) from exc
    save_label_raster(raster, args.out)
    print(f"wrote {raster.height}x{raster.width} label raster to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _stem_map(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise ConfigError(f"directory does not exist: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.npy"))}


def cmd_eval(args: argparse.Namespace) -> int:
    pool = _load_pool_arg(args.pool)
    preds = _stem_map(Path(args.pred_dir))
    gts = _stem_map(Path(args.gt_dir))
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        raise UnmatchedPair(missing_gt, missing_pred)
    if not preds:
        raise ValueError(f"no .npy rasters under {args.pred_dir}")

    vocab_by_stem: dict[str, tuple[set[str], bool]] = {}
    if args.traces_dir is not None:
        traces_dir = Path(args.traces_dir)
        if not traces_dir.is_dir():
            raise ConfigError(f"--traces-dir does not exist: {traces_dir}")
        for trace_path in sorted(traces_dir.glob("*.trace.json")):
            trace = load_trace(trace_path)
            stem = Path(trace.image.path).stem
            vocab_by_stem[stem] = (
                set(trace.vocabulary.selected),
                trace.vocabulary.fallback_used,
            )
        untraced = sorted(s for s in preds if s not in vocab_by_stem)
        if untraced:
            raise ValueError(
                "no trace found for stems: " + ", ".join(untraced)
            )

    cm = empty_matrix(pool)
    vocab_pairs: list[tuple[set[str], set[str]]] = []
    fallback_count = 0
    for stem in sorted(preds):
        pred = load_label_raster(preds[stem], pool)
        gt = load_label_raster(gts[stem], pool)
        try:
            cm = accumulate(cm, pred, gt)
        except DimMismatch as exc:
            raise DimMismatch(f"{exc} (stem: {stem})") from exc
        if args.traces_dir is not None:
            selected, fallback_used = vocab_by_stem[stem]
            vocab_pairs.append((selected, _gt_present_names(pool, gt.labels)))
            fallback_count += int(fallback_used)

    report = build_report(
        cm,
        images_evaluated=len(preds),
        vocab_pairs=vocab_pairs or None,
        fallback_count=fallback_count,
    )
    payload = render_report(report, args.format)
    if args.out is not None:
        atomic_write_bytes(args.out, payload)
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.buffer.write(payload)
        sys.stdout.buffer.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineConfig:
    pool_path: Path
    features_dir: Path
    embeddings_path: Path
    embeddings_sidecar_path: Path
    images_dir: Path
    output_dir: Path
    mode: str
    standards_path: Path | None
    gt_dir: Path | None
    gateway: GatewayConfig
    alignment: AlignmentConfig
    prompt_dir: Path | None
    jobs: int
    raw: dict


_PIPELINE_KEYS = {
    "pool_path",
    "standards_path",
    "features_dir",
    "embeddings_path",
    "embeddings_sidecar_path",
    "images_dir",
    "gt_dir",
    "output_dir",
    "gateway",
    "alignment",
    "mode",
    "prompt_dir",
    "jobs",
}


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"pipeline config does not exist: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"pipeline config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("pipeline config must be a JSON object")
    unknown = sorted(set(raw) - _PIPELINE_KEYS)
    if unknown:
        raise ConfigError(f"unknown pipeline config keys: {', '.join(unknown)}")
    required = [
        "pool_path",
        "features_dir",
        "embeddings_path",
        "embeddings_sidecar_path",
        "images_dir",
        "output_dir",
        "mode",
    ]
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"pipeline config missing keys: {', '.join(missing)}")
    mode = raw["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")

    base = Path(path).parent

    def _resolve(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    pool_path = _resolve(raw["pool_path"])
    features_dir = _resolve(raw["features_dir"])
    embeddings_path = _resolve(raw["embeddings_path"])
    sidecar_path = _resolve(raw["embeddings_sidecar_path"])
    images_dir = _resolve(raw["images_dir"])
    output_dir = _resolve(raw["output_dir"])
    standards_path = _resolve(raw["standards_path"]) if raw.get("standards_path") else None
    gt_dir = _resolve(raw["gt_dir"]) if raw.get("gt_dir") else None
    prompt_dir = _resolve(raw["prompt_dir"]) if raw.get("prompt_dir") else None

    if mode == "gr_cot" and standards_path is None:
        raise ConfigError("mode gr_cot requires standards_path")
    for label, p in (
        ("pool_path", pool_path),
        ("features_dir", features_dir),
        ("embeddings_path", embeddings_path),
        ("embeddings_sidecar_path", sidecar_path),
        ("images_dir", images_dir),
    ):
        if not p.exists():
            raise ConfigError(f"{label} does not exist: {p}")
    if standards_path is not None and not standards_path.exists():
        raise ConfigError(f"standards_path does not exist: {standards_path}")
    if gt_dir is not None and not gt_dir.is_dir():
        raise ConfigError(f"gt_dir does not exist: {gt_dir}")

    gw = raw.get("gateway", {})
    if not isinstance(gw, dict):
        raise ConfigError("gateway section must be an object")
    mock_dir = gw.get("mock_fixture_dir")
    gateway = GatewayConfig(
        endpoint_url=gw.get("endpoint_url"),
        model_name=gw.get("model_name"),
        api_key_env_name=gw.get("api_key_env_name", "GEOVOCAB_API_KEY"),
        timeout_ms=int(gw.get("timeout_ms", 60_000)),
        max_retries=int(gw.get("max_retries", 3)),
        backoff_base_ms=int(gw.get("backoff_base_ms", 500)),
        max_concurrent_requests=int(gw.get("max_concurrent_requests", 4)),
        mock_fixture_dir=_resolve(mock_dir) if mock_dir else None,
    )
    al = raw.get("alignment", {})
    if not isinstance(al, dict):
        raise ConfigError("alignment section must be an object")
    try:
        alignment = AlignmentConfig(
            similarity=al.get("similarity", "cosine"),
            always_include=tuple(al.get("always_include", [])),
            upsample_to=tuple(al["upsample_to"]) if al.get("upsample_to") else None,
        )
    except ValueError as exc:
        raise ConfigError(f"bad alignment section: {exc}") from exc

    return PipelineConfig(
        pool_path=pool_path,
        features_dir=features_dir,
        embeddings_path=embeddings_path,
        embeddings_sidecar_path=sidecar_path,
        images_dir=images_dir,
        output_dir=output_dir,
        mode=mode,
        standards_path=standards_path,
        gt_dir=gt_dir,
        gateway=gateway,
        alignment=alignment,
        prompt_dir=prompt_dir,
        jobs=int(raw.get("jobs", 1)),
        raw=raw,
    )


def _run_pipeline(config: PipelineConfig) -> dict:
    started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    pool = load_category_pool(config.pool_path)
    violations = validate_pool(pool)
    if violations:
        raise ValueError("invalid pool: " + "; ".join(violations))
    embeddings = load_text_embeddings(
        config.embeddings_path, pool, config.embeddings_sidecar_path
    )
    image_paths = [p for p in sorted(config.images_dir.iterdir()) if p.is_file()]
    if not image_paths:
        raise ValueError(f"no images under {config.images_dir}")

    out_dir = config.output_dir
    preds_dir = out_dir / "preds"
    traces_dir = out_dir / "traces"
    out_dir.mkdir(parents=True, exist_ok=True)
    preds_dir.mkdir(exist_ok=True)

    store = None
    if config.standards_path is not None:
        store = load_standards(config.standards_path)
        if store.pool.names != pool.names:
            raise ValueError("standards store pool does not match pipeline pool")

    run_reasoning = config.mode == "gr_cot"
    if run_reasoning:
        traces_dir.mkdir(exist_ok=True)
    gateway = Gateway(config.gateway) if run_reasoning else None
    reason_config = ReasonConfig(prompt_dir=config.prompt_dir)

    def _process(path: Path) -> dict:
        stem = path.stem
        feature_path = config.features_dir / f"{stem}.npy"
        if not feature_path.is_file():
            raise ValueError(f"no feature tensor for image {path.name}: {feature_path}")
        features = load_feature_map(feature_path)

        trace = None
        if run_reasoning:
            image = ImageRef.from_path(path)
            trace = run_chain(image, store, gateway, reason_config)
            save_trace(trace, traces_dir)
            vocabulary = trace.vocabulary
        else:
            vocabulary = full_pool_vocabulary(pool)

        raster = segment(features, embeddings, vocabulary, config.alignment)
        pred_path = preds_dir / f"{stem}.npy"
        save_label_raster(raster, pred_path)
        return {
            "name": path.name,
            "stem": stem,
            "vocabulary": list(vocabulary.selected),
            "fallback_used": vocabulary.fallback_used,
            "trace": trace_filename(trace) if trace is not None else None,
            "prediction": f"preds/{stem}.npy",
            "outcome": "ok",
        }

    if config.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.jobs) as pool_ex:
            image_rows = list(pool_ex.map(_process, image_paths))
    else:
        image_rows = [_process(p) for p in image_paths]

    report = None
    if config.gt_dir is not None:
        cm = empty_matrix(pool)
        vocab_pairs: list[tuple[set[str], set[str]]] = []
        fallback_count = 0
        for row in image_rows:
            stem = row["stem"]
            gt_path = config.gt_dir / f"{stem}.npy"
            if not gt_path.is_file():
                raise ValueError(f"no ground truth raster for {row['name']}: {gt_path}")
            gt = load_label_raster(gt_path, pool)
            pred = load_label_raster(preds_dir / f"{stem}.npy", pool)
            cm = accumulate(cm, pred, gt)
            vocab_pairs.append(
                (set(row["vocabulary"]), _gt_present_names(pool, gt.labels))
            )
            fallback_count += int(row["fallback_used"])
        report = build_report(
            cm,
            images_evaluated=len(image_rows),
            vocab_pairs=vocab_pairs,
            fallback_count=fallback_count,
        )
        atomic_write_bytes(out_dir / "report.json", render_report(report, "json"))
        atomic_write_bytes(out_dir / "report.txt", render_report(report, "text_table"))

    inputs = {
        "pool": _sha256_file(config.pool_path),
        "standards": (
            _sha256_file(config.standards_path) if config.standards_path else None
        ),
        "embeddings": _sha256_file(config.embeddings_path),
        "sidecar": _sha256_file(config.embeddings_sidecar_path),
        "images": {p.name: _sha256_file(p) for p in image_paths},
        "features": {
            f"{p.stem}.npy": _sha256_file(config.features_dir / f"{p.stem}.npy")
            for p in image_paths
        },
        "gt": (
            {
                f"{p.stem}.npy": _sha256_file(config.gt_dir / f"{p.stem}.npy")
                for p in image_paths
            }
            if config.gt_dir is not None
            else None
        ),
    }
    prompt_records = None
    if config.mode == "mllm_descriptions_only" and store is not None:
        prompt_records = {
            standard.category: (
                f"### {standard.category}\n"
                f"Morphology: {standard.morphology}\n"
                f"Appearance: {standard.spectral_spatial}\n"
                f"Exclusivity: {standard.exclusivity}"
                + (
                    "\nVariants: " + ", ".join(standard.sub_classes)
                    if standard.sub_classes
                    else ""
                )
            )
            for standard in store.standards
        }

    manifest = {
        "package_version": __version__,
        "mode": config.mode,
        "config_digest": _canonical_digest(config.raw),
        "inputs": inputs,
        "stages": {
            "reason": "ok" if run_reasoning else "skipped",
            "segment": "ok",
            "eval": "ok" if report is not None else "skipped",
        },
        "images": image_rows,
        "prompt_records": prompt_records,
        "report": report_to_json_dict(report) if report is not None else None,
    }
    manifest["digest"] = _canonical_digest(manifest)
    manifest["timestamps"] = {
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write_text(
        out_dir / "run_manifest.json", json.dumps(manifest, indent=2) + "\n"
    )
    return manifest


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = load_pipeline_config(args.config)
    if args.jobs != 1:
        config = dataclasses.replace(config, jobs=args.jobs)
    manifest = _run_pipeline(config)
    summary = f"pipeline mode={config.mode} images={len(manifest['images'])}"
    if manifest["report"] is not None:
        report = manifest["report"]
        summary += f" miou={report['miou']:.4f} oa={report['oa']:.4f}"
        if report["cat_acc"] is not None:
            summary += f" cat_acc={report['cat_acc']:.4f}"
    print(summary)
    print(f"manifest digest {manifest['digest']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(
        prog="geovocab",
        description=(
            "Scene-aware adaptive vocabularies for open-vocabulary "
            "remote sensing segmentation"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--log-level",
        default="warning",
        choices=["debug", "info", "warning", "error"],
        help="logging verbosity on stderr",
    )
    common.add_argument(
        "--jobs", type=int, default=1, help="concurrent per-image work items"
    )

    gateway_flags = argparse.ArgumentParser(add_help=False)
    gateway_flags.add_argument(
        "--mock-fixtures", help="directory of mock fixtures; forces the mock backend"
    )
    gateway_flags.add_argument("--endpoint", help="chat-completions endpoint URL")
    gateway_flags.add_argument("--model", help="model name sent to the endpoint")
    gateway_flags.add_argument("--timeout-ms", type=int, default=60_000)
    gateway_flags.add_argument("--max-retries", type=int, default=3)
    gateway_flags.add_argument(
        "--prompt-dir", help="directory overriding the packaged prompt templates"
    )

    p = sub.add_parser(
        "distill",
        parents=[common, gateway_flags],
        help="build the standards store for a pool",
    )
    p.add_argument("--pool", required=True, help="pool JSON path or builtin name")
    p.add_argument("--out", required=True, help="output standards JSON path")
    p.add_argument("--pairs", help="JSON list of [a, b] pairs; skips pair proposal")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser(
        "reason",
        parents=[common, gateway_flags],
        help="run the reasoning chain over images",
    )
    p.add_argument("--standards", required=True, help="standards store JSON path")
    p.add_argument("--images-dir", help="directory of input images")
    p.add_argument("images", nargs="*", help="individual image paths")
    p.add_argument("--out", required=True, help="output directory for trace files")
    p.add_argument(
        "--keep-going",
        action="store_true",
        help="record per-image failures instead of aborting",
    )
    p.set_defaults(func=cmd_reason)

    p = sub.add_parser(
        "segment",
        parents=[common],
        help="label a feature tensor against category embeddings",
    )
    p.add_argument("--pool", required=True)
    p.add_argument("--features", required=True, help="feature tensor (.npy)")
    p.add_argument("--embeddings", required=True, help="embedding tensor (.npy)")
    p.add_argument("--sidecar", required=True, help="embedding row-mapping JSON")
    p.add_argument("--trace", help="trace file supplying the vocabulary")
    p.add_argument(
        "--full-pool", action="store_true", help="score every pool category"
    )
    p.add_argument("--similarity", choices=["cosine", "dot"], default="cosine")
    p.add_argument(
        "--always-include",
        action="append",
        default=[],
        metavar="CATEGORY",
        help="category always added to the candidate set (repeatable)",
    )
    p.add_argument("--upsample", help="output size as HxW (nearest neighbor)")
    p.add_argument("--out", required=True, help="output label raster path")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser(
        "eval",
        parents=[common],
        help="score predictions against ground truth",
    )
    p.add_argument("--pool", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--traces-dir", help="trace directory for category accuracy")
    p.add_argument(
        "--format", choices=["text_table", "json", "csv"], default="text_table"
    )
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "pipeline",
        parents=[common],
        help="run reason, segment, eval from one config file",
    )
    p.add_argument("--config", required=True, help="pipeline config JSON path")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level.upper()),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        return args.func(args)
    except GeovocabError as exc:
        _report_error(exc)
        return exit_code_for(exc)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _report_error(exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
