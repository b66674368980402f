"""Command-line interface: ingest, retrieve, verify, evaluate, cache.

All commands are file-driven and idempotent. verify persists per-claim
progress so an interrupted run resumes where it stopped instead of
re-spending LLM calls; output files are written atomically (temp file
plus rename).
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

from .config import AppConfig, load_app_config
from .corpus import Claim, load_dataset, load_knowledge_store
from .dense import EmbeddingCache
from .errors import ClaimCheckError, ConfigError, ValidationError
from .generator import make_chat_provider, prediction_record, run_generation
from .retriever import retrieve
from .scoring import averitec_score, load_predictions
from .verdict import EnsembleConfig, ensemble, final_label, likert_softmax, load_external_probs

log = logging.getLogger(__name__)

_FLAG_TO_KEY = {
    "dataset": "paths.dataset",
    "knowledge_store": "paths.knowledge_store",
    "train_set": "paths.train_set",
    "cache_dir": "paths.cache_dir",
    "output_dir": "paths.output_dir",
    "omega": "retrieval.omega",
    "k": "retrieval.k",
    "mock_script": "generator.script_path",
    "probs": "ensemble.probs_path",
    "weight_external": "ensemble.weight_external",
    "thresholds": "scoring.thresholds",
    "mode": "scoring.mode",
}


def _write_atomic(path: str, data: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _select_claims(claims: list[Claim], spec: str | None) -> list[Claim]:
    if not spec:
        return claims
    by_id = {c.id: c for c in claims}
    try:
        wanted = [int(part) for part in spec.split(",") if part.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --claims value {spec!r}: {exc}") from exc
    unknown = [i for i in wanted if i not in by_id]
    if unknown:
        raise ValidationError(
            f"unknown claim ids {unknown}; valid ids: {sorted(by_id)}"
        )
    return [by_id[i] for i in wanted]


def _claim_cache(cfg: AppConfig, claim_id: int) -> EmbeddingCache | None:
    if not cfg.paths.cache_dir:
        return None
    os.makedirs(cfg.paths.cache_dir, exist_ok=True)
    return EmbeddingCache(os.path.join(cfg.paths.cache_dir, f"emb_{claim_id}.jsonl"))


def cmd_ingest(args, cfg: AppConfig) -> int:
    cfg.require_paths("dataset")
    claims = load_dataset(cfg.paths.dataset)
    labeled = sum(1 for c in claims if c.gold_label is not None)
    print(f"claims: {len(claims)} ({labeled} labeled)")
    if cfg.paths.knowledge_store:
        cfg.require_paths("knowledge_store")
        docs = 0
        dropped = 0
        sentences = 0
        for claim in _select_claims(claims, args.claims):
            store = load_knowledge_store(cfg.paths.knowledge_store, claim.id)
            docs += len(store.documents)
            dropped += store.dropped_empty
            sentences += sum(len(d.sentences) for d in store.documents)
        print(f"documents: {docs} ({dropped} dropped as empty)")
        print(f"sentences: {sentences}")
    return 0


def cmd_retrieve(args, cfg: AppConfig) -> int:
    cfg.require_paths("dataset", "knowledge_store")
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    claims = _select_claims(load_dataset(cfg.paths.dataset), args.claims)

    def work(claim: Claim) -> dict:
        store = load_knowledge_store(cfg.paths.knowledge_store, claim.id)
        result = retrieve(
            claim,
            list(store.documents),
            cfg.retrieval,
            cfg.embedding,
            _claim_cache(cfg, claim.id),
        )
        return result.trace

    failures: list[tuple[int, str]] = []
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {pool.submit(work, claim): claim for claim in claims}
        for future, claim in futures.items():
            try:
                trace = future.result()
            except ClaimCheckError as exc:
                if not args.keep_going:
                    print(f"claim {claim.id} failed: {exc}", file=sys.stderr)
                    return 1
                failures.append((claim.id, str(exc)))
                continue
            path = os.path.join(cfg.paths.output_dir, f"trace_{claim.id}.json")
            _write_atomic(path, _dump_json(trace))

    if failures:
        errors_path = os.path.join(cfg.paths.output_dir, "retrieve_errors.jsonl")
        with open(errors_path, "w", encoding="utf-8") as fh:
            for claim_id, message in failures:
                fh.write(json.dumps({"claim_id": claim_id, "error": message}) + "\n")
        print(f"retrieved {len(claims) - len(failures)}/{len(claims)} claims, "
              f"{len(failures)} failures recorded in {errors_path}")
    else:
        print(f"retrieved {len(claims)}/{len(claims)} claims")
    return 0


def _load_progress(path: str) -> dict[int, dict]:
    """Last status per claim wins; errored claims are retried on rerun."""
    state: dict[int, dict] = {}
    if not os.path.isfile(path):
        return state
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            state[entry["claim_id"]] = entry
    return state


def cmd_verify(args, cfg: AppConfig) -> int:
    cfg.require_paths("dataset", "knowledge_store")
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    all_claims = load_dataset(cfg.paths.dataset)
    claims = _select_claims(all_claims, args.claims)

    train_set: list[Claim] = []
    if cfg.paths.train_set and not cfg.generator.simplified:
        cfg.require_paths("train_set")
        train_set = load_dataset(cfg.paths.train_set)

    ext_probs = {}
    if cfg.ensemble.probs_path:
        ext_probs = load_external_probs(cfg.ensemble.probs_path)
    ens_cfg = EnsembleConfig(weight_external=cfg.ensemble.weight_external)

    provider = make_chat_provider(cfg.generator)
    progress_path = os.path.join(cfg.paths.output_dir, "verify_progress.jsonl")
    progress = _load_progress(progress_path)
    done = {cid: e["record"] for cid, e in progress.items() if e.get("status") == "ok"}

    pending = [c for c in claims if c.id not in done]
    write_lock = threading.Lock()

    def record_progress(entry: dict) -> None:
        with write_lock:
            with open(progress_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
                fh.flush()

    def work(claim: Claim) -> dict:
        store = load_knowledge_store(cfg.paths.knowledge_store, claim.id)
        result = retrieve(
            claim,
            list(store.documents),
            cfg.retrieval,
            cfg.embedding,
            _claim_cache(cfg, claim.id),
        )
        output = run_generation(
            claim, list(result.sources), train_set, cfg.generator, provider
        )
        dist = likert_softmax(output.ratings)
        if claim.id in ext_probs:
            dist = ensemble(dist, ext_probs[claim.id], ens_cfg)
        final = final_label(dist, output.verdict)
        return prediction_record(claim, list(result.sources), output, final)

    failures: list[tuple[int, str]] = []
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {pool.submit(work, claim): claim for claim in pending}
        for future, claim in futures.items():
            try:
                record = future.result()
            except ClaimCheckError as exc:
                failures.append((claim.id, str(exc)))
                record_progress(
                    {"claim_id": claim.id, "status": "error", "error": str(exc)}
                )
                continue
            done[claim.id] = record
            record_progress({"claim_id": claim.id, "status": "ok", "record": record})

    ordered = [done[c.id] for c in claims if c.id in done]
    out_path = os.path.join(cfg.paths.output_dir, "predictions.json")
    _write_atomic(out_path, _dump_json(ordered))

    print(
        f"verified {len(ordered)}/{len(claims)} claims, {len(failures)} failures; "
        f"predictions written to {out_path}"
    )
    for claim_id, message in failures:
        print(f"  claim {claim_id}: {message}", file=sys.stderr)
    return 1 if failures else 0


def cmd_evaluate(args, cfg: AppConfig) -> int:
    cfg.require_paths("dataset")
    preds_path = args.predictions or os.path.join(
        cfg.paths.output_dir, "predictions.json"
    )
    if not os.path.isfile(preds_path):
        raise ValidationError(f"predictions file not found: {preds_path}")
    preds = load_predictions(preds_path)
    golds = _select_claims(load_dataset(cfg.paths.dataset), args.claims)

    report = averitec_score(preds, golds, cfg.scoring)

    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    json_path = os.path.join(cfg.paths.output_dir, "report.json")
    _write_atomic(json_path, _dump_json(report.to_json_dict()))
    csv_path = os.path.join(cfg.paths.output_dir, "report.csv")
    csv_text = "\n".join(
        ",".join(row) for row in report.csv_rows(cfg.scoring.thresholds)
    )
    _write_atomic(csv_path, csv_text + "\n")

    print(f"Q only:   {report.q_score:.4f}")
    print(f"Q + A:    {report.qa_score:.4f}")
    for t in cfg.scoring.thresholds:
        print(f"AVeriTeC @ {t:g}: {report.averitec_score[t]:.4f}")
    print(f"Accuracy: {report.accuracy:.4f}")
    print(f"Macro F1: {report.macro_f1:.4f}")
    print(f"report written to {json_path} and {csv_path}")
    return 0


def cmd_cache(args, cfg: AppConfig) -> int:
    if not cfg.paths.cache_dir:
        raise ConfigError("paths.cache_dir is not configured")
    pattern = os.path.join(cfg.paths.cache_dir, "emb_*.jsonl")
    files = sorted(glob.glob(pattern))
    if args.action == "inspect":
        total = 0
        for path in files:
            count = len(EmbeddingCache(path))
            total += count
            print(f"{path}: {count} vectors")
        print(f"{len(files)} cache files, {total} vectors total")
        return 0
    # clear
    for path in files:
        os.remove(path)
    print(f"removed {len(files)} cache files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="override one config field; may repeat",
    )
    common.add_argument("--dataset", help="dataset JSON file")
    common.add_argument("--knowledge-store", help="knowledge store file or directory")
    common.add_argument("--train-set", help="training dataset for few-shot examples")
    common.add_argument("--cache-dir", help="embedding cache directory")
    common.add_argument("--output-dir", help="directory for traces, predictions, reports")
    common.add_argument("--omega", help="BM25 prune size")
    common.add_argument("--k", help="number of sources to retrieve")
    common.add_argument("--mock-script", help="scripted responses for the mock LLM")
    common.add_argument("--probs", help="external classifier probabilities file")
    common.add_argument("--weight-external", help="ensemble weight for external probs")
    common.add_argument("--thresholds", help="comma-separated evaluation thresholds")
    common.add_argument("--mode", help="evidence matching mode: Q_only or QA")
    common.add_argument(
        "--simplified",
        action="store_true",
        help="disable few-shot, answer types, and Likert ratings",
    )
    common.add_argument("--claims", help="comma-separated claim ids to process")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")
    common.add_argument(
        "--keep-going",
        action="store_true",
        help="record per-claim failures instead of aborting",
    )
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="claimcheck",
        description="Retrieval-augmented claim verification and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and summarize input data")
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("retrieve", parents=[common], help="write per-claim retrieval traces")
    p.set_defaults(func=cmd_retrieve)
    p = sub.add_parser("verify", parents=[common], help="run the full pipeline, write predictions")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("evaluate", parents=[common], help="score a prediction file")
    p.add_argument("--predictions", help="prediction file (default: output_dir/predictions.json)")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("cache", parents=[common], help="inspect or clear embedding caches")
    p.add_argument("action", choices=["inspect", "clear"])
    p.set_defaults(func=cmd_cache)
    return parser


def _overrides_from(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for attr, key in _FLAG_TO_KEY.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if args.simplified:
        overrides["generator.simplified"] = "true"
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.FIELD=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_app_config(args.config, os.environ, _overrides_from(args))
        return args.func(args, cfg)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ClaimCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
