"""Batch command-line surface for the mitigation pipeline.

Subcommands: ``run`` (one generation), ``ablate`` (grid sweep with per-cell
checkpoints), ``select-ref`` (candidate scoring from local or HTTP sources),
``index build|query`` and ``phash`` (file-format utilities), and ``trace``
(dump the alignment trace of a vanilla run as CSV).

Exit codes: 0 on success, 1 on runtime failure, 2 on usage/config errors.
Configuration is a JSON document; command-line flags override its fields.
All artifact files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .denoisers import (
    ConditioningSpec,
    GaussianMixtureDenoiser,
    MemorizationSpec,
    MemorizingDenoiser,
    load_gaussian_mixture,
)
from .diffusion import make_schedule
from .errors import ConfigError, NoCandidatesError
from .latent import Latent, load_latent, load_softmap, save_latent
from .masks import constant_map_provider, make_patch_similarity_provider
from .metrics import (
    DEFAULT_ABLATION_MODES,
    ExperimentSetup,
    ablation_sweep,
    summarize_sweep,
    write_json_atomic,
    write_sweep_csv,
)
from .phash import load_image_gray, load_phash_corpus, phash64
from .pipeline import AUTO_WINDOW, InjectionConfig, Providers, run_mitigated, run_vanilla
from .retrieval import (
    FeatureHashEmbedder,
    LocalDirectorySource,
    PexelsSource,
    UnsplashSource,
    fetch_candidates,
)
from .selector import DEFAULT_LAMBDAS, composite_select, extract_query_words
from .toy import make_toy_world, smooth_latent
from .vecindex import build_index, load_index, normalize, novelty_score, save_index
from .window import alignment_trace, trace_to_csv

log = logging.getLogger("demem")

_CONFIG_KEYS = {
    "latent_shape": (list, tuple),
    "schedule": dict,
    "seed": int,
    "world_seed": int,
    "delta": (int, float),
    "tau": (int, float),
    "cutoff": (int, float),
    "eta": (int, float),
    "cfg_scale": (int, float),
    "window": (list, tuple, str),
    "use_freq_init": bool,
    "use_injection": bool,
    "mask_recompute": str,
    "gm_model": (str, type(None)),
    "x_r": (str, type(None)),
    "mem_target": (str, type(None)),
    "concept_map": (str, type(None)),
    "prompt_vector": (str, type(None)),
    "memorization": (dict, type(None)),
    "dump_steps": bool,
}
_SCHEDULE_KEYS = {"T": int, "beta_start": (int, float), "beta_end": (int, float), "ddim_count": int}
_MEMO_KEYS = {"w_max": (int, float), "mode": str}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return doc


def validate_config(doc: dict) -> None:
    """Schema-check a config document before anything runs."""
    problems = []
    for key, value in doc.items():
        if key not in _CONFIG_KEYS:
            problems.append(f"unknown key {key!r}")
        elif not isinstance(value, _CONFIG_KEYS[key]):
            problems.append(f"key {key!r} has wrong type {type(value).__name__}")
    for sub_key, schema in (("schedule", _SCHEDULE_KEYS), ("memorization", _MEMO_KEYS)):
        sub = doc.get(sub_key)
        if isinstance(sub, dict):
            for key, value in sub.items():
                if key not in schema:
                    problems.append(f"unknown key {sub_key}.{key!r}")
                elif not isinstance(value, schema[key]):
                    problems.append(f"key {sub_key}.{key!r} has wrong type")
    if "latent_shape" in doc and len(doc["latent_shape"]) != 3:
        problems.append("latent_shape must have exactly 3 entries")
    if problems:
        raise ConfigError("config validation failed: " + "; ".join(problems))


def _injection_config(doc: dict, args: argparse.Namespace) -> InjectionConfig:
    cfg = InjectionConfig()
    fields = {}
    for name in ("seed", "delta", "tau", "cutoff", "eta", "cfg_scale",
                 "use_freq_init", "use_injection", "mask_recompute"):
        if name in doc:
            fields[name] = doc[name]
    if "window" in doc:
        w = doc["window"]
        fields["window"] = AUTO_WINDOW if w == AUTO_WINDOW else (int(w[0]), int(w[1]))
    # flags win over the config file
    for name in ("seed", "delta", "tau", "cutoff", "eta"):
        val = getattr(args, name, None)
        if val is not None:
            fields[name] = val
    if getattr(args, "cfg_scale", None) is not None:
        fields["cfg_scale"] = args.cfg_scale
    if getattr(args, "window", None) is not None:
        fields["window"] = _parse_window_flag(args.window)
    try:
        return replace(cfg, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_window_flag(text: str):
    if text == AUTO_WINDOW:
        return AUTO_WINDOW
    try:
        lo, hi = text.split(":")
        return (int(lo), int(hi))
    except ValueError as exc:
        raise ConfigError(f"--window expects LOW:HIGH or 'auto', got {text!r}") from exc


def _require_file(path_str: str, what: str) -> Path:
    p = Path(path_str)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def build_environment(doc: dict) -> ExperimentSetup:
    """Assemble denoiser, reference, target, conditioning, and providers.

    With no ``gm_model`` the built-in desk-scale world (seeded by
    ``world_seed``) supplies every default; explicit file paths override the
    corresponding pieces. With a ``gm_model`` path the mixture file is the
    base and unspecified pieces get deterministic defaults derived from it.
    """
    sched_doc = doc.get("schedule", {})
    world_seed = int(doc.get("world_seed", 0))
    sched = make_schedule(
        T=int(sched_doc.get("T", 1000)),
        beta_start=float(sched_doc.get("beta_start", 1e-4)),
        beta_end=float(sched_doc.get("beta_end", 0.02)),
        ddim_count=int(sched_doc.get("ddim_count", 50)),
        eta=float(doc.get("eta", 0.0)),
    )
    memo_doc = doc.get("memorization")

    if doc.get("gm_model") is None:
        shape = tuple(int(v) for v in doc.get("latent_shape", (4, 16, 16)))
        world = make_toy_world(seed=world_seed, shape=shape, memorize=False, sched=sched)
        base = world.base_denoiser
        mem_target = world.mem_target
        x_r = world.x_r
        cond = world.setup.cond
        concept = world.setup.providers.concept
        scorer = world.setup.providers.scorer
    else:
        gm = load_gaussian_mixture(_require_file(doc["gm_model"], "gm model"))
        shape = gm.latent_shape
        base = GaussianMixtureDenoiser(gm, sched)
        mem_target = gm.means[0]
        x_r = smooth_latent(shape, np.random.default_rng(world_seed))
        prompt = normalize(gm.means[0].data.reshape(-1))
        cond = ConditioningSpec(prompt_vector=prompt)
        concept = constant_map_provider((shape[1], shape[2]))
        scorer = _prompt_scorer(prompt)

    if doc.get("mem_target") is not None:
        mem_target = load_latent(_require_file(doc["mem_target"], "mem_target latent"))
    if doc.get("x_r") is not None:
        x_r = load_latent(_require_file(doc["x_r"], "reference latent"))
    if doc.get("prompt_vector") is not None:
        vec = np.load(_require_file(doc["prompt_vector"], "prompt vector"))
        cond = ConditioningSpec(prompt_vector=normalize(np.asarray(vec).reshape(-1)))
        scorer = _prompt_scorer(cond.prompt_vector)
    if doc.get("concept_map") is not None:
        fixed = load_softmap(_require_file(doc["concept_map"], "concept map"))
        concept = lambda _latent, _m=fixed: _m  # noqa: E731

    # the planted pull always aims at the resolved target, overridden or not
    denoiser = base
    if memo_doc is not None:
        denoiser = MemorizingDenoiser(
            base=base,
            spec=MemorizationSpec(
                target=mem_target,
                w_max=float(memo_doc["w_max"]),
                mode=memo_doc.get("mode", "ramp"),
            ),
            sched=sched,
        )

    if x_r.shape != shape:
        raise ConfigError(f"reference latent shape {x_r.shape} does not match model shape {shape}")
    if mem_target.shape != shape:
        raise ConfigError(f"mem_target shape {mem_target.shape} does not match model shape {shape}")

    providers = Providers(
        anomaly=make_patch_similarity_provider(mem_target),
        concept=concept,
        scorer=scorer,
    )
    return ExperimentSetup(
        denoiser=denoiser, sched=sched, x_r=x_r, mem_target=mem_target,
        cond=cond, providers=providers,
    )


def _prompt_scorer(prompt_vector: np.ndarray):
    def scorer(latent: Latent, _cond) -> float:
        flat = latent.data.reshape(-1)
        norm = np.linalg.norm(flat)
        return float(flat @ prompt_vector / norm) if norm > 0.0 else 0.0

    return scorer


def _write_bytes_atomic(payload: bytes, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _save_latent_atomic(latent: Latent, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_latent(latent, tmp)
    os.replace(tmp, path)


def _resolved_config_snapshot(doc: dict, cfg: InjectionConfig) -> dict:
    snapshot = dict(doc)
    snapshot.update(
        {
            "seed": cfg.seed,
            "delta": cfg.delta,
            "tau": cfg.tau,
            "cutoff": cfg.cutoff,
            "eta": cfg.eta,
            "cfg_scale": cfg.cfg_scale,
            "window": list(cfg.window) if isinstance(cfg.window, tuple) else cfg.window,
            "use_freq_init": cfg.use_freq_init,
            "use_injection": cfg.use_injection,
            "mask_recompute": cfg.mask_recompute,
        }
    )
    return snapshot


def cmd_run(args: argparse.Namespace) -> int:
    doc = _load_config(args.config)
    validate_config(doc)
    cfg = _injection_config(doc, args)
    setup = build_environment(doc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    dump_dir = out_dir / "steps" if doc.get("dump_steps") else None
    result = run_mitigated(
        setup.denoiser, setup.x_r, setup.cond, setup.providers, cfg, setup.sched,
        dump_dir=dump_dir,
    )
    row = setup.row_from_result(cfg, cfg.seed, result)
    _save_latent_atomic(result.final_latent, out_dir / "final_latent.caplat")
    sidecar = {
        "config": _resolved_config_snapshot(doc, cfg),
        "window_used": {
            "t_low": result.window_used.t_low,
            "t_high": result.window_used.t_high,
            "defaulted": result.window_used.defaulted,
        },
        "fallback_used": result.fallback_used,
        "metrics": {
            "sscd_analog": row["sscd_analog"],
            "align_analog": row["align_analog"],
            "mask_area_mean": row["mask_area_mean"],
        },
        "trajectory": [
            {
                "step": rec.step,
                "injected": rec.injected,
                "mask_area_fraction": rec.mask_area_fraction,
                "mask_fallback": rec.mask_fallback,
            }
            for rec in result.trajectory_meta
        ],
    }
    write_json_atomic(sidecar, out_dir / "result.json")
    print(f"run complete: sscd_analog={row['sscd_analog']:.6f} align_analog={row['align_analog']:.6f}")
    print(f"artifacts: {out_dir / 'final_latent.caplat'}, {out_dir / 'result.json'}")
    return 0


def _parse_float_list(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok != ""]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated float list, got {text!r}") from exc
    if not values:
        raise ConfigError(f"expected a non-empty float list, got {text!r}")
    return values


def _parse_int_list(text: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated int list, got {text!r}") from exc
    if not values:
        raise ConfigError(f"expected a non-empty int list, got {text!r}")
    return values


_MODE_PRESETS = {"init": (True, False), "inject": (False, True), "both": (True, True), "none": (False, False)}


def cmd_ablate(args: argparse.Namespace) -> int:
    doc = _load_config(args.config)
    validate_config(doc)
    base_cfg = _injection_config(doc, args)
    setup = build_environment(doc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    deltas = _parse_float_list(args.deltas)
    taus = _parse_float_list(args.taus)
    seeds = _parse_int_list(args.seeds)
    if args.modes:
        try:
            modes = [_MODE_PRESETS[name] for name in args.modes.split(",") if name]
        except KeyError as exc:
            raise ConfigError(f"unknown ablation mode {exc.args[0]!r}") from exc
        if not modes:
            raise ConfigError("at least one ablation mode is required")
    else:
        modes = list(DEFAULT_ABLATION_MODES)

    rows = ablation_sweep(
        setup.run_once,
        base_cfg,
        deltas=deltas,
        taus=taus,
        modes=modes,
        seeds=seeds,
        checkpoint_dir=out_dir / "cells",
        workers=args.workers,
    )
    csv_path = out_dir / "sweep.csv"
    tmp_csv = csv_path.with_name(csv_path.name + ".tmp")
    write_sweep_csv(rows, tmp_csv)
    os.replace(tmp_csv, csv_path)
    write_json_atomic(summarize_sweep(rows), out_dir / "summary.json")
    failed = sum(1 for r in rows if "error" in r)
    print(f"sweep complete: {len(rows)} cells ({failed} failed) -> {csv_path}")
    return 0


def _build_sources(args: argparse.Namespace) -> list:
    sources: list = []
    for directory in args.source_dir or []:
        p = Path(directory)
        if not p.is_dir():
            raise NotADirectoryError(f"source directory not found: {p}")
        sources.append(LocalDirectorySource(directory=p))
    for name in (args.sources.split(",") if args.sources else []):
        if name == "pexels":
            sources.append(PexelsSource())
        elif name == "unsplash":
            sources.append(UnsplashSource())
        elif name:
            raise ConfigError(f"unknown source {name!r} (expected pexels or unsplash)")
    if not sources:
        raise ConfigError("configure at least one --source-dir or --sources entry")
    return sources


def cmd_select_ref(args: argparse.Namespace) -> int:
    embedder = FeatureHashEmbedder()
    if args.manifest:
        from .masks import load_attention_stack

        stack, words = load_attention_stack(args.manifest)
        if not words:
            raise ConfigError(f"{args.manifest}: manifest has no 'words' list")
        top, query = extract_query_words(stack, words, k=args.topk, seed=args.seed or 0)
        print(f"query words (top {len(top)}): {', '.join(top)}  -> sampled {query!r}")
    elif args.query:
        query = args.query
    else:
        raise ConfigError("provide --query or --manifest")

    sources = _build_sources(args)
    candidates = fetch_candidates(
        query, sources, min_year=args.min_year, limit=args.limit, embedder=embedder
    )
    if not candidates:
        raise NoCandidatesError(f"no candidates retrieved for query {query!r}")

    if args.index:
        index = load_index(_require_file(args.index, "embedding index"))
    else:
        log.warning("no --index supplied; building one from the candidates themselves")
        index = build_index([c.embedding for c in candidates])
    if args.phash_corpus:
        corpus = load_phash_corpus(_require_file(args.phash_corpus, "hash corpus"))
    else:
        log.warning("no --phash-corpus supplied; using the candidates' own hashes")
        corpus = [c.phash for c in candidates]

    g = embedder.embed_word(query)
    winner, scores = composite_select(candidates, g, index, corpus, DEFAULT_LAMBDAS)
    print(f"{'candidate':<28} {'h1':>8} {'h2':>8} {'h3':>8} {'total':>8}")
    for score in scores:
        print(
            f"{score.candidate_id:<28} {score.h1:>8.4f} {score.h2:>8.4f} "
            f"{score.h3:>8.4f} {score.total:>8.4f}"
        )
    print(f"selected: {winner.id} (source {winner.source}, year {winner.upload_year})")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "query": query,
            "selected": winner.id,
            "scores": [
                {
                    "candidate_id": s.candidate_id,
                    "h1": s.h1, "h2": s.h2, "h3": s.h3, "total": s.total,
                    "lambdas": list(s.lambdas),
                }
                for s in scores
            ],
        }
        write_json_atomic(payload, out_dir / "selection.json")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    if args.index_cmd == "build":
        vectors = np.load(_require_file(args.vectors, "vector file"))
        if vectors.ndim != 2:
            raise ConfigError(f"{args.vectors}: expected a 2-D array of vectors")
        index = build_index([normalize(row) for row in vectors])
        tmp = Path(args.out).with_suffix(".tmp")
        save_index(index, tmp)
        os.replace(tmp, args.out)
        print(f"indexed {index.count} vectors of dim {index.dim} -> {args.out}")
        return 0
    index = load_index(_require_file(args.index, "index file"))
    vec = np.load(_require_file(args.vector, "query vector file"))
    h2 = novelty_score(normalize(np.asarray(vec).reshape(-1)), index)
    print(f"novelty_h2={h2!r} best_cos={1.0 - h2!r}")
    return 0


def cmd_phash(args: argparse.Namespace) -> int:
    for path in args.files:
        gray = load_image_gray(_require_file(path, "image"))
        print(f"{phash64(gray):016x}  {path}")
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    doc = _load_config(args.config)
    validate_config(doc)
    cfg = _injection_config(doc, args)
    setup = build_environment(doc)
    _, records = run_vanilla(
        setup.denoiser, setup.cond, cfg, setup.sched, setup.x_r.shape
    )
    trace = alignment_trace(records, setup.providers.scorer, setup.cond)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    trace_to_csv(trace, tmp)
    os.replace(tmp, out_path)
    print(f"trace with {len(trace)} steps -> {out_path}")
    return 0


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--delta", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--cutoff", type=float, default=None)
    parser.add_argument("--eta", type=float, default=None)
    parser.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    parser.add_argument("--window", type=str, default=None, help="LOW:HIGH or 'auto'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one mitigated generation")
    p_run.add_argument("--config", type=str, default=None)
    p_run.add_argument("--out", type=str, required=True)
    _add_override_flags(p_run)
    p_run.set_defaults(handler=cmd_run)

    p_ab = sub.add_parser("ablate", help="grid sweep over modes x delta x tau x seeds")
    p_ab.add_argument("--config", type=str, default=None)
    p_ab.add_argument("--out", type=str, required=True)
    p_ab.add_argument("--deltas", type=str, default="0.1,0.2")
    p_ab.add_argument("--taus", type=str, default="0.1")
    p_ab.add_argument("--seeds", type=str, default="0")
    p_ab.add_argument("--modes", type=str, default=None, help="comma list of init,inject,both,none")
    p_ab.add_argument("--workers", type=int, default=1)
    _add_override_flags(p_ab)
    p_ab.set_defaults(handler=cmd_ablate)

    p_sel = sub.add_parser("select-ref", help="score and select a reference candidate")
    p_sel.add_argument("--query", type=str, default=None)
    p_sel.add_argument("--manifest", type=str, default=None, help="attention-stack directory")
    p_sel.add_argument("--topk", type=int, default=3)
    p_sel.add_argument("--seed", type=int, default=0)
    p_sel.add_argument("--source-dir", action="append", default=None)
    p_sel.add_argument("--sources", type=str, default=None, help="comma list of pexels,unsplash")
    p_sel.add_argument("--index", type=str, default=None)
    p_sel.add_argument("--phash-corpus", dest="phash_corpus", type=str, default=None)
    p_sel.add_argument("--limit", type=int, default=10)
    p_sel.add_argument("--min-year", dest="min_year", type=int, default=2024)
    p_sel.add_argument("--out", type=str, default=None)
    p_sel.set_defaults(handler=cmd_select_ref)

    p_idx = sub.add_parser("index", help="embedding-index file utilities")
    idx_sub = p_idx.add_subparsers(dest="index_cmd", required=True)
    p_build = idx_sub.add_parser("build")
    p_build.add_argument("--vectors", type=str, required=True, help=".npy of shape (N, D)")
    p_build.add_argument("--out", type=str, required=True)
    p_build.set_defaults(handler=cmd_index)
    p_query = idx_sub.add_parser("query")
    p_query.add_argument("--index", type=str, required=True)
    p_query.add_argument("--vector", type=str, required=True, help=".npy 1-D vector")
    p_query.set_defaults(handler=cmd_index)

    p_ph = sub.add_parser("phash", help="print 64-bit perceptual hashes of images")
    p_ph.add_argument("files", nargs="+")
    p_ph.set_defaults(handler=cmd_phash)

    p_tr = sub.add_parser("trace", help="dump a vanilla run's alignment trace as CSV")
    p_tr.add_argument("--config", type=str, default=None)
    p_tr.add_argument("--out", type=str, required=True)
    _add_override_flags(p_tr)
    p_tr.set_defaults(handler=cmd_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError, NotADirectoryError) as exc:
        # covers ConfigError/FormatError/ScheduleError and missing inputs
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failure boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
