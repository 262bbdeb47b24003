"""``ragforget`` command line: prepare, train, recommend, unlearn, perf-matrix, eval, bench.

All commands share one output directory::

    <out>/workspace.json        paths of the source files and the root seed
    <out>/splits/*.tsv          forget/train/val/test + manifest.json
    <out>/backbone.bin          frozen checkpoint (+ backbone.json config)
    <out>/perf_matrix.json      cached perf matrix for the diversity strategy

The retrieval corpus is train + forget; candidate lists exclude each user's
train and validation items.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import sub_seed
from .backbone import BackboneConfig, BackboneModel, train_backbone
from .benchmark import DEFAULT_GRID, build_perf_matrix, time_unlearning
from .corpus import Dataset, SplitBundle, load_interactions, load_item_metadata, make_splits
from .evaluation import (
    DEFAULT_KS,
    compare_forget_remain,
    dumps_report,
    evaluate_users,
    reports_to_csv,
)
from .exceptions import LeakageDetected, RagForgetError
from .generator import GenBackendConfig
from .pipeline import CRAGRU
from .retrieval import ForgetRequest, PerfMatrix, load_requests

logger = logging.getLogger("ragforget")

EXIT_OK, EXIT_ERROR, EXIT_LEAKAGE = 0, 1, 2


class CommandError(RagForgetError):
    pass


def _seeds(root):
    return {name: sub_seed(root, name) for name in ("split", "init", "sampling")}


class Workspace:
    def __init__(self, out):
        self.out = Path(out)

    @property
    def splits_dir(self):
        return self.out / "splits"

    @property
    def checkpoint(self):
        return self.out / "backbone.bin"

    @property
    def perf_matrix_path(self):
        return self.out / "perf_matrix.json"

    def info(self):
        path = self.out / "workspace.json"
        if not path.exists():
            raise CommandError(f"{path} missing; run `ragforget prepare` first")
        return json.loads(path.read_text())

    def bundle(self):
        if not (self.splits_dir / "manifest.json").exists():
            raise CommandError(f"no splits in {self.splits_dir}; run `ragforget prepare` first")
        return SplitBundle.read(self.splits_dir)

    def metadata(self):
        info = self.info()
        if not info.get("items"):
            return None
        return load_item_metadata(info["items"], info.get("items_format", "movielens_item"))

    def model(self):
        if not self.checkpoint.exists():
            raise CommandError(f"{self.checkpoint} missing; run `ragforget train` first")
        return BackboneModel.load(self.checkpoint)

    def perf_matrix(self, required):
        if self.perf_matrix_path.exists():
            return PerfMatrix.load(self.perf_matrix_path)
        if required:
            raise CommandError(f"{self.perf_matrix_path} missing; run `ragforget perf-matrix` first")
        return None


def _corpus(bundle):
    return Dataset.concat(bundle.train, bundle.forget)


def _exclusions(bundle):
    seen = Dataset.concat(bundle.train, bundle.val)
    return {u: seen.items_of(u) for u in seen.user_index}


def _backend(args):
    return GenBackendConfig(kind=args.backend, endpoint_url=args.endpoint,
                            model_name=args.model_name, timeout=args.timeout,
                            max_retries=args.max_retries, request_parallelism=max(1, args.jobs))


def _profiles(path):
    if not path:
        return None
    raw = json.loads(Path(path).read_text())
    return {int(k): str(v) for k, v in raw.items()}


def _pipeline(args, ws, bundle, model, metadata):
    seeds = _seeds(args.seed)
    perf = ws.perf_matrix(required=args.strategy == "diversity")
    pipe = CRAGRU(model, strategy=args.strategy, k=args.k, n_candidates=args.candidates,
                  backend=_backend(args), num_heads=args.heads, seed=seeds["sampling"])
    return pipe.fit(_corpus(bundle), metadata=metadata, perf_matrix=perf,
                    exclude=_exclusions(bundle), profiles=_profiles(args.profiles))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(obj))


def cmd_prepare(args):
    ws = Workspace(args.out)
    data = load_interactions(args.ratings, args.ratings_format)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    seeds = _seeds(args.seed)
    bundle = make_splits(data, ratios, args.forget, seeds["split"])
    if args.items:
        load_item_metadata(args.items, args.items_format)  # fail early on bad metadata
    manifest = bundle.write(ws.splits_dir)
    manifest["root_seed"] = args.seed
    (ws.splits_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    info = {"ratings": str(Path(args.ratings).resolve()),
            "items": str(Path(args.items).resolve()) if args.items else None,
            "items_format": args.items_format, "root_seed": args.seed}
    _write_json(ws.out / "workspace.json", info)
    print(f"{'split':<8}{'interactions':>14}{'users':>8}{'items':>8}")
    for name, part in bundle.parts().items():
        print(f"{name:<8}{len(part):>14}{part.n_users:>8}{part.n_items:>8}")
    print(f"{'total':<8}{len(data):>14}{data.n_users:>8}{data.n_items:>8}")
    if bundle.too_small_users:
        print(f"note: {len(bundle.too_small_users)} users with <3 remaining interactions kept in train")
    return EXIT_OK


def _backbone_config(args, seed):
    return BackboneConfig(embedding_dim=args.dim, epochs=args.epochs, learning_rate=args.lr,
                          l2_reg=args.l2, negatives_per_positive=args.negatives,
                          num_layers=args.layers, batch_size=args.batch_size, seed=seed)


def cmd_train(args):
    ws = Workspace(args.out)
    bundle = ws.bundle()
    config = _backbone_config(args, _seeds(args.seed)["init"])
    model = train_backbone(args.kind, bundle.train, config)
    model.save(ws.checkpoint)
    _write_json(ws.out / "backbone.json", {"kind": args.kind, "config": config.to_dict(),
                                           "checksum": model.checksum(),
                                           "trained_on": model.trained_on_fingerprint})
    print(f"trained {args.kind} on {len(bundle.train)} interactions -> {ws.checkpoint}")
    return EXIT_OK


def _parse_users(spec, universe):
    if spec in (None, "all"):
        return sorted(universe)
    return [int(u) for u in spec.split(",") if u.strip()]


def cmd_recommend(args):
    ws = Workspace(args.out)
    bundle = ws.bundle()
    pipe = _pipeline(args, ws, bundle, ws.model(), ws.metadata())
    if args.requests:
        pipe.unlearn(load_requests(args.requests))
    users = _parse_users(args.users, pipe.corpus_.user_index)
    rankings = pipe.predict(users, n_jobs=args.jobs)
    _write_json(ws.out / "recommendations.json", {str(u): r for u, r in sorted(rankings.items())})
    print(f"wrote rankings for {len(rankings)} users")
    return EXIT_OK


def cmd_unlearn(args):
    ws = Workspace(args.out)
    requests = load_requests(args.requests)
    target = ws.out / "unlearn"
    if not requests:
        print("empty request file; nothing to do")
        return EXIT_OK
    bundle = ws.bundle()
    model = ws.model()
    ckpt_before = ws.checkpoint.read_bytes()
    pipe = _pipeline(args, ws, bundle, model, ws.metadata())
    affected = pipe.unlearn(requests)
    rankings, leaks = {}, {}
    prompt_dir = target / "prompts"
    for u in affected:
        if not model.has_user(u):
            logger.warning("user %d unknown to the backbone; skipped", u)
            continue
        try:
            trace = pipe.recommend(u, prompt_dir=prompt_dir)
        except LeakageDetected as exc:
            leaks[str(u)] = str(exc)
            continue
        rankings[str(u)] = trace.ranking
        # Independent re-scan of the file that was actually written.
        text = (prompt_dir / f"u{u}.prompt.txt").read_text(encoding="utf-8")
        if text != trace.prompt.text:
            leaks[str(u)] = "audit dump differs from the prompt sent"
    if ws.checkpoint.read_bytes() != ckpt_before:
        raise CommandError("backbone checkpoint changed during unlearning")
    _write_json(target / "rankings.json", rankings)
    _write_json(target / "leakage.json", {"users_scanned": len(rankings) + len(leaks),
                                          "leakage_count": len(leaks), "details": leaks})
    print(f"unlearned {len(affected)} users; leakage count {len(leaks)}")
    return EXIT_LEAKAGE if leaks else EXIT_OK


def cmd_perf_matrix(args):
    ws = Workspace(args.out)
    bundle = ws.bundle()
    metadata = ws.metadata()
    if metadata is None:
        raise CommandError("perf-matrix needs item metadata (prepare --items)")
    grid = tuple(int(x) for x in args.grid.split(",")) if args.grid else DEFAULT_GRID
    m = build_perf_matrix(bundle.val, metadata.categories, ws.model(), grid,
                          _seeds(args.seed)["sampling"], history=bundle.train,
                          n_candidates=args.candidates, backend=_backend(args),
                          metadata=metadata, n_jobs=args.jobs)
    m.save(ws.perf_matrix_path)
    print(f"perf matrix {len(m.categories)}x{len(m.grid)} -> {ws.perf_matrix_path}")
    return EXIT_OK


def evaluate_pipeline(pipe, bundle, ks=DEFAULT_KS, n_jobs=1):
    """Remain-test and forget-target reports with the split's forget set active."""
    pipe.unlearn([(u, i) for u, i in zip(bundle.forget.users.tolist(), bundle.forget.items.tolist())])
    test = {u: bundle.test.items_of(u) for u in bundle.test.user_index}
    forget = {u: bundle.forget.items_of(u) for u in bundle.forget.user_index}
    users = sorted(set(test) | set(forget))
    rankings = pipe.predict(users, n_jobs=n_jobs)
    digest = json.dumps(pipe.get_params(deep=False), default=str, sort_keys=True)
    remain = evaluate_users(rankings, test, ks, "remain_test", digest)
    forgot = evaluate_users(rankings, forget, ks, "forget", digest)
    return remain, forgot


def cmd_eval(args):
    ws = Workspace(args.out)
    bundle = ws.bundle()
    model = ws.model()
    pipe = _pipeline(args, ws, bundle, model, ws.metadata())
    ks = tuple(int(k) for k in args.ks.split(","))
    remain, forgot = evaluate_pipeline(pipe, bundle, ks, args.jobs)
    cmp = compare_forget_remain(forgot, remain)
    target = ws.out / "eval"
    _write_json(target / f"report_{args.strategy}.json",
                {"remain_test": remain.to_json(), "forget": forgot.to_json(), "comparison": cmp.rows})
    text = "\n\n".join([remain.table(), forgot.table(), cmp.table()])
    (target / f"report_{args.strategy}.txt").write_text(text + "\n")
    if args.emit_csv:
        entries = [(f"cragru-{args.strategy}", args.dataset, model.kind, remain),
                   (f"cragru-{args.strategy}", args.dataset, model.kind, forgot)]
        (target / f"report_{args.strategy}.csv").write_text(reports_to_csv(entries))
    print(text)
    return EXIT_OK


def cmd_bench(args):
    ws = Workspace(args.out)
    bundle = ws.bundle()
    if not ws.checkpoint.exists():
        raise CommandError(f"{ws.checkpoint} missing; run `ragforget train` first")
    corpus = _corpus(bundle)
    rng = np.random.default_rng(sub_seed(args.seed, "bench"))
    users = sorted(u for u in bundle.train.user_index)
    user = int(args.user) if args.user is not None else int(rng.choice(users))
    requests = [ForgetRequest(user, None)]
    metadata = ws.metadata()
    modes = ("retrain", "cragru") if args.mode == "both" else (args.mode,)
    saved = json.loads((ws.out / "backbone.json").read_text()) if (ws.out / "backbone.json").exists() else None
    config = BackboneConfig(**saved["config"]) if saved else None
    perf = ws.perf_matrix(required=args.strategy == "diversity")
    reports = {}
    for mode in modes:
        report, _ = time_unlearning(requests, mode, checkpoint=ws.checkpoint, train=bundle.train,
                                    corpus=corpus, backbone_config=config, metadata=metadata,
                                    strategy=args.strategy, k=args.k, n_candidates=args.candidates,
                                    backend=_backend(args), perf_matrix=perf,
                                    exclude=_exclusions(bundle), seed=_seeds(args.seed)["sampling"])
        reports[mode] = report
        print(f"{mode:<8} {report.wall_seconds:>10.3f}s  backbone_retrained={report.backbone_retrained}")
    out = {"user": user, "interactions_forgotten": len(corpus.items_of(user)),
           "timing": {m: r.to_json() for m, r in reports.items()}}
    if len(reports) == 2 and reports["cragru"].wall_seconds > 0:
        out["speedup"] = reports["retrain"].wall_seconds / reports["cragru"].wall_seconds
        print(f"speedup  {out['speedup']:.1f}x")
    if args.with_metrics:
        pipe = _pipeline(args, ws, bundle, ws.model(), metadata)
        remain, forgot = evaluate_pipeline(pipe, bundle, DEFAULT_KS, args.jobs)
        out["metrics"] = {"remain_test": remain.to_json(), "forget": forgot.to_json()}
        print(remain.table())
        print(forgot.table())
    _write_json(ws.out / "bench" / "bench.json", out)
    return EXIT_OK


def _add_pipeline_flags(p):
    p.add_argument("--strategy", choices=["none", "preference", "diversity", "attention", "unlearn_only"],
                   default="attention")
    p.add_argument("--k", type=int, default=100, help="interactions retained in the prompt")
    p.add_argument("--candidates", type=int, default=50, help="backbone candidate list length")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--profiles", help="JSON object user -> profile text")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--out", default="ragforget-out", help="workspace directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")
    common.add_argument("--backend", default="mock-similarity",
                        choices=["remote", "mock-identity", "mock-similarity"])
    common.add_argument("--endpoint", help="OpenAI-compatible base URL (remote backend)")
    common.add_argument("--model-name", default="llama3.1-8b")
    common.add_argument("--timeout", type=float, default=60.0)
    common.add_argument("--max-retries", type=int, default=2)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ragforget", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="load ratings and write splits")
    p.add_argument("--ratings", required=True)
    p.add_argument("--ratings-format", choices=["tsv", "csv"], default="tsv")
    p.add_argument("--items")
    p.add_argument("--items-format", choices=["movielens_item", "genre_tsv"], default="movielens_item")
    p.add_argument("--forget", type=float, default=0.1, help="forget fraction")
    p.add_argument("--ratios", default="0.7,0.1,0.2", help="train,val,test fractions")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train the frozen backbone")
    p.add_argument("--kind", choices=["bpr", "lightgcn"], default="bpr")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", parents=[common], help="rank candidates for users")
    _add_pipeline_flags(p)
    p.add_argument("--users", default="all", help="comma-separated ids or 'all'")
    p.add_argument("--requests", help="forget-request file to activate first")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("unlearn", parents=[common], help="serve a forget-request file")
    _add_pipeline_flags(p)
    p.add_argument("--requests", required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("perf-matrix", parents=[common], help="measure the diversity perf matrix")
    p.add_argument("--grid", help="comma-separated retention percentages (default 0..100 step 10)")
    p.add_argument("--candidates", type=int, default=50)
    p.set_defaults(func=cmd_perf_matrix)

    p = sub.add_parser("eval", parents=[common], help="HR/NDCG on remain-test and forget targets")
    _add_pipeline_flags(p)
    p.add_argument("--ks", default="5,10,20")
    p.add_argument("--dataset", default="dataset", help="dataset label for CSV rows")
    p.add_argument("--emit-csv", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="retrain vs. retrieval unlearning latency")
    _add_pipeline_flags(p)
    p.add_argument("--mode", choices=["both", "retrain", "cragru"], default="both")
    p.add_argument("--user", type=int, help="user to forget (default: seeded random choice)")
    p.add_argument("--with-metrics", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = json.loads(Path(args.config).read_text())
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**defaults)
        parser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LeakageDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (RagForgetError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
