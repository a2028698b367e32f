"""``forge`` command line: config-driven pipelines writing artifacts plus manifests.

All artifacts live in one workspace directory (``--out``).  Every command
writes ``manifest_<command>.json`` recording the argv, the resolved config,
seeds, toolkit version and sha256 of every input and output, and
``forge rerun MANIFEST`` replays it and checks the output checksums.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, audits, compaction, container, harness, let, metrics, operators, synth
from .errors import ConfigError, ForgeError, InvalidArgument
from .panel import Panel, StageOntology

REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple[type | tuple, Any]]] = {
    "synth": {
        "n_branches": (int, 3), "depth_per_branch": (int, 3), "n_donors": (int, 6),
        "n_external_donors": (int, 2), "n_bench_donors": (int, 8), "n_tissues": (int, 3),
        "cells_per_stage": (int, 20), "G": (int, 64), "code_dim": (int, 8), "nuisance_dim": (int, 8),
        "noise_sigma": (float, 0.1), "nuisance_sigma": (float, 1.5), "signal_scale": (float, 3.0),
        "donor_effect": (float, 0.3), "tissue_effect": (float, 0.3), "n_layers": (int, 4),
        "n_heads": (int, 4), "planted_heads": (list, [[1, 2]]), "distractor_rank": (int, 4),
        "distractor_scale": (float, 1.0), "seed": (int, 0),
    },
    "operator": {
        "early": (list, None), "mid": (list, None), "late": (list, None),
        "layer": (int, None), "head": (int, None), "units": (list, None), "alphas": (list, None),
        "fit_top_k": (int, 1), "rank": (int, 8), "keep_factors": (list, None),
        "k_read": (int, 16), "k_write": (int, 16), "seed": (int, 0),
    },
    "head": {
        "variant": (str, "anchor"), "dim": (int, 10), "alpha": (float, 1e-3), "lr": (float, 1e-2),
        "steps": (int, 2000), "operator": (str, "drift"), "epochs": (int, 120), "batch": (int, 896),
        "cap_per_stage": (int, 500), "w_stage": (float, 1.0), "w_local": (float, 0.1),
        "w_recon": (float, 0.08), "w_cls": (float, 0.4), "lambda_topo": (float, 0.01),
        "lambda_compact": (float, 0.0), "reference": (str, "anchor"), "seed": (int, 0),
    },
    "gate": {
        "panel": (str, "internal"), "refit": (bool, True), "n_perm": (int, 1999),
        "random_fraction": (float, 0.2), "donor_fraction": (float, 0.2), "n_clades": (int, 1),
        "n_neighbors": (int, 10), "min_trustworthiness": (float, 0.80), "min_corr": (float, 0.20),
        "max_blocked_p": (float, 0.001), "seed": (int, 0),
    },
    "scan": {"dim": (int, 10), "lr": (float, 2e-2), "steps": (int, 600), "alpha": (float, 1e-3), "seed": (int, 0)},
    "compress": {"top_k": (int, 1), "rank": (int, 8), "keep_factors": (list, None), "k_read": (int, 16),
                 "k_write": (int, 16), "seed": (int, 0)},
    "ablate": {"operator": (str, "svd"), "head": (str, "svd"), "core": (list, None), "probe": (str, "linear"),
               "n_test_donors": (int, 2), "n_splits": (int, 3), "seed": (int, 0)},
    "bench": {"n_splits": (int, 12), "n_test_donors": (int, 2), "train_cap": (int, 100_000),
              "pca_k": (int, 10), "probe": (str, "linear"), "k_nn": (int, 10), "head": (str, "compact"),
              "operator": (str, "compact"), "reference": (str, "head"), "seed": (int, 0)},
    "audit": {"head": (str, "anchor"), "operator": (str, "drift"), "n_perm": (int, 999), "lam": (float, 8.0),
              "task": (str, "leaf01"), "from_group": (str, REQUIRED), "to_group": (str, REQUIRED),
              "n_steps": (int, 11), "k_nn": (int, 4), "ridge": (float, 1.0), "seed": (int, 0)},
}

# keys only needed by one audit mode
AUDIT_MODE_KEYS = {"intervene": ("from_group", "to_group")}


# ---------------------------------------------------------------------------
# config


def _load_toml(path: Path) -> dict:
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"not valid TOML: {exc}") from None


def _coerce(section: str, key: str, value, typ):
    field = f"{section}.{key}"
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(field, f"expected a boolean, got {value!r}")
        return value
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(field, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def resolve_config(raw: dict, section: str, seed_override: int | None, mode: str | None = None) -> dict:
    """Defaults + file values for one section, validated, with seed overrides applied."""
    for name in raw:
        if name not in SCHEMA:
            raise ConfigError(name, "unknown section")
    spec = SCHEMA[section]
    given = raw.get(section, {})
    if not isinstance(given, dict):
        raise ConfigError(section, "must be a table")
    for key in given:
        if key not in spec:
            raise ConfigError(f"{section}.{key}", "unknown key")
    out = {}
    for key, (typ, default) in spec.items():
        if key in given:
            out[key] = _coerce(section, key, given[key], typ)
        elif default is REQUIRED:
            needed = AUDIT_MODE_KEYS.get(mode, ()) if section == "audit" else (key,)
            if key in needed:
                raise ConfigError(f"{section}.{key}", "required key is missing")
            out[key] = None
        else:
            out[key] = default
    if seed_override is not None and "seed" in out:
        out["seed"] = int(seed_override)
    return out


def _seed_override(args) -> int | None:
    env = os.environ.get("FORGE_SEED")
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError("FORGE_SEED", f"not an integer: {env!r}") from None
    return args.seed


# ---------------------------------------------------------------------------
# workspace I/O


class Workspace:
    def __init__(self, root: Path):
        self.root = root
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.root / name

    def _read(self, name: str) -> bytes:
        p = self.path(name)
        if not p.exists():
            raise ForgeError(f"missing workspace artifact {name!r} in {self.root}")
        blob = p.read_bytes()
        self.inputs[name] = container.digest(blob)
        return blob

    def write_bytes(self, name: str, blob: bytes) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path(name).write_bytes(blob)
        self.outputs[name] = container.digest(blob)

    def write_text(self, name: str, text: str) -> None:
        self.write_bytes(name, text.encode())

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def read_json(self, name: str):
        return json.loads(self._read(name))

    def tensor(self) -> operators.WeightTensor:
        meta, arrays = container.loads(self._read("tensor.fgc"))
        return operators.WeightTensor(arrays["weights"])

    def operator(self, name: str) -> operators.FeatureOperator:
        return operators.FeatureOperator.from_bytes(self._read(f"op_{name}.fgc"))

    def head(self, name: str, prefer_gated: bool = True) -> let.LetHead:
        """A trained head; the gated (frozen) copy is preferred when one exists."""
        gated = f"head_{name}.gated.fgc"
        if prefer_gated and self.path(gated).exists():
            return let.LetHead.from_bytes(self._read(gated))
        return let.LetHead.from_bytes(self._read(f"head_{name}.fgc"))

    def ontology(self) -> StageOntology:
        d = self.read_json("ontology.json")
        return StageOntology(names=tuple(d["names"]), dist=np.array(d["dist"]), root=d["root"],
                             branch_of=d["branch_of"], depth=d["depth"])

    def panel(self, name: str) -> Panel:
        self._read(f"{name}.csv")
        return harness.read_panel_csv(self.path(f"{name}.csv"), ontology=self.ontology())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so JSON output is strict and stable."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _csv_text(rows: list[dict]) -> str:
    import csv
    import io

    buf = io.StringIO()
    if rows:
        cols = list(rows[0].keys())
        for r in rows[1:]:
            cols += [c for c in r if c not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for c, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def _opt(cfg) -> let.OptimizerConfig:
    return let.OptimizerConfig(lr=cfg["lr"], steps=cfg["steps"])


def cmd_synth(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "synth", seed)
    try:
        sc = synth.SynthConfig.from_dict(cfg)
    except InvalidArgument as exc:
        raise ConfigError("synth", str(exc)) from None
    data = synth.generate(sc)
    ws.write_bytes("tensor.fgc", container.dumps({"type": "weight_tensor"}, {"weights": data.tensor.weights}))
    onto = data.truth.ontology
    ws.write_json("ontology.json", {"names": list(onto.names), "dist": onto.dist, "root": onto.root,
                                    "branch_of": onto.branch_of, "depth": onto.depth})
    for name, panel in (("cells", data.cells), ("internal", data.internal), ("external", data.external)):
        path = ws.path(f"{name}.csv")
        ws.root.mkdir(parents=True, exist_ok=True)
        harness.write_panel_csv(panel, path)
        ws.outputs[f"{name}.csv"] = container.digest(path.read_bytes())
    ws.write_json("truth.json", {"planted_heads": data.truth.planted_heads, "planted_rank": data.truth.planted_rank,
                                 "code_beta": data.truth.code_beta, "code_residual": data.truth.code_residual,
                                 "binary_tasks": data.truth.binary_tasks,
                                 "branchpoints": data.truth.tree.n_branchpoints, "config": sc.to_dict()})
    ws.write_bytes("op_drift.fgc", operators.build_drift_operator(data.tensor).to_bytes())
    return {"synth": cfg}


def cmd_op(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "operator", seed)
    name = args.name
    if args.action == "build-drift":
        op = operators.build_drift_operator(ws.tensor(), cfg["early"], cfg["mid"], cfg["late"])
        name = name or "drift"
    elif args.action == "single":
        layer = args.layer if args.layer is not None else cfg["layer"]
        head = args.head if args.head is not None else cfg["head"]
        if layer is None or head is None:
            raise ConfigError("operator.layer/operator.head", "required for a single-head operator")
        op = operators.single_head(ws.tensor(), layer, head)
        name = name or f"L{layer}H{head}"
    elif args.action == "compose":
        units = cfg["units"]
        if units is None:
            raise ConfigError("operator.units", "required key is missing")
        units = [tuple(u) for u in units]
        if cfg["alphas"] is None:
            op = compaction.fit_compact_weights(ws.tensor(), units, ws.panel("internal"), seed=cfg["seed"])
        else:
            op = operators.compose_compact(ws.tensor(), units, cfg["alphas"])
        name = name or "compact"
    elif args.action == "svd":
        op = operators.truncate_svd(ws.operator(args.source or "compact"), args.rank or cfg["rank"])
        name = name or "svd"
    elif args.action == "prune":
        parent = ws.operator(args.source or "svd")
        keep = cfg["keep_factors"] if cfg["keep_factors"] is not None else list(range(parent.rank))
        op = operators.prune_sparse(parent, keep, cfg["k_read"], cfg["k_write"])
        name = name or "sparse"
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError("action", f"unknown op action {args.action!r}")
    ws.write_bytes(f"op_{name}.fgc", op.to_bytes())
    return {"operator": cfg}


def _gate_head(ws: Workspace, head: let.LetHead, op: operators.FeatureOperator, gcfg: dict, hcfg: dict | None):
    panel = ws.panel(gcfg["panel"])
    panel = panel.with_features(op.apply(panel.features))
    splits = let.GateSplits(gcfg["random_fraction"], gcfg["donor_fraction"], gcfg["n_clades"], gcfg["n_neighbors"])
    th = let.GateThresholds(gcfg["min_trustworthiness"], gcfg["min_corr"], gcfg["max_blocked_p"])
    refit = None
    if gcfg["refit"] and head.variant == "anchor" and gcfg["panel"] == "internal":
        opt = let.OptimizerConfig(lr=head.provenance.get("lr", 1e-2), steps=head.provenance.get("steps", 2000))

        def refit(p, w, rows):
            return let.train_anchor_head(p, k=head.k, alpha=head.hyper.get("alpha", 1e-3), seed=head.seed,
                                         opt=opt, pair_weights=w)
    return let.gate(head, panel, splits=splits, n_perm=gcfg["n_perm"], seed=gcfg["seed"], thresholds=th,
                    refit=refit)


def cmd_head(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "head", seed)
    if args.variant:
        cfg["variant"] = args.variant
    if args.dim:
        cfg["dim"] = args.dim
    name = args.name or cfg["variant"]
    if args.action == "train":
        op = ws.operator(args.operator or cfg["operator"])
        k = cfg["dim"]
        if cfg["variant"] == "anchor":
            panel = ws.panel("internal")
            head = let.train_anchor_head(panel.with_features(op.apply(panel.features)), k=k, alpha=cfg["alpha"],
                                         seed=cfg["seed"], opt=_opt(cfg))
        elif cfg["variant"] in ("cell", "hybrid"):
            cells = ws.panel("cells")
            cells = cells.with_features(op.apply(cells.features))
            weights = {k_: cfg[k_] for k_ in ("w_stage", "w_local", "w_recon", "w_cls")}
            kw = dict(k=k, weights=weights, cap_per_stage=cfg["cap_per_stage"], epochs=cfg["epochs"],
                      batch=min(cfg["batch"], cells.n), seed=cfg["seed"], opt=let.OptimizerConfig(lr=cfg["lr"]))
            if cfg["variant"] == "cell":
                head = let.train_cell_head(cells, **kw)
            else:
                ref = ws.head(cfg["reference"])
                ref_panel = ws.panel("internal")
                ref_panel = ref_panel.with_features(op.apply(ref_panel.features))
                head = let.train_hybrid_head(cells, ref, ref_panel, cfg["lambda_topo"], cfg["lambda_compact"], **kw)
        else:
            raise ConfigError("head.variant", f"must be anchor, cell or hybrid, got {cfg['variant']!r}")
        head = replace(head, provenance={**head.provenance, "operator": args.operator or cfg["operator"]})
        ws.write_bytes(f"head_{name}.fgc", head.to_bytes())
        return {"head": cfg}
    gcfg = resolve_config(raw, "gate", seed)
    head = ws.head(name, prefer_gated=args.action != "gate")
    op = ws.operator(head.provenance.get("operator", cfg["operator"]))
    if args.action == "gate":
        report = _gate_head(ws, head, op, gcfg, cfg)
        ws.write_json(f"gate_{name}.json", _clean(report.to_dict()))
        ws.write_bytes(f"head_{name}.gated.fgc", head.freeze(report).to_bytes())
        print(f"gate {'PASSED' if report.passed else 'FAILED'}: trust={report.trustworthiness:.3f} "
              f"corr=({report.corr_random:.3f}, {report.corr_donor:.3f}, {report.corr_clade:.3f}) "
              f"p={report.blocked_p:.4f}")
        return {"head": cfg, "gate": gcfg}
    # transfer
    if not head.frozen:
        raise ForgeError(f"head {name!r} is not gated; run `forge head gate` first")
    ext = ws.panel("external")
    Z, report = let.transfer(head, ext.with_features(op.apply(ext.features)), n_perm=gcfg["n_perm"],
                             seed=gcfg["seed"])
    ws.write_text(f"latent_{name}_external.csv",
                  _csv_text([{"row_id": r, **{f"z{j}": float(v) for j, v in enumerate(z)}}
                             for r, z in zip(ext.row_id, Z)]))
    ws.write_json(f"transfer_{name}.json", _clean(report.to_dict()))
    return {"head": cfg, "gate": gcfg}


def cmd_scan(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "scan", seed)
    rows = compaction.scan_heads(ws.tensor(), ws.panel("internal"), ws.panel("external"), k=cfg["dim"],
                                 seed=cfg["seed"], opt=_opt(cfg), alpha=cfg["alpha"], workers=args.workers)
    ws.write_text("scan.csv", _csv_text([r.__dict__ for r in rows]))
    return {"scan": cfg}


def cmd_compress(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "compress", seed)
    import csv

    ws._read("scan.csv")
    with open(ws.path("scan.csv")) as fh:
        ranked = sorted(csv.DictReader(fh), key=lambda r: int(r["rank"]))
    units = [(int(r["layer"]), int(r["head"])) for r in ranked[: cfg["top_k"]]]
    tensor = ws.tensor()
    compact = compaction.fit_compact_weights(tensor, units, ws.panel("internal"), seed=cfg["seed"])
    low = operators.truncate_svd(compact, cfg["rank"])
    keep = cfg["keep_factors"] if cfg["keep_factors"] is not None else list(range(low.rank))
    sparse = operators.prune_sparse(low, keep, cfg["k_read"], cfg["k_write"])
    summary = {"units": units, "alphas": compact.meta.get("alphas"), "rank": cfg["rank"],
               "svd_frobenius_error": low.meta.get("frobenius_error"),
               "active_weights": sparse.active_weights()}
    for name, op in (("compact", compact), ("svd", low), ("sparse", sparse)):
        ws.write_bytes(f"op_{name}.fgc", op.to_bytes())
        summary[f"bytes_{name}"] = len(op.to_bytes())
    ws.write_json("compress.json", _clean(summary))
    return {"compress": cfg}


def _endpoints(cells: Panel, rows) -> list:
    return [compaction.Endpoint("stage", cells.stage[rows]),
            compaction.Endpoint("branch", cells.branch[rows], "macro_f1")]


def cmd_ablate(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "ablate", seed)
    mode = args.mode
    op = ws.operator(cfg["operator"])
    if op.kind not in ("low_rank", "sparse"):
        raise ConfigError("ablate.operator", f"needs a low_rank or sparse operator, got {op.kind}")
    head = ws.head(cfg["head"])
    cells = ws.panel("cells")
    plans = harness.make_splits(cells, cfg["n_splits"], cfg["n_test_donors"], seed=cfg["seed"])
    plan = plans[0]
    Ztr = head.encode(op.apply(cells.features[plan.train_rows]))
    probes = {"stage": harness.fit_probe(Ztr, cells.stage[plan.train_rows], cfg["probe"], cfg["seed"]),
              "branch": harness.fit_probe(Ztr, cells.branch[plan.train_rows], cfg["probe"], cfg["seed"])}
    X_eval = cells.features[plan.test_rows]
    eps = _endpoints(cells, plan.test_rows)
    if mode == "loo":
        tab = compaction.ablate_factors_loo(op, head, probes, X_eval, eps)
        ws.write_text("ablate_loo.csv", _csv_text(tab.rows()))
        ws.write_json("ablate_loo.json", _clean({"intact": tab.intact, "order": tab.order,
                                                 "concentration": tab.concentration,
                                                 "frozen_digest": tab.frozen_digest}))
    elif mode == "subset":
        core = cfg["core"] if cfg["core"] is not None else list(range(min(4, op.rank)))
        sw = compaction.subset_sweep(op, head, probes, core, X_eval, eps)
        ws.write_text("ablate_subset.csv", _csv_text(sw.rows()))
        ws.write_json("ablate_subset.json", _clean({"intact": sw.intact,
                                                    "best": {k: {"subset": v[0], "value": v[1], "ratio": v[2]}
                                                             for k, v in sw.best.items()}}))
    else:
        core = cfg["core"] if cfg["core"] is not None else list(range(min(4, op.rank)))
        evals = [(cells.features[p.test_rows], _endpoints(cells, p.test_rows)) for p in plans]
        rows = compaction.core_sufficiency(op, head, probes, core, evals)
        ws.write_text("ablate_core.csv", _csv_text(rows))
    loadings = []
    for f in range(op.rank):
        loadings += compaction.factor_loadings(op, f)
    ws.write_text("factor_loadings.csv", _csv_text(loadings))
    return {"ablate": cfg}


def cmd_bench(ws: Workspace, raw: dict, args, seed) -> dict:
    cfg = resolve_config(raw, "bench", seed)
    cells = ws.panel("cells")
    truth = ws.read_json("truth.json")
    op = ws.operator(cfg["operator"])
    head = ws.head(cfg["head"])
    methods = [harness.MethodUnderTest("head", "let_head", probe=cfg["probe"], head=head, operator=op),
               harness.MethodUnderTest("raw", "raw", probe=cfg["probe"]),
               harness.MethodUnderTest(f"pca{cfg['pca_k']}", "pca", probe=cfg["probe"], k=cfg["pca_k"]),
               harness.MethodUnderTest(f"svd{cfg['pca_k']}", "svd", probe=cfg["probe"], k=cfg["pca_k"])]
    if args.external:
        methods.append(harness.MethodUnderTest("external", "external", probe=cfg["probe"],
                                               external=harness.read_external_latent(args.external)))
    splits = harness.make_splits(cells, cfg["n_splits"], cfg["n_test_donors"], cfg["train_cap"], cfg["seed"])
    t0 = time.perf_counter()
    report = harness.run_campaign(methods, cells, splits, cfg["reference"],
                                  binary_tasks={k: tuple(v) for k, v in truth["binary_tasks"].items()},
                                  k_nn=cfg["k_nn"], seed=cfg["seed"])
    print(f"campaign finished in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    bench_dir = ws.path("bench")
    digests = report.write(bench_dir)
    for n, d in digests.items():
        ws.outputs[f"bench/{n}"] = d
    return {"bench": cfg}


def cmd_audit(ws: Workspace, raw: dict, args, seed) -> dict:
    mode = args.mode
    cfg = resolve_config(raw, "audit", seed, mode=mode)
    head = ws.head(cfg["head"])
    op = ws.operator(head.provenance.get("operator", cfg["operator"]))
    cells = ws.panel("cells")
    F = op.apply(cells.features)
    Z = head.encode(F)
    onto = cells.ontology
    out: dict[str, Any]
    if mode == "ripple":
        out = {"axes": audits.latent_ripple_scan(Z, n_perm=cfg["n_perm"], seed=cfg["seed"])}
        _, _, vecs = audits.weighted_pca(Z)
        D3 = (Z - Z.mean(0)) @ vecs[:, :3]
        out["flatness"] = audits.flatness_ripple_3d(D3, n_perm=cfg["n_perm"], seed=cfg["seed"]).__dict__
    elif mode == "lens":
        truth = ws.read_json("truth.json")
        neg, pos = truth["binary_tasks"][cfg["task"]]
        rows = np.isin(cells.stage, (neg, pos))
        _, _, vecs = audits.weighted_pca(Z[rows])
        D3 = (Z[rows] - Z[rows].mean(0)) @ vecs[:, :3]
        res = audits.separation_lens(Z[rows], D3, cells.stage[rows] == pos, lam=cfg["lam"])
        out = {"auroc_before": res.auroc_before, "auroc_after": res.auroc_after,
               "trustworthiness_delta": res.trustworthiness_delta, "axis": res.axis}
        ws.write_text("lens_coords.csv", _csv_text([{"row_id": r, "x": c[0], "y": c[1], "z": c[2]}
                                                    for r, c in zip(cells.row_id[rows], res.coords)]))
    elif mode == "intervene":
        res = audits.latent_intervention(head, F, cells.stage, cfg["from_group"], cfg["to_group"],
                                         n_steps=cfg["n_steps"], depth=onto.depth, seed=cfg["seed"])
        out = {"t": res.t, "target_fraction": res.target_fraction, "mean_depth": res.mean_depth,
               "rho": res.rho, "p": res.p}
    elif mode == "topology":
        res = audits.branch_topology(Z, cells.stage, onto.root, terminals=onto.terminals,
                                     branch_of=onto.branch_of, k_nn=cfg["k_nn"])
        out = res.__dict__
    elif mode == "dims":
        truth = ws.read_json("truth.json")
        binary = {k: (np.isin(cells.stage, v), cells.stage == v[1]) for k, v in truth["binary_tasks"].items()}
        out = audits.dimension_audit(Z, cells.stage, cells.branch, cells.stage_depth, binary)
    else:  # axis
        depth = cells.stage_depth.astype(float)
        if depth.std() == 0:
            raise ForgeError("axis audit needs more than one stage depth")
        comps = ((depth - depth.mean()) / depth.std())[:, None]
        res = audits.composite_axis(Z, comps, depth, cells.blocks(), lam=cfg["ridge"], n_perm=cfg["n_perm"],
                                    seed=cfg["seed"])
        out = res.__dict__
    ws.write_json(f"audit_{mode}.json", _clean(out))
    return {"audit": cfg}


def cmd_report(ws: Workspace, raw: dict, args, seed) -> dict:
    manifests = sorted(p.name for p in ws.root.glob("manifest_*.json") if p.name != "manifest_report.json")
    summary = {"version": __version__, "manifests": {}}
    for m in manifests:
        d = json.loads(ws._read(m))
        summary["manifests"][m] = {"command": d["command"], "outputs": d["outputs"]}
    for name in sorted(p.name for p in ws.root.glob("gate_*.json")) + \
            sorted(p.name for p in ws.root.glob("transfer_*.json")) + \
            [n for n in ("compress.json", "bench/summary.json") if ws.path(n).exists()]:
        summary[name] = ws.read_json(name)
    ws.write_json("report.json", summary)
    lines = [f"# forge report (toolkit {__version__})", ""]
    for name in sorted(k for k in summary if k.startswith(("gate_", "transfer_"))):
        g = summary[name]
        lines.append(f"- {name}: passed={g['passed']} trust={g['trustworthiness']} "
                     f"corr=({g['corr_random']}, {g['corr_donor']}, {g['corr_clade']}) p={g['blocked_p']}")
    if "bench/summary.json" in summary:
        lines += ["", "| method | metric | mean delta vs reference | p | q |", "|---|---|---|---|---|"]
        for r in summary["bench/summary.json"]["paired"]:
            lines.append(f"| {r['method']} | {r['metric']} | {r['mean_delta']} | {r['p']} | {r['q']} |")
    ws.write_text("report.md", "\n".join(lines) + "\n")
    return {}


COMMANDS = {"synth": cmd_synth, "op": cmd_op, "head": cmd_head, "scan": cmd_scan, "compress": cmd_compress,
            "ablate": cmd_ablate, "bench": cmd_bench, "audit": cmd_audit, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing, manifests, rerun


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--workers", type=int, default=1, help="worker pool size for scan units")
    common.add_argument("--out", type=Path, default=Path("forge_out"), help="workspace directory")

    p = argparse.ArgumentParser(prog="forge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"forge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a planted synthetic workspace")

    op = sub.add_parser("op", parents=[common], help="build feature operators")
    op.add_argument("action", choices=["build-drift", "single", "compose", "svd", "prune"])
    op.add_argument("--name", default=None)
    op.add_argument("--from", dest="source", default=None, help="parent operator name (svd/prune)")
    op.add_argument("--layer", type=int, default=None)
    op.add_argument("--head", type=int, default=None)
    op.add_argument("--rank", type=int, default=None)

    hd = sub.add_parser("head", parents=[common], help="train, gate or transfer a LET head")
    hd.add_argument("action", choices=["train", "gate", "transfer"])
    hd.add_argument("--variant", choices=["anchor", "cell", "hybrid"], default=None)
    hd.add_argument("--dim", type=int, default=None)
    hd.add_argument("--name", default=None)
    hd.add_argument("--operator", default=None)

    sub.add_parser("scan", parents=[common], help="rank every single-head operator")
    sub.add_parser("compress", parents=[common], help="compact, low-rank and sparse operators from the scan")
    ab = sub.add_parser("ablate", parents=[common], help="fixed-probe factor ablation")
    ab.add_argument("--mode", choices=["loo", "subset", "core"], default="loo")
    bn = sub.add_parser("bench", parents=[common], help="benchmark campaign")
    bn.add_argument("action", choices=["run"])
    bn.add_argument("--external", type=Path, default=None, help="external latent CSV keyed by row_id")
    au = sub.add_parser("audit", parents=[common], help="geometric audits")
    au.add_argument("mode", choices=["ripple", "lens", "intervene", "topology", "dims", "axis"])
    sub.add_parser("report", parents=[common], help="collect gate, compression and benchmark summaries")
    rr = sub.add_parser("rerun", help="replay a manifest and verify its output checksums")
    rr.add_argument("manifest", type=Path)
    return p


def _manifest_name(args) -> str:
    parts = [args.command] + [str(getattr(args, a)) for a in ("action", "mode") if getattr(args, a, None)]
    name = getattr(args, "name", None)
    if name:
        parts.append(name)
    return "manifest_" + "_".join(parts) + ".json"


def _execute(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        return _rerun(args.manifest)
    raw = _load_toml(args.config) if args.config is not None else {}
    seed = _seed_override(args)
    ws = Workspace(args.out)
    resolved = COMMANDS[args.command](ws, raw, args, seed)
    manifest = {"command": args.command, "argv": argv, "config": raw, "resolved": resolved,
                "seed_override": seed, "toolkit_version": __version__,
                "inputs": dict(sorted(ws.inputs.items())), "outputs": dict(sorted(ws.outputs.items()))}
    ws.root.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n"
    (ws.root / _manifest_name(args)).write_text(text)
    return 0


def _rerun(manifest_path: Path) -> int:
    m = json.loads(Path(manifest_path).read_text())
    root = Path(manifest_path).parent
    for name, digest in m["inputs"].items():
        p = root / name
        if name.startswith("manifest_"):
            continue
        if not p.exists() or container.digest(p.read_bytes()) != digest:
            print(f"input {name} differs from the manifest", file=sys.stderr)
            return 1
    argv = _strip_opt(list(m["argv"]), "--config")
    argv = _strip_opt(argv, "--out") + ["--out", str(root)]
    argv = _strip_opt(argv, "--seed")
    if m.get("seed_override") is not None:
        argv += ["--seed", str(m["seed_override"])]
    cfg_path = None
    if m["config"]:
        cfg_path = root / f".rerun_{Path(manifest_path).stem}.toml"
        cfg_path.write_text(_to_toml(m["config"]))
        argv += ["--config", str(cfg_path)]
    env_seed = os.environ.pop("FORGE_SEED", None)
    try:
        code = _execute(argv)
    finally:
        if env_seed is not None:
            os.environ["FORGE_SEED"] = env_seed
        if cfg_path is not None:
            cfg_path.unlink(missing_ok=True)
    if code != 0:
        return code
    bad = [n for n, d in m["outputs"].items() if container.digest((root / n).read_bytes()) != d]
    if bad:
        print(f"outputs differ from the manifest: {', '.join(bad)}", file=sys.stderr)
        return 1
    print(f"rerun reproduced {len(m['outputs'])} artifacts byte-for-byte")
    return 0


def _strip_opt(argv: list[str], flag: str) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out


def _to_toml(cfg: dict) -> str:
    lines = []
    for section, table in cfg.items():
        lines.append(f"[{section}]")
        for k, v in table.items():
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _execute(argv)
    except ConfigError as exc:
        print(f"forge: config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else 2
    except (ForgeError, np.linalg.LinAlgError, OSError) as exc:
        print(f"forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
