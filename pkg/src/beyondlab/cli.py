"""Command-line front end: ``beyondlab <command> [flags]``.

Artifacts live under ``--out`` (default ``./run``)::

    data/{train,test}.bynd      models/{classifier,encoder,head}.ckpt
    detector/thresholds.json    attacks/<kind>-<eps>.bynd
    results/<run-id>/           summary.json, config.json, CSV/SVG tables
"""

from __future__ import annotations

import argparse
import difflib
import json
import re
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attacks as atk
from . import config as cfgmod
from . import dataio, evaluation, models, theory
from .detector import (
    DetectorThresholds,
    ScoreNormalizer,
    calibrate_from_scores,
    input_seeds,
    records_from_scores,
    score_inputs,
)

COMMANDS = ("gen-data", "train-clf", "train-ssl", "probe", "calibrate", "attack", "detect", "eval", "sweep",
            "theory", "cost", "report")

MODULE_NAMES = {"dataio": "data-io", "ndt": "ndt-core", "config": "cli", "cli": "cli"}


class CliError(Exception):
    kind = "usage"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with close-match suggestions; usage errors raise instead of exiting."""

    known: Sequence[str] = ()

    def error(self, message):
        hint = ""
        # "invalid choice: 'x' (choose from 'a', 'b')" names the token and its options
        quoted = re.findall(r"'([^']+)'", message)
        if quoted and "choose from" in message:
            pool, words = quoted[1:], quoted[:1]
        else:
            pool, words = self.known, [w.strip(":,") for w in message.split() if w.startswith("-")]
        for w in words:
            close = difflib.get_close_matches(w, pool, n=1)
            if close and close[0] != w:
                hint = f" (did you mean {close[0]}?)"
                break
        raise UsageError(f"{self.prog}: {message}{hint}")


# -- workspace ----------------------------------------------------------------------

class Workspace:
    def __init__(self, root, cfg: dict, force: bool):
        self.root = Path(root)
        self.cfg = cfg
        self.force = force

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def claim(self, *paths: Path) -> None:
        """Fail before doing any work if an output exists and --force is absent."""
        for p in paths:
            if p.exists() and not self.force:
                raise dataio.RunExistsError(f"{p} exists; use --force to overwrite")

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise CliError(f"missing {what} at {path}; run the producing command first")
        return path

    # data
    def train(self) -> dataio.DatasetContainer:
        return dataio.load_dataset(self.require(self.path("data", "train.bynd"), "training data"))

    def test(self) -> dataio.DatasetContainer:
        return dataio.load_dataset(self.require(self.path("data", "test.bynd"), "test data"))

    def splits(self):
        """Calibration and evaluation halves of the test set."""
        test = self.test()
        n_cal = int(round(len(test) * self.cfg["detector"]["calibration_fraction"]))
        idx = np.arange(len(test))
        return test.subset(idx[:n_cal]), test.subset(idx[n_cal:])

    # models
    def bundle(self, parts=("classifier", "encoder", "head")) -> models.ModelBundle:
        out = models.ModelBundle()
        for name in parts:
            loaded = models.load_checkpoint(self.require(self.path("models", f"{name}.ckpt"), f"{name} checkpoint"))
            setattr(out, name, getattr(loaded, name))
        return out

    def thresholds(self) -> DetectorThresholds:
        path = self.require(self.path("detector", "thresholds.json"), "calibrated thresholds")
        return DetectorThresholds.from_dict(json.loads(path.read_text()))

    def results(self, run_id: str, summary: dict, tables=None, curves=None, verdicts=None, extra=None) -> Path:
        extra = dict(extra or {})
        extra["config.json"] = dataio.dumps_json(self.cfg)
        return dataio.write_results(self.path("results"), run_id, tables, curves, verdicts, summary, extra, self.force)


def _train_config(section: dict, seed: int, cls=models.TrainConfig, **extra):
    keys = ("epochs", "batch", "lr", "momentum")
    return cls(seed=seed, **{k: section[k] for k in keys}, **extra)


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(ws: Workspace, args) -> dict:
    d = ws.cfg["data"]
    train_p, test_p = ws.path("data", "train.bynd"), ws.path("data", "test.bynd")
    ws.claim(train_p, test_p, ws.path("results", "gen-data"))
    seed = ws.cfg["seed"]
    size = tuple(d["size"])
    train = dataio.generate_synthetic_dataset(d["classes"], d["per_class"], size, seed=2 * seed + 1,
                                              hue_jitter=d["hue_jitter"])
    test = dataio.generate_synthetic_dataset(d["classes"], d["test_per_class"], size, seed=2 * seed + 2,
                                             hue_jitter=d["hue_jitter"])
    train_p.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(train_p, train)
    dataio.save_dataset(test_p, test)
    summary = {"train_count": len(train), "test_count": len(test), "classes": d["classes"],
               "train_tag": train.provenance, "test_tag": test.provenance}
    ws.results("gen-data", summary)
    return summary


def _widths(ws):
    return tuple(ws.cfg["models"]["widths"])


def cmd_train_clf(ws: Workspace, args) -> dict:
    out = ws.path("models", "classifier.ckpt")
    ws.claim(out, ws.path("results", "train-clf"))
    train, test = ws.train(), ws.test()
    seed = ws.cfg["seed"]
    shape = train.as_float().shape[1:]
    net = models.ClassifierNet(train.num_classes, shape, _widths(ws), seed=seed)
    net = models.train_classifier(train, _train_config(ws.cfg["models"]["classifier"], seed), test, net)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(out, models.ModelBundle(classifier=net), {"seed": seed})
    ws.results("train-clf", dict(net.metrics))
    return net.metrics


def cmd_train_ssl(ws: Workspace, args) -> dict:
    out = ws.path("models", "encoder.ckpt")
    ws.claim(out, ws.path("results", "train-ssl"))
    train = ws.train()
    seed = ws.cfg["seed"]
    enc = models.SSLEncoder(train.as_float().shape[1:], _widths(ws), seed=seed)
    enc = models.train_ssl(train, _train_config(ws.cfg["models"]["ssl"], seed, models.SSLConfig), enc)
    z = models.represent(enc, train.as_float()[:256])
    enc.metrics["embedding_std"] = models.embedding_std(z)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(out, models.ModelBundle(encoder=enc), {"seed": seed})
    ws.results("train-ssl", dict(enc.metrics))
    return enc.metrics


def cmd_probe(ws: Workspace, args) -> dict:
    out = ws.path("models", "head.ckpt")
    ws.claim(out, ws.path("results", "probe"))
    train, test = ws.train(), ws.test()
    enc = ws.bundle(("encoder",)).encoder
    section = ws.cfg["models"]["head"]
    hc = _train_config(section, ws.cfg["seed"], models.HeadConfig, aug_rounds=section["aug_rounds"])
    head = models.train_class_head(enc, train, hc, test)
    models.save_checkpoint(out, models.ModelBundle(head=head), {"seed": ws.cfg["seed"]})
    ws.results("probe", dict(head.metrics))
    return head.metrics


def _policy(ws):
    return cfgmod.policy_of(ws.cfg)


def cmd_calibrate(ws: Workspace, args) -> dict:
    out = ws.path("detector", "thresholds.json")
    ws.claim(out, ws.path("results", "calibrate"))
    bundle = ws.bundle()
    cal, held = ws.splits()
    det = ws.cfg["detector"]
    seed = ws.cfg["seed"]
    cal_scores = score_inputs(bundle, cal.as_float(), det["k"], _policy(ws), input_seeds(seed, len(cal), 1_000_000))
    th = calibrate_from_scores(cal_scores, det["target_fpr"])
    held_scores = score_inputs(bundle, held.as_float(), det["k"], _policy(ws), input_seeds(seed, len(held), 2_000_000))
    summary = {k: v for k, v in th.to_dict().items() if k != "normalizer"}
    summary["heldout_fpr"] = float(np.mean(th.reject(held_scores)))
    summary["calibration_count"] = len(cal)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio._atomic_write(out, dataio.dumps_json(th.to_dict()).encode())
    ws.results("calibrate", summary)
    return summary


def _quantize(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Round to 8-bit levels without leaving the budget (bounds snap towards the clean pixel)."""
    q = np.rint(x_adv * 255)
    base = np.rint(x * 255)
    lim = np.floor(eps * 255 + 1e-9)
    return np.clip(q, base - lim, base + lim) / 255.0


def _attack_name(kind: str, eps: float) -> str:
    return f"{kind}-eps{eps_tag(eps)}"


def eps_tag(eps: float) -> str:
    return cfgmod.eps_label(eps).replace("/", "_")


def run_attack(ws: Workspace, kind: str, eps: float, steps: int, x: np.ndarray, y: np.ndarray, bundle) -> np.ndarray:
    a = ws.cfg["attacks"]
    seed = ws.cfg["seed"]
    step_size = a["step_size"]
    if step_size is not None:
        step_size = min(step_size, eps)
    budget = atk.AttackBudget(eps, steps, step_size, seed=seed)
    if kind == "fgsm":
        return atk.fgsm(x, y, bundle.classifier, eps).x_adv
    if kind == "pgd":
        return atk.pgd(x, y, bundle.classifier, budget).x_adv
    y_t = atk.least_likely_target(bundle.classifier, x)
    if kind == "adaptive":
        conf = atk.AdaptiveConfig(a["alpha"], a["k_eot"], budget, tuple(_policy(ws)), seed)
        return atk.adaptive_attack(x, y_t, bundle, conf).x_adv
    if kind == "orthogonal-pgd":
        return atk.orthogonal_pgd(x, y_t, bundle, ws.thresholds(), budget, a["strategy"], a["k_eot"], _policy(ws), seed).x_adv
    raise CliError(f"unknown attack kind {kind!r}")


ATTACK_KINDS = ("fgsm", "pgd", "adaptive", "orthogonal-pgd")


def cmd_attack(ws: Workspace, args) -> dict:
    a = ws.cfg["attacks"]
    kind, eps = a["kind"], a["eps"]
    name = _attack_name(kind, eps)
    out = ws.path("attacks", f"{name}.bynd")
    ws.claim(out, ws.path("results", f"attack-{name}"))
    bundle = ws.bundle()
    _, held = ws.splits()
    held = held.subset(np.arange(min(len(held), a["max_samples"])))
    x, y = held.as_float(), held.labels.astype(np.int64)
    x_adv = _quantize(run_attack(ws, kind, eps, a["steps"], x, y, bundle), x, eps)
    atk.check_budget(x, x_adv, eps + 1e-12)
    adv = dataio.DatasetContainer.from_float(x_adv, held.labels, held.num_classes, f"{kind}/eps={cfgmod.eps_label(eps)}")
    clean_pred = models.predict_labels(bundle.classifier, x)
    adv_pred = models.predict_labels(bundle.classifier, adv.as_float())
    summary = {"attack": kind, "eps": eps, "steps": a["steps"], "count": len(adv),
               "clean_accuracy": float(np.mean(clean_pred == y)), "adversarial_accuracy": float(np.mean(adv_pred == y)),
               "success_rate": float(np.mean((clean_pred == y) & (adv_pred != y))),
               "max_linf": float(np.max(np.abs(adv.as_float() - x)))}
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(out, adv)
    ws.results(f"attack-{name}", summary)
    return summary


def _input_container(ws: Workspace, path):
    if path is None:
        return ws.splits()[1], "heldout"
    p = Path(path)
    return dataio.load_dataset(ws.require(p, "input container")), p.stem


def cmd_detect(ws: Workspace, args) -> dict:
    data, name = _input_container(ws, args.input)
    run_id = f"detect-{name}"
    ws.claim(ws.path("results", run_id))
    bundle, th = ws.bundle(), ws.thresholds()
    scores = score_inputs(bundle, data.as_float(), th.k, _policy(ws), input_seeds(ws.cfg["seed"], len(data), 3_000_000))
    recs = records_from_scores(scores, th)
    rate = float(np.mean([r.rejected for r in recs]))
    summary = {"input": name, "provenance": data.provenance, "count": len(recs), "rejected": int(sum(r.rejected for r in recs)),
               "reject_rate": rate, "target_fpr": th.target_fpr}
    if "adversarial" not in data.provenance and "eps=" not in data.provenance:
        summary["fpr"] = rate
    ws.results(run_id, summary, verdicts=[r.to_dict() for r in recs])
    return summary


def _sweep_context(ws: Workspace, bundle, th) -> evaluation.SweepContext:
    cal, held = ws.splits()
    det, a, ev = ws.cfg["detector"], ws.cfg["attacks"], ws.cfg["eval"]
    seed = ws.cfg["seed"]
    policy = _policy(ws)
    cal_scores = score_inputs(bundle, cal.as_float(), det["k"], policy, input_seeds(seed, len(cal), 1_000_000))
    held_scores = score_inputs(bundle, held.as_float(), det["k"], policy, input_seeds(seed, len(held), 2_000_000))
    n = min(len(held), ev["max_samples"])
    return evaluation.SweepContext(bundle, cal_scores, held_scores, held.as_float()[:n], held.labels[:n].astype(np.int64),
                                   a["eps"], a["steps"], a["alpha"], a["k_eot"], det["target_fpr"], "pgd", seed,
                                   tuple(policy))


def cmd_eval(ws: Workspace, args) -> dict:
    if args.input is None:
        raise CliError("eval needs --input <adversarial container>")
    adv, name = _input_container(ws, args.input)
    run_id = f"eval-{name}"
    ws.claim(ws.path("results", run_id))
    bundle, th = ws.bundle(), ws.thresholds()
    _, held = ws.splits()
    seed = ws.cfg["seed"]
    policy = _policy(ws)
    n = len(adv)
    if n > len(held):
        raise CliError("adversarial container is larger than the evaluation split it was drawn from")
    x, y = held.as_float()[:n], held.labels[:n].astype(np.int64)
    clean_scores = score_inputs(bundle, held.as_float(), th.k, policy, input_seeds(seed, len(held), 2_000_000))
    adv_scores = score_inputs(bundle, adv.as_float(), th.k, policy, input_seeds(seed, n, 4_000_000))
    ok = (models.predict_labels(bundle.classifier, x) == y) & (adv_scores.cls_labels != y)
    norm = th.normalizer or ScoreNormalizer.fit(clean_scores)
    s_clean, s_adv = norm.statistics(clean_scores), norm.statistics(adv_scores.take(ok))
    summary = {"input": name, "provenance": adv.provenance, "n_attacked": n, "n_adv": int(ok.sum()),
               "n_clean": len(held), "robust_accuracy": evaluation.robust_tally(th.reject(adv_scores), adv_scores.cls_labels, y),
               "heldout_fpr": float(np.mean(th.reject(clean_scores)))}
    curves = {}
    if ok.any():
        curve = evaluation.roc_curve(s_adv["combined"], s_clean["combined"])
        summary["auc"] = curve.auc
        summary["tpr_at_fpr_5"] = evaluation.tpr_at_fpr(curve, ws.cfg["eval"]["fpr_cap"])
        summary["auc_label"] = evaluation.auc_of(s_adv["label"], s_clean["label"])
        summary["auc_rep"] = evaluation.auc_of(s_adv["rep"], s_clean["rep"])
        summary["detected_rate"] = float(np.mean(th.reject(adv_scores.take(ok))))
        curves["roc"] = curve.rows()
    else:
        summary.update({"auc": None, "tpr_at_fpr_5": None})
    ws.results(run_id, summary, curves=curves)
    return summary


def cmd_sweep(ws: Workspace, args) -> dict:
    kind = args.kind or "neighbors"
    if kind not in evaluation.SWEEP_KINDS:
        raise CliError(f"unknown sweep kind {kind!r}; choose from {', '.join(evaluation.SWEEP_KINDS)}")
    ev = ws.cfg["eval"]
    grid = {"neighbors": ev["neighbors_grid"], "alpha": ev["alpha_grid"], "epsilon": ev["eps_grid"],
            "ablation": ev["ablation_grid"]}[kind]
    run_id = f"sweep-{kind}"
    ws.claim(ws.path("results", run_id))
    bundle, th = ws.bundle(), ws.thresholds()
    rows = evaluation.run_sweep(kind, grid, _sweep_context(ws, bundle, th))
    summary = {"kind": kind, "grid": list(grid), "auc": [r["auc"] for r in rows]}
    ws.results(run_id, summary, tables={"table": rows})
    return summary


def cmd_theory(ws: Workspace, args) -> dict:
    ws.claim(ws.path("results", "theory"))
    bundle = ws.bundle()
    _, held = ws.splits()
    a = ws.cfg["attacks"]
    n = min(len(held), a["max_samples"])
    x, y = held.as_float()[:n], held.labels[:n].astype(np.int64)
    budget = atk.AttackBudget(a["eps"], a["steps"], seed=ws.cfg["seed"])
    attack = args.kind or "pgd-ssl"
    gap = theory.feature_gap_check((x, y), bundle, _policy(ws), attack, budget, seed=ws.cfg["seed"])
    order = theory.perturbation_ordering_check((x, y), bundle, _policy(ws), budget, seed=ws.cfg["seed"])
    summary = {"attack": attack, "eps": a["eps"], **gap.summary(),
               "ordering_fraction_holding": order["fraction_holding"], "ordering_first_holds": order["first_holds"],
               "ordering_second_holds": order["second_holds"], "ordering_skipped": order["skipped"]}
    gaps = [{"index": i, "clean_gap": c, "adv_gap": v} for i, c, v in gap.rows()]
    norms = [{"index": i, "j_delta": r[0], "j_w_delta": r[1], "j_w_benign": r[2]} for i, r in enumerate(order["norms"].tolist())]
    ws.results("theory", summary, tables={"gaps": gaps, "ordering": norms})
    return summary


def cmd_cost(ws: Workspace, args) -> dict:
    ws.claim(ws.path("results", "cost"))
    bundle = ws.bundle()
    _, held = ws.splits()
    rep = evaluation.cost_report(bundle, held.as_float()[:1], ws.cfg["detector"]["k"], policy=_policy(ws))
    ws.results("cost", rep)
    return rep


def cmd_report(ws: Workspace, args) -> dict:
    ws.claim(ws.path("results", "report"))
    root = ws.path("results")
    rows = []
    for summ in sorted(root.glob("*/summary.json")):
        run = summ.parent.name
        if run == "report":
            continue
        doc = json.loads(summ.read_text())
        for key, val in sorted(doc.items()):
            if isinstance(val, (int, float, str)) or val is None:
                rows.append({"run": run, "metric": key, "value": val})
    if not rows:
        raise CliError("no results to report")
    lines = ["# beyondlab report", ""]
    current = None
    for r in rows:
        if r["run"] != current:
            current = r["run"]
            lines += ["", f"## {current}", "", "| metric | value |", "|---|---|"]
        lines.append(f"| {r['metric']} | {r['value']} |")
    summary = {"runs": sorted({r["run"] for r in rows}), "metrics": len(rows)}
    ws.results("report", summary, tables={"report": rows}, extra={"report.md": "\n".join(lines) + "\n"})
    return summary


HANDLERS: dict[str, Callable] = {
    "gen-data": cmd_gen_data, "train-clf": cmd_train_clf, "train-ssl": cmd_train_ssl, "probe": cmd_probe,
    "calibrate": cmd_calibrate, "attack": cmd_attack, "detect": cmd_detect, "eval": cmd_eval, "sweep": cmd_sweep,
    "theory": cmd_theory, "cost": cmd_cost, "report": cmd_report,
}


# -- parsing ------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", default="run", help="workspace directory (default ./run)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser = _Parser(prog="beyondlab", description="Adversarial-example detection lab on synthetic data.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    flags = ["--config", "--seed", "--out", "--force", *COMMANDS]
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "attack":
            p.add_argument("--kind", choices=ATTACK_KINDS)
            p.add_argument("--eps")
            p.add_argument("--steps", type=int)
            p.add_argument("--step-size")
            p.add_argument("--alpha", type=float)
            p.add_argument("--k-eot", type=int)
            p.add_argument("--strategy", choices=("orthogonal", "selection"))
            flags += ["--kind", "--eps", "--steps", "--step-size", "--alpha", "--k-eot", "--strategy"]
        if name in ("detect", "eval"):
            p.add_argument("--input", help="dataset container to score")
            flags.append("--input")
        if name in ("calibrate", "detect", "eval", "sweep"):
            p.add_argument("--k", type=int, help="neighbors per input")
            p.add_argument("--target-fpr", type=float)
            flags += ["--k", "--target-fpr"]
        if name == "sweep":
            p.add_argument("--kind", choices=evaluation.SWEEP_KINDS)
            p.add_argument("--eps")
            flags += ["--kind", "--eps"]
        if name == "theory":
            p.add_argument("--kind", choices=("pgd", "pgd-ssl"), help="attack used for the feature-gap check")
            p.add_argument("--eps")
            flags += ["--kind", "--eps"]
        if name in ("train-clf", "train-ssl", "probe"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            flags += ["--epochs", "--lr"]
    for p in [parser, *sub.choices.values()]:
        p.known = flags
    return parser


def _overrides(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    g = lambda name: getattr(args, name, None)
    if args.command == "attack":
        for flag, key in (("kind", "kind"), ("eps", "eps"), ("steps", "steps"), ("step_size", "step_size"),
                          ("alpha", "alpha"), ("k_eot", "k_eot"), ("strategy", "strategy")):
            if g(flag) is not None:
                ov[f"attacks.{key}"] = g(flag)
    if args.command in ("sweep", "theory") and g("eps") is not None:
        ov["attacks.eps"] = g("eps")
    if g("k") is not None:
        ov["detector.k"] = g("k")
    if g("target_fpr") is not None:
        ov["detector.target_fpr"] = g("target_fpr")
    section = {"train-clf": "classifier", "train-ssl": "ssl", "probe": "head"}.get(args.command)
    if section:
        for flag in ("epochs", "lr"):
            if g(flag) is not None:
                ov[f"models.{section}.{flag}"] = g(flag)
    return ov


def _module_of(exc: BaseException) -> str:
    mod = type(exc).__module__.rsplit(".", 1)[-1]
    if not type(exc).__module__.startswith("beyondlab"):
        tb = exc.__traceback__
        while tb is not None:
            name = tb.tb_frame.f_globals.get("__name__", "")
            if name.startswith("beyondlab"):
                mod = name.split(".")[1] if "." in name else name
            tb = tb.tb_next
    return MODULE_NAMES.get(mod, mod)


def _kind_of(exc: BaseException) -> str:
    kind = getattr(exc, "kind", None)
    if kind:
        return kind
    name = type(exc).__name__
    return "".join("-" + c.lower() if c.isupper() else c for c in name).lstrip("-")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        user = cfgmod.load(args.config) if args.config else {}
        cfg = cfgmod.resolve(user, _overrides(args))
        ws = Workspace(args.out, cfg, args.force)
        summary = HANDLERS[args.command](ws, args)
    except Exception as exc:  # domain errors become one machine-parsable line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error:{_module_of(exc)}:{_kind_of(exc)}: {msg}", file=sys.stderr)
        return 1
    print(dataio.dumps_json(summary).strip())
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
