"""Command-line driver: ``hybridpf {gen,train,track,eval,multimodality}``.

Every command writes its outputs into ``--out DIR`` together with a
``manifest.json``.  Apart from the manifest's ``created`` field, outputs are
byte-identical for identical inputs, configuration and seed.

Settings come from command-line flags, then a JSON ``--config`` file (with
``"schema_version": 1``), then built-in defaults.  Exit codes: 0 success,
2 usage error, 1 runtime error.  Errors go to standard error only.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import core
from . import filters as F
from . import multimodality as mm
from . import pipeline as P
from . import synthbench as S

CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad arguments, configuration or inputs detected before running."""


DEFAULTS = {
    "gen": {"seed": 0, "n_frames": 200, "n_sequences": 1, "ambiguity": "depth_sign",
            "motion": "sinusoid", "n_links": 4, "speed": 1.0, "shift": 0.0,
            "training": False},
    "train": {"dataset": None, "codebook_dataset": None, "seed": 0,
              "width_grid": [0.5, 1.0, 2.0], "validation_fraction": 0.1,
              "latent_dim": None, "codebook_size": 400, "cbme": True,
              "coverage_k_in": 800, "coverage_k_out": 6, "mirror_augment": True},
    "track": {"bundle": None, "dataset": None, "algorithm": "apf", "particles": 200,
              "layers": 10, "beta": 0.35, "gamma0": 0.5, "gamma_floor": 0.2, "seed": 0,
              "online_learning": False, "elite_fraction": 0.01},
    "eval": {"runs": None},
    "multimodality": {"dataset": None, "bundle": None, "k_in": 100, "k_out": 100,
                      "seed": 0},
}
REQUIRED = {"train": ["dataset"], "track": ["bundle", "dataset"], "eval": ["runs"],
            "multimodality": ["dataset"]}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _grid(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text}")


def build_parser() -> argparse.ArgumentParser:
    S_ = argparse.SUPPRESS
    p = _Parser(prog="hybridpf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hybridpf {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=S_)

    g = sub.add_parser("gen", help="generate a chain dataset")
    common(g)
    g.add_argument("--n-frames", dest="n_frames", type=int, default=S_)
    g.add_argument("--n-sequences", dest="n_sequences", type=int, default=S_)
    g.add_argument("--ambiguity", choices=[a.value for a in S.Ambiguity], default=S_)
    g.add_argument("--motion", choices=[m.value for m in S.Motion], default=S_)
    g.add_argument("--n-links", dest="n_links", type=_positive_int, default=S_)
    g.add_argument("--speed", type=float, default=S_)
    g.add_argument("--shift", type=float, default=S_)
    g.add_argument("--training", action="store_const", const=True, default=S_,
                   help="orientation centres spread evenly over all views")

    t = sub.add_parser("train", help="fit a model bundle")
    common(t)
    t.add_argument("--dataset", default=S_)
    t.add_argument("--codebook-dataset", dest="codebook_dataset", default=S_,
                   help="separate sequences for the descriptor codebook")
    t.add_argument("--width-grid", dest="width_grid", type=_grid, default=S_)
    t.add_argument("--validation-fraction", dest="validation_fraction", type=float, default=S_)
    t.add_argument("--latent-dim", dest="latent_dim", type=_positive_int, default=S_)
    t.add_argument("--codebook-size", dest="codebook_size", type=_positive_int, default=S_)
    t.add_argument("--no-cbme", dest="cbme", action="store_const", const=False, default=S_)
    t.add_argument("--coverage-k-in", dest="coverage_k_in", type=_positive_int, default=S_)
    t.add_argument("--coverage-k-out", dest="coverage_k_out", type=_positive_int, default=S_)
    t.add_argument("--no-mirror", dest="mirror_augment", action="store_const", const=False,
                   default=S_)

    k = sub.add_parser("track", help="run a filter over every sequence of a dataset")
    common(k)
    k.add_argument("--bundle", default=S_)
    k.add_argument("--dataset", default=S_)
    k.add_argument("--algorithm", choices=[a.value for a in F.Algorithm], default=S_)
    k.add_argument("--particles", type=int, default=S_)
    k.add_argument("--layers", type=_positive_int, default=S_)
    k.add_argument("--beta", type=float, default=S_)
    k.add_argument("--gamma0", type=float, default=S_)
    k.add_argument("--gamma-floor", dest="gamma_floor", type=float, default=S_)
    k.add_argument("--online-learning", dest="online_learning", action="store_const",
                   const=True, default=S_)
    k.add_argument("--elite-fraction", dest="elite_fraction", type=float, default=S_)

    e = sub.add_parser("eval", help="compare tracking runs")
    e.add_argument("runs", nargs="*", default=S_, help="track output directories")
    e.add_argument("--config", default=None)
    e.add_argument("--out", required=True)

    m = sub.add_parser("multimodality", help="dataset multimodality histogram")
    common(m)
    m.add_argument("--dataset", default=S_)
    m.add_argument("--bundle", default=S_, help="use the bundle's descriptors as inputs")
    m.add_argument("--k-in", dest="k_in", type=_positive_int, default=S_)
    m.add_argument("--k-out", dest="k_out", type=_positive_int, default=S_)
    return p


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise UsageError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
    return {k: v for k, v in doc.items() if k != "schema_version"}


def resolve(command: str, flags: dict, config: dict) -> dict:
    """Merge defaults < config < flags; unknown config keys are rejected."""
    allowed = DEFAULTS[command]
    unknown = sorted(set(config) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    out = dict(allowed)
    out.update(config)
    out.update({k: v for k, v in flags.items() if k in allowed})
    for key in REQUIRED.get(command, []):
        if out.get(key) in (None, []):
            if command == "eval":
                raise UsageError("'eval' needs at least one track output directory")
            raise UsageError(f"'{command}' needs --{key.replace('_', '-')}")
    return out


def _need_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class _Writer:
    """Collects output files and writes them plus the manifest."""

    def __init__(self, out_dir: str, command: str, settings: dict):
        self.out_dir = out_dir
        self.command = command
        self.settings = settings
        self.files: dict = {}
        self.inputs: dict = {}

    def add(self, name: str, text: str):
        self.files[name] = text.encode()

    def add_json(self, name: str, doc):
        self.add(name, json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def note_input(self, label: str, path: str):
        with open(path, "rb") as fh:
            self.inputs[label] = _sha256(fh.read())

    def commit(self):
        try:
            os.makedirs(self.out_dir, exist_ok=True)
            for name, data in sorted(self.files.items()):
                with open(os.path.join(self.out_dir, name), "wb") as fh:
                    fh.write(data)
            manifest = {
                "command": self.command, "hybridpf_version": __version__,
                "settings": self.settings, "inputs": self.inputs,
                "outputs": {n: _sha256(d) for n, d in sorted(self.files.items())},
                "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            }
            with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
                fh.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        except OSError as exc:
            raise RuntimeError(f"cannot write to {self.out_dir}: {exc.strerror}")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(s: dict, out: str):
    if s["n_frames"] < 1:
        raise UsageError(f"n_frames must be >= 1, got {s['n_frames']}")
    if s["n_sequences"] < 1:
        raise UsageError(f"n_sequences must be >= 1, got {s['n_sequences']}")
    spec = S.ChainSpec(n_links=int(s["n_links"]), ambiguity=s["ambiguity"])
    if s["training"]:
        seqs = S.training_set(spec, s["n_sequences"], s["n_frames"], seed=s["seed"],
                              speed=s["speed"], shift=s["shift"])
    else:
        seqs = [S.generate_sequence(spec, s["n_frames"], s["motion"], seed=s["seed"] * 1000 + i,
                                    speed=s["speed"], shift=s["shift"])
                for i in range(s["n_sequences"])]
    w = _Writer(out, "gen", s)
    w.add("dataset.json", P.dataset_dumps(seqs) + "\n")
    w.commit()


def _load_dataset(path):
    _need_file(path, "dataset")
    try:
        with open(path) as fh:
            return P.dataset_loads(fh.read())
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot parse dataset {path}: {exc}")


def _load_bundle(path):
    _need_file(path, "model bundle")
    try:
        with open(path) as fh:
            return P.TrainedModels.loads(fh.read())
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot parse model bundle {path}: {exc}")


def cmd_train(s: dict, out: str):
    seqs = _load_dataset(s["dataset"])
    cb_seqs = _load_dataset(s["codebook_dataset"]) if s["codebook_dataset"] else None
    try:
        cfg = P.TrainConfig(latent_dim=s["latent_dim"], codebook_size=int(s["codebook_size"]),
                            train_cbme=bool(s["cbme"]), width_grid=tuple(s["width_grid"]),
                            validation_fraction=float(s["validation_fraction"]),
                            mirror_augment=bool(s["mirror_augment"]),
                            coverage_k_in=int(s["coverage_k_in"]),
                            coverage_k_out=int(s["coverage_k_out"]), seed=int(s["seed"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    models = P.quiet_train(seqs, cfg, codebook_sequences=cb_seqs, log=_log)
    text = models.dumps()
    w = _Writer(out, "train", s)
    w.note_input("dataset", s["dataset"])
    if s["codebook_dataset"]:
        w.note_input("codebook_dataset", s["codebook_dataset"])
    w.add("bundle.json", text + "\n")
    report = dict(models.report)
    report["bundle_sha256"] = F.model_hash(text)
    w.add_json("validation.json", report)
    w.commit()


def _filter_config(s: dict) -> F.FilterConfig:
    try:
        return F.FilterConfig(algorithm=s["algorithm"], n_particles=int(s["particles"]),
                              gamma0=float(s["gamma0"]), beta=float(s["beta"]),
                              schedule=F.AnnealSchedule.geometric(int(s["layers"])),
                              seed=int(s["seed"]), gamma_floor=float(s["gamma_floor"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def cmd_track(s: dict, out: str):
    cfg = _filter_config(s)
    online = bool(s["online_learning"])
    frac = float(s["elite_fraction"])
    if online and not (0 < frac <= 0.05):
        raise UsageError(f"elite fraction must be in (0, 0.05], got {frac}")
    models = _load_bundle(s["bundle"])
    seqs = _load_dataset(s["dataset"])
    if cfg.algorithm is F.Algorithm.OPF and models.cbme is None:
        raise UsageError("algorithm 'opf' needs a cBME model, but the bundle has none "
                         "(retrain without --no-cbme)")
    if any(q.spec != models.spec for q in seqs):
        raise UsageError("dataset chain spec differs from the bundle's")
    frames, cov_rows, events, per_seq = [], [], [], []
    for i, seq in enumerate(seqs):
        run_cfg = F.FilterConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = F.run_sequence(models.bundle(), seq.observations, run_cfg,
                                 online_learning=online, elite_fraction=frac)
        err = P.score_track(models, res, seq)
        err_map = P.score_track(models, res, seq, use_map=True)
        for t in range(len(res)):
            row = [i, t, err["angle_error_deg"][t], err_map["angle_error_deg"][t],
                   err["position_error"][t], res.ess[t], res.gamma[t], res.coverage[t],
                   int(res.recovery[t])]
            if online:
                row.append(res.adapt_error[t])
            row += list(res.estimates[t])
            frames.append(row)
            cov_rows.append([i, t, res.coverage[t]])
        events += [{"sequence": i, **ev} for ev in res.events]
        per_seq.append({"angle": err["angle_error_deg"], "angle_map": err_map["angle_error_deg"],
                        "pos": err["position_error"], "cov": res.coverage,
                        "rec": int(res.recovery.sum()), "adapt": res.adapt_error})
    d = models.latent.d_latent
    head = ["sequence", "step", "angle_error_deg", "map_angle_error_deg", "position_error",
            "ess", "gamma", "coverage", "recovery"]
    if online:
        head.append("adapt_error")
    head += [f"est_{j}" for j in range(d)]
    summary = _summarise(s, per_seq)
    w = _Writer(out, "track", s)
    w.note_input("bundle", s["bundle"])
    w.note_input("dataset", s["dataset"])
    w.add("frames.csv", _csv(frames, head))
    w.add("coverage.csv", _csv(cov_rows, ["sequence", "step", "ratio"]))
    w.add_json("events.json", {"filter": cfg.to_dict(), "events": events})
    w.add_json("summary.json", summary)
    w.add("aggregate.csv", _csv([[summary[k] for k in AGG_COLUMNS]], AGG_COLUMNS))
    w.commit()


AGG_COLUMNS = ["label", "algorithm", "online_learning", "n_sequences", "n_frames",
               "mean_angle_error_deg", "median_angle_error_deg", "median_map_angle_error_deg",
               "mean_position_error", "median_coverage", "recoveries"]


def _summarise(s: dict, per_seq: list) -> dict:
    ang = np.concatenate([p["angle"] for p in per_seq])
    ang_map = np.concatenate([p["angle_map"] for p in per_seq])
    pos = np.concatenate([p["pos"] for p in per_seq])
    cov = np.concatenate([p["cov"] for p in per_seq])
    cov = cov[np.isfinite(cov)]
    label = s["algorithm"] + ("+online" if s["online_learning"] else "")
    out = {"label": label, "algorithm": s["algorithm"],
            "online_learning": int(bool(s["online_learning"])),
            "n_sequences": len(per_seq), "n_frames": int(ang.size),
            "mean_angle_error_deg": float(np.mean(ang)),
            "median_angle_error_deg": float(np.median(ang)),
            "median_map_angle_error_deg": float(np.median(ang_map)),
            "mean_position_error": float(np.mean(pos)),
            "median_coverage": float(np.median(cov)) if cov.size else float("nan"),
            "recoveries": int(sum(p["rec"] for p in per_seq))}
    if s["online_learning"]:
        adapt = np.concatenate([p["adapt"] for p in per_seq])
        adapt = adapt[np.isfinite(adapt)]
        out["mean_adapt_error"] = float(np.mean(adapt)) if adapt.size else float("nan")
    return out


def cmd_eval(s: dict, out: str):
    runs = s["runs"]
    if isinstance(runs, str):
        runs = [runs]
    rows = []
    for run in runs:
        path = os.path.join(run, "summary.json") if os.path.isdir(run) else run
        _need_file(path, "run summary")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"cannot parse {path}: {exc}")
        missing = [c for c in AGG_COLUMNS if c not in doc]
        if missing:
            raise UsageError(f"{path} lacks fields: {', '.join(missing)}")
        rows.append(doc)
    rows.sort(key=lambda r: (r["mean_angle_error_deg"], r["label"]))
    table = [[r[c] for c in AGG_COLUMNS] for r in rows]
    w = _Writer(out, "eval", s)
    w.add("table.csv", _csv(table, AGG_COLUMNS))
    w.add("table.txt", _text_table(rows))
    w.commit()


def _text_table(rows) -> str:
    cols = [("label", "run"), ("mean_angle_error_deg", "angle mean (deg)"),
            ("median_angle_error_deg", "angle median (deg)"),
            ("mean_position_error", "position (x length)"),
            ("median_coverage", "coverage"), ("recoveries", "recoveries")]
    cells = [[h for _, h in cols]]
    for r in rows:
        cells.append([str(r[k]) if isinstance(r[k], (int, str)) else f"{r[k]:.4f}"
                      for k, _ in cols])
    widths = [max(len(c[i]) for c in cells) for i in range(len(cols))]
    lines = ["  ".join(c[i].ljust(widths[i]) for i in range(len(cols))).rstrip() for c in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"


def cmd_multimodality(s: dict, out: str):
    seqs = _load_dataset(s["dataset"])
    Y, O, _ = P.stack(seqs)
    if s["bundle"]:
        models = _load_bundle(s["bundle"])
        inputs = S.descriptor(models.codebook, O)
    else:
        inputs = O
    n = inputs.shape[0]
    for name in ("k_in", "k_out"):
        if s[name] > n:
            raise UsageError(f"{name.replace('_', '-')} = {s[name]} exceeds the {n} samples")
    try:
        in_model = mm.kmeans_fit(inputs, int(s["k_in"]), int(s["seed"]))
        out_model = mm.kmeans_fit(Y, int(s["k_out"]), int(s["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc))
    tables = mm.build_associations(inputs, Y, in_model, out_model)
    hist = mm.histogram(tables)
    total = hist.total
    summary = {"n_samples": n, "k_in": int(s["k_in"]), "k_out": int(s["k_out"]),
               "inputs": "descriptors" if s["bundle"] else "observations",
               "mass_fraction_n1": hist.bins.get(1, 0.0) / total,
               "mass_fraction_n_ge_2": hist.mass_at_least(2) / total,
               "bins": {str(k): v for k, v in hist.bins.items()}}
    w = _Writer(out, "multimodality", s)
    w.note_input("dataset", s["dataset"])
    w.add("histogram.csv", hist.to_csv())
    w.add_json("summary.json", summary)
    w.commit()


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "multimodality": cmd_multimodality}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out")}
        settings = resolve(args.command, flags, load_config(args.config))
        COMMANDS[args.command](settings, args.out)
    except UsageError as exc:
        print(f"hybridpf: usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:       # --help / --version
        return int(exc.code or 0)
    except Exception as exc:        # noqa: BLE001 - reported, not swallowed
        print(f"hybridpf: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
