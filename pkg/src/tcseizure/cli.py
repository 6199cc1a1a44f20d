"""Command-line entry point: ``tcseizure <subcommand> ...``.

Exit codes: 0 success, 1 runtime error (one ``error: <Code>: <message>`` line
on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path


from . import __version__
from .config import PipelineConfig
from .costmodel import (
    REFERENCE_LATENCY_MS,
    REFERENCE_POWER_W,
    OperatingPoint,
    calibrate_energy_per_mac,
    cost_summary,
    count_static,
)
from .edf_io import read_edf
from .postproc import HmmParams, HmmStream, SmoothingConfig, ViterbiLut, compile_lut, ewma_scores, sma_scores
from .preprocess import TARGET_FS, bandpass, fragment, recording_matrix
from .synth import generate
from .tcresnet import load_model

# Table IV reference (4-bit model with HMM smoothing) and the accepted bands
CHBMIT_REFERENCE = {"accuracy": 0.9528, "sensitivity": 0.9234, "auc": 0.9384}
CHBMIT_TOLERANCE = {"accuracy": 0.03, "sensitivity": 0.03, "auc": 0.03}


class UsageError(Exception):
    pass


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(getattr(args, "config", None))
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs_base=args.epochs)
    if getattr(args, "epochs_retrain", None) is not None:
        train = replace(train, epochs_retrain=args.epochs_retrain)
    if getattr(args, "qat_bits", None) is not None:
        train = replace(train, qat_bits=args.qat_bits or None)
    return replace(cfg, train=train)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    base = PipelineConfig.load(args.config).synth
    overrides = {k: v for k, v in (("n_patients", args.patients), ("minutes", args.minutes),
                                   ("seed", args.seed)) if v is not None}
    cfg = replace(base, **overrides)
    anns = generate(cfg, args.out)
    print(json.dumps({"out": args.out, "patients": cfg.n_patients, "seizures": len(anns)}))


def cmd_ingest(args) -> None:
    from .pipeline import inventory, summaries_to_csv

    annotations = args.annotations
    if args.summaries:
        paths = sorted(glob.glob(args.summaries, recursive=True))
        if not paths:
            raise FileNotFoundError(f"no summary files match {args.summaries}")
        csv_text = summaries_to_csv(paths)
        annotations = args.csv_out or "annotations.csv"
        _write(annotations, csv_text)
    if annotations is None:
        raise UsageError("give --annotations or --summaries")
    _write(args.out, json.dumps(inventory(args.data_dir, annotations), indent=1))


def cmd_preprocess(args) -> None:
    from .pipeline import preprocess_corpus

    cfg = PipelineConfig.load(args.config).preprocess
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    m = preprocess_corpus(args.data_dir, args.annotations, args.out, cfg)
    print(json.dumps({"out": args.out, "normalization": m["normalization"],
                      "channels": m["channels"],
                      "sets": {k: len(v["labels"]) for k, v in m["sets"].items()}}))


def cmd_train_base(args) -> None:
    from .pipeline import PreparedCorpus, run_train_base
    from .tcresnet import save_model

    cfg = _config(args)
    res = run_train_base(PreparedCorpus.open(args.dev), cfg.train)
    save_model(res.model, args.out, extra={
        "seizure_weight": res.seizure_weight, "weight_fallback": res.weight_fallback,
        "sensitivity_by_weight": {str(k): v for k, v in res.sensitivities.items()},
        "train_config": asdict(cfg.train),
    })
    (Path(args.out) / "train_report.json").write_text(res.report.to_json() + "\n")
    print(json.dumps({"out": args.out, "seizure_weight": res.seizure_weight,
                      "final_loss": res.report.epochs[-1]["loss"] if res.report.epochs else None}))


def _base_meta(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())["extra"]


def cmd_retrain(args) -> None:
    from .pipeline import PreparedCorpus, run_retrain, save_patient

    cfg = _config(args)
    corpus = PreparedCorpus.open(args.dev)
    if args.patient not in corpus.patients:
        raise KeyError(f"unknown patient {args.patient!r}")
    meta = _base_meta(args.base)
    tcfg = replace(cfg.train, seizure_weight=int(meta.get("seizure_weight", cfg.train.seizure_weight)))
    pm = run_retrain(load_model(args.base), corpus, args.patient, tcfg)
    save_patient(pm, args.out, {"seizure_weight": tcfg.seizure_weight})
    print(json.dumps({"out": args.out, "patient": args.patient,
                      "train_confusion": pm.report.confusion,
                      "quantized": pm.quantized is not None}))


def _load_models(models_dir, patients):
    from .pipeline import load_patient

    out = {}
    for pid in patients:
        path = Path(models_dir) / f"{pid}.ckpt"
        if not path.is_dir():
            raise FileNotFoundError(f"missing checkpoint {path}")
        out[pid] = load_patient(path)
    return out


def _seizure_weight(models) -> int:
    weights = {json.loads((Path(m) / "manifest.json").read_text())["extra"].get("seizure_weight", 2)
               for m in models}
    if len(weights) != 1:
        raise ValueError("patient checkpoints disagree on the threshold weight")
    return int(weights.pop())


def cmd_calibrate(args) -> None:
    from .pipeline import PreparedCorpus, calibrate, choose_calibration, patient_hmm

    cfg = PipelineConfig.load(args.config).postproc
    corpus = PreparedCorpus.open(args.data)
    if args.patients:
        cfg = replace(cfg, calib_patients=tuple(args.patients.split(",")))
    calib = choose_calibration(corpus.patients, cfg)
    models = _load_models(args.models, corpus.patients)
    smoothing = calibrate(corpus, models, calib, cfg.window)
    weight = _seizure_weight(Path(args.models) / f"{p}.ckpt" for p in corpus.patients)
    hmm_dir = Path(args.hmm_dir or args.models)
    hmm_dir.mkdir(parents=True, exist_ok=True)
    for pid, pm in models.items():
        (hmm_dir / f"{pid}.hmm.json").write_text(patient_hmm(corpus, pm).to_json() + "\n")
    _write(args.out, json.dumps({**smoothing.to_dict(), "calib_patients": calib,
                                 "seizure_weight": weight, "hmm_input": cfg.hmm_input}, indent=1))


def _read_smoothing(path) -> tuple[SmoothingConfig, dict]:
    d = json.loads(Path(path).read_text())
    keys = ("window", "sma_threshold", "ewma_alpha", "ewma_threshold", "degenerate")
    return SmoothingConfig(**{k: d[k] for k in keys if k in d}), d


def cmd_eval(args) -> None:
    from .pipeline import PreparedCorpus, evaluate_patients

    corpus = PreparedCorpus.open(args.data)
    smoothing, meta = _read_smoothing(args.smoothing)
    calib = set(meta.get("calib_patients", []))
    patients = [p for p in corpus.patients if p not in calib]
    if args.patients:
        patients = args.patients.split(",")
        if calib & set(patients):
            raise ValueError("calibration patients cannot be evaluated")
    models = _load_models(args.models, patients)
    report, _ = evaluate_patients(corpus, models, patients, smoothing,
                                  int(meta.get("seizure_weight", 2)),
                                  meta.get("hmm_input", "threshold"))
    print(report.table())
    _write(args.out, report.to_json())
    if args.csv:
        _write(args.csv, report.to_csv())
    if args.boxplot_csv:
        _write(args.boxplot_csv, report.auc_boxplot_csv())


def cmd_lut(args) -> None:
    hmm = HmmParams.from_json(Path(args.hmm).read_text())
    _write(args.out, compile_lut(hmm).to_json())


def cmd_cost(args) -> None:
    if args.model:
        from .pipeline import load_patient
        model = load_patient(args.model).model
        report = count_static(model)
    else:
        report = count_static()
    op = OperatingPoint(mac_array=args.array, clock_hz=args.clock, inference_rate_hz=args.rate,
                        idle_power_w=args.idle_power, energy_per_mac_j=args.energy_per_mac or 0.0)
    calibrated = False
    if args.energy_per_mac is None:
        op = replace(op, energy_per_mac_j=calibrate_energy_per_mac(report, args.target_power, op))
        calibrated = True
    out = cost_summary(report, op)
    out["energy_per_mac_calibrated"] = calibrated
    out["reference"] = {"latency_ms": REFERENCE_LATENCY_MS, "power_w": REFERENCE_POWER_W}
    _write(args.out, json.dumps(out, indent=1))


def cmd_stream(args) -> None:
    from .pipeline import hmm_labels, load_patient, quantized_proba
    from .train import predict_proba

    manifest = json.loads((Path(args.data) / "manifest.json").read_text())
    smoothing, meta = _read_smoothing(args.smoothing)
    weight = int(meta.get("seizure_weight", 2))
    pm = load_patient(args.model)
    if args.use_lut:
        if not args.lut:
            raise UsageError("--use-lut needs --lut")
        stream = HmmStream(lut=ViterbiLut.from_json(Path(args.lut).read_text()))
    else:
        stream = HmmStream(hmm=HmmParams.from_json(Path(args.hmm).read_text()),
                           window=smoothing.window)
    rec = read_edf(args.edf)
    lo, hi = manifest["band_hz"]
    x = bandpass(recording_matrix(rec, manifest["channels"], TARGET_FS), lo, hi, TARGET_FS,
                 manifest["filter_order"])
    frags = fragment(x, TARGET_FS, manifest["fragment_s"]) / manifest["normalization"]
    if pm.quantized is not None:
        probs = quantized_proba(pm.quantized, frags)
    else:
        probs = predict_proba(pm.model, frags)
    raw = hmm_labels(probs, weight, meta.get("hmm_input", "threshold"))
    frag_s = manifest["fragment_s"]
    if args.method == "hmm":
        smoothed = []
        pending: list[int] = []
        for k, label in enumerate(raw):
            pending.append(k)
            d = stream.push(int(label))
            if d is not None:
                smoothed.append((pending.pop(0), d))
            for item in _drain(smoothed, probs, raw, frag_s, args.speed):
                print(item, flush=True)
        for d in stream.flush():
            smoothed.append((pending.pop(0), d))
        for item in _drain(smoothed, probs, raw, frag_s, 0):
            print(item, flush=True)
        return
    if args.method == "sma":
        decisions = (sma_scores(probs, smoothing.window) >= smoothing.sma_threshold)
    else:
        decisions = ewma_scores(probs, smoothing.ewma_alpha) >= smoothing.ewma_threshold
    for k in range(len(probs)):
        print(_line(k, probs, raw, int(decisions[k]), frag_s), flush=True)
        if args.speed:
            time.sleep(frag_s / args.speed)


def _line(k, probs, raw, smoothed, frag_s) -> str:
    return f"t={k * frag_s:.1f} p={probs[k]:.4f} raw={int(raw[k])} smoothed={smoothed}"


def _drain(queue, probs, raw, frag_s, speed):
    while queue:
        k, d = queue.pop(0)
        if speed:
            time.sleep(frag_s / speed)
        yield _line(k, probs, raw, d, frag_s)


def cmd_run(args) -> None:
    """Preprocess and run the whole pipeline in one go."""
    from .pipeline import PreparedCorpus, preprocess_corpus, run_pipeline

    cfg = _config(args)
    work = Path(args.work)
    prepared = work / "prepared"
    if not (prepared / "manifest.json").is_file() or args.force:
        preprocess_corpus(args.data_dir, args.annotations, prepared, cfg.preprocess)
    result = run_pipeline(PreparedCorpus.open(prepared), cfg, work)
    print(result.report.table())
    return result


def cmd_reproduce_chbmit(args) -> int:
    from .pipeline import summaries_to_csv

    root = Path(args.data_dir)
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    ann = work / "annotations.csv"
    if not ann.is_file():
        summaries = sorted(root.rglob("*-summary.txt"))
        if not summaries:
            raise FileNotFoundError(f"no *-summary.txt files under {root}")
        ann.write_text(summaries_to_csv(summaries))
    args.annotations = str(ann)
    if args.config is None and args.qat_bits is None:
        args.qat_bits = 4
    result = cmd_run(args)
    hmm = result.report.methods["hmm"]
    verdict = {}
    for key, ref in CHBMIT_REFERENCE.items():
        got = getattr(hmm, key)
        ok = got is not None and abs(got - ref) <= CHBMIT_TOLERANCE[key]
        verdict[key] = {"measured": got, "reference": ref, "tolerance": CHBMIT_TOLERANCE[key],
                        "pass": ok}
    verdict["mean_delay_s"] = {"measured": hmm.mean_delay_s, "reference": 4.41}
    _write(str(work / "reproduce.json"), json.dumps(verdict, indent=1))
    for key, v in verdict.items():
        if "pass" in v:
            print(f"{key}: measured {v['measured']} reference {v['reference']} "
                  f"{'PASS' if v['pass'] else 'FAIL'}")
    return 0 if all(v.get("pass", True) for v in verdict.values()) else 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcseizure", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic EDF corpus")
    s.add_argument("--patients", type=int)
    s.add_argument("--minutes", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="inventory a corpus; optionally convert summary files")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--annotations")
    s.add_argument("--summaries", help="glob of per-patient summary text files")
    s.add_argument("--csv-out", help="where to write the converted annotation CSV")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="fragment, split and normalize a corpus")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_preprocess)

    def train_flags(s):
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--epochs", type=int, help="base training epochs")
        s.add_argument("--epochs-retrain", type=int)
        s.add_argument("--qat-bits", type=int, help="0 disables quantization-aware training")

    s = sub.add_parser("train-base", help="train the patient-unspecific model")
    s.add_argument("--dev", required=True, help="preprocessed corpus directory")
    s.add_argument("--out", required=True)
    train_flags(s)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("retrain", help="fine-tune the base model for one patient")
    s.add_argument("--base", required=True)
    s.add_argument("--patient", required=True)
    s.add_argument("--dev", required=True, help="preprocessed corpus directory")
    s.add_argument("--out", required=True)
    train_flags(s)
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("calibrate", help="grid-search smoothing thresholds; write HMM files")
    s.add_argument("--data", required=True)
    s.add_argument("--models", required=True, help="directory holding <PID>.ckpt")
    s.add_argument("--patients", help="comma-separated calibration patients")
    s.add_argument("--hmm-dir")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", help="evaluate held-out patients")
    s.add_argument("--data", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--smoothing", required=True)
    s.add_argument("--patients")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.add_argument("--boxplot-csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("lut", help="compile the Viterbi lookup table")
    s.add_argument("--hmm", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_lut)

    s = sub.add_parser("cost", help="parameter/MAC counts and latency/power estimate")
    s.add_argument("--model")
    s.add_argument("--clock", type=float, default=250_000.0)
    s.add_argument("--rate", type=float, default=10.0)
    s.add_argument("--array", type=int, default=4)
    s.add_argument("--idle-power", type=float, default=100e-9)
    s.add_argument("--energy-per-mac", type=float,
                   help="joules per MAC; omitted: calibrate to --target-power")
    s.add_argument("--target-power", type=float, default=REFERENCE_POWER_W)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("stream", help="replay one EDF file, one decision line per fragment")
    s.add_argument("--edf", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="preprocessed corpus (channels, scaling)")
    s.add_argument("--smoothing", required=True)
    s.add_argument("--hmm")
    s.add_argument("--lut")
    s.add_argument("--use-lut", action="store_true")
    s.add_argument("--method", choices=("hmm", "sma", "ewma"), default="hmm")
    s.add_argument("--speed", type=float, default=0.0,
                   help="replay speed relative to real time; 0 = as fast as possible")
    s.set_defaults(func=cmd_stream)

    for name, func, helptext in (
        ("run", cmd_run, "preprocess and run the whole pipeline"),
        ("reproduce-chbmit", cmd_reproduce_chbmit, "full-scale run on the CHB-MIT corpus"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data-dir", required=True)
        if name == "run":
            s.add_argument("--annotations", required=True)
        s.add_argument("--work", required=True)
        s.add_argument("--force", action="store_true", help="redo preprocessing")
        train_flags(s)
        s.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) == "stream" and not args.use_lut and not args.hmm:
        parser.error("stream needs --hmm (or --lut with --use-lut)")
    try:
        status = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except KeyboardInterrupt:
        return 130
    except (ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else "no detail"
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return status if isinstance(status, int) else 0


if __name__ == "__main__":
    sys.exit(main())
