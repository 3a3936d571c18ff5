"""Command-line pipeline.

Exit codes: 0 success, 1 domain error (one machine-readable line on stderr,
``error code=<code> message=...``), 2 usage error. File outputs are written
atomically. Batch subcommands order their output rows by utterance id, so
worker-pool parallelism (capped by the DISTRIBLOCK_THREADS environment
variable) never changes the bytes produced.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import adaptive_penalty as ap
from . import audio_metrics as am
from . import characteristics as ch
from . import classifiers as cl
from . import evaluation as ev
from . import filter_defense as fd
from . import interchange as io
from . import synth as sy
from .errors import DistriblockError


def _worker_count() -> int:
    raw = os.environ.get("DISTRIBLOCK_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def _pmap(fn, items):
    workers = _worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _atomic_write_text(path: Path, text: str) -> None:
    io._atomic_write_bytes(path, text.encode("utf-8"))


def _emit(args, csv_text: str, payload) -> None:
    """Write/print the CSV report; mirror as JSON when --json is set."""
    out = getattr(args, "out", None)
    if out:
        _atomic_write_text(Path(out), csv_text)
        if args.json:
            _atomic_write_text(Path(out).with_suffix(".json"), json.dumps(payload, indent=2) + "\n")
    else:
        sys.stdout.write(json.dumps(payload, indent=2) + "\n" if args.json else csv_text)


def _load_labeled_scores(args) -> tuple[list[ch.ScoreSet], list[str]]:
    score_sets = ch.load_score_table(args.scores)
    labels_by_id = io.load_manifest(args.manifest).labels()
    labels = []
    for ss in score_sets:
        if ss.utterance_id not in labels_by_id:
            raise DistriblockError("missing-id", f"{ss.utterance_id} not in manifest")
        labels.append(labels_by_id[ss.utterance_id])
    return score_sets, labels


def _score_csv(score_sets: list[ch.ScoreSet]) -> str:
    lines = ["id," + ",".join(ch.score_key_name(k) for k in ch.SCORE_KEYS)]
    for ss in score_sets:
        lines.append(ss.utterance_id + "," + ",".join(repr(v) for v in ss.vector().tolist()))
    return "\n".join(lines) + "\n"


# --- subcommands -------------------------------------------------------------

def cmd_extract(args) -> int:
    if args.manifest:
        manifest = io.load_manifest(args.manifest)
        entries = [e for e in manifest.entries if e.seq_path is not None]
        score_sets = _pmap(lambda e: ch.score_set(io.load_sequence(e.seq_path)), entries)
    else:
        score_sets = [ch.score_set(io.load_sequence(p)) for p in args.seq]
    score_sets.sort(key=lambda s: s.utterance_id)
    payload = {ss.utterance_id: dict(zip(map(ch.score_key_name, ch.SCORE_KEYS), ss.vector().tolist()))
               for ss in score_sets}
    _emit(args, _score_csv(score_sets), payload)
    return 0


def cmd_fit_gc(args) -> int:
    score_sets, labels = _load_labeled_scores(args)
    key = ch.parse_score_key(args.key)
    benign = [ss[key] for ss, l in zip(score_sets, labels) if l == cl.BENIGN]
    model = cl.fit_gaussian(benign, key, args.fpr_budget)
    cl.save_model(model, args.out)
    return 0


def cmd_fit_nn(args) -> int:
    score_sets, labels = _load_labeled_scores(args)
    model = cl.train_mlp(score_sets, labels, seed=args.seed, epochs=args.epochs, lr=args.lr)
    cl.save_model(model, args.out)
    return 0


def cmd_rank(args) -> int:
    score_sets, labels = _load_labeled_scores(args)
    ranking = cl.rank_characteristics(score_sets, labels, args.fpr_budget)
    ranking.to_csv(args.out)
    if args.json:
        payload = [{"characteristic": ch.score_key_name(k), "auroc": a} for k, a in ranking.entries]
        _atomic_write_text(Path(args.out).with_suffix(".json"), json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_ensemble(args) -> int:
    ranking = cl.RankingTable.from_csv(args.ranking)
    score_sets, labels = _load_labeled_scores(args)
    model = cl.build_ensemble(ranking, score_sets, labels, args.k, args.fpr_budget)
    cl.save_model(model, args.out)
    return 0


def cmd_classify(args) -> int:
    model = cl.load_model(args.model)
    if args.scores:
        score_sets = ch.load_score_table(args.scores)
    else:
        score_sets = [ch.score_set(io.load_sequence(p)) for p in args.seq]
    score_sets.sort(key=lambda s: s.utterance_id)
    rows = _pmap(lambda ss: (ss.utterance_id, *cl.detector_verdict(model, ss, args.nn_threshold)),
                 score_sets)
    lines = ["id,verdict,margin"] + [f"{uid},{verdict},{repr(float(margin))}" for uid, verdict, margin in rows]
    payload = [{"id": uid, "verdict": verdict, "margin": float(margin)} for uid, verdict, margin in rows]
    _emit(args, "\n".join(lines) + "\n", payload)
    return 0


def cmd_eval(args) -> int:
    model = cl.load_model(args.model)
    score_sets, labels = _load_labeled_scores(args)
    stats = np.array(_pmap(lambda ss: cl.detector_stat(model, ss), score_sets))
    labels_arr = np.array(labels)
    benign = stats[labels_arr == cl.BENIGN]
    adv = stats[labels_arr == cl.ADVERSARIAL]
    verdicts = [cl.detector_verdict(model, ss, args.nn_threshold)[0] for ss in score_sets]
    confusion = ev.confusion_from_verdicts(verdicts, labels)
    report = ev.evaluate(benign, adv, higher_is_adversarial=True, confusion=confusion)

    lines = ["fpr,tpr"] + [f"{fpr:.12g},{tpr:.12g}" for fpr, tpr in report.roc_points]
    lines += ["metric,value", f"auroc,{report.auroc:.12g}", f"auprc,{report.auprc:.12g}"]
    c = report.confusion
    disp = c.display()
    for name in ("tp", "fp", "tn", "fn"):
        lines.append(f"{name},{getattr(c, name)}")
    for name in ("accuracy", "fpr", "tpr", "precision", "recall", "f1"):
        lines.append(f"{name},{disp[name]}")
    payload = {
        "auroc": report.auroc,
        "auprc": report.auprc,
        "roc_points": report.roc_points,
        "confusion": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
        "derived": disp,
    }
    _emit(args, "\n".join(lines) + "\n", payload)
    return 0


def cmd_threshold(args) -> int:
    model = cl.load_model(args.model)
    score_sets, labels = _load_labeled_scores(args)
    stats = np.array([cl.detector_stat(model, ss) for ss in score_sets])
    labels_arr = np.array(labels)
    rule = ev.ThresholdRule(max_fpr=args.max_fpr, min_tpr=args.min_tpr)
    result = ev.select_threshold(stats[labels_arr == cl.BENIGN], stats[labels_arr == cl.ADVERSARIAL], rule)
    csv_text = ("threshold,fpr,tpr,relaxed\n"
                f"{result.threshold:.12g},{result.fpr:.12g},{result.tpr:.12g},{str(result.relaxed).lower()}\n")
    payload = {"threshold": result.threshold, "fpr": result.fpr, "tpr": result.tpr,
               "relaxed": result.relaxed}
    _emit(args, csv_text, payload)
    return 0


def cmd_metrics(args) -> int:
    manifest = io.load_manifest(args.manifest)
    perturbed = io.load_manifest(args.perturbed_manifest).by_id() if args.perturbed_manifest else {}
    rows = []
    counts_sum = n_sum = 0
    cer_sum = cer_n = 0
    error_flags = []
    dbxs, snrs = [], []
    for e in sorted(manifest.entries, key=lambda e: e.utterance_id):
        wer_cell = cer_cell = dbx_cell = snr_cell = ""
        if e.ref is not None and e.hyp is not None:
            wer_val, counts = am.wer(e.ref, e.hyp)
            cer_val, ccounts = am.cer(e.ref, e.hyp)
            wer_cell, cer_cell = f"{wer_val:.4f}", f"{cer_val:.4f}"
            counts_sum += counts.total
            n_sum += counts.N
            cer_sum += ccounts.total
            cer_n += ccounts.N
            error_flags.append(counts.total > 0)
        other = perturbed.get(e.utterance_id)
        if e.wav_path is not None and other is not None and other.wav_path is not None:
            clean = io.load_wav(e.wav_path)
            noisy = io.load_wav(other.wav_path)
            delta = io.AudioSignal(noisy.samples - clean.samples, clean.sample_rate)
            report = am.noise_report(clean, delta, args.frame_len)
            dbx_cell, snr_cell = f"{report.db_x:.4f}", f"{report.snr_seg:.4f}"
            dbxs.append(report.db_x)
            snrs.append(report.snr_seg)
        rows.append(f"{e.utterance_id},{wer_cell},{cer_cell},{dbx_cell},{snr_cell}")
    lines = ["id,wer,cer,db_x,snr_seg"] + rows + ["metric,value"]
    summary = {}
    if n_sum:
        summary["corpus_wer"] = 100.0 * counts_sum / n_sum
        summary["corpus_cer"] = 100.0 * cer_sum / cer_n
        summary["ser"] = am.ser(error_flags)
    if dbxs:
        summary["mean_db_x"] = float(np.mean(dbxs))
        summary["mean_snr_seg"] = float(np.mean(snrs))
    lines += [f"{k},{v:.4f}" for k, v in summary.items()]
    payload = {"per_utterance": rows, "summary": summary}
    _emit(args, "\n".join(lines) + "\n", payload)
    return 0


def cmd_filter(args) -> int:
    if not (args.lpf or args.gate):
        raise DistriblockError("bad-filter-config", "pass --lpf, --gate, or both")
    cfg = fd.FilterConfig(
        lpf_cutoff_hz=args.cutoff,
        fir_taps=args.taps,
        stft_win=args.stft_win,
        stft_hop=args.stft_hop,
        gate_n_std=args.gate_n_std,
    )
    signal = io.load_wav(args.input)
    if args.lpf:
        signal = fd.lowpass(signal, cfg)
    if args.gate:
        signal = fd.spectral_gate(signal, cfg)
    io.save_wav(signal, args.out)
    return 0


def cmd_diff_detect(args) -> int:
    manifest = io.load_manifest(args.manifest)
    pairs = []
    for e in manifest.entries:
        if e.ref is None or e.hyp is None:
            raise DistriblockError("missing-transcript", f"{e.utterance_id}: need ref and hyp")
        pairs.append(e)
    if args.model:
        model = cl.load_model(args.model)
        if not isinstance(model, cl.GaussianModel):
            raise DistriblockError("bad-model", "diff-detect expects a Gaussian model file")
        diff_model = fd.TranscriptDiffModel(args.metric, model).validate()
    else:
        benign_pairs = [(e.ref, e.hyp) for e in pairs if e.label == cl.BENIGN]
        diff_model = fd.fit_transcript_diff(benign_pairs, args.metric, args.fpr_budget)
        if args.fit_out:
            cl.save_model(diff_model.gaussian, args.fit_out)
    rows = []
    for e in sorted(pairs, key=lambda e: e.utterance_id):
        verdict, value = fd.classify_transcript_diff(diff_model, e.ref, e.hyp)
        rows.append((e.utterance_id, verdict, value))
    lines = ["id,verdict,value"] + [f"{u},{v},{repr(float(x))}" for u, v, x in rows]
    payload = [{"id": u, "verdict": v, "value": x} for u, v, x in rows]
    _emit(args, "\n".join(lines) + "\n", payload)
    return 0


def _penalty_spec(args) -> ap.PenaltySpec:
    if args.variant in ("gc", "ensemble", "nn"):
        if not args.model:
            raise DistriblockError("missing-target", f"variant {args.variant} needs --model")
        model = cl.load_model(args.model)
        if args.variant == "gc":
            if not isinstance(model, cl.GaussianModel):
                raise DistriblockError("bad-model", "gc variant needs a Gaussian model")
            return ap.PenaltySpec.gc(model.mu, model.characteristic_key)
        if args.variant == "ensemble":
            if not isinstance(model, cl.EnsembleModel):
                raise DistriblockError("bad-model", "ensemble variant needs an ensemble model")
            return ap.PenaltySpec.ensemble(
                [(m.mu, m.characteristic_key) for m in model.members]
            )
        if not isinstance(model, cl.MlpModel):
            raise DistriblockError("bad-model", "nn variant needs a network model")
        return ap.PenaltySpec.nn(model)
    if not args.ref:
        raise DistriblockError("missing-target", f"variant {args.variant} needs --ref")
    return ap.PenaltySpec(args.variant, reference=io.load_sequence(args.ref))


def cmd_penalty(args) -> int:
    spec = _penalty_spec(args)
    seq = io.load_sequence(args.seq)
    value = ap.penalty(spec, seq)
    lines = [f"penalty,{value:.12g}"]
    payload = {"penalty": value}
    if args.base_loss is not None:
        combined = ap.combined_loss(ap.AdaptiveLoss(args.alpha, args.base_loss), value)
        lines.append(f"combined,{combined:.12g}")
        payload["combined"] = combined
    if args.grad:
        grad = ap.penalty_grad_fd(spec, seq, args.fd_step)
        io.write_matrix(seq.utterance_id, grad, args.grad)
        payload["grad_path"] = str(args.grad)
    _emit(args, "\n".join(lines) + "\n", payload)
    return 0


def cmd_synth(args) -> int:
    cfg = sy.SynthConfig(
        seed=args.seed,
        n_per_class=args.n_per_class,
        t_min=args.t_min,
        t_max=args.t_max,
        vocab_size=args.vocab_size,
        benign_concentration=args.benign_concentration,
        adv_concentration=args.adv_concentration,
        benign_repeat_prob=args.benign_repeat_prob,
        adv_repeat_prob=args.adv_repeat_prob,
    )
    manifest_path = sy.generate(cfg, args.out)
    sys.stdout.write(str(manifest_path) + "\n")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distriblock",
        description="Detect adversarial audio from output-distribution characteristics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_json(p):
        p.add_argument("--json", action="store_true", help="mirror the report as JSON")

    p = sub.add_parser("extract", help="compute the 24 scores per utterance")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="dataset manifest CSV")
    src.add_argument("--seq", nargs="+", help="one or more .dbk files")
    p.add_argument("--out", help="score table CSV (stdout if omitted)")
    add_json(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit-gc", help="fit a Gaussian classifier on benign scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--key", required=True, help="score column, e.g. mean-median")
    p.add_argument("--fpr-budget", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gc)

    p = sub.add_parser("fit-nn", help="train the neural classifier")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_nn)

    p = sub.add_parser("rank", help="rank characteristics by validation AUROC")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fpr-budget", type=float, default=0.01)
    p.add_argument("--out", required=True)
    add_json(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("ensemble", help="build a top-k majority-vote ensemble")
    p.add_argument("--ranking", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True, choices=(3, 5, 7, 9))
    p.add_argument("--fpr-budget", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("classify", help="classify score sets or sequences")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scores")
    src.add_argument("--seq", nargs="+")
    p.add_argument("--nn-threshold", type=float, default=0.5)
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="ROC/AUROC/AUPRC and confusion report")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--nn-threshold", type=float, default=0.5)
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("threshold", help="select an operating threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-fpr", type=float, default=0.01)
    p.add_argument("--min-tpr", type=float, default=0.5)
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("metrics", help="WER/CER/SER and noise metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--perturbed-manifest", help="manifest whose WAVs carry the perturbation")
    p.add_argument("--frame-len", type=int, default=am.DEFAULT_FRAME_LEN)
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("filter", help="apply LPF and/or spectral gating to a WAV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lpf", action="store_true")
    p.add_argument("--gate", action="store_true")
    p.add_argument("--cutoff", type=float, default=7000.0)
    p.add_argument("--taps", type=int, default=101)
    p.add_argument("--stft-win", type=int, default=512)
    p.add_argument("--stft-hop", type=int, default=128)
    p.add_argument("--gate-n-std", type=float, default=1.5)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("diff-detect", help="transcript-difference detector")
    p.add_argument("--manifest", required=True,
                   help="manifest with ref=pre-filter, hyp=post-filter transcripts")
    p.add_argument("--metric", choices=("wer", "cer"), default="wer")
    p.add_argument("--fpr-budget", type=float, default=0.01)
    p.add_argument("--model", help="previously fit model (skips fitting)")
    p.add_argument("--fit-out", help="save the fitted Gaussian here")
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_diff_detect)

    p = sub.add_parser("penalty", help="adaptive-attack penalty value and gradient")
    p.add_argument("--variant", required=True, choices=ap.VARIANTS)
    p.add_argument("--seq", required=True)
    p.add_argument("--model", help="model file for gc/ensemble/nn variants")
    p.add_argument("--ref", help="reference .dbk for kld_diff/kld_align")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--base-loss", type=float)
    p.add_argument("--grad", help="write the finite-difference gradient here (.dbk container)")
    p.add_argument("--fd-step", type=float, default=1e-6)
    p.add_argument("--out")
    add_json(p)
    p.set_defaults(func=cmd_penalty)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--t-min", type=int, default=8)
    p.add_argument("--t-max", type=int, default=20)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--benign-concentration", type=float, default=0.95)
    p.add_argument("--adv-concentration", type=float, default=0.6)
    p.add_argument("--benign-repeat-prob", type=float, default=0.9)
    p.add_argument("--adv-repeat-prob", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DistriblockError as exc:
        sys.stderr.write(f"error code={exc.code} message={exc.args[0]}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
