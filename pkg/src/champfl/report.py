"""Result files: per-round JSONL, run summaries and the per-run output directory."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import nn
from .errors import FormatError
from .sim import ExperimentConfig, RoundRecord

ROUND_KEYS = ("t", "benign_acc", "asr", "v", "alpha", "selected", "scores")
SUMMARY_COLUMNS = ("defense", "attack", "prox", "trigger", "asr_mid", "asr_final", "benign_acc_final")
OUT_ENV = "CHAMPFL_OUT"


def fmt(x) -> str:
    """Shortest round-tripping text for floats (always >= 6 significant digits); '' for None."""
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_round_jsonl(records, path) -> None:
    """One JSON object per round with exactly ``ROUND_KEYS``."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(round_line(rec))


def round_line(rec: RoundRecord) -> str:
    # json emits repr() for floats, which round-trips exactly
    return json.dumps(rec.to_json(), separators=(",", ":")) + "\n"


def read_round_jsonl(path) -> list[RoundRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from None
            if set(obj) != set(ROUND_KEYS):
                raise FormatError(f"{path}:{lineno}: expected keys {sorted(ROUND_KEYS)}, got {sorted(obj)}")
            records.append(RoundRecord(**obj))
    return records


@dataclass(frozen=True)
class RunSummary:
    digest: str
    defense: str
    attack: str
    prox: str
    trigger: str
    asr_mid: float | None
    asr_final: float | None
    benign_acc_final: float | None
    rounds: int

    def row(self) -> dict:
        return {c: getattr(self, c) for c in SUMMARY_COLUMNS}


def summarize(records, cfg: ExperimentConfig | None = None) -> RunSummary:
    """Final figures plus the ASR at round floor(T/2) (the latest evaluated round at or before it)."""
    records = list(records)
    final = records[-1] if records else None
    mid_t = len(records) // 2
    evaluated = [r for r in records if r.t <= mid_t and r.asr is not None]
    asr_mid = evaluated[-1].asr if evaluated else None
    if cfg is None:
        defense = attack = prox = trigger = digest = ""
    else:
        atk = cfg.attack
        defense = cfg.defense.rule
        attack = atk.kind
        prox = atk.metric.kind if atk.kind == "champ" else ""
        trigger = f"{atk.backdoor.size}x{atk.backdoor.size}" if atk.kind != "none" else ""
        digest = cfg.digest()
    return RunSummary(
        digest=digest,
        defense=defense,
        attack=attack,
        prox=prox,
        trigger=trigger,
        asr_mid=asr_mid,
        asr_final=final.asr if final else None,
        benign_acc_final=final.benign_acc if final else None,
        rounds=len(records),
    )


def write_summary_csv(summaries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(summary_csv_text(summaries))


def summary_csv_text(summaries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        writer.writerow([fmt(s.row()[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def rounds_table_text(records, summary: RunSummary) -> str:
    """Per-round rows followed by one summary row (t = 'summary')."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("t", "benign_acc", "asr", "v", "alpha", "selected"))
    for r in records:
        sel = " ".join(str(i) for i in r.selected) if r.selected is not None else ""
        writer.writerow((r.t, fmt(r.benign_acc), fmt(r.asr), fmt(r.v), fmt(r.alpha), sel))
    writer.writerow(("summary", fmt(summary.benign_acc_final), fmt(summary.asr_final), "", "", ""))
    return buf.getvalue()


def resolve_out_dir(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> Path:
    """``out`` if given, else ``$CHAMPFL_OUT/<digest>``, else ``runs/<digest>``."""
    if out:
        return Path(out)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.digest()


def write_config(cfg: ExperimentConfig, path) -> None:
    doc = {"digest": cfg.digest(), "config": cfg.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}") from None
    return ExperimentConfig.from_dict(doc.get("config", doc))


def run_to_dir(cfg: ExperimentConfig, out_dir) -> tuple[list[RoundRecord], RunSummary]:
    """Run ``cfg`` and write rounds.jsonl (streamed), config.json, summary.csv and final.ckpt."""
    from .sim import run_experiment

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / "config.json")
    with open(out_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:

        def stream(rec):
            fh.write(round_line(rec))
            fh.flush()

        records, model = run_experiment(cfg, on_round=stream)
    summary = summarize(records, cfg)
    write_summary_csv([summary], out_dir / "summary.csv")
    nn.save_checkpoint(model, out_dir / "final.ckpt")
    return records, summary
