"""End-to-end evaluation: activations -> RDMs -> scores -> leaderboard rows."""

from __future__ import annotations

import contextlib
import csv
import fcntl
import io
import json
import logging
import os
import shutil
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rsa
from .model import TAP_NAMES, Model, build, config_from_checkpoint, load_checkpoint
from .tensor import (IMAGENET_MEAN, IMAGENET_STD, load_archive, load_tensor, read_archive,
                     save_archive, save_tensor)
from .train import load_ppm, preprocess

log = logging.getLogger(__name__)

LEADERBOARD_FIELDS = ("model", "epoch", "evc_pct", "it_pct", "mean_pct", "stddev", "best_layer")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def worker_count() -> int:
    raw = os.environ.get("RSAFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"RSAFORGE_THREADS must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------- extraction


def load_images(path: str | Path) -> np.ndarray:
    """Load stimuli from a directory of ``.ppm`` files (sorted by name) or an RDMA archive."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no .ppm files in {path}")
        return np.stack([load_ppm(f.read_bytes()) for f in files])
    tensors = load_archive(path)
    arrays = list(tensors.values())
    if len(arrays) == 1 and arrays[0].ndim == 4:
        return arrays[0]
    if arrays and all(a.ndim == 3 and a.shape == arrays[0].shape for a in arrays):
        return np.stack(arrays)
    raise ValueError(f"{path}: expected one [N,3,H,W] tensor or N same-shaped [3,H,W] tensors")


def load_model(checkpoint: str | Path) -> tuple[Model, int]:
    data = Path(checkpoint).read_bytes()
    model = build(config_from_checkpoint(data))
    epoch = load_checkpoint(model, data)
    return model, epoch


def ordered_taps(names) -> list[str]:
    """Known taps in network order, then any others alphabetically."""
    names = list(names)
    known = [t for t in TAP_NAMES if t in names]
    return known + sorted(n for n in names if n not in TAP_NAMES)


def extract_activations(model: Model, images: np.ndarray, taps: Sequence[str],
                        input_size=(64, 64), mean=IMAGENET_MEAN, std=IMAGENET_STD,
                        batch_size: int = 32) -> dict[str, np.ndarray]:
    """Eval-mode ``[N, D]`` activations per tap."""
    x = preprocess(images, input_size, mean, std)
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    for start in range(0, len(x), batch_size):
        _, acts = model.forward(x[start:start + batch_size], training=False, taps=taps)
        for t in taps:
            chunks[t].append(acts[t])
    return {t: np.concatenate(chunks[t]) for t in ordered_taps(taps)}


def rdms_from_activations(acts: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for tap, a in acts.items():
        try:
            out[tap] = rsa.compute_rdm(a)
        except rsa.DegenerateRowError as exc:
            raise ValueError(f"layer {tap!r}: {exc}") from exc
    return out


def write_rdms(rdms: Mapping[str, np.ndarray], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for tap, rdm in rdms.items():
        save_tensor(directory / f"{tap}.rdmt", rdm, tap)


def read_rdms(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    files = sorted(directory.glob("*.rdmt"))
    if not files:
        raise FileNotFoundError(f"no .rdmt files in {directory}")
    found = {}
    for f in files:
        name, rdm = load_tensor(f)
        found[name or f.stem] = rsa.check_rdm(rdm, f"model RDM {f.name}")
    return {t: found[t] for t in ordered_taps(found)}


def read_brain(path: str | Path) -> dict[str, np.ndarray]:
    brain = load_archive(path)
    if not brain:
        raise ValueError(f"{path}: brain archive is empty")
    for region, rdms in brain.items():
        rsa.check_subjects(rdms, f"region {region}")
    return brain


# --------------------------------------------------------------------------- scoring


def score_report(model_rdms: Mapping[str, np.ndarray], brain: Mapping[str, np.ndarray],
                 workers: int = 1) -> dict:
    """JSON-ready scores of every layer against every region of one stimulus set."""
    n = {r.shape[1] for r in brain.values()}
    if len(n) != 1:
        raise ValueError(f"brain regions disagree on stimulus count: {sorted(n)}")
    n_stim = n.pop()
    for layer, rdm in model_rdms.items():
        if rdm.shape != (n_stim, n_stim):
            raise ValueError(f"layer {layer!r} RDM is {rdm.shape}, brain data has {n_stim} stimuli")
    ceilings = {region: rsa.noise_ceiling(rdms) for region, rdms in brain.items()}

    def score_layer(layer):
        scores = {}
        for region, rdms in brain.items():
            try:
                scores[region] = rsa.score_model(model_rdms[layer], rdms, ceilings[region]).to_dict()
            except ValueError as exc:
                raise ValueError(f"layer {layer!r}, region {region}: {exc}") from exc
        scores["mean_pct"] = float(np.mean([scores[r]["normalized_pct"] for r in brain]))
        return scores

    layers = list(model_rdms)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_layer = dict(zip(layers, pool.map(score_layer, layers)))
    return {
        "n_stimuli": n_stim,
        "layers": layers,
        "regions": {
            region: {
                "n_subjects": int(brain[region].shape[0]),
                "nc_lower": c.lower,
                "nc_upper": c.upper,
                "nc_lower_r": list(c.lower_r),
                "nc_upper_r": list(c.upper_r),
            }
            for region, c in ceilings.items()
        },
        "scores": per_layer,
        "best_layer": rsa.best_layer({l: {"set": s["mean_pct"]} for l, s in per_layer.items()}),
    }


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# --------------------------------------------------------------------------- evaluate


@dataclass
class StimulusSet:
    images: Path
    brain: Path


@dataclass
class EvalManifest:
    checkpoint: Path
    sets: dict[str, StimulusSet]
    output_dir: Path
    label: str = "model"
    taps: list[str] = field(default_factory=lambda: list(TAP_NAMES))
    input_size: tuple[int, int] = (64, 64)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    ledger: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> EvalManifest:
        """Parse a JSON manifest; relative paths resolve against the manifest's directory."""
        path = Path(path)
        raw = json.loads(path.read_text())
        base = path.parent

        def p(value):
            value = Path(value)
            return value if value.is_absolute() else base / value

        sets = {name: StimulusSet(p(s["images"]), p(s["brain"])) for name, s in raw["sets"].items()}
        size = raw.get("input_size", [64, 64])
        size = (size, size) if isinstance(size, int) else tuple(size)
        return cls(
            checkpoint=p(raw["checkpoint"]),
            sets=sets,
            output_dir=p(raw.get("output_dir", "eval_out")),
            label=raw.get("label", "model"),
            taps=list(raw.get("taps", TAP_NAMES)),
            input_size=size,
            mean=tuple(raw.get("mean", IMAGENET_MEAN)),
            std=tuple(raw.get("std", IMAGENET_STD)),
            ledger=p(raw["ledger"]) if raw.get("ledger") else None,
        )

    def validate(self) -> None:
        if not self.sets:
            raise ValueError("manifest lists no stimulus sets")
        unknown = [t for t in self.taps if t not in TAP_NAMES]
        if unknown:
            raise ValueError(f"unknown tap(s) {unknown}; valid taps are {list(TAP_NAMES)}")
        missing = [str(f) for f in [self.checkpoint]
                   + [x for s in self.sets.values() for x in (s.images, s.brain)] if not f.exists()]
        if missing:
            raise FileNotFoundError(f"manifest references missing file(s): {missing}")


def leaderboard_row(label: str, epoch: int, reports: Mapping[str, dict], best: str) -> dict:
    """Summarize the best layer across sets.

    Region percentages are averaged over sets; ``stddev`` is the mean over
    (set, region) of the across-subject standard deviation of per-subject
    percentages.
    """
    region_pct: dict[str, list[float]] = {}
    stds, detail = [], {}
    for set_name, rep in reports.items():
        detail[set_name] = {}
        for region, rdict in rep["regions"].items():
            s = rep["scores"][best][region]
            region_pct.setdefault(region, []).append(s["normalized_pct"])
            stds.append(s["std_pct"])
            detail[set_name][region] = {"nc_lower": rdict["nc_lower"],
                                        "per_subject_r": s["per_subject_r"]}
    per_region = {r: float(np.mean(v)) for r, v in region_pct.items()}
    return {
        "model": label,
        "epoch": int(epoch),
        "evc_pct": per_region.get("EVC"),
        "it_pct": per_region.get("IT"),
        "mean_pct": float(np.mean(list(per_region.values()))),
        "stddev": float(np.mean(stds)),
        "best_layer": best,
        "detail": detail,
    }


def evaluate(manifest: EvalManifest, workers: int = 1) -> dict:
    """Run extract -> rdm -> score for every set, choose the best layer, append to the ledger.

    Outputs are staged next to ``output_dir`` and only moved into place when
    every stage succeeded.
    """
    with stage("manifest"):
        manifest.validate()
    out = manifest.output_dir
    staging = out.with_name(f".{out.name}.partial-{os.getpid()}")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        with stage("load checkpoint"):
            model, epoch = load_model(manifest.checkpoint)
        reports = {}
        for set_name, sset in manifest.sets.items():
            set_dir = staging / set_name
            set_dir.mkdir()
            with stage(f"extract[{set_name}]"):
                images = load_images(sset.images)
                acts = extract_activations(model, images, manifest.taps, manifest.input_size,
                                           manifest.mean, manifest.std)
                save_archive(set_dir / "activations.rdma", acts)
            with stage(f"rdm[{set_name}]"):
                write_rdms(rdms_from_activations(acts), set_dir / "rdms")
            with stage(f"score[{set_name}]"):
                rep = score_report(read_rdms(set_dir / "rdms"), read_brain(sset.brain), workers)
                write_json(set_dir / "scores.json", rep)
            reports[set_name] = rep
        with stage("best layer"):
            if len(reports) == 1:
                log.warning("only one stimulus set (%s); best layer is chosen from it alone",
                            next(iter(reports)))
            layer_scores = {
                layer: {s: reports[s]["scores"][layer]["mean_pct"] for s in reports}
                for layer in reports[next(iter(reports))]["layers"]
            }
            best = rsa.best_layer(layer_scores, list(reports))
            row = leaderboard_row(manifest.label, epoch, reports, best)
            summary = {"model": manifest.label, "epoch": epoch, "sets": list(reports),
                       "layer_scores": layer_scores, "best_layer": best, "leaderboard_row": row}
            write_json(staging / "report.json", summary)
        if out.exists():
            shutil.rmtree(out)
        staging.rename(out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if manifest.ledger is not None:
        with stage("ledger"):
            append_ledger(manifest.ledger, row)
    return summary


# --------------------------------------------------------------------------- ledger + report


def append_ledger(path: str | Path, row: dict) -> None:
    """Append ``row`` to a JSON-list ledger under an exclusive advisory lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            text = fh.read()
            rows = json.loads(text) if text.strip() else []
            rows.append(row)
            fh.seek(0)
            fh.truncate()
            fh.write(json.dumps(rows, indent=2) + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_ledger(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    text = path.read_text()
    rows = json.loads(text) if text.strip() else []
    if not isinstance(rows, list):
        raise ValueError(f"{path}: ledger must be a JSON list")
    return rows


def sorted_rows(rows: Sequence[dict]) -> list[dict]:
    """Leaderboard order: descending mean percentage (stable)."""
    return sorted(rows, key=lambda r: -r["mean_pct"])


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_report(rows: Sequence[dict], fmt: str) -> str:
    rows = [{k: r.get(k) for k in LEADERBOARD_FIELDS} for r in sorted_rows(rows)]
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LEADERBOARD_FIELDS)
    for r in rows:
        writer.writerow([_cell(r[k]) for k in LEADERBOARD_FIELDS])
    return buf.getvalue()


def parse_csv_report(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({
            "model": rec["model"],
            "epoch": int(rec["epoch"]),
            "evc_pct": float(rec["evc_pct"]) if rec["evc_pct"] else None,
            "it_pct": float(rec["it_pct"]) if rec["it_pct"] else None,
            "mean_pct": float(rec["mean_pct"]),
            "stddev": float(rec["stddev"]),
            "best_layer": rec["best_layer"],
        })
    return rows


def activations_archive(path: str | Path) -> dict[str, np.ndarray]:
    acts = read_archive(Path(path).read_bytes())
    return {t: acts[t] for t in ordered_taps(acts)}
