"""Running experiments, writing validated outputs, manifests and summaries."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

from ..errors import ConfigurationError, IntegrityError, SchemaError
from .config import dump_config
from .experiments import get_pipeline

MANIFEST_NAME = "manifest.json"
REPORT_NAME = "report.txt"


def code_version():
    from .. import __version__
    return __version__


# -- CSV tables --------------------------------------------------------------

def _format(value, kind):
    if kind == "float":
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def _parse(text, kind):
    if kind == "float":
        float(text)
    elif kind == "int":
        int(text)
    elif kind == "bool":
        if text not in ("true", "false"):
            raise ValueError(text)


def write_table(table, path):
    names = [c for c, _ in table.columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in table.rows:
            if set(row) != set(names):
                raise SchemaError(f"{table.name}: row keys {sorted(row)} differ from the "
                                  f"declared columns {names}")
            w.writerow([_format(row[c], k) for c, k in table.columns])


def validate_csv(path, columns):
    """Re-read an emitted CSV and check header and cell types against ``columns``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    names = [c for c, _ in columns]
    if rows[0] != names:
        raise SchemaError(f"{path}: header {rows[0]} does not match {names}")
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns):
            raise SchemaError(f"{path}:{i}: expected {len(columns)} cells, got {len(row)}")
        for cell, (name, kind) in zip(row, columns):
            try:
                _parse(cell, kind)
            except ValueError:
                raise SchemaError(f"{path}:{i}: column {name!r} is not a valid {kind}: "
                                  f"{cell!r}") from None
    return len(rows) - 1


def validate_numeric_csv(path):
    """Header row then all-float cells (used for the solution blocks)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    return validate_csv(path, [(c, "float") for c in rows[0]])


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    experiment: str
    config_hash: str
    code_version: str
    seed: int
    threads: int
    wall_clock: float
    stage_timings: dict
    warnings: list
    outputs: dict  # relative path -> sha256
    verdicts: dict
    details: dict = field(default_factory=dict)
    output_dir: str = ""

    @property
    def passed(self):
        return bool(self.verdicts) and all(self.verdicts.values())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def write(self, directory=None):
        path = os.path.join(directory or self.output_dir, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
        return path


def load_manifest(directory):
    with open(os.path.join(directory, MANIFEST_NAME)) as fh:
        return RunManifest.from_dict(json.load(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def _select_verdicts(cfg, verdicts):
    if cfg.verdicts is None:
        return dict(verdicts)
    unknown = [v for v in cfg.verdicts if v not in verdicts]
    if unknown:
        raise ConfigurationError(f"verdicts {unknown} are not produced by {cfg.experiment}; "
                                 f"available: {sorted(verdicts)}")
    return {v: verdicts[v] for v in cfg.verdicts}


def _files_under(directory, root):
    out = []
    for base, _, files in os.walk(directory):
        for name in sorted(files):
            out.append(os.path.relpath(os.path.join(base, name), root).replace(os.sep, "/"))
    return out


def run_experiment(cfg, output_dir=None):
    """Run the configured pipeline, write validated outputs and the manifest."""
    pipeline = get_pipeline(cfg.experiment)
    outdir = output_dir or cfg.output_dir
    t0 = time.perf_counter()
    result = pipeline(cfg)
    verdicts = _select_verdicts(cfg, result.verdicts)
    os.makedirs(outdir, exist_ok=True)
    written = []
    for table in result.tables:
        path = os.path.join(outdir, table.name)
        write_table(table, path)
        validate_csv(path, table.columns)
        written.append(table.name)
    for sub, writer in result.extra_files:
        target = os.path.join(outdir, sub)
        writer(target)
        for name in sorted(os.listdir(target)):
            if name.endswith(".csv"):
                validate_numeric_csv(os.path.join(target, name))
        written += _files_under(target, outdir)
    # snapshot of the hashed fields only, so the inventory is independent of threads
    dump_config(cfg, os.path.join(outdir, "config.yaml"), canonical=True)
    written.append("config.yaml")
    outputs = {rel: file_digest(os.path.join(outdir, rel)) for rel in sorted(written)}
    manifest = RunManifest(experiment=cfg.experiment, config_hash=cfg.hash(),
                           code_version=code_version(), seed=cfg.seed, threads=cfg.threads,
                           wall_clock=time.perf_counter() - t0,
                           stage_timings=dict(result.timings),
                           warnings=list(dict.fromkeys(result.warnings)),
                           outputs=outputs, verdicts=verdicts,
                           details=_jsonable(result.details), output_dir=outdir)
    manifest.write(outdir)
    return manifest


def verify_outputs(manifest, outdir=None):
    outdir = outdir or manifest.output_dir
    for rel, digest in manifest.outputs.items():
        path = os.path.join(outdir, rel)
        if not os.path.isfile(path):
            raise IntegrityError(f"output {rel} listed in the manifest is missing")
        if file_digest(path) != digest:
            raise IntegrityError(f"output {rel} does not match its manifest digest")


def emit_report(manifest, outdir=None, write=True):
    """Plain-text summary with CSV pointers, warnings and verdicts."""
    outdir = outdir or manifest.output_dir
    verify_outputs(manifest, outdir)
    lines = [f"experiment: {manifest.experiment}",
             f"config hash: {manifest.config_hash}",
             f"code version: {manifest.code_version}",
             f"seed: {manifest.seed}  threads: {manifest.threads}",
             f"wall clock: {manifest.wall_clock:.2f} s", "", "stage timings:"]
    lines += [f"  {k}: {v:.2f} s" for k, v in manifest.stage_timings.items()]
    lines += ["", "outputs:"]
    lines += [f"  {rel}  sha256={d[:16]}" for rel, d in manifest.outputs.items()
              if rel.endswith(".csv")]
    n = len(manifest.warnings)
    lines += ["", f"{n} warning{'s' if n != 1 else ''}"]
    lines += [f"  - {w}" for w in manifest.warnings]
    lines += ["", "verdicts:"]
    lines += [f"  {name}: {'PASS' if ok else 'FAIL'}" for name, ok in manifest.verdicts.items()]
    lines += ["", f"overall: {'PASS' if manifest.passed else 'FAIL'}"]
    text = "\n".join(lines) + "\n"
    if write:
        with open(os.path.join(outdir, REPORT_NAME), "w") as fh:
            fh.write(text)
    return text
