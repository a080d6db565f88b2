"""Point-cloud files (XYZ, ASCII PLY), result JSON and experiment reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .geom import PointCloud

log = logging.getLogger(__name__)

FORMATS = ("xyz", "ply_ascii")


class CloudFormatError(ValueError):
    """Malformed point-cloud file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path, self.line = path, line
        where = f"{path}" if path else "<input>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


def detect_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply_ascii"
    if suffix in (".xyz", ".txt", ".pts", ".xyzn"):
        return "xyz"
    raise CloudFormatError(f"cannot infer format from extension {suffix!r}", path)


def _fmt(v):
    return "%.17g" % v


def _number(tok, path, line):
    try:
        v = float(tok)
    except ValueError:
        raise CloudFormatError(f"not a number: {tok!r}", path, line) from None
    if not math.isfinite(v):
        raise CloudFormatError(f"non-finite value {tok!r}", path, line)
    return v


def _finish(points, normals, path, lines):
    if not points:
        raise CloudFormatError("no points found", path)
    pts = np.array(points, dtype=np.float64)
    if normals is None:
        return PointCloud(pts)
    nrm = np.array(normals, dtype=np.float64)
    norms = np.linalg.norm(nrm, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if len(zero):
        raise CloudFormatError("zero-length normal", path, lines[zero[0]])
    off = np.abs(norms - 1.0) > 1e-3
    if np.any(off):
        log.warning("%s: re-normalising %d normal(s) that are not unit length", path or "<input>", int(off.sum()))
    return PointCloud(pts, nrm / norms[:, None])


def _read_xyz(text, path=None):
    points, normals, lines = [], [], []
    width = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) not in (3, 6):
            raise CloudFormatError(f"expected 3 or 6 fields, got {len(toks)}", path, lineno)
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise CloudFormatError(f"expected {width} fields like earlier lines, got {len(toks)}", path, lineno)
        vals = [_number(t, path, lineno) for t in toks]
        points.append(vals[:3])
        if width == 6:
            normals.append(vals[3:])
        lines.append(lineno)
    return _finish(points, normals if width == 6 else None, path, lines)


def _read_ply(text, path=None):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic line", path, 1)
    elements = []  # [name, count, [property names]]
    body_start = None
    for lineno, raw in enumerate(lines[1:], 2):
        toks = raw.split()
        if not toks:
            continue
        key = toks[0]
        if key == "format":
            if len(toks) < 3 or toks[1] != "ascii" or toks[2] != "1.0":
                raise CloudFormatError("only 'format ascii 1.0' is supported", path, lineno)
        elif key == "element":
            if len(toks) != 3:
                raise CloudFormatError("malformed element line", path, lineno)
            try:
                count = int(toks[2])
            except ValueError:
                raise CloudFormatError(f"bad element count {toks[2]!r}", path, lineno) from None
            elements.append([toks[1], count, []])
        elif key == "property":
            if not elements:
                raise CloudFormatError("property before any element", path, lineno)
            if toks[1] == "list":
                if len(toks) != 5:
                    raise CloudFormatError("malformed list property", path, lineno)
                elements[-1][2].append(("list", toks[4]))
            else:
                if len(toks) != 3:
                    raise CloudFormatError("malformed property line", path, lineno)
                elements[-1][2].append(("scalar", toks[2]))
        elif key == "end_header":
            body_start = lineno
            break
        elif key in ("comment", "obj_info"):
            continue
        else:
            raise CloudFormatError(f"unexpected header keyword {key!r}", path, lineno)
    if body_start is None:
        raise CloudFormatError("missing end_header", path)

    points, normals, vlines = [], [], []
    has_normals = False
    cursor = body_start  # index into `lines` of the next body line
    for name, count, props in elements:
        names = [p[1] for p in props]
        if name == "vertex":
            for axis in ("x", "y", "z"):
                if axis not in names:
                    raise CloudFormatError(f"vertex element lacks property {axis!r}", path)
            has_normals = all(n in names for n in ("nx", "ny", "nz"))
            if any(p[0] == "list" for p in props):
                raise CloudFormatError("list properties on vertices are not supported", path)
            cols = [names.index(a) for a in ("x", "y", "z")]
            ncols = [names.index(a) for a in ("nx", "ny", "nz")] if has_normals else []
        done = 0
        while done < count:
            if cursor >= len(lines):
                raise CloudFormatError(f"file ends inside element {name!r}", path, len(lines))
            lineno = cursor + 1
            toks = lines[cursor].split()
            cursor += 1
            if not toks:
                continue
            if name == "vertex":
                if len(toks) != len(props):
                    raise CloudFormatError(f"expected {len(props)} values, got {len(toks)}", path, lineno)
                vals = [_number(toks[c], path, lineno) for c in cols + ncols]
                points.append(vals[:3])
                if has_normals:
                    normals.append(vals[3:])
                vlines.append(lineno)
            done += 1
    return _finish(points, normals if has_normals else None, path, vlines)


def read_cloud(path, format=None) -> PointCloud:
    """Load a cloud from an XYZ or ASCII PLY file.

    Normals, when present, are re-normalised (with a warning if any is off
    by more than 1e-3). Raises :class:`CloudFormatError` on malformed input.
    """
    fmt = format or detect_format(path)
    if fmt not in FORMATS:
        raise CloudFormatError(f"unknown format {fmt!r}", path)
    text = Path(path).read_text()
    return _read_xyz(text, str(path)) if fmt == "xyz" else _read_ply(text, str(path))


def parse_cloud(text, format="xyz") -> PointCloud:
    return _read_xyz(text) if format == "xyz" else _read_ply(text)


PLY_HEADER = (
    "ply\n"
    "format ascii 1.0\n"
    "comment written by bbreg\n"
    "element vertex {n}\n"
    "property double x\n"
    "property double y\n"
    "property double z\n"
    "{normal_props}"
    "end_header\n"
)
_NORMAL_PROPS = "property double nx\nproperty double ny\nproperty double nz\n"


def format_cloud(cloud: PointCloud, format="xyz") -> str:
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    body = "".join(" ".join(_fmt(v) for v in row) + "\n" for row in cols)
    if format == "xyz":
        return body
    if format == "ply_ascii":
        header = PLY_HEADER.format(n=len(cloud), normal_props=_NORMAL_PROPS if cloud.normals is not None else "")
        return header + body
    raise ValueError(f"unknown format {format!r}")


def write_cloud(path, cloud: PointCloud, format=None):
    """Write ``cloud`` as text with 17 significant digits per value."""
    fmt = format or detect_format(path)
    Path(path).write_text(format_cloud(cloud, fmt))


# --- registration results --------------------------------------------------

def load_schema(name="result"):
    return json.loads(resources.files("bbreg").joinpath(f"schemas/{name}.schema.json").read_text())


def result_to_dict(result, include_timing=True):
    d = {
        "transform": {
            "rotation": [float(v) for v in np.asarray(result.transform.rotation).ravel()],
            "translation": [float(v) for v in result.transform.translation],
        },
        "final_params": dict(zip(
            ["theta", "phi", "psi", "tx", "ty", "tz", "log_alpha"],
            (float(v) for v in result.final_params.to_vector()),
        )),
        "loss_trace": [float(v) for v in result.loss_trace],
        "buddy_count_trace": [int(v) for v in result.buddy_count_trace],
        "iterations_run": int(result.iterations_run),
        "config": result.config.to_dict() if result.config is not None else None,
        "metadata": result.metadata,
    }
    if include_timing:
        d["timings"] = {"wall_time": float(result.wall_time)}
    return d


def validate_result(d):
    import jsonschema

    jsonschema.validate(d, load_schema("result"))


def write_result(path, result, include_timing=True):
    d = result_to_dict(result, include_timing)
    validate_result(d)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return d


# --- experiment reports ----------------------------------------------------

CSV_FIELDS = [
    "trial", "variant", "angular_error_deg", "translation_error",
    "iterations", "final_loss", "final_buddy_count", "failed",
]


def _csv_num(v):
    if v is None:
        return ""
    return repr(float(v))


def write_report_csv(path_or_file, report):
    """One row per (trial, variant); timings are left out so output is reproducible."""
    close = False
    if isinstance(path_or_file, (str, Path)):
        fh = open(path_or_file, "w", newline="")
        close = True
    else:
        fh = path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in report.records:
            w.writerow([
                r.trial, r.variant, _csv_num(r.angular_error), _csv_num(r.translation_error),
                r.iterations, _csv_num(r.final_loss),
                "" if r.final_buddy_count is None else r.final_buddy_count, int(r.failed),
            ])
    finally:
        if close:
            fh.close()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def report_to_dict(report, include_timing=True):
    records = []
    for r in report.records:
        rec = {
            "trial": r.trial, "variant": r.variant,
            "angular_error_deg": r.angular_error, "translation_error": r.translation_error,
            "iterations": r.iterations, "final_loss": r.final_loss,
            "final_buddy_count": r.final_buddy_count, "failed": r.failed, "message": r.message,
        }
        if include_timing:
            rec["wall_time"] = r.wall_time
        records.append(rec)
    return _json_safe({
        "spec": report.spec.to_dict(),
        "records": records,
        "aggregates": report.aggregates(),
    })


def write_report_json(path, report, include_timing=True):
    Path(path).write_text(json.dumps(report_to_dict(report, include_timing), indent=2, sort_keys=True) + "\n")


def cli_main(argv=None) -> int:
    """Run the ``bbreg`` command line; returns the process exit code."""
    from .cli import main

    return main(argv)
