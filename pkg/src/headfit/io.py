"""File formats: the model-asset container, OBJ, PNG, JSON/CSV records.

Asset container layout ("HMM1"): magic bytes at offset 0, a little-endian
uint64 header length, a UTF-8 JSON header (dims, counts, regions,
landmark table and the block manifest), then the binary blocks in
declared order, each little-endian float64, C order. Integer blocks
(faces) are stored as float64 as well; indices are exact well past 2^50.

All loaders raise FormatError on bad magic or schema violations (the
message carries the offending field) and never silently coerce.
"""

from __future__ import annotations

import csv
import json
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .errors import ContractError, FormatError
from .fitting import FitConfig, FitReport, Observation, ObservationGrid
from .losses import Landmarks2D
from .model import HeadParams, ModelAsset, TriMesh, validate_asset
from .registration import EvalReport
from .render import ImagePlane, SoftMask

ASSET_MAGIC = b"HMM1"
ASSET_SCHEMA = "hmm/1"
PARAMS_SCHEMA = "headparams/1"
MANIFEST_KEYS = {
    "image", "skin_mask", "bald_mask", "landmarks_csv",
    "pose_index", "crop_level", "subject",
}

_BLOCK_ORDER = (
    "template_vertices", "faces", "shape_basis", "expression_basis",
    "albedo_mean", "albedo_basis", "joints", "skinning_weights",
)
_OPTIONAL_BLOCKS = ("pose_corrective_basis",)  # reserved; decode ignores it


# ---------------------------------------------------------------------------
# model asset container


def save_asset(asset: ModelAsset, path: str | Path) -> None:
    validate_asset(asset)
    blocks: list[tuple[str, np.ndarray]] = []
    for name in _BLOCK_ORDER:
        blocks.append((name, np.asarray(getattr(asset, name), dtype=np.float64)))
    if asset.pose_corrective_basis is not None:
        blocks.append(
            ("pose_corrective_basis", np.asarray(asset.pose_corrective_basis, dtype=np.float64))
        )
    header = {
        "schema": ASSET_SCHEMA,
        "dims": list(asset.dims),
        "counts": {
            "vertices": asset.n_vertices,
            "faces": int(len(asset.faces)),
            "joints": int(len(asset.joints)),
        },
        "regions": {k: np.asarray(v).tolist() for k, v in sorted(asset.regions.items())},
        "landmark_table": [
            [int(f), b[0], b[1], b[2]]
            for f, b in zip(asset.landmark_faces, asset.landmark_bary.tolist())
        ],
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ASSET_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_asset(path: str | Path) -> ModelAsset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ASSET_MAGIC:
            raise FormatError(f"bad asset magic {magic!r}, expected {ASSET_MAGIC!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable asset header: {exc}") from exc
        if header.get("schema") != ASSET_SCHEMA:
            raise FormatError(f"unsupported asset schema {header.get('schema')!r}")
        arrays: dict[str, np.ndarray] = {}
        for block in header["blocks"]:
            name, shape = block["name"], tuple(block["shape"])
            if name not in _BLOCK_ORDER and name not in _OPTIONAL_BLOCKS:
                raise FormatError(f"unknown asset block {name!r}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise FormatError(f"truncated asset block {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    missing = [n for n in _BLOCK_ORDER if n not in arrays]
    if missing:
        raise FormatError(f"asset is missing blocks {missing}")
    table = header["landmark_table"]
    asset = ModelAsset(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"].astype(np.int64),
        shape_basis=arrays["shape_basis"],
        expression_basis=arrays["expression_basis"],
        albedo_mean=arrays["albedo_mean"],
        albedo_basis=arrays["albedo_basis"],
        joints=arrays["joints"],
        skinning_weights=arrays["skinning_weights"],
        landmark_faces=np.array([row[0] for row in table], dtype=np.int64),
        landmark_bary=np.array([row[1:4] for row in table], dtype=np.float64),
        regions={k: np.array(v, dtype=np.int64) for k, v in header["regions"].items()},
        pose_corrective_basis=arrays.get("pose_corrective_basis"),
    )
    try:
        validate_asset(asset)
    except ContractError as exc:
        raise FormatError(f"asset violates invariants: {exc}") from exc
    return asset


# ---------------------------------------------------------------------------
# OBJ meshes


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_obj(path: str | Path) -> TriMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise FormatError(f"OBJ line {ln}: vertex needs 3 coordinates")
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise FormatError(f"OBJ line {ln}: only triangles are supported")
            idx = []
            for token in parts[1:]:
                head = token.split("/")[0]
                value = int(head)
                if value < 0:  # negative indices count from the end
                    value = len(vertices) + 1 + value
                idx.append(value - 1)
            faces.append(idx)
        # other records (vn, vt, usemtl, ...) are ignored
    if not vertices:
        raise FormatError("OBJ contains no vertices")
    try:
        return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ContractError as exc:
        raise FormatError(f"OBJ mesh invalid: {exc}") from exc


# ---------------------------------------------------------------------------
# PNG images and masks


def save_png_image(image: ImagePlane | np.ndarray, path: str | Path) -> None:
    rgb = image.rgb if isinstance(image, ImagePlane) else np.asarray(image)
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png_image(path: str | Path) -> ImagePlane:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return ImagePlane(rgb)


def save_png_mask(mask: SoftMask | np.ndarray, path: str | Path) -> None:
    values = mask.values if isinstance(mask, SoftMask) else np.asarray(mask)
    data = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_png_mask(path: str | Path) -> SoftMask:
    with Image.open(path) as img:
        values = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return SoftMask(values)


# ---------------------------------------------------------------------------
# parameters, landmarks, manifests


def save_params(params: HeadParams, path: str | Path) -> None:
    doc = {"schema": PARAMS_SCHEMA, "dims": list(params.dims)}
    for group in ("beta", "psi", "theta", "alpha", "cam", "light"):
        doc[group] = getattr(params, group).tolist()
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def load_params(path: str | Path) -> HeadParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"params file is not JSON: {exc}") from exc
    if doc.get("schema") != PARAMS_SCHEMA:
        raise FormatError(f"unsupported params schema {doc.get('schema')!r}")
    known = {"schema", "dims", "beta", "psi", "theta", "alpha", "cam", "light"}
    unknown = set(doc) - known
    if unknown:
        raise FormatError(f"unknown keys in params file: {sorted(unknown)}")
    try:
        params = HeadParams(
            beta=np.array(doc["beta"], dtype=np.float64),
            psi=np.array(doc["psi"], dtype=np.float64),
            theta=np.array(doc["theta"], dtype=np.float64),
            alpha=np.array(doc["alpha"], dtype=np.float64),
            cam=np.array(doc["cam"], dtype=np.float64),
            light=np.array(doc["light"], dtype=np.float64),
        )
    except (KeyError, ContractError) as exc:
        raise FormatError(f"invalid params file: {exc}") from exc
    if list(params.dims) != list(doc["dims"]):
        raise FormatError("params dims field does not match the stored vectors")
    return params


def save_landmarks_csv(landmarks: Landmarks2D, path: str | Path) -> None:
    lines = ["index,x,y,weight,visible"]
    for i in range(len(landmarks.points)):
        x, y = landmarks.points[i]
        lines.append(
            f"{i},{float(x)!r},{float(y)!r},{float(landmarks.weights[i])!r},"
            f"{int(landmarks.visible[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_landmarks_csv(path: str | Path) -> Landmarks2D:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if rows and rows[0][:2] == ["index", "x"]:
        rows = rows[1:]
    points = np.zeros((71, 2))
    weights = np.ones(71)
    visible = np.zeros(71, dtype=bool)
    seen = set()
    for row in rows:
        if not row:
            continue
        if len(row) != 5:
            raise FormatError(f"landmark row needs 5 fields, got {row}")
        idx = int(row[0])
        if idx < 0 or idx >= 71:
            raise FormatError(f"landmark index {idx} outside [0, 71)")
        points[idx] = (float(row[1]), float(row[2]))
        weights[idx] = float(row[3])
        visible[idx] = bool(int(row[4]))
        seen.add(idx)
    if len(seen) != 71:
        raise FormatError(f"landmark file defines {len(seen)} of 71 landmarks")
    return Landmarks2D(points, weights, visible)


def load_manifest(path: str | Path, shared_shape: bool = False) -> ObservationGrid:
    """Observation manifest: JSON array of records with fields
    image, skin_mask, bald_mask (optional), landmarks_csv, pose_index,
    crop_level and optional subject. Paths are relative to the manifest."""
    base = Path(path).parent
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not JSON: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise FormatError("manifest must be a non-empty JSON array")
    observations = []
    for i, rec in enumerate(records):
        unknown = set(rec) - MANIFEST_KEYS
        if unknown:
            raise FormatError(f"manifest record {i} has unknown keys {sorted(unknown)}")
        for field in ("image", "skin_mask", "landmarks_csv", "pose_index", "crop_level"):
            if field not in rec:
                raise FormatError(f"manifest record {i} is missing '{field}'")
        image = load_png_image(base / rec["image"])
        skin = load_png_mask(base / rec["skin_mask"])
        bald = load_png_mask(base / rec["bald_mask"]) if rec.get("bald_mask") else None
        landmarks = load_landmarks_csv(base / rec["landmarks_csv"])
        observations.append(
            Observation(
                image=image,
                skin_mask=skin,
                bald_skin_mask=bald,
                landmarks=landmarks,
                pose_index=int(rec["pose_index"]),
                crop_level=int(rec["crop_level"]),
                subject=rec.get("subject", "s0"),
            )
        )
    return ObservationGrid(observations, shared_shape=shared_shape)


# ---------------------------------------------------------------------------
# reports


def _params_doc(params: HeadParams) -> dict:
    return {g: getattr(params, g).tolist() for g in ("beta", "psi", "theta", "alpha", "cam", "light")}


def save_fit_report(report: FitReport, path: str | Path) -> None:
    doc = {
        "schema": "fitreport/1",
        "params": {k: _params_doc(p) for k, p in sorted(report.params.items())},
        "twin_params": {k: _params_doc(p) for k, p in sorted(report.twin_params.items())},
        "shared_beta": None if report.shared_beta is None else report.shared_beta.tolist(),
        "trajectory": report.trajectory,
        "wall_clock_sec": report.wall_clock_sec,
        "converged": report.converged,
        "config": report.config,
        "initial_total": report.initial_total,
        "final_total": report.final_total,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def save_trajectory_csv(report: FitReport, path: str | Path) -> None:
    lines = ["iteration,term,value"]
    for entry in report.trajectory:
        it = entry["iteration"]
        for term, value in sorted(entry["terms"].items()):
            lines.append(f"{it},{term},{float(value)!r}")
        lines.append(f"{it},total,{float(entry['total'])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_eval_report(report: EvalReport, path: str | Path) -> None:
    doc = {
        "schema": "evalreport/1",
        "protocol": report.protocol,
        "alignment": report.alignment,
        "median_mm": report.median_mm,
        "mean_mm": report.mean_mm,
        "std_mm": report.std_mm,
        "std_convention": "population",
        "mean_square_mm2": report.mean_square_mm2,
        "distances_mm": report.distances.tolist(),
        "curve_thresholds_mm": report.curve_thresholds.tolist(),
        "curve_fractions": report.curve_fractions.tolist(),
        "metadata": report.metadata,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def save_curve_csv(report: EvalReport, path: str | Path) -> None:
    lines = ["threshold_mm,fraction"]
    for t, f in zip(report.curve_thresholds, report.curve_fractions):
        lines.append(f"{float(t)!r},{float(f)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_run_record(out_dir: str | Path, command: str, settings: dict, seed: int) -> Path:
    """Every CLI run drops a run.json echoing its inputs and environment."""
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "settings": settings,
        "seed": seed,
        "versions": {
            "headfit": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "kernel_backend": _kernels.BACKEND,
        },
    }
    path = out / "run.json"
    path.write_text(json.dumps(record, sort_keys=True, indent=1), encoding="utf-8")
    return path
