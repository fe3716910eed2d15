"""Single-file NIfTI-1 (.nii) reader and writer.

Only uncompressed files with float32 or int16 voxels are handled. The
header is decoded with a numpy structured dtype in whichever byte order
makes ``sizeof_hdr`` read 348.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from hippofusion.errors import MissingFileError, NiftiFormatError
from hippofusion.tensor import Tensor

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
SWAPPED_HEADER_SIZE = 1543569408  # 348 read with the wrong byte order
SINGLE_FILE_OFFSET = 352  # header plus the 4-byte extension flag

HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(HEADER_DTD)

# datatype code -> (voxel dtype, bitpix)
SUPPORTED_DATATYPES: Dict[int, Tuple[np.dtype, int]] = {
    4: (np.dtype(np.int16), 16),
    16: (np.dtype(np.float32), 32),
}
DATATYPE_NAMES = {4: "int16", 16: "float32"}


@dataclass
class NiftiImage:
    """Voxel grid in (x, y, z) order plus the header fields we use."""

    grid: Tensor
    datatype: int
    byteorder: str
    scl_slope: float
    scl_inter: float
    pixdim: Tuple[float, float, float]
    path: str = ""

    @property
    def endianness(self) -> str:
        return "little" if self.byteorder == "<" else "big"

    def describe(self) -> Dict[str, object]:
        return {
            "path": self.path,
            "shape": list(self.grid.shape),
            "datatype": DATATYPE_NAMES[self.datatype],
            "endianness": self.endianness,
            "scaled": self.scl_slope != 0.0,
            "scl_slope": self.scl_slope,
            "scl_inter": self.scl_inter,
            "min": float(self.grid.min()),
            "max": float(self.grid.max()),
        }


def detect_byteorder(raw: bytes) -> str:
    if len(raw) < 4:
        raise NiftiFormatError("file too short for a NIfTI-1 header", field="sizeof_hdr")
    little = int.from_bytes(raw[:4], "little", signed=True)
    if little == HEADER_SIZE:
        return "<"
    if little == SWAPPED_HEADER_SIZE:
        return ">"
    raise NiftiFormatError(f"sizeof_hdr is {little}, expected {HEADER_SIZE}", field="sizeof_hdr")


def parse_header(raw: bytes) -> Tuple[np.void, str]:
    order = detect_byteorder(raw)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"header truncated at {len(raw)} bytes", field="sizeof_hdr")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
    magic = bytes(hdr["magic"])
    if magic == b"ni1":
        raise NiftiFormatError("two-file NIfTI (.hdr/.img) is not supported", field="magic")
    if magic != b"n+1":
        raise NiftiFormatError(f"bad magic {magic!r}", field="magic")
    datatype = int(hdr["datatype"])
    if datatype not in SUPPORTED_DATATYPES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}", field="datatype", datatype=datatype)
    if int(hdr["bitpix"]) != SUPPORTED_DATATYPES[datatype][1]:
        raise NiftiFormatError(f"bitpix {int(hdr['bitpix'])} does not match datatype {datatype}", field="bitpix")
    return hdr, order


def _spatial_shape(hdr: np.void) -> Tuple[int, int, int]:
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d < 1 for d in dim[1:ndim + 1]):
        raise NiftiFormatError(f"invalid dim {dim}", field="dim")
    if any(d != 1 for d in dim[4:ndim + 1]):
        raise NiftiFormatError(f"expected a 3-D volume, got dim {dim}", field="dim")
    return dim[1], dim[2], dim[3]


def read_nifti(path: Union[str, Path]) -> NiftiImage:
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiFormatError(f"{path.name}: compressed NIfTI is not supported", field="path")
    if not path.exists():
        raise MissingFileError(f"NIfTI file not found: {path}", path=str(path))
    raw = path.read_bytes()
    hdr, order = parse_header(raw)
    shape = _spatial_shape(hdr)

    offset = int(hdr["vox_offset"])
    if offset < SINGLE_FILE_OFFSET:
        raise NiftiFormatError(f"vox_offset {offset} below {SINGLE_FILE_OFFSET}", field="vox_offset")
    voxel_dtype = SUPPORTED_DATATYPES[int(hdr["datatype"])][0].newbyteorder(order)
    n_bytes = int(np.prod(shape)) * voxel_dtype.itemsize
    if len(raw) < offset + n_bytes:
        raise NiftiFormatError(
            f"payload truncated: need {n_bytes} bytes at offset {offset}, file has {len(raw)}",
            field="vox_offset",
        )
    data = np.frombuffer(raw, dtype=voxel_dtype, count=int(np.prod(shape)), offset=offset)
    grid = data.reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        grid = (grid.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        grid = grid.astype(np.float32)
    grid = np.ascontiguousarray(grid)
    if not np.all(np.isfinite(grid)):
        raise NiftiFormatError(f"{path.name}: non-finite intensities", field="data")

    pixdim = tuple(float(p) for p in hdr["pixdim"][1:4])
    logger.debug(f"Read {path.name}: shape {shape}, datatype {int(hdr['datatype'])}, order {order}")
    return NiftiImage(grid, int(hdr["datatype"]), order, slope, inter, pixdim, str(path))


def write_nifti(
    path: Union[str, Path],
    grid: Tensor,
    datatype: int = 16,
    byteorder: str = "<",
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    pixdim: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Path:
    """Write a 3-D grid as a single-file NIfTI-1 volume."""
    if grid.ndim != 3:
        raise NiftiFormatError(f"expected a 3-D grid, got shape {grid.shape}", field="dim")
    if datatype not in SUPPORTED_DATATYPES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}", field="datatype")
    voxel_dtype, bitpix = SUPPORTED_DATATYPES[datatype]

    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *grid.shape, 1, 1, 1, 1]
    hdr["datatype"] = datatype
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = [1.0, *pixdim, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = SINGLE_FILE_OFFSET
    hdr["scl_slope"] = scl_slope
    hdr["scl_inter"] = scl_inter
    hdr["xyzt_units"] = 2  # millimetres
    hdr["magic"] = b"n+1"

    payload = np.asarray(grid).astype(voxel_dtype.newbyteorder(byteorder)).tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(hdr.tobytes() + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE) + payload)
    return path
