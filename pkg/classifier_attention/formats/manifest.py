"""CSV manifests: one ``path,label,x0,y0,x1,y1`` row per sample, header first."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

from ..exceptions import ManifestError

logger = logging.getLogger(__name__)

HEADER = ["path", "label", "x0", "y0", "x1", "y1"]


@dataclass(frozen=True)
class SampleRecord:
    """One dataset row; the box is inclusive and in image pixel coordinates."""
    path: str
    label: int
    x0: int
    y0: int
    x1: int
    y1: int


def write_manifest(path: Union[str, Path], records: Sequence[SampleRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in records:
            writer.writerow([r.path, r.label, r.x0, r.y0, r.x1, r.y1])


def read_manifest(path: Union[str, Path]) -> List[SampleRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise ManifestError(f"expected header {','.join(HEADER)}", line=1, field="header")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ManifestError(f"expected {len(HEADER)} fields, got {len(row)}", line=line)
            try:
                label, x0, y0, x1, y1 = (int(v) for v in row[1:])
            except ValueError:
                raise ManifestError("non-integer field", line=line)
            if label < 0:
                raise ManifestError(f"negative label {label}", line=line, field="label")
            if x1 < x0 or y1 < y0:
                raise ManifestError("bbox is not ordered (x1 < x0 or y1 < y0)", line=line, field="bbox")
            records.append(SampleRecord(row[0], label, x0, y0, x1, y1))
    return records
