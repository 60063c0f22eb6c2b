"""Reader and writer for the ``.ts`` classification format (UCR/UEA archives)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TsParseError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass
class LabeledDataset:
    name: str
    series: list  # one float64 array [channels, length] per sample
    labels: np.ndarray  # str labels
    classes: tuple

    def __len__(self):
        return len(self.series)

    @property
    def n_channels(self):
        return self.series[0].shape[0] if self.series else 0

    @property
    def equal_length(self):
        return len({s.shape[1] for s in self.series}) <= 1

    def to_array(self):
        if not self.equal_length:
            raise ValueError("series have unequal lengths")
        return np.stack(self.series)

    def label_indices(self):
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[l] for l in self.labels], dtype=np.int64)

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledDataset(self.name, [self.series[i] for i in idx], self.labels[idx], self.classes)


def _truthy(value, line, path):
    v = value.lower()
    if v not in ("true", "false"):
        raise TsParseError(f"expected true/false, got {value!r}", line, path)
    return v == "true"


def parse_ts(text, path=None):
    """Parse ``.ts`` content (a string) into a ``LabeledDataset``."""
    header = {}
    classes = None
    in_data = False
    series, labels = [], []
    n_channels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if not line.startswith("@"):
                raise TsParseError(f"expected a header directive, got {line[:30]!r}", lineno, path)
            key, _, rest = line[1:].partition(" ")
            key, rest = key.lower(), rest.strip()
            if key == "data":
                if classes is None:
                    raise TsParseError("@classLabel must precede @data", lineno, path)
                in_data = True
            elif key == "problemname":
                if not rest:
                    raise TsParseError("@problemName needs a value", lineno, path)
                header["name"] = rest
            elif key == "classlabel":
                parts = rest.split()
                if not parts or not _truthy(parts[0], lineno, path):
                    raise TsParseError("only labelled (classification) files are supported", lineno, path)
                if len(parts) < 2:
                    raise TsParseError("@classLabel true needs at least one label", lineno, path)
                classes = tuple(parts[1:])
            elif key == "univariate":
                header["univariate"] = _truthy(rest, lineno, path)
            elif key == "dimensions":
                try:
                    header["dimensions"] = int(rest)
                except ValueError:
                    raise TsParseError(f"bad @dimensions value {rest!r}", lineno, path) from None
            elif key in ("timestamps", "missing", "equallength", "targetlabel"):
                header[key] = _truthy(rest, lineno, path)
            elif key == "serieslength":
                try:
                    header["length"] = int(rest)
                except ValueError:
                    raise TsParseError(f"bad @seriesLength value {rest!r}", lineno, path) from None
            else:
                raise TsParseError(f"unknown directive @{key}", lineno, path)
            continue

        fields = line.split(":")
        if len(fields) < 2:
            raise TsParseError("sample line needs at least one dimension and a label", lineno, path)
        label = fields[-1].strip()
        if label not in classes:
            raise TsParseError(f"label {label!r} is not declared in @classLabel", lineno, path)
        dims = []
        for d, chunk in enumerate(fields[:-1]):
            values = [v.strip() for v in chunk.split(",")]
            if any(v == "?" for v in values):
                raise TsParseError(f"missing value in dimension {d}", lineno, path)
            try:
                dims.append(np.array([float(v) for v in values], dtype=np.float64))
            except ValueError:
                raise TsParseError(f"non-numeric value in dimension {d}", lineno, path) from None
        if len({len(x) for x in dims}) != 1:
            raise TsParseError("ragged dimension lengths within a sample", lineno, path)
        if n_channels is None:
            n_channels = len(dims)
            declared = header.get("dimensions", 1 if header.get("univariate", True) else None)
            if declared is not None and declared != n_channels:
                raise TsParseError(f"expected {declared} dimensions, found {n_channels}", lineno, path)
        elif len(dims) != n_channels:
            raise TsParseError(f"expected {n_channels} dimensions, found {len(dims)}", lineno, path)
        series.append(np.stack(dims))
        labels.append(label)

    if not in_data:
        raise TsParseError("no @data section", None, path)
    return LabeledDataset(header.get("name", ""), series, np.array(labels, dtype=object), classes)


def read_ts(path):
    with open(path, encoding="utf-8") as fh:
        return parse_ts(fh.read(), path=str(path))


def serialize_ts(ds):
    C = ds.n_channels
    lines = [f"@problemName {ds.name or 'unnamed'}", "@timeStamps false", "@missing false"]
    if C == 1:
        lines.append("@univariate true")
    else:
        lines += ["@univariate false", f"@dimensions {C}"]
    lines.append(f"@equalLength {'true' if ds.equal_length else 'false'}")
    if ds.equal_length and len(ds):
        lines.append(f"@seriesLength {ds.series[0].shape[1]}")
    lines += ["@classLabel true " + " ".join(ds.classes), "@data"]
    for s, label in zip(ds.series, ds.labels):
        dims = [",".join(repr(float(v)) for v in channel) for channel in s]
        lines.append(":".join(dims) + ":" + label)
    return "\n".join(lines) + "\n"


def write_ts(path, ds):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_ts(ds))
