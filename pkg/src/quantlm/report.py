"""Result tables: one row per trained/quantized variant.

Two renderings share the same rows: an aligned text table for reading
and a comma-separated dump for machines. The dump carries full float
precision so reparsing reproduces the rows exactly; the aligned table
rounds for display (ratio to one decimal, times to centiseconds).
"""

from dataclasses import dataclass

from .exceptions import ConfigError, DataError

METHODS = ("none", "uniform", "admm-manual", "minsen", "nas")
COLUMNS = ("model", "quant. precision", "quant. method", "#bit", "PPL",
           "size(MB)", "comp. ratio", "eval time(s)")


@dataclass
class ReportRow:
    model: str
    method: str
    bits: float
    ppl: float
    size_mb: float
    ratio: float
    eval_seconds: float

    def __post_init__(self):
        if not self.model or "," in self.model or "\n" in self.model:
            raise ConfigError(f"unusable model label {self.model!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown quantization method {self.method!r}")
        if self.method == "none" and self.bits != 32:
            raise ConfigError("an unquantized row must report 32 bits")
        if self.method == "uniform" and self.bits != int(self.bits):
            raise ConfigError("a uniform row must report a whole bit width")

    @property
    def precision(self) -> str:
        if self.method == "none":
            return "full"
        if self.method == "uniform":
            return "uniform"
        return "mixed"


def _bits_str(row: ReportRow) -> str:
    if row.bits == int(row.bits):
        return str(int(row.bits))
    return f"{row.bits:.1f}"


def _display_cells(row: ReportRow) -> tuple:
    ratio = "-" if row.method == "none" else f"{row.ratio:.1f}"
    return (row.model, row.precision, row.method, _bits_str(row),
            f"{row.ppl:.2f}", f"{row.size_mb:.2f}", ratio,
            f"{row.eval_seconds:.2f}")


def render_table(rows) -> str:
    """Aligned text table with the canonical column set."""
    if not rows:
        raise DataError("report needs at least one row")
    grid = [COLUMNS] + [_display_cells(r) for r in rows]
    widths = [max(len(line[i]) for line in grid) for i in range(len(COLUMNS))]
    out = []
    for li, line in enumerate(grid):
        cells = [line[0].ljust(widths[0])]
        cells += [line[i].rjust(widths[i]) for i in range(1, len(COLUMNS))]
        out.append("  ".join(cells).rstrip())
        if li == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def dump_rows(rows) -> str:
    """Comma-separated dump; reparsing reproduces the rows exactly."""
    if not rows:
        raise DataError("report needs at least one row")
    lines = [",".join(COLUMNS)]
    for r in rows:
        lines.append(",".join([
            r.model, r.precision, r.method, f"{float(r.bits)!r}",
            f"{float(r.ppl)!r}", f"{float(r.size_mb)!r}",
            f"{float(r.ratio)!r}", f"{float(r.eval_seconds)!r}"]))
    return "\n".join(lines) + "\n"


def parse_rows(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ",".join(COLUMNS):
        raise DataError("dump header does not match the report columns")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(COLUMNS):
            raise DataError(f"malformed report line: {ln!r}")
        try:
            row = ReportRow(model=parts[0], method=parts[2],
                            bits=float(parts[3]), ppl=float(parts[4]),
                            size_mb=float(parts[5]), ratio=float(parts[6]),
                            eval_seconds=float(parts[7]))
        except (ValueError, ConfigError) as e:
            raise DataError(f"malformed report line {ln!r}: {e}") from e
        if row.precision != parts[1]:
            raise DataError(
                f"precision column {parts[1]!r} contradicts method {parts[2]!r}")
        rows.append(row)
    return rows


def save_rows(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(dump_rows(rows))


def load_rows(path) -> list:
    with open(path) as fh:
        return parse_rows(fh.read())
