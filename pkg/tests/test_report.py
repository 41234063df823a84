"""Report rows, table rendering, and dump round trips."""

import pytest

from quantlm import report as R
from quantlm.exceptions import ConfigError, DataError


def rows():
    return [
        R.ReportRow("desk-2L", "none", 32.0, 7.12, 0.066, 1.0, 0.031),
        R.ReportRow("desk-2L", "uniform", 2.0, 8.44, 0.0094, 7.021, 0.030),
        R.ReportRow("desk-2L", "minsen", 1.9, 8.01, 0.0091, 7.25, 0.0305),
        R.ReportRow("desk-2L", "nas", 2.5, 7.9083, 0.012, 5.5, 0.03),
    ]


class TestRowType:
    def test_precision_derivation(self):
        by = {r.method: r for r in rows()}
        assert by["none"].precision == "full"
        assert by["uniform"].precision == "uniform"
        assert by["minsen"].precision == "mixed"
        assert by["nas"].precision == "mixed"

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            R.ReportRow("m", "ptq", 2.0, 1.0, 1.0, 1.0, 0.0)

    def test_baseline_must_be_32_bit(self):
        with pytest.raises(ConfigError):
            R.ReportRow("m", "none", 8.0, 1.0, 1.0, 1.0, 0.0)

    def test_uniform_must_be_whole_bits(self):
        with pytest.raises(ConfigError):
            R.ReportRow("m", "uniform", 1.9, 1.0, 1.0, 1.0, 0.0)

    def test_manual_may_be_fractional(self):
        row = R.ReportRow("m", "admm-manual", 2.5, 1.0, 1.0, 1.0, 0.0)
        assert row.precision == "mixed"

    def test_label_must_be_csv_safe(self):
        with pytest.raises(ConfigError):
            R.ReportRow("a,b", "none", 32.0, 1.0, 1.0, 1.0, 0.0)
        with pytest.raises(ConfigError):
            R.ReportRow("", "none", 32.0, 1.0, 1.0, 1.0, 0.0)


class TestTable:
    def test_header_has_exact_columns(self):
        table = R.render_table(rows())
        header = table.splitlines()[0]
        cells = [c.strip() for c in header.split("  ") if c.strip()]
        assert cells == list(R.COLUMNS)

    def test_baseline_ratio_shows_dash(self):
        lines = R.render_table(rows()[:1]).splitlines()
        assert lines[2].split()[-2] == "-"

    def test_quantized_ratio_one_decimal(self):
        table = R.render_table(rows())
        line = [ln for ln in table.splitlines() if " uniform " in ln][0]
        assert " 7.0 " in line + " "

    def test_fractional_bits_one_decimal(self):
        table = R.render_table(rows())
        line = [ln for ln in table.splitlines() if "minsen" in ln][0]
        assert " 1.9 " in line

    def test_whole_bits_render_without_decimal(self):
        table = R.render_table(rows())
        line = [ln for ln in table.splitlines() if "uniform" in ln][0]
        fields = line.split()
        assert "2" in fields and "2.0" not in fields

    def test_eval_time_two_decimals(self):
        line = [ln for ln in R.render_table(rows()).splitlines()
                if "minsen" in ln][0]
        assert line.rstrip().endswith("0.03")

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            R.render_table([])


class TestDump:
    def test_round_trip_exact(self):
        out = rows()
        back = R.parse_rows(R.dump_rows(out))
        assert back == out

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "rows.csv"
        R.save_rows(p, rows())
        assert R.load_rows(p) == rows()

    def test_header_checked(self):
        with pytest.raises(DataError):
            R.parse_rows("a,b,c\n")

    def test_field_count_checked(self):
        text = R.dump_rows(rows()) + "x,y\n"
        with pytest.raises(DataError):
            R.parse_rows(text)

    def test_precision_consistency_checked(self):
        text = R.dump_rows(rows()[:1]).replace("full", "mixed")
        with pytest.raises(DataError):
            R.parse_rows(text)

    def test_bad_number_rejected(self):
        good = R.dump_rows(rows()[:1])
        with pytest.raises(DataError):
            R.parse_rows(good.replace("32.0", "many"))
