"""
    Tests for trace files and the CSV report
    """

import csv
import io
import unittest

from bilevelminimax.trace import (
    TraceFormatError,
    TraceRecord,
    parse_trace,
    report_sections,
    trace_lines,
    write_report,
)

HEADER = {"family": "linear", "instance": "lin", "seed": 1}


def make_record(k, upper=1.0, kkt=None):
    return TraceRecord(
        outer_k=k,
        oracle_calls_total=30 * (k + 1),
        oracle_calls_f1=10 * (k + 1),
        oracle_calls_ftilde1=20 * (k + 1),
        upper_objective=upper,
        lower_optimality_gap=0.5 / (k + 1),
        infeasibility=0.0,
        eps_k=0.1 / (k + 1),
        primal_step_norm=0.01,
        wall_ms=17,
        inner_steps=4,
        kkt=kkt,
    )


def make_run(seed, upper, instance="lin"):
    header = dict(HEADER, seed=seed, instance=instance)
    records = [make_record(0), make_record(1, upper=upper)]
    final = {"terminated_by": "step_norm", "outer_iters": 2}
    return parse_trace(trace_lines(header, records, final))


class TraceLinesTests(unittest.TestCase):
    """
        Test for trace_lines and parse_trace.
        """

    def test_when_written_and_parsed_then_records_are_kept(self):
        "Check the JSONL round trip of iteration and checkpoint records"

        records = [make_record(0), make_record(0, kkt={"max_residual": 0.1})]

        run = parse_trace(trace_lines(HEADER, records, wall_clock=True))

        self.assertEqual(run.records, records)

    def test_when_checkpoint_present_then_iterations_skip_it(self):
        "Check that only iteration records count as iterations"

        records = [make_record(0), make_record(0, kkt={"max_residual": 0.1})]

        run = parse_trace(trace_lines(HEADER, records))

        self.assertEqual(len(run.iterations), 1)

    def test_when_wall_clock_off_then_wall_ms_is_left_out(self):
        "Check that traces are byte-reproducible by default"

        lines = trace_lines(HEADER, [make_record(0)])

        self.assertNotIn("wall_ms", lines[1])

    def test_when_final_line_present_then_it_is_parsed(self):
        "Check the termination line"

        run = parse_trace(trace_lines(HEADER, [], {"terminated_by": "k_reached"}))

        self.assertEqual(run.final, {"terminated_by": "k_reached"})

    def test_when_field_missing_then_error_names_the_line(self):
        "Check that a record without upper_objective is rejected at line 2"

        lines = trace_lines(HEADER, [make_record(0)])
        lines[1] = lines[1].replace('"upper_objective"', '"upper"')

        with self.assertRaises(TraceFormatError) as cm:
            parse_trace(lines)

        self.assertEqual(cm.exception.line_no, 2)

    def test_when_value_not_finite_then_raises(self):
        "Check that NaN metrics are rejected"

        lines = trace_lines(HEADER, [make_record(0, upper=float("nan"))])

        with self.assertRaises(TraceFormatError):
            parse_trace(lines)

    def test_when_line_is_not_json_then_error_names_the_line(self):
        "Check that malformed JSON is reported with its line number"

        lines = trace_lines(HEADER, [make_record(0), make_record(1)])
        lines[2] = lines[2][:-5]

        with self.assertRaises(TraceFormatError) as cm:
            parse_trace(lines)

        self.assertEqual(cm.exception.line_no, 3)

    def test_when_header_missing_then_raises(self):
        "Check that a trace must start with a header"

        lines = trace_lines(HEADER, [make_record(0)])[1:]

        with self.assertRaises(TraceFormatError):
            parse_trace(lines)

    def test_when_trace_empty_then_raises(self):
        "Check that an empty trace is rejected"

        with self.assertRaises(TraceFormatError):
            parse_trace([])


class ReportTests(unittest.TestCase):
    """
        Test for report_sections and write_report.
        """

    def test_when_instance_has_several_seeds_then_mean_and_median_follow(self):
        "Check the per-seed rows plus the mean and median rows"

        runs = [make_run(1, 1.0), make_run(2, 3.0)]

        rows = report_sections(runs)["linear"]

        self.assertEqual([r["seed"] for r in rows], [1, 2, "mean", "median"])

    def test_when_aggregated_then_mean_row_averages_the_final_objective(self):
        "Check the mean of upper_objective"

        runs = [make_run(1, 1.0), make_run(2, 3.0), make_run(3, 8.0)]

        rows = report_sections(runs)["linear"]

        self.assertEqual(rows[3]["upper_objective"], 4.0)

    def test_when_aggregated_then_median_row_is_middle_value(self):
        "Check the median of upper_objective"

        runs = [make_run(1, 1.0), make_run(2, 3.0), make_run(3, 8.0)]

        rows = report_sections(runs)["linear"]

        self.assertEqual(rows[4]["upper_objective"], 3.0)

    def test_when_single_run_then_no_aggregate_rows(self):
        "Check that a lone run gets only its own row"

        rows = report_sections([make_run(1, 1.0)])["linear"]

        self.assertEqual(len(rows), 1)

    def test_when_families_differ_then_one_section_each(self):
        "Check that the CSV holds one header line per family"

        other = parse_trace(
            trace_lines(dict(HEADER, family="dro", instance="d"), [make_record(0)])
        )
        stream = io.StringIO()

        write_report([make_run(1, 1.0), other], stream)

        headers = [row for row in csv.reader(io.StringIO(stream.getvalue())) if row]
        self.assertEqual(sum(1 for row in headers if row[0] == "family"), 2)

    def test_when_final_line_missing_then_outer_iters_from_last_record(self):
        "Check the fallback outer iteration count"

        run = parse_trace(trace_lines(HEADER, [make_record(0), make_record(1)]))

        rows = report_sections([run])["linear"]

        self.assertEqual(rows[0]["outer_iters"], 2)
