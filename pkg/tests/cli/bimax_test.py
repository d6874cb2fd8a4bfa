"""
    Tests for the bimax command line
    """

import contextlib
import io
import json
import os
import tempfile
import unittest

import bimax
from bilevelminimax.const import EXIT_CODE, FAMILY, LINEAR_EXPERIMENT_EPS_HAT


def run_quietly(argv):
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(io.StringIO()):
        code = bimax.run(argv)
    return code, stdout.getvalue()


class GenCommandTests(unittest.TestCase):
    """
        Test for the gen command.
        """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _path(self, name):
        return os.path.join(self.tmp.name, name)

    def _gen(self, family, name, *extra):
        out = self._path(name)
        return run_quietly(["gen", f"--family={family}", f"--out={out}", *extra])

    def test_when_family_known_then_instance_is_written(self):
        "Check that every family can be generated"

        extras = {
            FAMILY.Linear: ["--n=3", "--m=3", "--l=2"],
            FAMILY.ToyUnconstrained: [],
            FAMILY.ToyConstrained: [],
            FAMILY.Dro: [],
        }

        for family, extra in extras.items():
            with self.subTest(family=family):

                code, _ = self._gen(family, f"{family}.json", *extra)

                self.assertEqual(code, EXIT_CODE.Success)

    def test_when_seed_repeated_then_digest_is_identical(self):
        "Check that the printed digest is reproducible"

        _, first = self._gen(FAMILY.Linear, "a.json", "--n=3", "--m=3", "--l=2")
        _, second = self._gen(FAMILY.Linear, "b.json", "--n=3", "--m=3", "--l=2")

        self.assertEqual(first.split()[0], second.split()[0])

    def test_when_dimension_zero_then_exit_code_is_error(self):
        "Check that generator errors map to exit code 1"

        code, _ = self._gen(FAMILY.Linear, "a.json", "--n=0")

        self.assertEqual(code, EXIT_CODE.Error)

    def test_when_family_unknown_then_exit_code_is_error(self):
        "Check that usage errors map to exit code 1"

        code, _ = self._gen("cubic", "a.json")

        self.assertEqual(code, EXIT_CODE.Error)

    def test_when_no_command_then_exit_code_is_error(self):
        "Check that a bare invocation prints usage and fails"

        code, _ = run_quietly([])

        self.assertEqual(code, EXIT_CODE.Error)


class SolveAndReportCommandTests(unittest.TestCase):
    """
        Test for the solve and report commands on the unconstrained toy.
        """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.instance = self._path("toy.json")
        run_quietly(
            ["gen", f"--family={FAMILY.ToyUnconstrained}", f"--out={self.instance}"]
        )

    def _path(self, name):
        return os.path.join(self.tmp.name, name)

    def _solve(self, name, *extra):
        return run_quietly(
            [
                "solve",
                f"--instance={self.instance}",
                f"--trace-out={self._path(name + '.trace.jsonl')}",
                f"--result-out={self._path(name + '.result.json')}",
                *extra,
            ]
        )

    def _read(self, name):
        with open(self._path(name), mode="rb") as fh:
            return fh.read()

    def test_when_solved_then_exit_code_is_success(self):
        "Check that a run stopped by the step rule exits with 0"

        code, _ = self._solve("a", "--eps=0.25")

        self.assertEqual(code, EXIT_CODE.Success)

    def test_when_solved_twice_then_traces_are_byte_identical(self):
        "Check that traces without wall times are reproducible"

        self._solve("a", "--eps=0.25")
        self._solve("b", "--eps=0.25")

        self.assertEqual(self._read("a.trace.jsonl"), self._read("b.trace.jsonl"))

    def test_when_budget_exhausted_then_exit_code_is_budget(self):
        "Check that an oracle budget stop exits with 2"

        code, _ = self._solve("a", "--eps=0.25", "--max-oracles=30")

        self.assertEqual(code, EXIT_CODE.Budget)

    def test_when_eps_out_of_range_then_exit_code_is_error(self):
        "Check that an invalid eps exits with 1"

        code, _ = self._solve("a", "--eps=0.5")

        self.assertEqual(code, EXIT_CODE.Error)

    def test_when_instance_missing_then_exit_code_is_error(self):
        "Check that an unreadable instance exits with 1"

        self.instance = self._path("missing.json")

        code, _ = self._solve("a", "--eps=0.25")

        self.assertEqual(code, EXIT_CODE.Error)

    def test_when_traces_reported_then_csv_has_one_row_per_run(self):
        "Check the report of a solved trace"

        self._solve("a", "--eps=0.25")

        _, out = run_quietly(["report", self._path("a.trace.jsonl")])

        self.assertEqual(len(out.strip().splitlines()), 2)

    def test_when_one_trace_malformed_then_it_is_skipped(self):
        "Check that report keeps going past a malformed trace"

        self._solve("a", "--eps=0.25")
        with open(self._path("bad.trace.jsonl"), mode="w") as fh:
            fh.write("{not json\n")

        code, _ = run_quietly(
            ["report", self._path("a.trace.jsonl"), self._path("bad.trace.jsonl")]
        )

        self.assertEqual(code, EXIT_CODE.Success)

    def test_when_no_trace_readable_then_exit_code_is_error(self):
        "Check that report fails without a readable trace"

        code, _ = run_quietly(["report", self._path("nothing.trace.jsonl")])

        self.assertEqual(code, EXIT_CODE.Error)


class LinearSolveCommandTests(unittest.TestCase):
    """
        Test for the experiment defaults of the solve command on a linear instance.
        """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.instance = self._path("lin.json")
        run_quietly(
            [
                "gen",
                f"--family={FAMILY.Linear}",
                "--n=3",
                "--m=3",
                "--l=2",
                f"--out={self.instance}",
            ]
        )

    def _path(self, name):
        return os.path.join(self.tmp.name, name)

    def _result(self, *extra):
        out = self._path("lin.result.json")
        run_quietly(
            [
                "solve",
                f"--instance={self.instance}",
                "--eps=0.25",
                "--max-oracles=3000",
                f"--trace-out={self._path('lin.trace.jsonl')}",
                f"--result-out={out}",
                *extra,
            ]
        )
        with open(out, mode="r") as fh:
            return json.load(fh)

    def test_when_eps_hat_not_given_then_linear_experiment_value_is_used(self):
        "Check that linear runs default to the experiment eps_hat"

        result = self._result()

        self.assertEqual(result["metadata"]["eps_hat"], LINEAR_EXPERIMENT_EPS_HAT)

    def test_when_eps_hat_given_then_it_overrides_the_default(self):
        "Check --eps-hat"

        result = self._result("--eps-hat=0.05")

        self.assertEqual(result["metadata"]["eps_hat"], 0.05)
