"""Execution-equivalence oracle.

Reads a JSON list of cases from stdin:
    [{"id": str, "inputs": [py-literal args tuple, ...],
      "variants": {"original": code, "<name>": code, ...}}]
Runs every variant on every input in a fresh namespace and writes a JSON
object to stdout mapping case id -> {variant: null | "mismatch detail"}.
"""
import ast
import asyncio
import contextlib
import inspect
import io
import json
import sys


def observe(code, inputs):
    tree = ast.parse(code)
    name = tree.body[0].name
    outcomes = []
    for literal in inputs:
        ns = {"__name__": "microsuite"}
        exec(compile(code, "<case>", "exec"), ns)
        fn = ns[name]
        args = eval(literal)
        buf = io.StringIO()
        try:
            with contextlib.redirect_stdout(buf):
                value = fn(*args)
                if inspect.isgenerator(value):
                    value = list(value)
                elif inspect.iscoroutine(value):
                    value = asyncio.run(value)
            outcomes.append(("ok", repr(value), buf.getvalue()))
        except Exception as exc:  # noqa: BLE001
            outcomes.append(("raise", type(exc).__name__, buf.getvalue()))
    return outcomes


def main():
    cases = json.load(sys.stdin)
    report = {}
    for case in cases:
        variants = case["variants"]
        try:
            expected = observe(variants["original"], case["inputs"])
        except Exception as exc:  # noqa: BLE001
            report[case["id"]] = {"original": f"original failed: {exc!r}"}
            continue
        row = {}
        for vname, code in variants.items():
            if vname == "original":
                continue
            try:
                got = observe(code, case["inputs"])
            except Exception as exc:  # noqa: BLE001
                row[vname] = f"variant failed to load: {exc!r}"
                continue
            if got != expected:
                row[vname] = f"expected {expected!r}, got {got!r}"
            else:
                row[vname] = None
        report[case["id"]] = row
    json.dump(report, sys.stdout)


if __name__ == "__main__":
    main()
