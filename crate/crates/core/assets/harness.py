"""Line-oriented JSON execution server for the testchain sandbox supervisor.

Reads one JSON request per line on stdin and writes exactly one JSON response
per line on the protocol stream. Requires Python >= 3.8 and nothing outside
the standard library.

Ops:
  ping      liveness check
  exec      run `code` in the shared namespace (chain context)
  reset     clear the shared namespace
  run_test  run `program` then `assertion` in a fresh namespace, classify
  coverage  trace `program` lines reached by each of `assertions`
"""

import ast
import contextlib
import dis
import io
import json
import os
import signal
import sys
import traceback

PROGRAM_FILE = "<program>"
ASSERTION_FILE = "<assertion>"


class _TimeLimit(BaseException):
    pass


def _on_alarm(signum, frame):
    raise _TimeLimit()


@contextlib.contextmanager
def _time_limit(ms):
    if not ms or ms <= 0 or not hasattr(signal, "setitimer"):
        yield
        return
    previous = signal.signal(signal.SIGALRM, _on_alarm)
    signal.setitimer(signal.ITIMER_REAL, ms / 1000.0)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, previous)


def _fresh_namespace():
    return {"__name__": "__main__", "__builtins__": __builtins__}


def _format_exc(exc):
    lines = traceback.format_exception_only(type(exc), exc)
    return "".join(lines).strip()


def _is_docstring(stmt):
    return (
        isinstance(stmt, ast.Expr)
        and isinstance(stmt.value, ast.Constant)
        and isinstance(stmt.value.value, str)
    )


def _statement_lines(tree):
    """Start lines of statements inside function bodies, docstrings excluded."""
    lines = set()
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            body = node.body[1:] if node.body and _is_docstring(node.body[0]) else node.body
            for stmt in body:
                for inner in ast.walk(stmt):
                    if isinstance(inner, ast.stmt):
                        lines.add(inner.lineno)
    return lines


def _docstring_lines(tree):
    skip = set()
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            if node.body and _is_docstring(node.body[0]):
                first = node.body[0]
                end = getattr(first, "end_lineno", None) or first.lineno
                skip.update(range(first.lineno, end + 1))
    return skip


def executable_lines(program):
    tree = ast.parse(program, PROGRAM_FILE)
    code = compile(tree, PROGRAM_FILE, "exec")
    table = set()
    pending = [c for c in code.co_consts if hasattr(c, "co_code")]
    while pending:
        obj = pending.pop()
        if hasattr(obj, "co_lines"):
            table.update(line for _, _, line in obj.co_lines() if line is not None)
        else:
            table.update(line for _, line in dis.findlinestarts(obj))
        pending.extend(c for c in obj.co_consts if hasattr(c, "co_code"))
    # A statement line counts when the line table of a function code object
    # carries it and it starts a statement of a function body.
    return sorted(table & _statement_lines(tree) - _docstring_lines(tree))


class Harness:
    def __init__(self, out):
        self.out = out
        self.shared = _fresh_namespace()

    def respond(self, rid, ok, stdout="", stderr="", **extra):
        response = {"id": rid, "ok": ok, "stdout": stdout, "stderr": stderr}
        response.update(extra)
        self.out.write(json.dumps(response) + "\n")
        self.out.flush()

    def handle(self, line):
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
        except Exception as exc:  # noqa: BLE001
            self.respond(-1, False, stderr="parse error: %s" % exc)
            return
        rid = request.get("id", -1)
        op = request.get("op")
        handler = getattr(self, "op_" + str(op), None)
        if handler is None:
            self.respond(rid, False, stderr="unknown op: %r" % (op,))
            return
        try:
            handler(rid, request)
        except Exception as exc:  # noqa: BLE001
            self.respond(rid, False, stderr="harness error: %s" % _format_exc(exc))

    def op_ping(self, rid, request):
        self.respond(rid, True)

    def op_reset(self, rid, request):
        self.shared = _fresh_namespace()
        self.respond(rid, True)

    def op_exec(self, rid, request):
        code = request.get("code", "")
        stdout, stderr = io.StringIO(), io.StringIO()
        ok = True
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            try:
                compiled = compile(code, "<snippet>", "exec")
                exec(compiled, self.shared)
            except BaseException as exc:  # noqa: BLE001
                ok = False
                traceback.print_exc()
        self.respond(rid, ok, stdout.getvalue(), stderr.getvalue())

    def op_run_test(self, rid, request):
        program = request.get("program", "")
        assertion = request.get("assertion", "")
        limit = request.get("time_limit_ms", 1000)
        stdout, stderr = io.StringIO(), io.StringIO()
        outcome, diagnostic = "pass", ""
        namespace = _fresh_namespace()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            try:
                program_code = compile(program, PROGRAM_FILE, "exec")
                assertion_code = compile(assertion, ASSERTION_FILE, "exec")
                with _time_limit(limit):
                    exec(program_code, namespace)
                    exec(assertion_code, namespace)
            except _TimeLimit:
                outcome, diagnostic = "timeout", "exceeded %d ms" % limit
            except AssertionError as exc:
                outcome, diagnostic = "assertion_error", _format_exc(exc)
            except BaseException as exc:  # noqa: BLE001
                outcome, diagnostic = "runtime_error", _format_exc(exc)
        err = stderr.getvalue()
        if diagnostic:
            err = (err + "\n" + diagnostic).strip()
        self.respond(rid, outcome == "pass", stdout.getvalue(), err, outcome=outcome)

    def op_coverage(self, rid, request):
        program = request.get("program", "")
        assertions = request.get("assertions", []) or []
        limit = request.get("time_limit_ms", 1000)
        executable = executable_lines(program)
        allowed = set(executable)
        program_code = compile(program, PROGRAM_FILE, "exec")
        executed = set()

        def tracer(frame, event, arg):
            if frame.f_code.co_filename != PROGRAM_FILE:
                return None
            if event == "line" and frame.f_lineno in allowed:
                executed.add(frame.f_lineno)
            return tracer

        errors = []
        sink = io.StringIO()
        for assertion in assertions:
            namespace = _fresh_namespace()
            with contextlib.redirect_stdout(sink), contextlib.redirect_stderr(sink):
                try:
                    assertion_code = compile(assertion, ASSERTION_FILE, "exec")
                    exec(program_code, namespace)
                    with _time_limit(limit):
                        sys.settrace(tracer)
                        try:
                            exec(assertion_code, namespace)
                        finally:
                            sys.settrace(None)
                except BaseException as exc:  # noqa: BLE001
                    errors.append(_format_exc(exc) or type(exc).__name__)
        self.respond(
            rid,
            True,
            "",
            "\n".join(errors),
            executed_lines=sorted(executed),
            executable_lines=executable,
        )


def main():
    # Keep the protocol stream private: anything user code writes to fd 1
    # (including native extensions) lands on stderr instead.
    out = os.fdopen(os.dup(1), "w", encoding="utf-8")
    os.dup2(2, 1)
    sys.stdout = io.TextIOWrapper(os.fdopen(1, "wb", 0), encoding="utf-8", write_through=True)
    harness = Harness(out)
    for line in sys.stdin:
        line = line.strip()
        if line:
            harness.handle(line)


if __name__ == "__main__":
    main()
