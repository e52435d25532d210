"""Shared record of acceptance verdicts, printed in the pytest terminal summary."""

VERDICTS = {}


def record(number, title, ok, detail=""):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    VERDICTS[number] = line
    print(line, flush=True)
    return line
