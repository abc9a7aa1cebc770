# criterion name -> (passed, detail); filled by the acceptance suite
VERDICTS = {}


def record(name, passed, detail=""):
    VERDICTS[name] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in VERDICTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
