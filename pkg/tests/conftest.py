CRITERION_RESULTS = []


def record_criterion(number, description, passed):
    CRITERION_RESULTS.append((number, description, passed))
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {description}"
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed in sorted(CRITERION_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:2d}: {status} - {description}")
