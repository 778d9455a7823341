import nox

PYTHON_VERSION = "3.12"
TARGETS = ["engine", "metrics.py", "main.py", "config.py", "logger.py", "bench.py", "scripts"]
EXCLUDES = ["examples", "build", ".nox", "__pycache__", "*.egg-info", "output", "tests/__pycache__"]
RADON_ARGS = ["cc", "-s", "-a", "-o", "SCORE"]
SMOKE_OUT = "output/smoke"


@nox.session(python=PYTHON_VERSION)
def lint(session: nox.Session) -> None:
    """Run formatters, linter, type checker and dead-code scan."""
    session.install(".[dev]")
    session.run("black", "--check", *TARGETS, "tests")
    session.run("isort", "--check-only", *TARGETS, "tests")
    session.run("ruff", "check", ".")
    session.run("mypy", *TARGETS)
    session.run("vulture", *TARGETS, "--exclude", ",".join(EXCLUDES), success_codes=[0, 3])
    session.run("radon", *RADON_ARGS, "-e", ",".join(EXCLUDES), *TARGETS)


@nox.session(python=PYTHON_VERSION)
def tests(session: nox.Session) -> None:
    """Execute the pytest suite (oracle and property tests included)."""
    session.install(".[dev]")
    session.run("pytest", *session.posargs)


@nox.session(python=PYTHON_VERSION)
def format(session: nox.Session) -> None:
    """Only format code with Black and isort."""
    session.install("black", "isort")
    session.run("black", *TARGETS, "tests")
    session.run("isort", *TARGETS, "tests")


@nox.session(python=PYTHON_VERSION)
def smoke(session: nox.Session) -> None:
    """Toy generate/compare/analyze round trip through the CLI."""
    session.install(".")
    session.run("python", "main.py", "generate", "--config", "configs/toy.json", "--compare", "--out", SMOKE_OUT)
    session.run("python", "main.py", "analyze", f"{SMOKE_OUT}/final_map.fvtm", "--out", SMOKE_OUT)
    session.run("python", "main.py", "compare", f"{SMOKE_OUT}/baseline.csv", f"{SMOKE_OUT}/pruned.csv")


@nox.session(python=PYTHON_VERSION)
def profile(session: nox.Session) -> None:
    """Desk-scale benchmark of the Infinity-style schedule (slow)."""
    session.install(".[dev]")
    session.run("python", "main.py", "bench", "--config", "configs/infinity_style.yaml", *session.posargs)
    session.run("python", "scripts/plot_metrics.py", "--dir", "output/infinity_style")
