import hashlib
import logging
import os
from dataclasses import dataclass, field, fields

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

load_dotenv()

OUTPUT_DIR = os.getenv("FVK_OUTPUT_DIR", "results")
THREADS = os.getenv("FVK_THREADS")
LOG_LEVEL = os.getenv("FVK_LOG_LEVEL", "INFO").upper()

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(message)s",
)

log = logging.getLogger(__name__)

THREAD_VARIABLES = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

EXPERIMENT_KINDS = (
    "flat_disc_sweep",
    "curvature_inversion",
    "cardboard",
    "bilayer_fold",
    "single_run",
)

# where and how a run executes; excluded from the config hash
EXECUTION_KEYS = ("output_dir", "workers", "deterministic")


def configure_threads(threads: int | str | None) -> None:
    """Pin BLAS thread pools. Only effective before numpy is imported."""
    if threads is None or str(threads).strip() == "":
        return
    for name in THREAD_VARIABLES:
        os.environ[name] = str(int(threads))


def prescan_threads(argv: list[str]) -> None:
    """Read --threads/--deterministic from raw argv ahead of argparse."""
    threads = THREADS
    for i, arg in enumerate(argv):
        if arg == "--deterministic":
            threads = "1"
            break
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    try:
        configure_threads(threads)
    except ValueError:
        # argparse reports the bad value later
        pass


# ---- Experiment configuration ----

@dataclass
class ExperimentConfig:
    kind: str = "single_run"

    # mesh
    domain: str = "disc"
    radius: float = 1.0
    half_width: float = 1.0
    h: float = 0.1
    crease: str = "none"
    crease_x: float = 0.0

    # problem
    theta: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    force: float = 0.0
    force_radius: float = 0.0
    w_boundary: str = "none"
    support: str = "none"
    w_data: str = "zero"
    l2_metric: str = "auto"
    pin_center: bool = False
    w0_saddle: float = 0.0
    relax_u: bool = False

    # solver
    tau_initial: float = 1.0
    tau_max: float = 1e5
    newton_max_iter: int = 5
    newton_tol: float = 1e-5
    stop_tol: float = 1e-12
    max_iterations: int = 200
    ramp_iterations: int = 0

    # sweeps
    sweep_values: tuple[float, ...] = ()
    warm_start: bool = False
    transition_threshold: float = 0.1
    compare: bool = False

    # output
    output_dir: str = ""
    export_surfaces: bool = True
    snapshot_iterations: tuple[int, ...] = ()
    displacement_scale: float = 1.0
    workers: int = 1
    deterministic: bool = False

    source: str | None = field(default=None, compare=False)
    raw: dict[str, str] = field(default_factory=dict, compare=False)

    def validate(self) -> "ExperimentConfig":
        choices = {
            "kind": EXPERIMENT_KINDS,
            "domain": ("disc", "square"),
            "crease": ("none", "straight", "arc"),
            "w_boundary": ("none", "clamped", "simple"),
            "support": ("none", "all", "top_bottom", "left_top_bottom"),
            "w_data": ("zero", "cylinder"),
            "l2_metric": ("on", "off", "auto"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                self._fail(name, f"expected one of {', '.join(allowed)}, got {getattr(self, name)!r}")

        positive = ("radius", "half_width", "h", "tau_initial", "tau_max",
                    "newton_tol", "stop_tol", "newton_max_iter", "max_iterations", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                self._fail(name, f"must be positive, got {getattr(self, name)}")
        for name in ("theta", "force_radius", "ramp_iterations", "transition_threshold"):
            if getattr(self, name) < 0:
                self._fail(name, f"must be non-negative, got {getattr(self, name)}")
        if self.tau_initial > self.tau_max:
            self._fail("tau_initial", "must not exceed tau_max")
        if self.domain == "disc" and self.crease != "none":
            self._fail("crease", "creases are only supported on the square domain")
        if self.w_boundary != "none" and self.support == "none":
            self._fail("support", "w_boundary requires a support set")
        if self.w_boundary == "none" and self.support != "none":
            self._fail("w_boundary", "support set given without a boundary condition")
        if self.support == "left_top_bottom" and self.crease == "none":
            self._fail("support", "left_top_bottom needs a crease to define the left subdomain")
        if self.kind in ("flat_disc_sweep", "curvature_inversion") and not self.sweep_values:
            self._fail("sweep_values", f"{self.kind} needs a non-empty schedule")
        return self

    def _fail(self, key: str, message: str) -> None:
        raise ConfigError(message, path=self.source, key=key, line=_line_of(self.source, key))

    def config_hash(self) -> str:
        items = sorted((k.lower(), str(v)) for k, v in self.raw.items()
                       if k.lower() not in EXECUTION_KEYS)
        items.append(("kind", self.kind))
        digest = hashlib.sha256()
        for key, value in items:
            digest.update(f"{key}={value}\n".encode("utf-8"))
        return digest.hexdigest()


# ---- Parsing ----

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")

# experiment-specific defaults applied before the file is read
KIND_DEFAULTS: dict[str, dict[str, str]] = {
    "flat_disc_sweep": {
        "domain": "disc", "h": "0.1", "alpha1": "1", "alpha2": "1",
        "sweep_values": "1:600:25", "l2_metric": "auto", "max_iterations": "200",
        # an exactly flat start on the six-fold disc mesh stays on the symmetric branch
        "w0_saddle": "0.1",
    },
    "curvature_inversion": {
        "domain": "disc", "h": "0.1", "theta": "0", "pin_center": "true",
        "sweep_values": "1:-1:-0.05", "warm_start": "true", "max_iterations": "100",
    },
    "cardboard": {
        "domain": "square", "half_width": "1", "h": "0.1", "crease": "straight",
        "theta": "1e6", "alpha1": "0", "alpha2": "0", "force": "-0.6e6",
        "force_radius": "0.1", "w_boundary": "simple", "support": "top_bottom",
        "w_data": "cylinder", "ramp_iterations": "20", "max_iterations": "50",
        "compare": "true", "snapshot_iterations": "20,30,40,50", "relax_u": "true",
    },
    "bilayer_fold": {
        "domain": "square", "half_width": "1", "h": "0.1", "crease": "arc",
        "theta": "1", "alpha1": "1", "alpha2": "0", "w_boundary": "simple",
        "support": "left_top_bottom", "compare": "true", "max_iterations": "100",
    },
    "single_run": {},
}


def _line_of(path: str | None, key: str) -> int | None:
    if not path or not os.path.isfile(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            stripped = line.strip()
            if stripped.startswith("export "):
                stripped = stripped[len("export "):].lstrip()
            name = stripped.split("=", 1)[0].strip()
            if name.lower() == key.lower():
                return number
    return None


def parse_schedule(text: str) -> tuple[float, ...]:
    """Parse `a,b,c` or an inclusive range `start:stop:step`."""
    text = text.strip()
    if not text:
        return ()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] == 0:
            raise ValueError("range must be start:stop:step with a non-zero step")
        start, stop, step = parts
        if (stop - start) * step < 0:
            raise ValueError("step points away from stop")
        count = int((stop - start) / step + 1e-9)
        return tuple(round(start + i * step, 12) for i in range(count + 1))
    return tuple(float(p) for p in text.split(",") if p.strip())


def _convert(name: str, kind: type | str, value: str):
    value = value.strip()
    if kind in (bool, "bool"):
        if value.lower() in _BOOL_TRUE:
            return True
        if value.lower() in _BOOL_FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(float(value)) if float(value).is_integer() else int(value)
    if kind in (float, "float"):
        return float(value)
    if name == "sweep_values":
        return parse_schedule(value)
    if name == "snapshot_iterations":
        return tuple(int(p) for p in value.split(",") if p.strip())
    if name == "output_dir":
        return value
    return value.lower()


def load_experiment_config(path: str | None, kind: str | None = None,
                           overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError("config file not found", path=path)
        try:
            parsed = dotenv_values(path)
        except UnicodeDecodeError as e:
            raise ConfigError(f"cannot decode config: {e}", path=path) from e
        for key, value in parsed.items():
            if value is None:
                raise ConfigError("missing '=' or value", path=path, key=key,
                                  line=_line_of(path, key))
            values[key.lower()] = value

    file_kind = values.pop("kind", None)
    if kind and file_kind and file_kind.lower() != kind:
        raise ConfigError(f"file declares kind={file_kind} but {kind} was requested",
                          path=path, key="kind", line=_line_of(path, "kind"))
    kind = (kind or file_kind or "single_run").lower()
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}", path=path, key="kind",
                          line=_line_of(path, "kind"))

    merged = dict(KIND_DEFAULTS[kind])
    merged.update(values)
    merged.update(overrides or {})

    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs = {"kind": kind}
    for key, value in merged.items():
        if key not in types or key in ("kind", "source", "raw"):
            raise ConfigError("unknown key", path=path, key=key, line=_line_of(path, key))
        try:
            kwargs[key] = _convert(key, types[key], value)
        except ValueError as e:
            raise ConfigError(f"cannot parse {value!r}: {e}", path=path, key=key,
                              line=_line_of(path, key)) from e

    if not kwargs.get("output_dir"):
        kwargs["output_dir"] = os.path.join(OUTPUT_DIR, kind)
    if kwargs.get("deterministic"):
        kwargs["workers"] = 1
    config = ExperimentConfig(**kwargs, source=path, raw=merged)
    log.info("Loaded %s config from %s", kind, path or "defaults")
    return config.validate()
