"""INI pipeline configuration: sections map onto module parameters."""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from texpro.matmatch import ALPHA


class ConfigError(ValueError):
    pass


@dataclass
class AgentSettings:
    backend: str = "mock"          # mock | live
    mock_file: Path | None = None
    endpoint: str = ""
    model: str = ""
    retries: int = 3
    timeout: float = 60.0


@dataclass
class PipelineConfig:
    mesh: Path
    references: dict[int, Path]
    output: Path
    object_name: str = "object"
    library: Path | None = None
    masks: Path | None = None
    mask_fallback: bool = True
    prompt_template: Path | None = None
    agent: AgentSettings = field(default_factory=AgentSettings)
    # camsel
    elevations: tuple[float, float] = (15.0, 30.0)
    n_views: int = 8
    distance_factor: float = 2.5
    threshold: int = 500
    view_resolution: int = 128
    fov: float = 30.0
    # maskops
    window: int = 5
    radius: int = 1
    beta: float = 0.5
    # matching
    alpha: float = ALPHA
    K: int = 8
    match_seed: int = 0
    # optim
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.1)
    stage1: int = 200
    stage2: int = 300
    lr_theta: float = 0.01
    lr_light: float = 0.05
    optim_seed: int = 0
    texture_resolution: int = 128
    bounces: int = 2
    # export
    export_resolution: int = 512

    def with_seed(self, seed: int) -> PipelineConfig:
        self.match_seed = self.optim_seed = int(seed)
        return self

    def snapshot(self, root: Path | None = None) -> dict:
        """JSON-ready view; paths relative to ``root`` when possible."""
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if root is not None:
                try:
                    return p.resolve().relative_to(Path(root).resolve()).as_posix()
                except ValueError:
                    pass
            return p.as_posix()
        d = asdict(self)
        for k in ("mesh", "output", "library", "masks", "prompt_template"):
            d[k] = rel(d[k])
        d["references"] = {str(v): rel(p) for v, p in sorted(self.references.items())}
        d["agent"]["mock_file"] = rel(self.agent.mock_file)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _floats(text: str, n: int, key: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected {n} numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    try:
        return conv(cp.get(section, key))
    except ValueError:
        raise ConfigError(f"[{section}] {key}: invalid value {cp.get(section, key)!r}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError(text)


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def load_config(path) -> PipelineConfig:
    """Parse an INI file; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    base = path.parent

    def p(section, key, required=False):
        if not cp.has_option(section, key) or not cp.get(section, key).strip():
            if required:
                raise ConfigError(f"[{section}] {key} is required")
            return None
        return (base / cp.get(section, key).strip()).resolve()

    mesh = p("input", "mesh", required=True)
    refs = {}
    if cp.has_section("references"):
        for key, val in cp.items("references"):
            k = key[1:] if key.startswith("v") else key
            _require(k.isdigit(), f"[references] keys are view indices like v8, got {key!r}")
            refs[int(k)] = (base / val.strip()).resolve()
    out = p("output", "dir", required=True)

    agent = AgentSettings(
        backend=_get(cp, "agent", "backend", str.strip, "mock"),
        mock_file=p("agent", "mock_file"),
        endpoint=_get(cp, "agent", "endpoint", str.strip, ""),
        model=_get(cp, "agent", "model", str.strip, ""),
        retries=_get(cp, "agent", "retries", int, 3),
        timeout=_get(cp, "agent", "timeout", float, 60.0),
    )
    cfg = PipelineConfig(
        mesh=mesh, references=refs, output=out,
        object_name=_get(cp, "input", "object_name", str.strip, "object"),
        library=p("input", "library"),
        masks=p("input", "masks"),
        mask_fallback=_get(cp, "input", "mask_fallback", _bool, True),
        prompt_template=p("input", "prompt_template"),
        agent=agent,
        elevations=_get(cp, "camsel", "elevations", lambda s: _floats(s, 2, "elevations"), (15.0, 30.0)),
        n_views=_get(cp, "camsel", "n", int, 8),
        distance_factor=_get(cp, "camsel", "distance_factor", float, 2.5),
        threshold=_get(cp, "camsel", "threshold", int, 500),
        view_resolution=_get(cp, "camsel", "resolution", int, 128),
        fov=_get(cp, "camsel", "fov", float, 30.0),
        window=_get(cp, "maskops", "window", int, 5),
        radius=_get(cp, "maskops", "radius", int, 1),
        beta=_get(cp, "maskops", "beta", float, 0.5),
        alpha=_get(cp, "match", "alpha", float, ALPHA),
        K=_get(cp, "match", "K", int, 8),
        match_seed=_get(cp, "match", "seed", int, 0),
        weights=_get(cp, "optim", "weights", lambda s: _floats(s, 4, "weights"), (1.0, 1.0, 1.0, 0.1)),
        stage1=_get(cp, "optim", "stage1", int, 200),
        stage2=_get(cp, "optim", "stage2", int, 300),
        lr_theta=_get(cp, "optim", "lr_theta", float, 0.01),
        lr_light=_get(cp, "optim", "lr_light", float, 0.05),
        optim_seed=_get(cp, "optim", "seed", int, 0),
        texture_resolution=_get(cp, "optim", "resolution", int, 128),
        bounces=_get(cp, "optim", "bounces", int, 2),
        export_resolution=_get(cp, "export", "resolution", int, 512),
    )
    validate(cfg)
    return cfg


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def check_export_resolution(n: int) -> None:
    if not (_pow2(n) and 64 <= n <= 2048):
        raise ConfigError(f"export resolution must be a power of two in [64, 2048], got {n}")


def validate(cfg: PipelineConfig) -> None:
    nums = [cfg.agent.timeout, *cfg.elevations, cfg.distance_factor, cfg.fov, cfg.beta,
            cfg.alpha, *cfg.weights, cfg.lr_theta, cfg.lr_light]
    _require(all(math.isfinite(x) for x in nums), "numeric settings must be finite")
    _require(cfg.agent.backend in ("mock", "live"), f"agent backend must be mock or live, got {cfg.agent.backend!r}")
    _require(cfg.agent.retries >= 0 and cfg.agent.timeout > 0, "agent retries >= 0 and timeout > 0")
    _require(all(-90 < e < 90 for e in cfg.elevations), "elevations must lie in (-90, 90)")
    _require(1 <= cfg.n_views <= 64, "camsel n must be in [1, 64]")
    _require(cfg.distance_factor > 0, "camsel distance_factor must be positive")
    _require(cfg.threshold >= 0, "camsel threshold must be >= 0")
    _require(16 <= cfg.view_resolution <= 1024, "camsel resolution must be in [16, 1024]")
    _require(10 < cfg.fov < 120, "camsel fov must be in (10, 120)")
    _require(cfg.window >= 1 and cfg.window % 2 == 1, "maskops window must be a positive odd size")
    _require(cfg.radius >= 0, "maskops radius must be >= 0")
    _require(0 <= cfg.beta <= 1, "maskops beta must be in [0, 1]")
    _require(cfg.alpha >= 1, "match alpha must be >= 1")
    _require(cfg.K >= 1, "match K must be >= 1")
    _require(all(w >= 0 for w in cfg.weights), "optim weights must be >= 0")
    _require(cfg.stage1 >= 0 and cfg.stage2 >= 0, "optim iteration counts must be >= 0")
    _require(cfg.lr_theta >= 0 and cfg.lr_light >= 0, "optim learning rates must be >= 0")
    _require(_pow2(cfg.texture_resolution) and 8 <= cfg.texture_resolution <= 1024,
             "optim resolution must be a power of two in [8, 1024]")
    _require(cfg.bounces in (1, 2), "optim bounces must be 1 or 2")
    check_export_resolution(cfg.export_resolution)
