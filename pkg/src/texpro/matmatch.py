"""Agent-guided material classification and multi-scale exemplar matching."""
from __future__ import annotations

import base64
import json
import logging
import os
import re
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from texpro import tensor as T
from texpro.features import FeatureExtractor
from texpro.imageio import encode_png, read_png, write_png
from texpro.matgraph import MaterialGraph, evaluate, load_graph, save_graph
from texpro.tensor import Tensor

log = logging.getLogger(__name__)

CATEGORIES = (
    "asphalt", "bricks", "ceramics", "concrete", "fabric", "foliage", "glass", "ground",
    "leather", "marble", "metal", "paint", "paper", "plaster", "plastic", "rubber", "stone",
    "terracotta", "wood",
)
SCALES = (128, 256, 512)
PLACEHOLDER = "[object_name]"
ALPHA = 5.0 / 3.0
LIBRARY_FORMAT = "texpro-library/1"


class AgentError(RuntimeError):
    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message if raw is None else f"{message}; raw response: {raw!r}")
        self.raw = raw


class MatchError(ValueError):
    pass


def parse_category(token: str) -> str:
    t = token.strip().lower()
    if t not in CATEGORIES:
        raise ValueError(f"unknown material category {token!r}")
    return t


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentRanking:
    categories: tuple[str, ...]

    def __post_init__(self):
        cats = tuple(parse_category(c) for c in self.categories)
        if not cats:
            raise ValueError("ranking is empty")
        if len(set(cats)) != len(cats):
            raise ValueError(f"ranking has duplicates: {cats}")
        object.__setattr__(self, "categories", cats)

    def order(self, category: str) -> int | None:
        """1-based position of ``category`` or None when unranked."""
        try:
            return self.categories.index(parse_category(category)) + 1
        except ValueError:
            return None

    def __iter__(self):
        return iter(self.categories)

    def __len__(self):
        return len(self.categories)


def ranking_from_tokens(tokens, raw: str | None = None) -> AgentRanking:
    """Keep known categories in order (first occurrence); warn about the rest."""
    seen = []
    for tok in tokens:
        t = str(tok).strip().lower()
        if not t:
            continue
        if t not in CATEGORIES:
            log.warning("dropping unknown material category %r", tok)
            continue
        if t not in seen:
            seen.append(t)
    if not seen:
        raise AgentError("agent returned no valid material category", raw)
    return AgentRanking(tuple(seen))


_ENTRY = re.compile(r"(?:^|\s)\d+\s*[.):]\s*|[\n,;]+")


def parse_ranking(text: str) -> AgentRanking:
    """Parse a numbered / comma / newline separated list of categories.

    Each entry contributes its first recognised category word; entries with
    none are dropped with a warning.
    """
    if not isinstance(text, str) or not text.strip():
        raise AgentError("empty agent response", text if isinstance(text, str) else repr(text))
    tokens = []
    for entry in _ENTRY.split(text):
        words = re.findall(r"[a-zA-Z]+", entry)
        if not words:
            continue
        hit = next((w for w in words if w.lower() in CATEGORIES), None)
        tokens.append(hit if hit is not None else " ".join(words))
    return ranking_from_tokens(tokens, raw=text)


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

_RED = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)


def build_prompt_image(reference, mask) -> np.ndarray:
    """[reference with mask overlaid in 50% red | reference], (3, H, 2W)."""
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference, np.float64)
    m = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if ref.ndim != 3 or ref.shape[0] != 3:
        raise ValueError(f"reference must be (3, H, W), got {ref.shape}")
    if ref.shape[1:] != m.shape:
        raise ValueError(f"mask {m.shape} and reference {ref.shape[1:]} differ in size")
    left = np.where(m[None], 0.5 * ref + 0.5 * _RED, ref)
    return np.concatenate([left, ref], axis=2)


def default_template() -> str:
    return resources.files("texpro").joinpath("data/prompt_template.txt").read_text("utf-8")


def build_prompt_text(object_name: str, template: str | None = None) -> str:
    template = default_template() if template is None else template
    if PLACEHOLDER not in template:
        raise ValueError(f"prompt template has no {PLACEHOLDER} placeholder")
    return template.replace(PLACEHOLDER, object_name)


# ---------------------------------------------------------------------------
# agent backends
# ---------------------------------------------------------------------------


class MockAgent:
    """Rankings read from a fixture: ``{"<part id>": ["fabric", ...], "default": [...]}``."""

    def __init__(self, rankings: dict):
        self.rankings = {str(k): v for k, v in rankings.items()}

    @classmethod
    def from_file(cls, path) -> MockAgent:
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise AgentError(f"cannot read mock agent fixture {path}: {exc}") from None
        if not isinstance(data, dict):
            raise AgentError(f"mock agent fixture {path} must be a JSON object")
        return cls(data)

    def query(self, image, text: str, part: int | None = None) -> AgentRanking:
        entry = self.rankings.get(str(part), self.rankings.get("default"))
        if entry is None:
            raise AgentError(f"mock agent has no ranking for part {part}")
        if isinstance(entry, str):
            return parse_ranking(entry)
        return ranking_from_tokens(entry, raw=json.dumps(entry))


class LiveAgent:
    """Vision chat-completion client: one user message with text and an inline PNG."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 retries: int = 3, timeout: float = 60.0, transport=None):
        if not endpoint:
            raise AgentError("agent endpoint is not configured")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("TEXPRO_AGENT_KEY")
        self.retries = int(retries)
        self.timeout = timeout
        self.transport = transport

    def _payload(self, image, text: str) -> dict:
        img = image.data if isinstance(image, Tensor) else np.asarray(image)
        b64 = base64.b64encode(encode_png(img, 8)).decode("ascii")
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": [
                {"type": "text", "text": text},
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
            ]}],
            "temperature": 0,
        }

    def query(self, image, text: str, part: int | None = None) -> AgentRanking:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = self._payload(image, text)
        last = None
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            for attempt in range(1 + self.retries):
                try:
                    resp = client.post(self.endpoint, json=payload, headers=headers)
                except httpx.TransportError as exc:
                    last = f"transport error: {exc}"
                    log.warning("agent request failed (attempt %d): %s", attempt + 1, exc)
                    continue
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = f"HTTP {resp.status_code}"
                    log.warning("agent returned HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                    continue
                if resp.status_code >= 400:
                    raise AgentError(f"agent rejected request: HTTP {resp.status_code}", resp.text)
                return parse_ranking(_response_text(resp.text))
        raise AgentError(f"agent unreachable after {1 + self.retries} attempts ({last})")


def _response_text(body: str) -> str:
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        raise AgentError("agent response is not JSON", body) from None
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise AgentError("agent response has no message content", body) from None
    if isinstance(content, list):  # content parts
        content = " ".join(c.get("text", "") for c in content if isinstance(c, dict))
    if not isinstance(content, str):
        raise AgentError("agent message content is not text", body)
    return content


def query_agent(image, text: str, backend, part: int | None = None) -> AgentRanking:
    return backend.query(image, text, part=part)


# ---------------------------------------------------------------------------
# library
# ---------------------------------------------------------------------------

_LIGHT = np.array([-0.35, -0.45, 1.0]) / np.linalg.norm([-0.35, -0.45, 1.0])


def shade_exemplar(basecolor, normal, roughness, metallic=None) -> np.ndarray:
    """Flat-lit view of texture maps on a plane facing the viewer, in [0, 1]."""
    base = np.asarray(basecolor, np.float64)
    n = 2.0 * np.asarray(normal, np.float64) - 1.0
    n /= np.maximum(np.linalg.norm(n, axis=0, keepdims=True), 1e-8)
    r = np.asarray(roughness, np.float64)[0]
    m = np.zeros_like(r) if metallic is None else np.asarray(metallic, np.float64)[0]
    ndl = np.maximum(np.tensordot(_LIGHT, n, axes=1), 0.0)
    f0 = 0.04 * (1 - m) + base * m
    diffuse = base * (1 - m) * (0.25 + 0.75 * ndl)
    spec = f0 * (0.35 + 0.65 * ndl) * (1.0 - 0.5 * r) + 0.15 * (1 - r) ** 2 * ndl ** 8
    return np.clip(diffuse + spec, 0.0, 1.0)


def render_exemplar(graph: MaterialGraph, size: int, seed: int = 0) -> np.ndarray:
    maps = evaluate(graph, size, seed=seed)
    met = maps.metallic.data if maps.metallic is not None else None
    return shade_exemplar(maps.basecolor.data, maps.normal.data, maps.roughness.data, met)


@dataclass
class MaterialRecord:
    id: str
    category: str
    graph: MaterialGraph
    exemplars: dict[int, np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.category = parse_category(self.category)
        missing = [s for s in SCALES if s not in self.exemplars]
        if missing:
            raise ValueError(f"material {self.id}: missing exemplar scales {missing}")
        for s in SCALES:
            e = np.asarray(self.exemplars[s], np.float64)
            if e.shape != (3, s, s):
                raise ValueError(f"material {self.id}: exemplar {s} has shape {e.shape}")
            if e.min() < 0 or e.max() > 1:
                raise ValueError(f"material {self.id}: exemplar values outside [0, 1]")
            self.exemplars[s] = e


def builtin_library_dir() -> Path:
    return Path(str(resources.files("texpro").joinpath("data/materials")))


def load_library(path=None, seed: int = 0) -> list[MaterialRecord]:
    """Read a library directory (``manifest.json`` + graphs + optional exemplar PNGs).

    Exemplars missing from the manifest are rendered from the graph.
    """
    root = Path(path) if path is not None else builtin_library_dir()
    man_path = root / "manifest.json"
    try:
        manifest = json.loads(man_path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MatchError(f"cannot read material library manifest {man_path}: {exc}") from None
    if manifest.get("format", LIBRARY_FORMAT) != LIBRARY_FORMAT:
        raise MatchError(f"unsupported library format {manifest.get('format')!r}")
    records = []
    for entry in manifest.get("materials", []):
        graph = load_graph(root / entry["graph"])
        files = entry.get("exemplars", {})
        ex = {}
        for s in SCALES:
            if str(s) in files:
                ex[s] = read_png(root / files[str(s)])
            else:
                ex[s] = _cached_exemplar(graph.dumps(), s, seed)
        records.append(MaterialRecord(entry["id"], entry["category"], graph, ex))
    if not records:
        raise MatchError(f"material library {root} is empty")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise MatchError("material library has duplicate ids")
    return records


@lru_cache(maxsize=64)
def _cached_exemplar(graph_json: str, size: int, seed: int) -> np.ndarray:
    g = MaterialGraph.from_dict(json.loads(graph_json))
    out = render_exemplar(g, size, seed)
    out.setflags(write=False)
    return out


def write_library(records, path) -> list[str]:
    """Write graphs, 8-bit exemplar PNGs and a manifest; returns written file names."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, written = [], []
    for r in records:
        gname = f"{r.id}.json"
        save_graph(r.graph, root / gname)
        files = {}
        for s in SCALES:
            name = f"{r.id}_{s}.png"
            write_png(root / name, r.exemplars[s], 8)
            files[str(s)] = name
        entries.append({"id": r.id, "category": r.category, "graph": gname, "exemplars": files})
        written += [gname, *files.values()]
    man = {"format": LIBRARY_FORMAT, "materials": entries}
    (root / "manifest.json").write_text(json.dumps(man, indent=2) + "\n", "utf-8")
    return written + ["manifest.json"]


def calibrated_extractor(library, seed: int = 0, scale: int = 128) -> FeatureExtractor:
    return FeatureExtractor(seed).calibrate([r.exemplars[scale] for r in library])


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    y: int
    x: int
    h: int
    w: int


def _rect_dims(box, size: int) -> tuple[int, int]:
    h, w = int(box[0]), int(box[1])
    if h < 1 or w < 1:
        raise ValueError(f"box dimensions must be positive, got {box}")
    f = min(1.0, size / h, size / w)
    return max(1, min(size, int(round(h * f)))), max(1, min(size, int(round(w * f))))


def _rng_for(record_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(record_id.encode())])


def sample_exemplar_rects(record: MaterialRecord, box, K: int = 8,
                          seed: int = 0) -> dict[int, list[Rect]]:
    """K rects of ``box`` dims (shrunk to fit) per exemplar scale, uniform positions."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = _rng_for(record.id, seed)
    out = {}
    for s in SCALES:
        h, w = _rect_dims(box, s)
        ys = rng.integers(0, s - h + 1, size=K)
        xs = rng.integers(0, s - w + 1, size=K)
        out[s] = [Rect(int(y), int(x), h, w) for y, x in zip(ys, xs)]
    return out


def _resize_mask(m: np.ndarray, h: int, w: int) -> np.ndarray:
    if m.shape == (h, w):
        return m.astype(np.float64)
    r = T.bilinear_resize(Tensor(m.astype(np.float64)[None], _check=False), (h, w)).data[0]
    return (r >= 0.5).astype(np.float64)


def _resize_img(img: np.ndarray, h: int, w: int) -> np.ndarray:
    if img.shape[1:] == (h, w):
        return img
    return T.bilinear_resize(Tensor(img, _check=False), (h, w)).data


def raw_feature_loss(record: MaterialRecord, crop, mask, extractor: FeatureExtractor,
                     K: int = 8, seed: int = 0) -> float:
    """(1/K) sum_s sum_k sum_l sum_x (F_l(M C) - F_l(M E_k^s))^2 at each rect size.

    Within a layer the squared error is averaged over channels, so wide
    banks do not outweigh the colour layer.
    """
    crop = np.asarray(crop, np.float64)
    m = np.asarray(mask, dtype=bool)
    if crop.shape[1:] != m.shape:
        raise ValueError(f"crop {crop.shape} and mask {m.shape} differ in size")
    rects = sample_exemplar_rects(record, m.shape, K, seed)
    total = 0.0
    for s, rs in rects.items():
        h, w = rs[0].h, rs[0].w
        ms = _resize_mask(m, h, w)
        target = _resize_img(crop, h, w) * ms
        ex = record.exemplars[s]
        batch = np.stack([ex[:, r.y:r.y + h, r.x:r.x + w] for r in rs]) * ms
        ft = extractor.features_fast(target[None])
        fe = extractor.features_fast(batch)
        for a, b in zip(ft, fe):
            total += float(((b - a) ** 2).sum(dtype=np.float64)) / a.shape[1]
    return total / K


@dataclass
class MatchResult:
    record: MaterialRecord
    scores: dict[str, float]
    raw: dict[str, float]


def match_material(library, ranking: AgentRanking, crop, mask, alpha: float = ALPHA,
                   K: int = 8, extractor: FeatureExtractor | None = None,
                   seed: int = 0) -> MatchResult:
    """Weighted argmin alpha^(O-1) x raw feature loss over ranked-category candidates."""
    if not library:
        raise MatchError("material library is empty")
    cands = [r for r in library if ranking.order(r.category) is not None]
    if not cands:
        cats = sorted({r.category for r in library})
        raise MatchError(f"no library material in ranked categories {list(ranking)}; "
                         f"library categories: {cats}")
    if extractor is None:
        extractor = calibrated_extractor(library)
    m = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if min(m.shape) < extractor.min_size:
        raise MatchError(f"crop {m.shape} smaller than feature extractor minimum "
                         f"{extractor.min_size}")
    best, best_score = None, np.inf
    scores, raws = {}, {}
    for r in cands:
        raw = raw_feature_loss(r, crop, m, extractor, K, seed)
        score = alpha ** (ranking.order(r.category) - 1) * raw
        raws[r.id], scores[r.id] = raw, score
        if score < best_score:  # strict: ties keep the earlier library entry
            best, best_score = r, score
    return MatchResult(best, scores, raws)
